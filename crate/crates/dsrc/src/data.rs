//! Dataset ingestion, preprocessing and the synthetic union-of-subspaces
//! generator used throughout the tests.

use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{DsrcError, Result};
use crate::tensor::{dot, norm2, Tensor};

pub const IMAGE_SIDE: usize = 32;
const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

/// Images with labels and a train/test partition. Images are N x 1 x 32 x 32
/// in [0, 1].
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub provenance: String,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shared post-load validation: ranges, finiteness, partition
    /// disjointness.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.images.shape != vec![n, 1, IMAGE_SIDE, IMAGE_SIDE] {
            return Err(DsrcError::InvalidShape(format!(
                "dataset images have shape {:?}, expected [{n}, 1, {IMAGE_SIDE}, {IMAGE_SIDE}]",
                self.images.shape
            )));
        }
        for v in &self.images.data {
            if !v.is_finite() || *v < 0.0 || *v > 1.0 {
                return Err(DsrcError::InvalidInput(format!(
                    "pixel value {v} outside [0, 1]"
                )));
            }
        }
        for l in &self.labels {
            if *l >= self.num_classes {
                return Err(DsrcError::InvalidInput(format!(
                    "label {l} out of range 0..{}",
                    self.num_classes
                )));
            }
        }
        let mut seen = vec![false; n];
        for idx in self.train_idx.iter().chain(&self.test_idx) {
            if *idx >= n {
                return Err(DsrcError::InvalidInput(format!("partition index {idx} out of range")));
            }
            if seen[*idx] {
                return Err(DsrcError::InvalidInput(format!(
                    "partition index {idx} appears twice"
                )));
            }
            seen[*idx] = true;
        }
        Ok(())
    }

    fn image_pixels(&self, i: usize) -> &[f64] {
        &self.images.data[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]
    }

    /// Vectorize a list of samples into a d0 x k matrix, one column each.
    pub fn vectorize(&self, indices: &[usize]) -> Tensor {
        let k = indices.len();
        let mut out = Tensor::zeros(&[IMAGE_PIXELS, k]);
        for (j, &i) in indices.iter().enumerate() {
            for (f, v) in self.image_pixels(i).iter().enumerate() {
                out.data[f * k + j] = *v;
            }
        }
        out
    }

    /// Stack samples into an (k, 1, 32, 32) batch tensor in index order.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let k = indices.len();
        let mut out = Tensor::zeros(&[k, 1, IMAGE_SIDE, IMAGE_SIDE]);
        for (j, &i) in indices.iter().enumerate() {
            out.data[j * IMAGE_PIXELS..(j + 1) * IMAGE_PIXELS].copy_from_slice(self.image_pixels(i));
        }
        out
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Corner-aligned bilinear resize of a single-channel image.
pub fn bilinear_resize(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let mut out = vec![0.0; dh * dw];
    let ry = if dh > 1 { (sh - 1) as f64 / (dh - 1) as f64 } else { 0.0 };
    let rx = if dw > 1 { (sw - 1) as f64 / (dw - 1) as f64 } else { 0.0 };
    for y in 0..dh {
        let fy = y as f64 * ry;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = fy - y0 as f64;
        for x in 0..dw {
            let fx = x as f64 * rx;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * sw + x0] * (1.0 - wx) + src[y0 * sw + x1] * wx;
            let bot = src[y1 * sw + x0] * (1.0 - wx) + src[y1 * sw + x1] * wx;
            out[y * dw + x] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Load an IDX image/label archive pair (big-endian, MNIST/USPS style).
/// Pixels are scaled to [0, 1] and images resized to 32 x 32. The partition
/// is empty; callers split afterwards.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let mut imf = std::io::BufReader::new(std::fs::File::open(images_path)?);
    let magic = imf.read_u32::<BigEndian>()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DsrcError::Format(format!(
            "bad IDX image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
        )));
    }
    let count = imf.read_u32::<BigEndian>()? as usize;
    let h = imf.read_u32::<BigEndian>()? as usize;
    let w = imf.read_u32::<BigEndian>()? as usize;
    let mut raw = vec![0u8; count * h * w];
    imf.read_exact(&mut raw)
        .map_err(|_| DsrcError::Format("truncated IDX image payload".into()))?;

    let mut lbf = std::io::BufReader::new(std::fs::File::open(labels_path)?);
    let lmagic = lbf.read_u32::<BigEndian>()?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(DsrcError::Format(format!(
            "bad IDX label magic 0x{lmagic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
        )));
    }
    let lcount = lbf.read_u32::<BigEndian>()? as usize;
    if lcount != count {
        return Err(DsrcError::Format(format!(
            "IDX count mismatch: {count} images, {lcount} labels"
        )));
    }
    let mut label_bytes = vec![0u8; lcount];
    lbf.read_exact(&mut label_bytes)
        .map_err(|_| DsrcError::Format("truncated IDX label payload".into()))?;

    let mut images = Tensor::zeros(&[count, 1, IMAGE_SIDE, IMAGE_SIDE]);
    for i in 0..count {
        let src: Vec<f64> = raw[i * h * w..(i + 1) * h * w]
            .iter()
            .map(|b| *b as f64 / 255.0)
            .collect();
        let resized = bilinear_resize(&src, h, w, IMAGE_SIDE, IMAGE_SIDE);
        images.data[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS].copy_from_slice(&resized);
    }
    let labels: Vec<usize> = label_bytes.iter().map(|b| *b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let ds = LabeledDataset {
        images,
        labels,
        train_idx: Vec::new(),
        test_idx: Vec::new(),
        provenance: format!("idx:{}", images_path.display()),
        num_classes,
    };
    ds.validate()?;
    Ok(ds)
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Load a class-per-subdirectory image tree. Classes and files are ordered
/// lexicographically; undecodable files are skipped with a warning count.
pub fn load_image_dir(root: &Path) -> Result<(LabeledDataset, usize)> {
    let mut class_dirs: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.len() < 2 {
        return Err(DsrcError::InvalidInput(format!(
            "need at least 2 class subdirectories under {}",
            root.display()
        )));
    }

    let mut pixels: Vec<f64> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut skipped = 0usize;
    for (cls, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .map(|e| e.path())
            .collect();
        files.sort();
        let mut loaded = 0usize;
        for file in files {
            let img = match image::open(&file) {
                Ok(img) => img.into_rgb8(),
                Err(_) => {
                    skipped += 1;
                    continue;
                }
            };
            let (w, h) = (img.width() as usize, img.height() as usize);
            let gray: Vec<f64> = img
                .pixels()
                .map(|p| {
                    LUMA[0] * p.0[0] as f64 / 255.0
                        + LUMA[1] * p.0[1] as f64 / 255.0
                        + LUMA[2] * p.0[2] as f64 / 255.0
                })
                .collect();
            let resized = bilinear_resize(&gray, h, w, IMAGE_SIDE, IMAGE_SIDE);
            // luma weights sum to 1 but guard rounding anyway
            pixels.extend(resized.iter().map(|v| v.clamp(0.0, 1.0)));
            labels.push(cls);
            loaded += 1;
        }
        if loaded == 0 {
            return Err(DsrcError::InvalidInput(format!(
                "class directory {} has no decodable images",
                dir.display()
            )));
        }
    }
    let n = labels.len();
    let ds = LabeledDataset {
        images: Tensor::from_vec(&[n, 1, IMAGE_SIDE, IMAGE_SIDE], pixels)?,
        labels,
        train_idx: Vec::new(),
        test_idx: Vec::new(),
        provenance: format!("dir:{}", root.display()),
        num_classes: class_dirs.len(),
    };
    ds.validate()?;
    Ok((ds, skipped))
}

/// Class-balanced subset sizes with a sampling seed.
#[derive(Debug, Clone, Copy)]
pub struct SubsetSpec {
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub seed: u64,
}

/// Seeded uniform sampling without replacement per class from the respective
/// partitions of `ds`. If `ds` has no partition yet, all samples count as the
/// train pool and the test pool (disjoint picks).
pub fn subsample(ds: &LabeledDataset, spec: &SubsetSpec) -> Result<LabeledDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let partitioned = !ds.train_idx.is_empty() || !ds.test_idx.is_empty();

    let mut picked_train: Vec<usize> = Vec::new();
    let mut picked_test: Vec<usize> = Vec::new();
    for cls in 0..ds.num_classes {
        let (pool_train, pool_test): (Vec<usize>, Vec<usize>) = if partitioned {
            (
                ds.train_idx.iter().copied().filter(|&i| ds.labels[i] == cls).collect(),
                ds.test_idx.iter().copied().filter(|&i| ds.labels[i] == cls).collect(),
            )
        } else {
            let all: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == cls).collect();
            (all.clone(), all)
        };
        if partitioned {
            picked_train.extend(sample_without_replacement(&mut rng, &pool_train, spec.per_class_train, cls)?);
            picked_test.extend(sample_without_replacement(&mut rng, &pool_test, spec.per_class_test, cls)?);
        } else {
            let both = sample_without_replacement(
                &mut rng,
                &pool_train,
                spec.per_class_train + spec.per_class_test,
                cls,
            )?;
            picked_train.extend_from_slice(&both[..spec.per_class_train]);
            picked_test.extend_from_slice(&both[spec.per_class_train..]);
        }
    }

    let selected: Vec<usize> = picked_train.iter().chain(&picked_test).copied().collect();
    let mut images = Tensor::zeros(&[selected.len(), 1, IMAGE_SIDE, IMAGE_SIDE]);
    let mut labels = Vec::with_capacity(selected.len());
    for (j, &i) in selected.iter().enumerate() {
        images.data[j * IMAGE_PIXELS..(j + 1) * IMAGE_PIXELS].copy_from_slice(ds.image_pixels(i));
        labels.push(ds.labels[i]);
    }
    let ntr = picked_train.len();
    let out = LabeledDataset {
        images,
        labels,
        train_idx: (0..ntr).collect(),
        test_idx: (ntr..selected.len()).collect(),
        provenance: format!("{}|subsample(seed={})", ds.provenance, spec.seed),
        num_classes: ds.num_classes,
    };
    out.validate()?;
    Ok(out)
}

fn sample_without_replacement(
    rng: &mut ChaCha8Rng,
    pool: &[usize],
    count: usize,
    cls: usize,
) -> Result<Vec<usize>> {
    if pool.len() < count {
        return Err(DsrcError::InvalidInput(format!(
            "class {cls}: requested {count} samples but only {} available",
            pool.len()
        )));
    }
    let mut indices: Vec<usize> = pool.to_vec();
    // Fisher-Yates prefix shuffle
    for i in 0..count {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
    }
    indices.truncate(count);
    Ok(indices)
}

/// Synthetic dataset plus the ground truth the oracles need.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: LabeledDataset,
    /// Per-class orthonormal basis, ambient_dim x subspace_dim.
    pub bases: Vec<Tensor>,
    /// Noisy ambient vectors before image embedding, ambient_dim x N,
    /// columns in dataset order.
    pub vectors: Tensor,
}

/// Draw K random low-dimensional subspaces and sample train/test points from
/// them. Vectors are zero-padded into 32 x 32 images and affinely scaled to
/// [0, 1]; the scaling applies to the occupied prefix only so the padding
/// stays 0.
pub fn synthetic_subspaces(
    k: usize,
    ambient_dim: usize,
    subspace_dim: usize,
    n_train_per_class: usize,
    n_test_per_class: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<SyntheticData> {
    if subspace_dim >= ambient_dim || ambient_dim > IMAGE_PIXELS || k == 0 {
        return Err(DsrcError::InvalidInput(format!(
            "invalid synthetic dimensions: K={k}, ambient={ambient_dim}, subspace={subspace_dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut bases = Vec::with_capacity(k);
    for _ in 0..k {
        bases.push(random_orthonormal(&mut rng, ambient_dim, subspace_dim));
    }

    let per_class = n_train_per_class + n_test_per_class;
    let total = k * per_class;
    let mut vectors = Tensor::zeros(&[ambient_dim, total]);
    let mut labels = vec![0usize; total];
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    // train samples first so the transductive column convention holds
    let mut col = 0usize;
    for phase in 0..2 {
        for cls in 0..k {
            let count = if phase == 0 { n_train_per_class } else { n_test_per_class };
            for _ in 0..count {
                let coeffs: Vec<f64> = (0..subspace_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                for i in 0..ambient_dim {
                    let mut v = 0.0;
                    for (j, c) in coeffs.iter().enumerate() {
                        v += bases[cls].data[i * subspace_dim + j] * c;
                    }
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    vectors.data[i * total + col] = v + noise_sigma * noise;
                }
                labels[col] = cls;
                if phase == 0 {
                    train_idx.push(col);
                } else {
                    test_idx.push(col);
                }
                col += 1;
            }
        }
    }

    // affine map of the occupied coordinates into [0, 1]
    let lo = vectors.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vectors.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = (hi - lo).max(1e-12);
    let mut images = Tensor::zeros(&[total, 1, IMAGE_SIDE, IMAGE_SIDE]);
    for s in 0..total {
        for i in 0..ambient_dim {
            images.data[s * IMAGE_PIXELS + i] = (vectors.data[i * total + s] - lo) / range;
        }
    }

    let dataset = LabeledDataset {
        images,
        labels,
        train_idx,
        test_idx,
        provenance: format!(
            "synthetic(K={k},ambient={ambient_dim},dim={subspace_dim},sigma={noise_sigma},seed={seed})"
        ),
        num_classes: k,
    };
    dataset.validate()?;
    Ok(SyntheticData { dataset, bases, vectors })
}

fn random_orthonormal(rng: &mut ChaCha8Rng, d: usize, cols: usize) -> Tensor {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for u in &basis {
            let c = dot(&v, u);
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= c * ui;
            }
        }
        let n = norm2(&v);
        if n > 1e-8 {
            for vi in v.iter_mut() {
                *vi /= n;
            }
            basis.push(v);
        }
    }
    let mut out = Tensor::zeros(&[d, cols]);
    for (j, col) in basis.iter().enumerate() {
        for i in 0..d {
            out.data[i * cols + j] = col[i];
        }
    }
    out
}

/// Squared residual of `v` after projection onto the orthonormal basis.
pub fn projection_residual(basis: &Tensor, v: &[f64]) -> f64 {
    let (d, cols) = basis.dims2().expect("basis must be a matrix");
    let mut resid: Vec<f64> = v.to_vec();
    for j in 0..cols {
        let col: Vec<f64> = (0..d).map(|i| basis.data[i * cols + j]).collect();
        let c = dot(v, &col);
        for (r, u) in resid.iter_mut().zip(&col) {
            *r -= c * u;
        }
    }
    dot(&resid, &resid)
}

/// Nearest-subspace classification of column `j` of `vectors` using the
/// ground-truth bases.
pub fn nearest_subspace_label(bases: &[Tensor], vectors: &Tensor, j: usize) -> usize {
    let v = vectors.col(j);
    let mut best = (0usize, f64::INFINITY);
    for (k, basis) in bases.iter().enumerate() {
        let r = projection_residual(basis, &v);
        if r < best.1 {
            best = (k, r);
        }
    }
    best.0
}
