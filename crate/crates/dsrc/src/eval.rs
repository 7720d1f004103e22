//! Embedding-space classification from sparse codes, accuracy metrics, the
//! five-fold protocol and the coefficient-matrix heatmap export.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{DsrcError, Result};
use crate::sparse::SparseCodes;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub predictions: Vec<usize>,
    pub true_labels: Option<Vec<usize>>,
    pub accuracy: Option<f64>,
    /// K x K row-major; rows are true classes, columns predictions.
    pub confusion: Option<Vec<Vec<usize>>>,
    /// Per test sample, the class-restricted residual for every class.
    pub residuals: Vec<Vec<f64>>,
}

impl ClassificationReport {
    pub fn from_predictions(
        predictions: Vec<usize>,
        residuals: Vec<Vec<f64>>,
        true_labels: Option<Vec<usize>>,
        num_classes: usize,
    ) -> ClassificationReport {
        let (accuracy, confusion) = match &true_labels {
            None => (None, None),
            Some(truth) => {
                let mut confusion = vec![vec![0usize; num_classes]; num_classes];
                let mut hits = 0usize;
                for (p, t) in predictions.iter().zip(truth) {
                    confusion[*t][*p] += 1;
                    if p == t {
                        hits += 1;
                    }
                }
                let acc = if predictions.is_empty() {
                    0.0
                } else {
                    hits as f64 / predictions.len() as f64
                };
                (Some(acc), Some(confusion))
            }
        };
        ClassificationReport {
            predictions,
            true_labels,
            accuracy,
            confusion,
            residuals,
        }
    }
}

/// Minimum class-restricted residual in embedding space: for test sample j
/// with code column alpha_j, pick argmin_k || z_test_j - Z_train * d_k(alpha_j) ||^2.
/// Ties break to the smallest class id.
pub fn dsrc_classify(
    z_train: &Tensor,
    train_labels: &[usize],
    codes: &SparseCodes,
) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let (d, n) = z_train.dims2()?;
    if codes.n() != n || train_labels.len() != n {
        return Err(DsrcError::InvalidInput(format!(
            "codes have {} rows, embeddings {} columns, {} labels",
            codes.n(),
            n,
            train_labels.len()
        )));
    }
    if codes.z_test.shape != vec![d, codes.m()] {
        return Err(DsrcError::InvalidShape(format!(
            "test embeddings have shape {:?}, expected [{d}, {}]",
            codes.z_test.shape,
            codes.m()
        )));
    }
    let num_classes = train_labels.iter().max().map_or(0, |m| m + 1);
    let m = codes.m();
    let mut predictions = Vec::with_capacity(m);
    let mut residuals = Vec::with_capacity(m);
    for j in 0..m {
        let alpha = codes.a.col(j);
        let target = codes.z_test.col(j);
        let mut per_class = Vec::with_capacity(num_classes);
        let mut best = (0usize, f64::INFINITY);
        for k in 0..num_classes {
            let mut resid = 0.0;
            for row in 0..d {
                let mut recon = 0.0;
                let zrow = &z_train.data[row * n..(row + 1) * n];
                for (i, a) in alpha.iter().enumerate() {
                    if train_labels[i] == k {
                        recon += zrow[i] * a;
                    }
                }
                let dlt = target[row] - recon;
                resid += dlt * dlt;
            }
            per_class.push(resid);
            if resid < best.1 {
                best = (k, resid);
            }
        }
        predictions.push(best.0);
        residuals.push(per_class);
    }
    Ok((predictions, residuals))
}

/// Train/test index splits for the five-fold protocol. The subset is
/// resampled for every fold under one master seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<(Vec<usize>, Vec<usize>)>,
    pub test_fraction: f64,
    pub seed: u64,
}

impl FoldPlan {
    pub fn new(num_samples: usize, num_folds: usize, test_fraction: f64, seed: u64) -> FoldPlan {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let test_count = ((num_samples as f64) * test_fraction).round() as usize;
        let mut folds = Vec::with_capacity(num_folds);
        for _ in 0..num_folds {
            let mut order: Vec<usize> = (0..num_samples).collect();
            for i in (1..num_samples).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            let test: Vec<usize> = order[..test_count].to_vec();
            let train: Vec<usize> = order[test_count..].to_vec();
            folds.push((train, test));
        }
        FoldPlan { folds, test_fraction, seed }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldSummary {
    pub per_fold: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Run `runner` (a full pipeline returning test-set predictions) on every
/// fold; report mean and standard deviation of accuracy.
pub fn accuracy_fivefold<F>(
    dataset: &LabeledDataset,
    mut runner: F,
    plan: &FoldPlan,
) -> Result<FoldSummary>
where
    F: FnMut(&LabeledDataset) -> Result<Vec<usize>>,
{
    if dataset.num_classes < 2 {
        return Err(DsrcError::InvalidFold("need at least 2 classes".into()));
    }
    let mut per_fold = Vec::with_capacity(plan.folds.len());
    for (fold_no, (train, test)) in plan.folds.iter().enumerate() {
        let mut present = vec![false; dataset.num_classes];
        for &i in train {
            present[dataset.labels[i]] = true;
        }
        if present.iter().any(|p| !p) {
            return Err(DsrcError::InvalidFold(format!(
                "fold {fold_no}: some class has no training samples"
            )));
        }
        let fold_ds = LabeledDataset {
            images: dataset.images.clone(),
            labels: dataset.labels.clone(),
            train_idx: train.clone(),
            test_idx: test.clone(),
            provenance: format!("{}|fold{fold_no}", dataset.provenance),
            num_classes: dataset.num_classes,
        };
        let preds = runner(&fold_ds)?;
        let truth = dataset.labels_of(test);
        let hits = preds.iter().zip(&truth).filter(|(p, t)| p == t).count();
        per_fold.push(hits as f64 / truth.len().max(1) as f64);
    }
    let mean = per_fold.iter().sum::<f64>() / per_fold.len() as f64;
    let var = per_fold.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / per_fold.len() as f64;
    Ok(FoldSummary { per_fold, mean, std: var.sqrt() })
}

/// Mean over test columns of the l1-mass fraction landing on true-class
/// rows; an all-zero column contributes 0.
pub fn class_mass_concentration(codes: &SparseCodes, true_labels: &[usize]) -> f64 {
    let (n, m) = (codes.n(), codes.m());
    if m == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for j in 0..m {
        let mut mass = 0.0;
        let mut own = 0.0;
        for i in 0..n {
            let a = codes.a.data[i * m + j].abs();
            mass += a;
            if codes.train_labels[i] == true_labels[j] {
                own += a;
            }
        }
        if mass > 0.0 {
            total += own / mass;
        }
    }
    total / m as f64
}

/// Write |A^T| as an 8-bit binary PGM: one row per test sample, one column
/// per training sample, max |A| mapped to white. Rows and columns are
/// ordered by class blocks (stable within a class). A `.png` path re-encodes
/// through the PNG writer instead.
pub fn export_code_heatmap(codes: &SparseCodes, path: &Path) -> Result<()> {
    let (n, m) = (codes.n(), codes.m());
    if n == 0 || m == 0 {
        return Err(DsrcError::InvalidInput("empty code matrix".into()));
    }
    let mut col_order: Vec<usize> = (0..n).collect();
    col_order.sort_by_key(|&i| codes.train_labels[i]);
    let mut row_order: Vec<usize> = (0..m).collect();
    if let Some(test_labels) = &codes.test_labels {
        row_order.sort_by_key(|&j| test_labels[j]);
    }

    let max = codes.a.data.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let mut pixels = vec![0u8; m * n];
    for (r, &j) in row_order.iter().enumerate() {
        for (c, &i) in col_order.iter().enumerate() {
            let v = codes.a.data[i * m + j].abs();
            pixels[r * n + c] = if max > 0.0 {
                ((v / max) * 255.0).round() as u8
            } else {
                0
            };
        }
    }

    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        let img = image::GrayImage::from_raw(n as u32, m as u32, pixels)
            .expect("pixel buffer matches dimensions");
        img.save(path)
            .map_err(|e| DsrcError::Format(format!("png encode failed: {e}")))?;
    } else {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P5\n{n} {m}\n255\n")?;
        f.write_all(&pixels)?;
        f.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn codes_from(a: Tensor, train_labels: Vec<usize>, z_train: &Tensor, z_test: Tensor) -> SparseCodes {
        SparseCodes {
            a,
            train_labels,
            z_train: z_train.clone(),
            z_test,
            test_labels: None,
        }
    }

    #[test]
    fn supported_block_with_exact_reconstruction() {
        // class 1 block reconstructs exactly
        let z_train = Tensor::from_vec(&[2, 4], vec![1.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.0, 2.0]).unwrap();
        let labels = vec![0, 0, 1, 1];
        let a = Tensor::from_vec(&[4, 1], vec![0.0, 0.0, 0.5, 0.5]).unwrap();
        let z_test = Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap();
        let codes = codes_from(a, labels.clone(), &z_train, z_test);
        let (preds, residuals) = dsrc_classify(&z_train, &labels, &codes).unwrap();
        assert_eq!(preds, vec![1]);
        assert!(residuals[0][1] <= 1e-24);
    }

    #[test]
    fn zero_code_ties_to_class_zero() {
        let z_train = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let labels = vec![0, 1];
        let a = Tensor::zeros(&[2, 1]);
        let z_test = Tensor::from_vec(&[2, 1], vec![0.3, 0.4]).unwrap();
        let codes = codes_from(a, labels.clone(), &z_train, z_test);
        let (preds, residuals) = dsrc_classify(&z_train, &labels, &codes).unwrap();
        assert_eq!(preds, vec![0]);
        assert!((residuals[0][0] - residuals[0][1]).abs() <= 1e-15);
    }

    #[test]
    fn matches_direct_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let d = rng.gen_range(2..6);
            let n = rng.gen_range(3..=10);
            let m = rng.gen_range(1..=5);
            let k = rng.gen_range(2..=3);
            let z_train = Tensor::from_vec(
                &[d, n],
                (0..d * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
            let a = Tensor::from_vec(
                &[n, m],
                (0..n * m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let z_test = Tensor::from_vec(
                &[d, m],
                (0..d * m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let codes = codes_from(a.clone(), labels.clone(), &z_train, z_test.clone());
            let (preds, _) = dsrc_classify(&z_train, &labels, &codes).unwrap();
            for j in 0..m {
                // oracle: evaluate the residual for every class by direct enumeration
                let mut best = (0usize, f64::INFINITY);
                for cls in 0..k {
                    let mut resid = 0.0;
                    for row in 0..d {
                        let mut recon = 0.0;
                        for i in 0..n {
                            if labels[i] == cls {
                                recon += z_train.data[row * n + i] * a.data[i * m + j];
                            }
                        }
                        let dlt = z_test.data[row * m + j] - recon;
                        resid += dlt * dlt;
                    }
                    if resid < best.1 {
                        best = (cls, resid);
                    }
                }
                assert_eq!(preds[j], best.0);
            }
        }
    }

    #[test]
    fn report_confusion_consistency() {
        let preds = vec![0, 1, 1, 2, 0];
        let truth = vec![0, 1, 2, 2, 1];
        let report =
            ClassificationReport::from_predictions(preds, vec![], Some(truth), 3);
        let confusion = report.confusion.unwrap();
        let trace: usize = (0..3).map(|i| confusion[i][i]).sum();
        let total: usize = confusion.iter().flatten().sum();
        assert_eq!(trace as f64 / total as f64, report.accuracy.unwrap());
        // row sums equal per-class test counts
        assert_eq!(confusion[2].iter().sum::<usize>(), 2);
    }

    #[test]
    fn fivefold_perfect_stub() {
        let syn = crate::data::synthetic_subspaces(3, 16, 2, 8, 2, 0.0, 5).unwrap();
        let plan = FoldPlan::new(syn.dataset.len(), 5, 0.2, 9);
        let summary = accuracy_fivefold(
            &syn.dataset,
            |ds| Ok(ds.labels_of(&ds.test_idx)),
            &plan,
        )
        .unwrap();
        assert_eq!(summary.mean, 1.0);
        assert_eq!(summary.std, 0.0);
    }

    #[test]
    fn fivefold_uniform_random_near_chance() {
        let syn = crate::data::synthetic_subspaces(5, 32, 2, 20, 5, 0.0, 6).unwrap();
        let plan = FoldPlan::new(syn.dataset.len(), 5, 0.2, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let summary = accuracy_fivefold(
            &syn.dataset,
            |ds| Ok(ds.test_idx.iter().map(|_| rng.gen_range(0..5)).collect()),
            &plan,
        )
        .unwrap();
        assert!((summary.mean - 0.2).abs() < 0.05, "mean {}", summary.mean);
    }

    #[test]
    fn fold_plan_is_seed_deterministic() {
        let a = FoldPlan::new(50, 5, 0.2, 3);
        let b = FoldPlan::new(50, 5, 0.2, 3);
        assert_eq!(a.folds, b.folds);
        for (train, test) in &a.folds {
            assert_eq!(train.len() + test.len(), 50);
            assert_eq!(test.len(), 10);
        }
    }

    #[test]
    fn concentration_one_hot_and_uniform() {
        let z = Tensor::zeros(&[2, 4]);
        let zt = Tensor::zeros(&[2, 2]);
        // one-hot correct codes
        let a = Tensor::from_vec(&[4, 2], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let codes = codes_from(a, vec![0, 0, 1, 1], &z, zt.clone());
        assert_eq!(class_mass_concentration(&codes, &[0, 1]), 1.0);
        // uniform over 2 balanced classes
        let a = Tensor::from_vec(&[4, 2], vec![1.0; 8]).unwrap();
        let codes = codes_from(a, vec![0, 0, 1, 1], &z, zt);
        assert!((class_mass_concentration(&codes, &[0, 1]) - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn heatmap_all_zero_and_single_pixel() {
        let dir = tempfile::tempdir().unwrap();
        let z = Tensor::zeros(&[2, 3]);
        let zt = Tensor::zeros(&[2, 2]);
        let a = Tensor::zeros(&[3, 2]);
        let codes = codes_from(a, vec![0, 0, 1], &z, zt.clone());
        let p = dir.path().join("zero.pgm");
        export_code_heatmap(&codes, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert!(bytes[header.len()..].iter().all(|b| *b == 0));

        let mut a = Tensor::zeros(&[3, 2]);
        a.data[1 * 2 + 1] = 0.4; // train row 1, test col 1
        let codes = codes_from(a, vec![0, 0, 1], &z, zt);
        let p = dir.path().join("one.pgm");
        export_code_heatmap(&codes, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let body = &bytes[header.len()..];
        assert_eq!(body.iter().filter(|b| **b == 255).count(), 1);
        // row 1 (test sample 1), column 1 (train sample 1)
        assert_eq!(body[1 * 3 + 1], 255);
    }

    #[test]
    fn heatmap_is_pure_function_of_codes() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Tensor::from_vec(&[4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let codes = codes_from(a, vec![0, 1, 0, 1], &Tensor::zeros(&[2, 4]), Tensor::zeros(&[2, 3]));
        let p1 = dir.path().join("a.pgm");
        let p2 = dir.path().join("b.pgm");
        export_code_heatmap(&codes, &p1).unwrap();
        export_code_heatmap(&codes, &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }
}
