//! The structured self-expressive (sparse coding) layer.
//!
//! Training columns pass through unchanged; test columns are reconstructed as
//! Z_train * A. Only the n x m block A is trainable; the identity and zero
//! blocks of the full coefficient matrix are implicit and never stored.

use std::io::Write;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{DsrcError, Result};
use crate::tensor::{Parameter, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparseMode {
    Structured,
    FullSelfExpressive,
}

#[derive(Debug, Clone)]
pub struct SparseCodingLayer {
    coeffs: Parameter,
    n: usize,
    m: usize,
    mode: SparseMode,
}

impl SparseCodingLayer {
    /// Structured layer: trainable A is n x m, zero-initialized.
    pub fn structured(n: usize, m: usize) -> SparseCodingLayer {
        SparseCodingLayer {
            coeffs: Parameter::new("sparse.A", Tensor::zeros(&[n, m])),
            n,
            m,
            mode: SparseMode::Structured,
        }
    }

    /// Full self-expressive ablation: trainable C is (n+m) x (n+m) with a
    /// zero diagonal, zero-initialized.
    pub fn full_self_expressive(n: usize, m: usize) -> SparseCodingLayer {
        let t = n + m;
        SparseCodingLayer {
            coeffs: Parameter::new("sparse.C", Tensor::zeros(&[t, t])),
            n,
            m,
            mode: SparseMode::FullSelfExpressive,
        }
    }

    pub fn from_parameter(coeffs: Parameter, n: usize, m: usize, mode: SparseMode) -> Result<SparseCodingLayer> {
        let expect = match mode {
            SparseMode::Structured => vec![n, m],
            SparseMode::FullSelfExpressive => vec![n + m, n + m],
        };
        if coeffs.shape() != expect {
            return Err(DsrcError::InvalidShape(format!(
                "sparse coding parameter has shape {:?}, expected {:?}",
                coeffs.shape(),
                expect
            )));
        }
        Ok(SparseCodingLayer { coeffs, n, m, mode })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn mode(&self) -> SparseMode {
        self.mode
    }

    pub fn parameter(&self) -> &Parameter {
        &self.coeffs
    }

    /// Z (d_z, n+m) with training columns first -> [Z_train, Z_train * A].
    pub fn apply(&self, g: &mut Graph, z: Var) -> Result<Var> {
        if self.mode != SparseMode::Structured {
            return Err(DsrcError::InvalidInput(
                "apply requires structured mode; use apply_full".into(),
            ));
        }
        let (_, cols) = g.value(z).dims2()?;
        if cols != self.n + self.m {
            return Err(DsrcError::InvalidShape(format!(
                "apply: Z has {cols} columns, layer expects {} + {}",
                self.n, self.m
            )));
        }
        let z_train = g.slice_cols(z, 0, self.n)?;
        let a = g.param(&self.coeffs);
        let zhat_test = g.matmul(z_train, a)?;
        g.concat_cols(z_train, zhat_test)
    }

    /// Ablation path: Z * C over the full (n+m) x (n+m) matrix.
    pub fn apply_full(&self, g: &mut Graph, z: Var) -> Result<Var> {
        if self.mode != SparseMode::FullSelfExpressive {
            return Err(DsrcError::InvalidInput(
                "apply_full requires full_self_expressive mode".into(),
            ));
        }
        let (_, cols) = g.value(z).dims2()?;
        if cols != self.n + self.m {
            return Err(DsrcError::InvalidShape(format!(
                "apply_full: Z has {cols} columns, layer expects {}",
                self.n + self.m
            )));
        }
        let c = g.param(&self.coeffs);
        g.matmul(z, c)
    }

    /// Sparsity penalty on the trainable block only; the identity block is a
    /// constant and the zero blocks contribute nothing.
    pub fn regularize(&self, g: &mut Graph, p: f64) -> Result<Var> {
        if ![0.5, 1.0, 1.5, 2.0].contains(&p) {
            return Err(DsrcError::InvalidHyperparameter(format!(
                "regularize: unsupported p = {p}"
            )));
        }
        let a = g.param(&self.coeffs);
        g.lp_penalty(a, p)
    }

    /// Zero the diagonal of C. No-op in structured mode. Called after every
    /// optimizer step in the full ablation.
    pub fn project(&self) {
        if self.mode == SparseMode::FullSelfExpressive {
            let t = self.n + self.m;
            let mut v = self.coeffs.value_mut();
            for i in 0..t {
                v.data[i * t + i] = 0.0;
            }
        }
    }

    /// Snapshot of the code matrix A (training rows x test columns) with the
    /// label alignment and embeddings needed for classification.
    pub fn extract_codes(
        &self,
        train_labels: &[usize],
        z_train: &Tensor,
        z_test: &Tensor,
    ) -> Result<SparseCodes> {
        if train_labels.len() != self.n {
            return Err(DsrcError::InvalidInput(format!(
                "extract_codes: {} train labels for n = {}",
                train_labels.len(),
                self.n
            )));
        }
        let a = match self.mode {
            SparseMode::Structured => self.coeffs.value().clone(),
            SparseMode::FullSelfExpressive => {
                // test block: training rows, columns n..n+m
                let c = self.coeffs.value();
                let t = self.n + self.m;
                let mut data = Vec::with_capacity(self.n * self.m);
                for i in 0..self.n {
                    data.extend_from_slice(&c.data[i * t + self.n..i * t + t]);
                }
                Tensor::from_vec(&[self.n, self.m], data)?
            }
        };
        Ok(SparseCodes {
            a,
            train_labels: train_labels.to_vec(),
            z_train: z_train.clone(),
            z_test: z_test.clone(),
            test_labels: None,
        })
    }
}

/// Trained sparse codes: column j holds the code of test sample j over the
/// training samples (rows), plus the embedding matrices the classifier needs.
#[derive(Debug, Clone)]
pub struct SparseCodes {
    pub a: Tensor,
    pub train_labels: Vec<usize>,
    pub z_train: Tensor,
    pub z_test: Tensor,
    /// Ground-truth test labels, when known; carried for reporting only.
    pub test_labels: Option<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct CodesSidecar {
    version: u32,
    n: usize,
    m: usize,
    d_z: usize,
    train_labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    test_labels: Option<Vec<usize>>,
}

impl SparseCodes {
    pub fn n(&self) -> usize {
        self.a.shape[0]
    }

    pub fn m(&self) -> usize {
        self.a.shape[1]
    }

    pub fn d_z(&self) -> usize {
        self.z_train.shape[0]
    }

    /// Write `<path>` (flat little-endian f64: A row-major, then Z_train,
    /// then Z_test) and a JSON sidecar `<path>.json` with the dimensions and
    /// label arrays.
    pub fn save(&self, path: &Path) -> Result<()> {
        let sidecar = CodesSidecar {
            version: 1,
            n: self.n(),
            m: self.m(),
            d_z: self.d_z(),
            train_labels: self.train_labels.clone(),
            test_labels: self.test_labels.clone(),
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for block in [&self.a, &self.z_train, &self.z_test] {
            for v in &block.data {
                f.write_f64::<LittleEndian>(*v)?;
            }
        }
        f.flush()?;
        let json = serde_json::to_string_pretty(&sidecar)?;
        std::fs::write(sidecar_path(path), json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SparseCodes> {
        let json = std::fs::read_to_string(sidecar_path(path))?;
        let sidecar: CodesSidecar = serde_json::from_str(&json)?;
        if sidecar.version != 1 {
            return Err(DsrcError::Format(format!(
                "unsupported codes version {}",
                sidecar.version
            )));
        }
        let (n, m, d) = (sidecar.n, sidecar.m, sidecar.d_z);
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut read_block = |shape: &[usize]| -> Result<Tensor> {
            let numel: usize = shape.iter().product();
            let mut data = vec![0.0; numel];
            f.read_f64_into::<LittleEndian>(&mut data)
                .map_err(|_| DsrcError::Format("truncated codes file".into()))?;
            Tensor::from_vec(shape, data)
        };
        let a = read_block(&[n, m])?;
        let z_train = read_block(&[d, n])?;
        let z_test = read_block(&[d, m])?;
        if sidecar.train_labels.len() != n {
            return Err(DsrcError::Format(format!(
                "codes sidecar: {} train labels for n = {n}",
                sidecar.train_labels.len()
            )));
        }
        Ok(SparseCodes {
            a,
            z_train,
            z_test,
            train_labels: sidecar.train_labels,
            test_labels: sidecar.test_labels,
        })
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    std::path::PathBuf::from(s)
}
