//! Classical sparse representation-based classification: l1 coding of raw
//! test samples against the class-grouped training dictionary and the
//! minimum-residual rule.

use crate::error::{DsrcError, Result};
use crate::tensor::{dot, norm2, Tensor};

/// Class-grouped, column-normalized training matrix.
#[derive(Debug, Clone)]
pub struct Dictionary {
    /// d0 x n, every column unit l2 norm, columns ordered by class block.
    pub columns: Tensor,
    /// Length-n class labels, nondecreasing.
    pub labels: Vec<usize>,
    /// Pre-normalization l2 norms, for reporting.
    pub column_norms: Vec<f64>,
    pub num_classes: usize,
}

#[derive(Debug, Clone)]
pub struct LassoSolution {
    pub alpha: Vec<f64>,
    pub iterations_used: usize,
    /// 0.5*||x - D a||^2 + lambda0*||a||_1 at the returned point.
    pub final_objective: f64,
}

/// Group vectorized samples by class (stable within class) and normalize
/// columns to unit l2 norm.
///
/// `samples` is d0 x n with one sample per column.
pub fn build_dictionary(samples: &Tensor, labels: &[usize]) -> Result<Dictionary> {
    let (d0, n) = samples.dims2()?;
    if labels.len() != n {
        return Err(DsrcError::InvalidInput(format!(
            "{} labels for {n} samples",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(DsrcError::InvalidInput("empty training set".into()));
    }
    let num_classes = labels.iter().max().unwrap() + 1;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| labels[i]);

    let mut columns = Tensor::zeros(&[d0, n]);
    let mut out_labels = Vec::with_capacity(n);
    let mut column_norms = Vec::with_capacity(n);
    for (j, &src) in order.iter().enumerate() {
        let col = samples.col(src);
        let norm = norm2(&col);
        if norm == 0.0 {
            return Err(DsrcError::DegenerateSample {
                index: src,
                reason: "zero-norm training sample".into(),
            });
        }
        for i in 0..d0 {
            columns.data[i * n + j] = col[i] / norm;
        }
        out_labels.push(labels[src]);
        column_norms.push(norm);
    }
    Ok(Dictionary {
        columns,
        labels: out_labels,
        column_norms,
        num_classes,
    })
}

impl Dictionary {
    pub fn dim(&self) -> usize {
        self.columns.shape[0]
    }

    pub fn len(&self) -> usize {
        self.columns.shape[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn matvec(&self, alpha: &[f64]) -> Vec<f64> {
        let (d, n) = (self.dim(), self.len());
        let mut out = vec![0.0; d];
        for i in 0..d {
            out[i] = dot(&self.columns.data[i * n..(i + 1) * n], alpha);
        }
        out
    }

    fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        let (d, n) = (self.dim(), self.len());
        let mut out = vec![0.0; n];
        for i in 0..d {
            let xi = x[i];
            let row = &self.columns.data[i * n..(i + 1) * n];
            for j in 0..n {
                out[j] += xi * row[j];
            }
        }
        out
    }

    /// Largest eigenvalue of D^T D via power iteration, with a small safety
    /// factor so 1/L is a valid step size.
    fn lipschitz(&self) -> f64 {
        let n = self.len();
        let mut v = vec![1.0 / (n as f64).sqrt(); n];
        let mut lambda = 1.0;
        for _ in 0..200 {
            let w = self.matvec_t(&self.matvec(&v));
            let norm = norm2(&w);
            if norm == 0.0 {
                return 1.0;
            }
            let next = norm;
            for (vi, wi) in v.iter_mut().zip(&w) {
                *vi = wi / norm;
            }
            if (next - lambda).abs() <= 1e-12 * next {
                lambda = next;
                break;
            }
            lambda = next;
        }
        lambda * 1.01
    }
}

pub fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

fn lasso_objective(d: &Dictionary, x: &[f64], alpha: &[f64], lambda0: f64) -> f64 {
    let r: f64 = d
        .matvec(alpha)
        .iter()
        .zip(x)
        .map(|(da, xi)| (da - xi) * (da - xi))
        .sum();
    0.5 * r + lambda0 * alpha.iter().map(|a| a.abs()).sum::<f64>()
}

/// Accelerated proximal gradient (FISTA with function-value restart) for
/// min_a 0.5*||x - D a||^2 + lambda0*||a||_1, step 1/L.
pub fn fista_lasso(
    dict: &Dictionary,
    x: &[f64],
    lambda0: f64,
    max_iters: usize,
    tol: f64,
) -> Result<LassoSolution> {
    if lambda0 <= 0.0 {
        return Err(DsrcError::InvalidHyperparameter(format!(
            "lambda0 must be positive, got {lambda0}"
        )));
    }
    if x.len() != dict.dim() {
        return Err(DsrcError::InvalidShape(format!(
            "sample has dimension {}, dictionary has {}",
            x.len(),
            dict.dim()
        )));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(DsrcError::InvalidInput("non-finite entries in sample".into()));
    }

    let n = dict.len();
    let step = 1.0 / dict.lipschitz();
    let thresh = lambda0 * step;

    let mut alpha = vec![0.0; n];
    let mut y = alpha.clone();
    let mut t: f64 = 1.0;
    let mut obj = lasso_objective(dict, x, &alpha, lambda0);
    let mut iters = 0;

    for it in 0..max_iters {
        iters = it + 1;
        // gradient of the smooth part at y: D^T (D y - x)
        let mut resid = dict.matvec(&y);
        for (r, xi) in resid.iter_mut().zip(x) {
            *r -= xi;
        }
        let grad = dict.matvec_t(&resid);
        let next: Vec<f64> = y
            .iter()
            .zip(&grad)
            .map(|(yi, gi)| soft_threshold(yi - step * gi, thresh))
            .collect();

        let next_obj = lasso_objective(dict, x, &next, lambda0);
        if next_obj > obj {
            // monotone restart: drop momentum, retry plain proximal step
            t = 1.0;
            y = alpha.clone();
            let mut resid = dict.matvec(&y);
            for (r, xi) in resid.iter_mut().zip(x) {
                *r -= xi;
            }
            let grad = dict.matvec_t(&resid);
            let restarted: Vec<f64> = y
                .iter()
                .zip(&grad)
                .map(|(yi, gi)| soft_threshold(yi - step * gi, thresh))
                .collect();
            let restarted_obj = lasso_objective(dict, x, &restarted, lambda0);
            if restarted_obj > obj {
                // proximal step can no longer decrease: converged
                break;
            }
            let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            y = restarted.clone();
            alpha = restarted;
            t = t_next;
            let rel = (obj - restarted_obj).abs() / obj.abs().max(1e-300);
            obj = restarted_obj;
            if rel < tol {
                break;
            }
            continue;
        }

        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let momentum = (t - 1.0) / t_next;
        y = next
            .iter()
            .zip(&alpha)
            .map(|(ni, ai)| ni + momentum * (ni - ai))
            .collect();
        t = t_next;
        let rel = (obj - next_obj).abs() / obj.abs().max(1e-300);
        alpha = next;
        obj = next_obj;
        if rel < tol {
            break;
        }
    }

    Ok(LassoSolution {
        alpha,
        iterations_used: iters,
        final_objective: obj,
    })
}

/// Zero all coefficients outside class k.
pub fn class_restrict(alpha: &[f64], labels: &[usize], k: usize) -> Vec<f64> {
    alpha
        .iter()
        .zip(labels)
        .map(|(a, l)| if *l == k { *a } else { 0.0 })
        .collect()
}

/// Minimum class-restricted residual rule; ties broken by smallest class id.
pub fn src_classify(dict: &Dictionary, x: &[f64], alpha: &[f64]) -> usize {
    let mut best = (0usize, f64::INFINITY);
    for k in 0..dict.num_classes {
        let restricted = class_restrict(alpha, &dict.labels, k);
        let recon = dict.matvec(&restricted);
        let resid: f64 = recon.iter().zip(x).map(|(r, xi)| (r - xi) * (r - xi)).sum();
        if resid < best.1 {
            best = (k, resid);
        }
    }
    best.0
}

pub const DEFAULT_MAX_ITERS: usize = 2000;
pub const DEFAULT_TOL: f64 = 1e-8;

/// Batch classical SRC: sparse-code every test column, then classify.
///
/// `train`/`test` are d0 x n and d0 x m matrices of vectorized samples.
pub fn src_pipeline(
    train: &Tensor,
    test: &Tensor,
    labels: &[usize],
    lambda0: f64,
) -> Result<Vec<usize>> {
    let dict = build_dictionary(train, labels)?;
    let (d0, m) = test.dims2()?;
    if d0 != dict.dim() {
        return Err(DsrcError::InvalidShape(format!(
            "test samples have dimension {d0}, dictionary has {}",
            dict.dim()
        )));
    }
    let mut preds = Vec::with_capacity(m);
    for j in 0..m {
        let x = test.col(j);
        let sol = fista_lasso(&dict, &x, lambda0, DEFAULT_MAX_ITERS, DEFAULT_TOL)
            .map_err(|e| DsrcError::InvalidInput(format!("test sample {j}: {e}")))?;
        preds.push(src_classify(&dict, &x, &sol.alpha));
    }
    Ok(preds)
}
