//! Dense row-major tensors and the trainable `Parameter` handle.

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use crate::error::{DsrcError, Result};

/// Dense n-dimensional real array, row-major, 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(DsrcError::InvalidShape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (p, q) = self.dims2()?;
        let (q2, r) = other.dims2()?;
        if q != q2 {
            return Err(DsrcError::InvalidShape(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let data = matmul_raw(&self.data, &other.data, p, q, r);
        Tensor::from_vec(&[p, r], data)
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(DsrcError::InvalidShape(format!(
                "expected a rank-2 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let (p, q) = self.dims2()?;
        let mut out = vec![0.0; p * q];
        for i in 0..p {
            for j in 0..q {
                out[j * p + i] = self.data[i * q + j];
            }
        }
        Tensor::from_vec(&[q, p], out)
    }

    /// Column `j` of a rank-2 tensor.
    pub fn col(&self, j: usize) -> Vec<f64> {
        let (p, q) = self.dims2().expect("col on non-matrix");
        (0..p).map(|i| self.data[i * q + j]).collect()
    }
}

/// `a` is p x q, `b` is q x r, both row-major.
pub fn matmul_raw(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            let orow = &mut out[i * r..(i + 1) * r];
            for j in 0..r {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug)]
struct ParamInner {
    value: Tensor,
    grad: Tensor,
    name: String,
}

/// Leaf tensor with an accumulated gradient. Cheap to clone; clones share
/// the underlying storage, which is how the compute graph and the optimizer
/// see the same state.
#[derive(Debug, Clone)]
pub struct Parameter {
    inner: Rc<RefCell<ParamInner>>,
}

impl Parameter {
    pub fn new(name: &str, value: Tensor) -> Parameter {
        let grad = Tensor::zeros(&value.shape);
        Parameter {
            inner: Rc::new(RefCell::new(ParamInner {
                value,
                grad,
                name: name.to_string(),
            })),
        }
    }

    pub fn name(&self) -> String {
        self.inner.borrow().name.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().value.shape.clone()
    }

    pub fn value(&self) -> Ref<'_, Tensor> {
        Ref::map(self.inner.borrow(), |p| &p.value)
    }

    pub fn value_mut(&self) -> RefMut<'_, Tensor> {
        RefMut::map(self.inner.borrow_mut(), |p| &mut p.value)
    }

    pub fn grad(&self) -> Ref<'_, Tensor> {
        Ref::map(self.inner.borrow(), |p| &p.grad)
    }

    pub fn zero_grad(&self) {
        for g in self.inner.borrow_mut().grad.data.iter_mut() {
            *g = 0.0;
        }
    }

    pub(crate) fn accumulate_grad(&self, delta: &Tensor) {
        let mut inner = self.inner.borrow_mut();
        debug_assert_eq!(inner.grad.shape, delta.shape);
        for (g, d) in inner.grad.data.iter_mut().zip(&delta.data) {
            *g += d;
        }
    }
}
