//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! A `Graph` records every primitive executed during a forward pass; calling
//! `backward` on a scalar node walks the tape in reverse execution order and
//! accumulates gradients into every reachable `Parameter`. A graph can run
//! backward once; rebuild it for the next iteration.

use crate::conv;
use crate::error::{DsrcError, Result};
use crate::tensor::{Parameter, Tensor};

/// Gradient magnitude clamp for p < 1 penalties, where |x|^(p-1) blows up
/// near zero.
pub const LP_GRAD_CLAMP: f64 = 1e6;

/// Handle to a node in a `Graph`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(Parameter),
    Conv2d { input: Var, kernel: Var, stride: usize, pad: usize },
    Deconv2d { input: Var, kernel: Var, stride: usize, pad: usize },
    Relu { input: Var },
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { input: Var, factor: f64 },
    FrobeniusSq { input: Var },
    LpPenalty { input: Var, p: f64 },
    SliceCols { input: Var, start: usize, end: usize },
    ConcatCols { a: Var, b: Var },
    /// (N,C,H,W) -> (C*H*W, N): one flattened sample per column.
    FeaturesToCols { input: Var },
    /// (C*H*W, N) -> (N,C,H,W).
    ColsToFeatures { input: Var },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; no gradient flows out of it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Trainable leaf; backward accumulates into `param.grad`.
    pub fn param(&mut self, param: &Parameter) -> Var {
        let value = param.value().clone();
        self.push(value, Op::Param(param.clone()))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = conv::conv2d_forward(self.value(input), self.value(kernel), stride, pad)?;
        Ok(self.push(out, Op::Conv2d { input, kernel, stride, pad }))
    }

    pub fn transposed_conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
        target_hw: (usize, usize),
    ) -> Result<Var> {
        let out =
            conv::deconv2d_forward(self.value(input), self.value(kernel), stride, pad, target_hw)?;
        Ok(self.push(out, Op::Deconv2d { input, kernel, stride, pad }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let mut out = self.value(input).clone();
        for v in out.data.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(out, Op::Relu { input })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(DsrcError::InvalidShape(format!(
                "add: shapes {:?} and {:?} differ",
                ta.shape, tb.shape
            )));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let out = Tensor { shape: ta.shape.clone(), data };
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(DsrcError::InvalidShape(format!(
                "sub: shapes {:?} and {:?} differ",
                ta.shape, tb.shape
            )));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let out = Tensor { shape: ta.shape.clone(), data };
        Ok(self.push(out, Op::Sub { a, b }))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let t = self.value(input);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v * factor).collect(),
        };
        self.push(out, Op::Scale { input, factor })
    }

    /// Sum of squared entries, as a scalar node.
    pub fn frobenius_sq(&mut self, input: Var) -> Var {
        let s: f64 = self.value(input).data.iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::FrobeniusSq { input })
    }

    /// Sum of |x_i|^p, as a scalar node.
    pub fn lp_penalty(&mut self, input: Var, p: f64) -> Result<Var> {
        if p <= 0.0 {
            return Err(DsrcError::InvalidHyperparameter(format!(
                "lp_penalty: p must be positive, got {p}"
            )));
        }
        let s: f64 = self.value(input).data.iter().map(|v| v.abs().powf(p)).sum();
        Ok(self.push(Tensor::scalar(s), Op::LpPenalty { input, p }))
    }

    /// Columns `start..end` of a rank-2 node.
    pub fn slice_cols(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(input);
        let (rows, cols) = t.dims2()?;
        if start > end || end > cols {
            return Err(DsrcError::InvalidShape(format!(
                "slice_cols: range {start}..{end} out of {cols} columns"
            )));
        }
        let width = end - start;
        let mut data = Vec::with_capacity(rows * width);
        for i in 0..rows {
            data.extend_from_slice(&t.data[i * cols + start..i * cols + end]);
        }
        let out = Tensor::from_vec(&[rows, width], data)?;
        Ok(self.push(out, Op::SliceCols { input, start, end }))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ra, ca) = ta.dims2()?;
        let (rb, cb) = tb.dims2()?;
        if ra != rb {
            return Err(DsrcError::InvalidShape(format!(
                "concat_cols: row counts {ra} and {rb} differ"
            )));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(&ta.data[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&tb.data[i * cb..(i + 1) * cb]);
        }
        let out = Tensor::from_vec(&[ra, ca + cb], data)?;
        Ok(self.push(out, Op::ConcatCols { a, b }))
    }

    /// (N,C,H,W) -> (C*H*W, N), sample i becoming column i.
    pub fn features_to_cols(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        if t.shape.len() != 4 {
            return Err(DsrcError::InvalidShape(format!(
                "features_to_cols: expected rank-4 tensor, got {:?}",
                t.shape
            )));
        }
        let n = t.shape[0];
        let d: usize = t.shape[1..].iter().product();
        let mut data = vec![0.0; d * n];
        for s in 0..n {
            for f in 0..d {
                data[f * n + s] = t.data[s * d + f];
            }
        }
        let out = Tensor::from_vec(&[d, n], data)?;
        Ok(self.push(out, Op::FeaturesToCols { input }))
    }

    /// (C*H*W, N) -> (N,C,H,W).
    pub fn cols_to_features(
        &mut self,
        input: Var,
        channels: usize,
        height: usize,
        width: usize,
    ) -> Result<Var> {
        let t = self.value(input);
        let (d, n) = t.dims2()?;
        if d != channels * height * width {
            return Err(DsrcError::InvalidShape(format!(
                "cols_to_features: {d} rows cannot reshape to {channels}x{height}x{width}"
            )));
        }
        let mut data = vec![0.0; n * d];
        for s in 0..n {
            for f in 0..d {
                data[s * d + f] = t.data[f * n + s];
            }
        }
        let out = Tensor::from_vec(&[n, channels, height, width], data)?;
        Ok(self.push(out, Op::ColsToFeatures { input }))
    }

    /// Reverse pass from a scalar loss. Accumulates into every reachable
    /// `Parameter`'s grad. Consumes the tape: a second call errors.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(DsrcError::StaleGraph);
        }
        if !self.value(loss).is_scalar() {
            return Err(DsrcError::InvalidShape(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param(p) => p.accumulate_grad(&g),
                Op::Conv2d { input, kernel, stride, pad } => {
                    let (gx, gk) = conv::conv2d_backward(
                        &self.nodes[input.0].value,
                        &self.nodes[kernel.0].value,
                        &g,
                        *stride,
                        *pad,
                    )?;
                    accumulate(&mut grads, *input, gx);
                    accumulate(&mut grads, *kernel, gk);
                }
                Op::Deconv2d { input, kernel, stride, pad } => {
                    let (gx, gk) = conv::deconv2d_backward(
                        &self.nodes[input.0].value,
                        &self.nodes[kernel.0].value,
                        &g,
                        *stride,
                        *pad,
                    )?;
                    accumulate(&mut grads, *input, gx);
                    accumulate(&mut grads, *kernel, gk);
                }
                Op::Relu { input } => {
                    let x = &self.nodes[input.0].value;
                    let data = x
                        .data
                        .iter()
                        .zip(&g.data)
                        .map(|(xv, gv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *input, Tensor { shape: x.shape.clone(), data });
                }
                Op::MatMul { a, b } => {
                    let ta = &self.nodes[a.0].value;
                    let tb = &self.nodes[b.0].value;
                    let ga = g.matmul(&tb.transpose2()?)?;
                    let gb = ta.transpose2()?.matmul(&g)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub { a, b } => {
                    let neg = Tensor {
                        shape: g.shape.clone(),
                        data: g.data.iter().map(|v| -v).collect(),
                    };
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, neg);
                }
                Op::Scale { input, factor } => {
                    let data = g.data.iter().map(|v| v * factor).collect();
                    accumulate(&mut grads, *input, Tensor { shape: g.shape.clone(), data });
                }
                Op::FrobeniusSq { input } => {
                    let gs = g.scalar_value();
                    let x = &self.nodes[input.0].value;
                    let data = x.data.iter().map(|v| 2.0 * v * gs).collect();
                    accumulate(&mut grads, *input, Tensor { shape: x.shape.clone(), data });
                }
                Op::LpPenalty { input, p } => {
                    let gs = g.scalar_value();
                    let p = *p;
                    let x = &self.nodes[input.0].value;
                    let data = x.data.iter().map(|v| gs * lp_grad(*v, p)).collect();
                    accumulate(&mut grads, *input, Tensor { shape: x.shape.clone(), data });
                }
                Op::SliceCols { input, start, end } => {
                    let src = &self.nodes[input.0].value;
                    let (rows, cols) = src.dims2()?;
                    let width = end - start;
                    let mut gx = Tensor::zeros(&[rows, cols]);
                    for i in 0..rows {
                        for j in 0..width {
                            gx.data[i * cols + start + j] = g.data[i * width + j];
                        }
                    }
                    accumulate(&mut grads, *input, gx);
                }
                Op::ConcatCols { a, b } => {
                    let (ra, ca) = self.nodes[a.0].value.dims2()?;
                    let (_, cb) = self.nodes[b.0].value.dims2()?;
                    let mut ga = Tensor::zeros(&[ra, ca]);
                    let mut gb = Tensor::zeros(&[ra, cb]);
                    let total = ca + cb;
                    for i in 0..ra {
                        ga.data[i * ca..(i + 1) * ca]
                            .copy_from_slice(&g.data[i * total..i * total + ca]);
                        gb.data[i * cb..(i + 1) * cb]
                            .copy_from_slice(&g.data[i * total + ca..(i + 1) * total]);
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::FeaturesToCols { input } => {
                    let src = &self.nodes[input.0].value;
                    let n = src.shape[0];
                    let d: usize = src.shape[1..].iter().product();
                    let mut gx = Tensor::zeros(&src.shape.clone());
                    for s in 0..n {
                        for f in 0..d {
                            gx.data[s * d + f] = g.data[f * n + s];
                        }
                    }
                    accumulate(&mut grads, *input, gx);
                }
                Op::ColsToFeatures { input, .. } => {
                    let src = &self.nodes[input.0].value;
                    let (d, n) = src.dims2()?;
                    let mut gx = Tensor::zeros(&[d, n]);
                    for s in 0..n {
                        for f in 0..d {
                            gx.data[f * n + s] = g.data[s * d + f];
                        }
                    }
                    accumulate(&mut grads, *input, gx);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.data.iter_mut().zip(&delta.data) {
                *a += b;
            }
        }
        slot => *slot = Some(delta),
    }
}

/// d/dx |x|^p with the subgradient 0 at x = 0 (p <= 1) and the magnitude
/// clamp for p < 1.
fn lp_grad(x: f64, p: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let g = p * x.abs().powf(p - 1.0) * x.signum();
    if p < 1.0 {
        g.clamp(-LP_GRAD_CLAMP, LP_GRAD_CLAMP)
    } else {
        g
    }
}
