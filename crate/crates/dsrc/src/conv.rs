//! Convolution and transposed-convolution kernels (im2col + GEMM).
//!
//! Convolution is cross-correlation (no kernel flip). A transposed
//! convolution with target size `(th, tw)` is the adjoint of the convolution
//! that maps a `(th, tw)` input to the given feature map, restricted to the
//! rows actually present; output positions past the last write stay zero.

use crate::error::{DsrcError, Result};
use crate::tensor::{matmul_raw, Tensor};

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Smallest transposed-convolution target size whose adjoint convolution
/// covers `grid` output positions.
pub fn deconv_min_target(grid: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    let raw = stride * (grid - 1) + kernel;
    raw.saturating_sub(2 * pad).max(1)
}

/// Lay out k x k patches of `input` (N,C,H,W) as a (C*k*k) x (N*gh*gw)
/// matrix. The output grid (gh, gw) is passed explicitly so the same routine
/// serves both convolution and the transposed-convolution backward pass.
fn im2col(
    input: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    gh: usize,
    gw: usize,
) -> Vec<f64> {
    let cols = n * gh * gw;
    let mut out = vec![0.0; c * k * k * cols];
    for ci in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let orow = &mut out[row * cols..(row + 1) * cols];
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for y in 0..gh {
                        let iy = (y * stride + kh) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = base + iy as usize * w;
                        let ocol = (ni * gh + y) * gw;
                        for x in 0..gw {
                            let ix = (x * stride + kw) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            orow[ocol + x] = input[irow + ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of `im2col`: scatter-add columns back into an (N,C,H,W) buffer.
fn col2im(
    cols_data: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    gh: usize,
    gw: usize,
) -> Vec<f64> {
    let cols = n * gh * gw;
    let mut out = vec![0.0; n * c * h * w];
    for ci in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let irow = &cols_data[row * cols..(row + 1) * cols];
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for y in 0..gh {
                        let iy = (y * stride + kh) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let orow = base + iy as usize * w;
                        let icol = (ni * gh + y) * gw;
                        for x in 0..gw {
                            let ix = (x * stride + kw) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out[orow + ix as usize] += irow[icol + x];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Move the channel axis: (Cout, N*gh*gw) rows-per-channel -> (N,Cout,gh,gw).
fn gather_nchw(mat: &[f64], n: usize, cout: usize, gh: usize, gw: usize) -> Vec<f64> {
    let cols = n * gh * gw;
    let hw = gh * gw;
    let mut out = vec![0.0; n * cout * hw];
    for co in 0..cout {
        let row = &mat[co * cols..(co + 1) * cols];
        for ni in 0..n {
            out[(ni * cout + co) * hw..(ni * cout + co + 1) * hw]
                .copy_from_slice(&row[ni * hw..(ni + 1) * hw]);
        }
    }
    out
}

fn scatter_nchw(t: &[f64], n: usize, cout: usize, gh: usize, gw: usize) -> Vec<f64> {
    let cols = n * gh * gw;
    let hw = gh * gw;
    let mut out = vec![0.0; cout * cols];
    for co in 0..cout {
        let row = &mut out[co * cols..(co + 1) * cols];
        for ni in 0..n {
            row[ni * hw..(ni + 1) * hw]
                .copy_from_slice(&t[(ni * cout + co) * hw..(ni * cout + co + 1) * hw]);
        }
    }
    out
}

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    if t.shape.len() != 4 {
        return Err(DsrcError::InvalidShape(format!(
            "{what}: expected rank-4 tensor, got shape {:?}",
            t.shape
        )));
    }
    Ok((t.shape[0], t.shape[1], t.shape[2], t.shape[3]))
}

/// input (N,C,H,W), kernel (Cout,C,k,k) -> (N,Cout,H',W').
pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, c, h, w) = dims4(input, "conv2d input")?;
    let (cout, ck, kh, kw) = dims4(kernel, "conv2d kernel")?;
    if kh != kw {
        return Err(DsrcError::InvalidShape(format!(
            "conv2d: non-square kernel {kh}x{kw}"
        )));
    }
    let k = kh;
    if ck != c {
        return Err(DsrcError::InvalidShape(format!(
            "conv2d: input has {c} channels but kernel expects {ck}"
        )));
    }
    if stride < 1 {
        return Err(DsrcError::InvalidHyperparameter("conv2d: stride must be >= 1".into()));
    }
    let gh = conv_out_size(h, k, stride, pad).ok_or_else(|| {
        DsrcError::InvalidShape(format!("conv2d: kernel {k} larger than padded input {h}+2*{pad}"))
    })?;
    let gw = conv_out_size(w, k, stride, pad).ok_or_else(|| {
        DsrcError::InvalidShape(format!("conv2d: kernel {k} larger than padded input {w}+2*{pad}"))
    })?;

    let cols = im2col(&input.data, n, c, h, w, k, stride, pad, gh, gw);
    let out_mat = matmul_raw(&kernel.data, &cols, cout, c * k * k, n * gh * gw);
    Tensor::from_vec(&[n, cout, gh, gw], gather_nchw(&out_mat, n, cout, gh, gw))
}

/// Gradients of `conv2d_forward` w.r.t. input and kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = dims4(input, "conv2d input")?;
    let (cout, _, k, _) = dims4(kernel, "conv2d kernel")?;
    let (_, _, gh, gw) = dims4(grad_out, "conv2d grad")?;
    let cols = im2col(&input.data, n, c, h, w, k, stride, pad, gh, gw);
    let gmat = scatter_nchw(&grad_out.data, n, cout, gh, gw);

    // dW = g_mat * cols^T
    let ncols = n * gh * gw;
    let ckk = c * k * k;
    let mut colst = vec![0.0; ncols * ckk];
    for i in 0..ckk {
        for j in 0..ncols {
            colst[j * ckk + i] = cols[i * ncols + j];
        }
    }
    let gw_data = matmul_raw(&gmat, &colst, cout, ncols, ckk);
    let grad_kernel = Tensor::from_vec(&kernel.shape, gw_data)?;

    // dX = col2im(W^T * g_mat)
    let mut wt = vec![0.0; ckk * cout];
    for i in 0..cout {
        for j in 0..ckk {
            wt[j * cout + i] = kernel.data[i * ckk + j];
        }
    }
    let gcols = matmul_raw(&wt, &gmat, ckk, cout, ncols);
    let gx = col2im(&gcols, n, c, h, w, k, stride, pad, gh, gw);
    Ok((Tensor::from_vec(&input.shape, gx)?, grad_kernel))
}

/// input (N,Cf,H,W), kernel (Cf,Cg,k,k) -> (N,Cg,th,tw).
///
/// `(th, tw)` must be at least the adjoint-of-convolution size
/// `stride*(H-1)+k-2*pad`; rows/columns beyond the last written position
/// remain zero.
pub fn deconv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
    target_hw: (usize, usize),
) -> Result<Tensor> {
    let (n, cf, h, w) = dims4(input, "transposed_conv2d input")?;
    let (kf, cg, k, k2) = dims4(kernel, "transposed_conv2d kernel")?;
    if k != k2 {
        return Err(DsrcError::InvalidShape(format!(
            "transposed_conv2d: non-square kernel {k}x{k2}"
        )));
    }
    if kf != cf {
        return Err(DsrcError::InvalidShape(format!(
            "transposed_conv2d: input has {cf} channels but kernel expects {kf}"
        )));
    }
    let (th, tw) = target_hw;
    let (min_h, min_w) = (
        deconv_min_target(h, k, stride, pad),
        deconv_min_target(w, k, stride, pad),
    );
    if th < min_h || tw < min_w {
        return Err(DsrcError::InvalidShape(format!(
            "transposed_conv2d: target {th}x{tw} unachievable; feasible sizes are at least {min_h}x{min_w}"
        )));
    }

    // cols = W^T (Cg*k*k x Cf) * X_mat (Cf x N*H*W), then scatter-add.
    let cgkk = cg * k * k;
    let mut wt = vec![0.0; cgkk * cf];
    for i in 0..cf {
        for j in 0..cgkk {
            wt[j * cf + i] = kernel.data[i * cgkk + j];
        }
    }
    let xmat = scatter_nchw(&input.data, n, cf, h, w);
    let cols = matmul_raw(&wt, &xmat, cgkk, cf, n * h * w);
    let out = col2im(&cols, n, cg, th, tw, k, stride, pad, h, w);
    Tensor::from_vec(&[n, cg, th, tw], out)
}

/// Gradients of `deconv2d_forward` w.r.t. input and kernel.
pub fn deconv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor)> {
    let (n, cf, h, w) = dims4(input, "transposed_conv2d input")?;
    let (_, cg, k, _) = dims4(kernel, "transposed_conv2d kernel")?;
    let (_, _, th, tw) = dims4(grad_out, "transposed_conv2d grad")?;

    let cols = im2col(&grad_out.data, n, cg, th, tw, k, stride, pad, h, w);
    let ncols = n * h * w;
    let cgkk = cg * k * k;

    // dX = W (Cf x Cg*k*k) * cols
    let gx_mat = matmul_raw(&kernel.data, &cols, cf, cgkk, ncols);
    let gx = gather_nchw(&gx_mat, n, cf, h, w);

    // dW = X_mat * cols^T
    let xmat = scatter_nchw(&input.data, n, cf, h, w);
    let mut colst = vec![0.0; ncols * cgkk];
    for i in 0..cgkk {
        for j in 0..ncols {
            colst[j * cgkk + i] = cols[i * ncols + j];
        }
    }
    let gk = matmul_raw(&xmat, &colst, cf, ncols, cgkk);
    Ok((
        Tensor::from_vec(&input.shape, gx)?,
        Tensor::from_vec(&kernel.shape, gk)?,
    ))
}
