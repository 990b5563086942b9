//! Forward and backward kernels on raw buffers.
//!
//! These are shared by the tape in [`super::Graph`] and by the standalone
//! tensor functions exported here.

use super::{Result, Tensor, TensorError};

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// `c (+)= op(a) * op(b)` where op(a) is m×k and op(b) is k×n, all row-major.
///
/// With `ta` set, `a` is stored k×m; with `tb` set, `b` is stored n×k.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Softmax along `axis`, max-shifted per slice.
pub fn softmax(t: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = split_axis(t.shape(), axis)?;
    let x = t.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                max = max.max(x[base + j * inner]);
            }
            let mut sum = 0.0;
            for j in 0..n {
                let e = (x[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..n {
                out[base + j * inner] /= sum;
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

pub(crate) fn softmax_backward(y: &[f64], gy: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = split_axis(shape, axis).expect("axis checked in forward");
    let mut gx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let dot: f64 = (0..n)
                .map(|j| y[base + j * inner] * gy[base + j * inner])
                .sum();
            for j in 0..n {
                let idx = base + j * inner;
                gx[idx] = y[idx] * (gy[idx] - dot);
            }
        }
    }
    gx
}

/// Cached intermediates of a layer norm forward pass.
pub(crate) struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_forward(
    x: &[f64],
    width: usize,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> (Vec<f64>, LayerNormCache) {
    let rows = x.len() / width;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for c in 0..width {
            let h = (row[c] - mean) * is;
            xhat[r * width + c] = h;
            out[r * width + c] = h * gain[c] + bias[c];
        }
    }
    (out, LayerNormCache { xhat, inv_std })
}

/// Returns (dx, dgain, dbias).
pub(crate) fn layer_norm_backward(
    gy: &[f64],
    width: usize,
    gain: &[f64],
    cache: &LayerNormCache,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = gy.len() / width;
    let mut dx = vec![0.0; gy.len()];
    let mut dgain = vec![0.0; width];
    let mut dbias = vec![0.0; width];
    let n = width as f64;
    for r in 0..rows {
        let g = &gy[r * width..(r + 1) * width];
        let h = &cache.xhat[r * width..(r + 1) * width];
        let mut sum_gh = 0.0;
        let mut sum_g = 0.0;
        for c in 0..width {
            let gh = g[c] * gain[c];
            sum_g += gh;
            sum_gh += gh * h[c];
            dgain[c] += g[c] * h[c];
            dbias[c] += g[c];
        }
        let is = cache.inv_std[r];
        for c in 0..width {
            let gh = g[c] * gain[c];
            dx[r * width + c] = is * (gh - sum_g / n - h[c] * sum_gh / n);
        }
    }
    (dx, dgain, dbias)
}

/// Layer normalization over the last axis with affine gain and bias.
pub fn layer_norm(t: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let width = *t.shape().last().ok_or_else(|| TensorError::Shape("rank 0".into()))?;
    if gain.len() != width || bias.len() != width {
        return Err(TensorError::Shape(format!(
            "layer norm over width {width} with gain {:?} bias {:?}",
            gain.shape(),
            bias.shape()
        )));
    }
    if eps <= 0.0 {
        return Err(TensorError::Invalid("layer norm eps must be positive".into()));
    }
    let (out, _) = layer_norm_forward(t.data(), width, gain.data(), bias.data(), eps);
    Tensor::new(t.shape().to_vec(), out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// Output length of a strided, padded 1-d sliding window.
pub fn conv_output_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(TensorError::Invalid("stride must be positive".into()));
    }
    let padded = len + 2 * padding;
    if kernel == 0 || kernel > padded {
        return Err(TensorError::KernelTooLong { kernel, padded });
    }
    Ok((padded - kernel) / stride + 1)
}

/// Geometry of a batched 1-d convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv1dDims {
    pub batch: usize,
    pub c_in: usize,
    pub len: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_len: usize,
}

pub(crate) fn conv1d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, d: &Conv1dDims) -> Vec<f64> {
    let mut out = vec![0.0; d.batch * d.c_out * d.out_len];
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let base_o = (b * d.c_out + co) * d.out_len;
            let b0 = bias.map_or(0.0, |bs| bs[co]);
            for t in 0..d.out_len {
                out[base_o + t] = b0;
            }
            for ci in 0..d.c_in {
                let xr = &x[(b * d.c_in + ci) * d.len..(b * d.c_in + ci + 1) * d.len];
                let wr = &w[(co * d.c_in + ci) * d.kernel..(co * d.c_in + ci + 1) * d.kernel];
                for t in 0..d.out_len {
                    let start = (t * d.stride) as isize - d.padding as isize;
                    let mut acc = 0.0;
                    for (kk, &wv) in wr.iter().enumerate() {
                        let p = start + kk as isize;
                        if p >= 0 && (p as usize) < d.len {
                            acc += wv * xr[p as usize];
                        }
                    }
                    out[base_o + t] += acc;
                }
            }
        }
    }
    out
}

/// Returns (dx, dw, dbias).
pub(crate) fn conv1d_backward(
    gy: &[f64],
    x: &[f64],
    w: &[f64],
    d: &Conv1dDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; d.c_out];
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let go = &gy[(b * d.c_out + co) * d.out_len..(b * d.c_out + co + 1) * d.out_len];
            db[co] += go.iter().sum::<f64>();
            for ci in 0..d.c_in {
                let xoff = (b * d.c_in + ci) * d.len;
                let woff = (co * d.c_in + ci) * d.kernel;
                for (t, &g) in go.iter().enumerate() {
                    let start = (t * d.stride) as isize - d.padding as isize;
                    for kk in 0..d.kernel {
                        let p = start + kk as isize;
                        if p >= 0 && (p as usize) < d.len {
                            dw[woff + kk] += g * x[xoff + p as usize];
                            dx[xoff + p as usize] += g * w[woff + kk];
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Cross-correlation of a `C_in×T` signal with `C_out×C_in×K` kernels.
pub fn conv1d(input: &Tensor, kernels: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    if input.rank() != 2 || kernels.rank() != 3 || kernels.shape()[1] != input.shape()[0] {
        return Err(TensorError::Shape(format!(
            "conv1d input {:?} kernels {:?}",
            input.shape(),
            kernels.shape()
        )));
    }
    let (c_in, len) = (input.shape()[0], input.shape()[1]);
    let (c_out, kernel) = (kernels.shape()[0], kernels.shape()[2]);
    let out_len = conv_output_len(len, kernel, stride, padding)?;
    let d = Conv1dDims {
        batch: 1,
        c_in,
        len,
        c_out,
        kernel,
        stride,
        padding,
        out_len,
    };
    let out = conv1d_forward(input.data(), kernels.data(), None, &d);
    Tensor::new(vec![c_out, out_len], out)
}

/// Geometry of a batched 2-d convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv2dDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Conv2dDims {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Column matrix of shape (c_in·kh·kw) × (oh·ow) for one image.
fn im2col(x: &[f64], d: &Conv2dDims) -> Vec<f64> {
    let pos = d.positions();
    let mut col = vec![0.0; d.patch() * pos];
    for ci in 0..d.c_in {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                    if iy < 0 || iy as usize >= d.h {
                        continue;
                    }
                    for ox in 0..d.ow {
                        let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                        if ix < 0 || ix as usize >= d.w {
                            continue;
                        }
                        col[row * pos + oy * d.ow + ox] =
                            x[(ci * d.h + iy as usize) * d.w + ix as usize];
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], d: &Conv2dDims, dx: &mut [f64]) {
    let pos = d.positions();
    for ci in 0..d.c_in {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                    if iy < 0 || iy as usize >= d.h {
                        continue;
                    }
                    for ox in 0..d.ow {
                        let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                        if ix < 0 || ix as usize >= d.w {
                            continue;
                        }
                        dx[(ci * d.h + iy as usize) * d.w + ix as usize] +=
                            col[row * pos + oy * d.ow + ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, d: &Conv2dDims) -> Vec<f64> {
    let in_sz = d.c_in * d.h * d.w;
    let out_sz = d.c_out * d.positions();
    let mut out = vec![0.0; d.batch * out_sz];
    for b in 0..d.batch {
        let col = im2col(&x[b * in_sz..(b + 1) * in_sz], d);
        let o = &mut out[b * out_sz..(b + 1) * out_sz];
        if let Some(bs) = bias {
            for co in 0..d.c_out {
                o[co * d.positions()..(co + 1) * d.positions()].fill(bs[co]);
            }
        }
        gemm(d.c_out, d.patch(), d.positions(), w, false, &col, false, o, bias.is_some());
    }
    out
}

pub(crate) fn conv2d_backward(
    gy: &[f64],
    x: &[f64],
    w: &[f64],
    d: &Conv2dDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let in_sz = d.c_in * d.h * d.w;
    let out_sz = d.c_out * d.positions();
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; d.c_out];
    let mut dcol = vec![0.0; d.patch() * d.positions()];
    for b in 0..d.batch {
        let g = &gy[b * out_sz..(b + 1) * out_sz];
        for co in 0..d.c_out {
            db[co] += g[co * d.positions()..(co + 1) * d.positions()].iter().sum::<f64>();
        }
        let col = im2col(&x[b * in_sz..(b + 1) * in_sz], d);
        // dw += g · colᵀ
        gemm(d.c_out, d.positions(), d.patch(), g, false, &col, true, &mut dw, true);
        // dcol = wᵀ · g
        gemm(d.patch(), d.c_out, d.positions(), w, true, g, false, &mut dcol, false);
        col2im(&dcol, d, &mut dx[b * in_sz..(b + 1) * in_sz]);
    }
    (dx, dw, db)
}

/// Permutes the axes of a row-major buffer.
pub(crate) fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < new_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out, new_shape)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
