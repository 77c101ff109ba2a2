//! Pure tensor kernels shared by inference and the autodiff tape.
//!
//! Convolutions lower to patch matrices and a single-threaded GEMM, so results
//! are bit-reproducible on a given machine; the bias is added last.

use rand::Rng;

use super::tensor::RealTensor;
use crate::error::{shape_err, Error, Result};

/// Output extent of a strided convolution, `None` when it would be empty.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution, `None` when it would be empty.
pub fn conv_transpose_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || input == 0 {
        return None;
    }
    let full = (input - 1) * stride + kernel;
    if full <= 2 * padding {
        return None;
    }
    Some(full - 2 * padding)
}

fn check_bias(bias: Option<&RealTensor>, features: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != features {
            return Err(shape_err(format!(
                "bias has {} entries for {features} output channels",
                b.len()
            )));
        }
    }
    Ok(())
}

fn kernel_dims(weight: &RealTensor) -> Result<(usize, usize, usize)> {
    let (a, b, kh, kw) = weight.dims4()?;
    if kh != kw || kh == 0 {
        return Err(shape_err(format!("kernel must be square, got {kh}x{kw}")));
    }
    Ok((a, b, kh))
}

/// Range of output positions whose input tap `o * stride + tap - padding` is in `[0, len)`.
#[inline]
fn valid_range(out_len: usize, len: usize, tap: usize, stride: usize, padding: usize) -> (usize, usize) {
    // o * stride + tap >= padding
    let lo = if tap >= padding {
        0
    } else {
        (padding - tap).div_ceil(stride)
    };
    // o * stride + tap - padding <= len - 1
    let hi = if len + padding <= tap {
        0
    } else {
        ((len + padding - tap - 1) / stride + 1).min(out_len)
    };
    (lo, hi.max(lo))
}

/// Patch matrix `[C*k*k, ho*wo]` of one `[C,h,w]` plane set; taps falling in
/// the padding are zero.
#[allow(clippy::too_many_arguments)]
fn im2col(
    src: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut cols = vec![0.0; c * k * k * ho * wo];
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (oy0, oy1) = valid_range(ho, h, ky, stride, padding);
            for kx in 0..k {
                let (ox0, ox1) = valid_range(wo, w, kx, stride, padding);
                let row = &mut cols[((ci * k + ky) * k + kx) * ho * wo..][..ho * wo];
                for oy in oy0..oy1 {
                    let iy = oy * stride + ky - padding;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    for ox in ox0..ox1 {
                        dst[ox] = plane[iy * w + ox * stride + kx - padding];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters a patch matrix back onto `[C,h,w]`, adding.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    dst: &mut [f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) {
    for ci in 0..c {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (oy0, oy1) = valid_range(ho, h, ky, stride, padding);
            for kx in 0..k {
                let (ox0, ox1) = valid_range(wo, w, kx, stride, padding);
                let row = &cols[((ci * k + ky) * k + kx) * ho * wo..][..ho * wo];
                for oy in oy0..oy1 {
                    let iy = oy * stride + ky - padding;
                    let src = &row[oy * wo..(oy + 1) * wo];
                    for ox in ox0..ox1 {
                        plane[iy * w + ox * stride + kx - padding] += src[ox];
                    }
                }
            }
        }
    }
}

/// Row-major `out[m,n] = sum_k a[m,k] * b[k,n]`, with either operand
/// optionally read transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, out: &mut [f64], accumulate: bool) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n elements
    // checked by the assertion, and `out` does not alias the inputs.
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
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_bias(out: &mut [f64], bias: Option<&RealTensor>, plane: usize) {
    if let Some(b) = bias {
        for (chunk, &bv) in out.chunks_mut(plane).zip(b.data().iter().cycle()) {
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
}

/// Channel count at or below which direct loops beat patch matrices.
const THIN: usize = 2;

#[allow(clippy::too_many_arguments)]
fn conv2d_direct(
    x: &[f64],
    wt: &[f64],
    out: &mut [f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) {
    let plane = ho * wo;
    for (idx, dst) in out.chunks_mut(plane).enumerate().take(n * f) {
        let (ni, fi) = (idx / f, idx % f);
        for ci in 0..c {
            let src = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(ho, h, ky, stride, padding);
                for kx in 0..k {
                    let wv = wt[((fi * c + ci) * k + ky) * k + kx];
                    let (ox0, ox1) = valid_range(wo, w, kx, stride, padding);
                    for oy in oy0..oy1 {
                        let row = &src[(oy * stride + ky - padding) * w..][..w];
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        for ox in ox0..ox1 {
                            drow[ox] += wv * row[ox * stride + kx - padding];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_transpose_direct(
    x: &[f64],
    wt: &[f64],
    out: &mut [f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    k: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
) {
    let plane = out_h * out_w;
    for (idx, dst) in out.chunks_mut(plane).enumerate().take(n * f) {
        let (ni, fi) = (idx / f, idx % f);
        for ci in 0..c {
            let src = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            for ky in 0..k {
                let (iy0, iy1) = valid_range(h, out_h, ky, stride, padding);
                for kx in 0..k {
                    let wv = wt[((ci * f + fi) * k + ky) * k + kx];
                    let (ix0, ix1) = valid_range(w, out_w, kx, stride, padding);
                    for iy in iy0..iy1 {
                        let row = &src[iy * w..(iy + 1) * w];
                        let drow = &mut dst[(iy * stride + ky - padding) * out_w..][..out_w];
                        for ix in ix0..ix1 {
                            drow[ix * stride + kx - padding] += wv * row[ix];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn weight_grad_direct(
    x: &[f64],
    g: &[f64],
    out: &mut [f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) {
    for (fi, dst) in out.chunks_mut(c * k * k).enumerate() {
        for ni in 0..n {
            let gp = &g[(ni * f + fi) * ho * wo..(ni * f + fi + 1) * ho * wo];
            for ci in 0..c {
                let src = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                for ky in 0..k {
                    let (oy0, oy1) = valid_range(ho, h, ky, stride, padding);
                    for kx in 0..k {
                        let (ox0, ox1) = valid_range(wo, w, kx, stride, padding);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let row = &src[(oy * stride + ky - padding) * w..][..w];
                            let grow = &gp[oy * wo..(oy + 1) * wo];
                            for ox in ox0..ox1 {
                                acc += grow[ox] * row[ox * stride + kx - padding];
                            }
                        }
                        dst[(ci * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    }
}

/// Cross-correlation `[N,C,H,W] x [F,C,k,k] -> [N,F,H',W']`.
pub fn conv2d(
    input: &RealTensor,
    weight: &RealTensor,
    bias: Option<&RealTensor>,
    stride: usize,
    padding: usize,
) -> Result<RealTensor> {
    let (n, c, h, w) = input.dims4()?;
    let (f, wc, k) = kernel_dims(weight)?;
    if wc != c {
        return Err(shape_err(format!(
            "conv2d: input has {c} channels, weight expects {wc}"
        )));
    }
    check_bias(bias, f)?;
    let (ho, wo) = match (conv_out_dim(h, k, stride, padding), conv_out_dim(w, k, stride, padding)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(shape_err(format!("conv2d output would be empty for {h}x{w}, k={k}"))),
    };
    let plane = ho * wo;
    let mut out = vec![0.0; n * f * plane];
    if c.min(f) <= THIN {
        conv2d_direct(
            input.data(),
            weight.data(),
            &mut out,
            n,
            c,
            h,
            w,
            f,
            k,
            stride,
            padding,
            ho,
            wo,
        );
    } else {
        for (ni, dst) in out.chunks_mut(f * plane).enumerate() {
            let x = &input.data()[ni * c * h * w..(ni + 1) * c * h * w];
            let cols = im2col(x, c, h, w, k, stride, padding, ho, wo);
            gemm(f, c * k * k, plane, weight.data(), false, &cols, false, dst, false);
        }
    }
    add_bias(&mut out, bias, plane);
    RealTensor::new(vec![n, f, ho, wo], out)
}

/// Transposed convolution `[N,C,H,W] x [C,F,k,k] -> [N,F,H'',W'']`, the adjoint
/// of [`conv2d`] with the same weight tensor.
pub fn conv_transpose2d(
    input: &RealTensor,
    weight: &RealTensor,
    bias: Option<&RealTensor>,
    stride: usize,
    padding: usize,
) -> Result<RealTensor> {
    let (_, _, h, w) = input.dims4()?;
    let (_, _, k) = kernel_dims(weight)?;
    let (ho, wo) = match (
        conv_transpose_out_dim(h, k, stride, padding),
        conv_transpose_out_dim(w, k, stride, padding),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(shape_err("transposed conv output would be empty")),
    };
    conv_transpose2d_sized(input, weight, bias, stride, padding, ho, wo)
}

/// Transposed convolution onto an explicit output extent; contributions falling
/// outside `out_h x out_w` are dropped. Used for conv2d input gradients when the
/// forward stride did not divide the padded extent evenly.
pub fn conv_transpose2d_sized(
    input: &RealTensor,
    weight: &RealTensor,
    bias: Option<&RealTensor>,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
) -> Result<RealTensor> {
    let (n, c, h, w) = input.dims4()?;
    let (wc, f, k) = kernel_dims(weight)?;
    if wc != c {
        return Err(shape_err(format!(
            "transposed conv: input has {c} channels, weight expects {wc}"
        )));
    }
    if stride == 0 || out_h == 0 || out_w == 0 {
        return Err(shape_err("transposed conv output would be empty"));
    }
    check_bias(bias, f)?;
    let plane = out_h * out_w;
    let mut out = vec![0.0; n * f * plane];
    if c.min(f) <= THIN {
        conv_transpose_direct(
            input.data(),
            weight.data(),
            &mut out,
            n,
            c,
            h,
            w,
            f,
            k,
            stride,
            padding,
            out_h,
            out_w,
        );
        add_bias(&mut out, bias, plane);
        return RealTensor::new(vec![n, f, out_h, out_w], out);
    }
    let mut cols = vec![0.0; f * k * k * h * w];
    for (ni, dst) in out.chunks_mut(f * plane).enumerate() {
        // weight viewed as [C, F*k*k]; patches = W^T x
        let x = &input.data()[ni * c * h * w..(ni + 1) * c * h * w];
        gemm(f * k * k, c, h * w, weight.data(), true, x, false, &mut cols, false);
        col2im(&cols, dst, f, out_h, out_w, k, stride, padding, h, w);
    }
    add_bias(&mut out, bias, plane);
    RealTensor::new(vec![n, f, out_h, out_w], out)
}

/// `dW[g, x, ky, kx] = sum_n sum_o grad[n, g, o] * input[n, x, o*stride + k - padding]`.
///
/// With `(input, grad)` this is the conv2d weight gradient (`[F, C, k, k]`);
/// with the roles swapped it is the transposed-conv weight gradient.
pub fn conv2d_weight_grad(
    input: &RealTensor,
    grad: &RealTensor,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<RealTensor> {
    let (n, c, h, w) = input.dims4()?;
    let (gn, f, ho, wo) = grad.dims4()?;
    if gn != n {
        return Err(shape_err("weight grad batch mismatch"));
    }
    let kk = kernel * kernel;
    let mut out = vec![0.0; f * c * kk];
    if c.min(f) <= THIN {
        weight_grad_direct(
            input.data(),
            grad.data(),
            &mut out,
            n,
            c,
            h,
            w,
            f,
            kernel,
            stride,
            padding,
            ho,
            wo,
        );
        return RealTensor::new(vec![f, c, kernel, kernel], out);
    }
    for ni in 0..n {
        let cols = im2col(
            &input.data()[ni * c * h * w..(ni + 1) * c * h * w],
            c,
            h,
            w,
            kernel,
            stride,
            padding,
            ho,
            wo,
        );
        let g = &grad.data()[ni * f * ho * wo..(ni + 1) * f * ho * wo];
        gemm(f, ho * wo, c * kk, g, false, &cols, true, &mut out, true);
    }
    RealTensor::new(vec![f, c, kernel, kernel], out)
}

/// Per-channel sum over batch and space: the bias gradient of a convolution.
pub fn channel_sums(grad: &RealTensor) -> Result<RealTensor> {
    let (n, f, h, w) = grad.dims4()?;
    let g = grad.data();
    let mut out = vec![0.0; f];
    for ni in 0..n {
        for (fi, o) in out.iter_mut().enumerate() {
            *o += g[(ni * f + fi) * h * w..(ni * f + fi + 1) * h * w].iter().sum::<f64>();
        }
    }
    RealTensor::new(vec![f], out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Nearest integer, ties away from zero.
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// Rounding behaviour of the straight-through estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundMode {
    /// Nearest integer, ties away from zero. Used at inference.
    Deterministic,
    /// Nearest integer plus `u ~ U[-0.5, 0.5)`. Training only.
    Stochastic,
    /// Rounding treated as identity in the forward pass too; used when
    /// checking gradients against finite differences.
    Surrogate,
}

/// Straight-through rounding on a plain tensor.
pub fn round_ste<R: Rng + ?Sized>(x: &RealTensor, mode: RoundMode, rng: &mut R) -> Result<RealTensor> {
    if !x.all_finite() {
        return Err(Error::NonFiniteInput("round_ste"));
    }
    Ok(match mode {
        RoundMode::Deterministic => x.map(round_half_away),
        RoundMode::Surrogate => x.clone(),
        RoundMode::Stochastic => {
            let mut out = x.map(round_half_away);
            for v in out.data_mut() {
                *v += rng.random::<f64>() - 0.5;
            }
            out
        }
    })
}

/// Elementwise functions exposed at the tensor level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Sigmoid,
    Exp,
    Relu,
    Add,
    Sub,
    Mul,
    Div,
}

/// Binary operand pair under the two supported broadcasts: identical shapes,
/// or one side holding a single element.
pub(crate) fn broadcast_binary(a: &RealTensor, b: &RealTensor, f: impl Fn(f64, f64) -> f64) -> Result<RealTensor> {
    if a.shape() == b.shape() {
        a.zip_map(b, f)
    } else if b.is_scalar() {
        let s = b.data()[0];
        Ok(a.map(|x| f(x, s)))
    } else if a.is_scalar() {
        let s = a.data()[0];
        Ok(b.map(|x| f(s, x)))
    } else {
        Err(shape_err(format!(
            "operands {:?} and {:?} are not broadcast compatible",
            a.shape(),
            b.shape()
        )))
    }
}

pub fn elementwise(func: Elementwise, operands: &[&RealTensor]) -> Result<RealTensor> {
    let unary = |n: usize| -> Result<()> {
        if operands.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: operands.len(),
            });
        }
        Ok(())
    };
    match func {
        Elementwise::Sigmoid => {
            unary(1)?;
            Ok(operands[0].map(sigmoid))
        }
        Elementwise::Exp => {
            unary(1)?;
            Ok(operands[0].map(f64::exp))
        }
        Elementwise::Relu => {
            unary(1)?;
            Ok(operands[0].map(|x| x.max(0.0)))
        }
        Elementwise::Add => {
            unary(2)?;
            broadcast_binary(operands[0], operands[1], |a, b| a + b)
        }
        Elementwise::Sub => {
            unary(2)?;
            broadcast_binary(operands[0], operands[1], |a, b| a - b)
        }
        Elementwise::Mul => {
            unary(2)?;
            broadcast_binary(operands[0], operands[1], |a, b| a * b)
        }
        Elementwise::Div => {
            unary(2)?;
            if operands[1].data().iter().any(|&d| d == 0.0) {
                return Err(Error::DivisionByZero);
            }
            broadcast_binary(operands[0], operands[1], |a, b| a / b)
        }
    }
}

/// Mean over the channel axis, `[N,C,H,W] -> [N,1,H,W]`.
pub fn channel_mean(x: &RealTensor) -> Result<RealTensor> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let d = x.data();
    let mut out = vec![0.0; n * hw];
    for ni in 0..n {
        let dst = &mut out[ni * hw..(ni + 1) * hw];
        for ci in 0..c {
            let src = &d[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
            for (o, s) in dst.iter_mut().zip(src) {
                *o += s;
            }
        }
        let inv = c as f64;
        dst.iter_mut().for_each(|v| *v /= inv);
    }
    RealTensor::new(vec![n, 1, h, w], out)
}

/// Max over the channel axis plus the winning channel per site (first wins on ties).
pub fn channel_max(x: &RealTensor) -> Result<(RealTensor, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let d = x.data();
    let mut out = vec![f64::NEG_INFINITY; n * hw];
    let mut arg = vec![0usize; n * hw];
    for ni in 0..n {
        for ci in 0..c {
            let src = &d[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
            for p in 0..hw {
                if src[p] > out[ni * hw + p] {
                    out[ni * hw + p] = src[p];
                    arg[ni * hw + p] = ci;
                }
            }
        }
    }
    Ok((RealTensor::new(vec![n, 1, h, w], out)?, arg))
}

/// Concatenates two `[N,*,H,W]` tensors along channels.
pub fn concat_channels(a: &RealTensor, b: &RealTensor) -> Result<RealTensor> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(shape_err("concat operands differ outside the channel axis"));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * (ca + cb) * hw);
    for ni in 0..n {
        out.extend_from_slice(&a.data()[ni * ca * hw..(ni + 1) * ca * hw]);
        out.extend_from_slice(&b.data()[ni * cb * hw..(ni + 1) * cb * hw]);
    }
    RealTensor::new(vec![n, ca + cb, h, w], out)
}

/// Multiplies `[N,C,H,W]` features by a `[N,1,H,W]` gate broadcast over channels.
pub fn gate_channels(x: &RealTensor, gate: &RealTensor) -> Result<RealTensor> {
    let (n, c, h, w) = x.dims4()?;
    if gate.shape() != [n, 1, h, w] {
        return Err(shape_err(format!(
            "gate {:?} does not match features {:?}",
            gate.shape(),
            x.shape()
        )));
    }
    let hw = h * w;
    let mut out = x.clone();
    let g = gate.data();
    for ni in 0..n {
        for ci in 0..c {
            let dst = &mut out.data_mut()[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
            for (o, gv) in dst.iter_mut().zip(&g[ni * hw..(ni + 1) * hw]) {
                *o *= gv;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> RealTensor {
        RealTensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn identity_kernel_copies() {
        let x = RealTensor::from_fn(&[2, 1, 3, 4], |i| i as f64 * 0.5 - 3.0);
        let w = t(&[1, 1, 1, 1], vec![1.0]);
        let b = t(&[1], vec![0.0]);
        assert_eq!(conv2d(&x, &w, Some(&b), 1, 0).unwrap(), x);
        assert_eq!(conv_transpose2d(&x, &w, Some(&b), 1, 0).unwrap(), x);
    }

    #[test]
    fn all_ones_kernel_sums_nine() {
        let x = RealTensor::full(&[1, 1, 3, 3], 1.0);
        let w = RealTensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 9.0);
    }

    #[test]
    fn stride_two_transpose_scatters_disjoint_blocks() {
        let x = RealTensor::full(&[1, 1, 2, 2], 1.0);
        let w = RealTensor::full(&[1, 1, 2, 2], 1.0);
        let y = conv_transpose2d(&x, &w, None, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn resampling_geometry_halves_and_doubles() {
        assert_eq!(conv_out_dim(32, 4, 2, 1), Some(16));
        assert_eq!(conv_transpose_out_dim(16, 4, 2, 1), Some(32));
        assert_eq!(conv_out_dim(2, 5, 1, 0), None);
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let x = RealTensor::zeros(&[1, 2, 4, 4]);
        let w = RealTensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &w, None, 1, 1), Err(Error::ShapeMismatch(_))));
        let tiny = RealTensor::zeros(&[1, 3, 2, 2]);
        assert!(matches!(conv2d(&tiny, &w, None, 1, 0), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn sigmoid_relu_basics() {
        assert_eq!(sigmoid(0.0), 0.5);
        let r = elementwise(Elementwise::Relu, &[&t(&[2], vec![-3.0, 2.5])]).unwrap();
        assert_eq!(r.data(), &[0.0, 2.5]);
    }

    #[test]
    fn exp_sigmoid_rounds_to_one_two_three() {
        // evaluated independently: e^{sigma(-10)} = 1.0000454, e^{0.5} = 1.6487, e^{sigma(10)} = 2.7181
        let x = t(&[3], vec![-10.0, 0.0, 10.0]);
        let s = elementwise(Elementwise::Sigmoid, &[&x]).unwrap();
        let e = elementwise(Elementwise::Exp, &[&s]).unwrap();
        let expect = [1.000_045_4, 1.648_721_3, 2.718_158_1];
        for (v, x) in e.data().iter().zip(expect) {
            assert!((v - x).abs() < 1e-6, "{v} vs {x}");
        }
        assert_eq!(e.map(round_half_away).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn division_by_exact_zero_errors() {
        let a = t(&[2], vec![1.0, 2.0]);
        let b = t(&[2], vec![1.0, 0.0]);
        assert!(matches!(
            elementwise(Elementwise::Div, &[&a, &b]),
            Err(Error::DivisionByZero)
        ));
        let s = t(&[1], vec![2.0]);
        assert_eq!(elementwise(Elementwise::Div, &[&a, &s]).unwrap().data(), &[0.5, 1.0]);
        let bad = t(&[3], vec![1.0; 3]);
        assert!(elementwise(Elementwise::Add, &[&a, &bad]).is_err());
    }

    #[test]
    fn deterministic_rounding_ties_away_from_zero() {
        let x = t(&[4], vec![1.4, -1.5, 2.5, -0.4]);
        let mut rng = rand::rng();
        let y = round_ste(&x, RoundMode::Deterministic, &mut rng).unwrap();
        assert_eq!(y.data(), &[1.0, -2.0, 3.0, -0.0]);
        let nan = t(&[1], vec![f64::NAN]);
        assert!(round_ste(&nan, RoundMode::Deterministic, &mut rng).is_err());
    }
}
