//! Image fidelity and extraction metrics.

use crate::error::{shape_err, Error, Result};
use crate::numerics::{IntTensor, RealTensor};

const PEAK: f64 = 255.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

/// Peak signal-to-noise ratio in dB for 8-bit data; infinite for identical inputs.
pub fn psnr_real(a: &RealTensor, b: &RealTensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::BadParams("PSNR of an empty image".into()));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (PEAK * PEAK / mse).log10()
    })
}

pub fn psnr(a: &IntTensor, b: &IntTensor) -> Result<f64> {
    psnr_real(&a.to_real(), &b.to_real())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = k.iter().enumerate().map(|(t, &kt)| kt * plane[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = k.iter().enumerate().map(|(t, &kt)| kt * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// averaged over valid window positions and then over channels.
pub fn ssim(a: &IntTensor, b: &IntTensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (c, h, w) = match a.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(shape_err(format!("expected [C,H,W], got {s:?}"))),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::BadParams(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}"
        )));
    }
    let k = gaussian_window();
    let c1 = (0.01 * PEAK).powi(2);
    let c2 = (0.03 * PEAK).powi(2);
    let mut total = 0.0;
    for ch in 0..c {
        let range = ch * h * w..(ch + 1) * h * w;
        let x: Vec<f64> = a.data()[range.clone()].iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.data()[range].iter().map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let mxx = filter_valid(&prod(&x, &x), h, w, &k);
        let myy = filter_valid(&prod(&y, &y), h, w, &k);
        let mxy = filter_valid(&prod(&x, &y), h, w, &k);
        let n = mx.len();
        let sum: f64 = (0..n)
            .map(|i| {
                let (ux, uy) = (mx[i], my[i]);
                let (vx, vy, cov) = (mxx[i] - ux * ux, myy[i] - uy * uy, mxy[i] - ux * uy);
                ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
            })
            .sum();
        total += sum / n as f64;
    }
    Ok(total / c as f64)
}

/// Fraction of positions where the two bit strings agree.
pub fn bit_accuracy(expected: &[bool], actual: &[bool]) -> Result<f64> {
    if expected.len() != actual.len() {
        return Err(Error::LengthMismatch {
            expected: expected.len(),
            actual: actual.len(),
        });
    }
    if expected.is_empty() {
        return Err(Error::BadParams("accuracy of zero bits".into()));
    }
    let same = expected.iter().zip(actual).filter(|(a, b)| a == b).count();
    Ok(same as f64 / expected.len() as f64)
}
