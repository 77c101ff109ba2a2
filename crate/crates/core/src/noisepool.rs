//! Channel distortions, in two forms: bit-exact on 8-bit images for
//! evaluation, and differentiable on the autodiff tape for training.
//!
//! Borders use mirror reflection without repeating the edge sample
//! (`d c b | a b c d | c b a`). Eval outputs are rounded half away from zero
//! and clipped to [0,255]; train outputs are left unclipped.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Error, Result};
use crate::numerics::ops::round_half_away;
use crate::numerics::{Graph, IntTensor, LinearMap, RealTensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistortionSpec {
    Identity,
    Jpeg {
        quality: u8,
    },
    GaussianBlur {
        sigma: f64,
        kernel: usize,
    },
    /// Standard deviation on the [0,1] intensity scale.
    GaussianNoise {
        sigma: f64,
    },
    SaltPepper {
        p: f64,
    },
    MedianFilter {
        window: usize,
    },
    /// Each stego pixel is replaced by the cover pixel with probability `p`.
    Dropout {
        p: f64,
    },
}

fn bad(msg: impl Into<String>) -> Error {
    Error::BadParams(msg.into())
}

/// Smallest odd kernel covering three standard deviations each side.
pub fn default_blur_kernel(sigma: f64) -> usize {
    2 * (3.0 * sigma).ceil().max(1.0) as usize + 1
}

impl DistortionSpec {
    pub fn blur(sigma: f64) -> Self {
        DistortionSpec::GaussianBlur {
            sigma,
            kernel: default_blur_kernel(sigma),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        match *self {
            DistortionSpec::Identity => Ok(()),
            DistortionSpec::Jpeg { quality } if (1..=100).contains(&quality) => Ok(()),
            DistortionSpec::Jpeg { quality } => Err(bad(format!("JPEG quality {quality} outside 1..=100"))),
            DistortionSpec::GaussianBlur { sigma, kernel } => {
                if !(sigma.is_finite() && sigma > 0.0) {
                    return Err(bad(format!("blur sigma {sigma} must be positive")));
                }
                if kernel < 3 || kernel % 2 == 0 {
                    return Err(bad(format!("blur kernel {kernel} must be odd and >= 3")));
                }
                Ok(())
            }
            DistortionSpec::GaussianNoise { sigma } if sigma.is_finite() && sigma >= 0.0 => Ok(()),
            DistortionSpec::GaussianNoise { sigma } => Err(bad(format!("noise sigma {sigma} invalid"))),
            DistortionSpec::SaltPepper { p } | DistortionSpec::Dropout { p } if prob(p) => Ok(()),
            DistortionSpec::SaltPepper { p } | DistortionSpec::Dropout { p } => {
                Err(bad(format!("probability {p} outside [0,1]")))
            }
            DistortionSpec::MedianFilter { window } if window % 2 == 1 => Ok(()),
            DistortionSpec::MedianFilter { window } => Err(bad(format!("median window {window} must be odd"))),
        }
    }

    /// Pool sampled from during training (identity is added by the sampler).
    pub fn default_pool() -> Vec<DistortionSpec> {
        vec![
            DistortionSpec::Jpeg { quality: 70 },
            DistortionSpec::blur(1.0),
            DistortionSpec::GaussianNoise { sigma: 0.02 },
            DistortionSpec::SaltPepper { p: 0.02 },
            DistortionSpec::MedianFilter { window: 3 },
            DistortionSpec::Dropout { p: 0.3 },
        ]
    }
}

impl fmt::Display for DistortionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistortionSpec::Identity => write!(f, "id"),
            DistortionSpec::Jpeg { quality } => write!(f, "jpeg:{quality}"),
            DistortionSpec::GaussianBlur { sigma, kernel } => write!(f, "blur:{sigma}:{kernel}"),
            DistortionSpec::GaussianNoise { sigma } => write!(f, "gn:{sigma}"),
            DistortionSpec::SaltPepper { p } => write!(f, "sp:{p}"),
            DistortionSpec::MedianFilter { window } => write!(f, "median:{window}"),
            DistortionSpec::Dropout { p } => write!(f, "dropout:{p}"),
        }
    }
}

impl FromStr for DistortionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |i: usize| -> Result<f64> {
            parts
                .get(i)
                .ok_or_else(|| bad(format!("'{s}' is missing a parameter")))?
                .parse::<f64>()
                .map_err(|_| bad(format!("'{s}': bad number")))
        };
        let int = |i: usize| -> Result<usize> {
            parts
                .get(i)
                .ok_or_else(|| bad(format!("'{s}' is missing a parameter")))?
                .parse::<usize>()
                .map_err(|_| bad(format!("'{s}': bad integer")))
        };
        let arity = |n: usize| {
            if parts.len() == n {
                Ok(())
            } else {
                Err(bad(format!("'{s}' expects {} parameter(s)", n - 1)))
            }
        };
        let spec = match parts[0] {
            "id" | "identity" => {
                arity(1)?;
                DistortionSpec::Identity
            }
            "jpeg" => {
                arity(2)?;
                let q = int(1)?;
                DistortionSpec::Jpeg {
                    quality: u8::try_from(q).map_err(|_| bad(format!("JPEG quality {q} outside 1..=100")))?,
                }
            }
            "blur" => match parts.len() {
                2 => DistortionSpec::blur(num(1)?),
                3 => DistortionSpec::GaussianBlur {
                    sigma: num(1)?,
                    kernel: int(2)?,
                },
                _ => return Err(bad(format!("'{s}' expects blur:sigma[:kernel]"))),
            },
            "gn" => {
                arity(2)?;
                DistortionSpec::GaussianNoise { sigma: num(1)? }
            }
            "sp" => {
                arity(2)?;
                DistortionSpec::SaltPepper { p: num(1)? }
            }
            "median" => {
                arity(2)?;
                DistortionSpec::MedianFilter { window: int(1)? }
            }
            "dropout" => {
                arity(2)?;
                DistortionSpec::Dropout { p: num(1)? }
            }
            other => return Err(bad(format!("unknown distortion '{other}'"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Mirror index into `0..n` without repeating the edge sample.
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Normalized Gaussian taps of std `sigma`, centred in a window of `k`.
pub fn gaussian_kernel(sigma: f64, k: usize) -> Vec<f64> {
    let r = (k / 2) as f64;
    let taps: Vec<f64> = (0..k)
        .map(|t| (-(t as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|v| v / s).collect()
}

fn plane_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [.., h, w] if shape.len() >= 2 => Ok((shape[..shape.len() - 2].iter().product(), *h, *w)),
        _ => Err(shape_err(format!("expected [..., H, W], got {shape:?}"))),
    }
}

/// Separable reflect-padded convolution over the last two axes.
#[derive(Debug, Clone)]
pub struct SeparableBlur {
    taps: Vec<f64>,
}

impl SeparableBlur {
    pub fn new(sigma: f64, k: usize) -> Self {
        SeparableBlur {
            taps: gaussian_kernel(sigma, k),
        }
    }

    /// One axis, forward (`y[i] = sum_t w_t x[reflect(i+t-r)]`) or adjoint.
    fn pass(&self, x: &RealTensor, along_rows: bool, adjoint: bool) -> Result<RealTensor> {
        let (planes, h, w) = plane_dims(x.shape())?;
        let r = (self.taps.len() / 2) as isize;
        let n = if along_rows { w } else { h };
        let mut out = vec![0.0; x.len()];
        let src = x.data();
        for pl in 0..planes {
            for a in 0..h {
                for b in 0..w {
                    let (line, pos) = if along_rows { (a, b) } else { (b, a) };
                    let at = |p: usize| {
                        if along_rows {
                            (pl * h + line) * w + p
                        } else {
                            (pl * h + p) * w + line
                        }
                    };
                    let i = at(pos);
                    for (t, &wt) in self.taps.iter().enumerate() {
                        let j = at(reflect(pos as isize + t as isize - r, n));
                        if adjoint {
                            out[j] += wt * src[i];
                        } else {
                            out[i] += wt * src[j];
                        }
                    }
                }
            }
        }
        RealTensor::new(x.shape().to_vec(), out)
    }
}

impl LinearMap for SeparableBlur {
    fn apply(&self, x: &RealTensor) -> Result<RealTensor> {
        self.pass(&self.pass(x, true, false)?, false, false)
    }

    fn adjoint(&self, g: &RealTensor) -> Result<RealTensor> {
        self.pass(&self.pass(g, false, true)?, true, true)
    }
}

/// Orthonormal 8x8 DCT-II basis, `C[u][x]`.
fn dct_basis() -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (u, row) in c.iter_mut().enumerate() {
        let alpha = if u == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        for (x, v) in row.iter_mut().enumerate() {
            *v = alpha * (((2 * x + 1) * u) as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    c
}

/// Blockwise orthonormal DCT over the last two axes (both multiples of 8).
/// Being orthonormal, its adjoint is its inverse.
#[derive(Debug, Clone)]
pub struct BlockDct {
    inverse: bool,
    basis: [[f64; 8]; 8],
}

impl BlockDct {
    pub fn forward() -> Self {
        BlockDct {
            inverse: false,
            basis: dct_basis(),
        }
    }

    pub fn inverse() -> Self {
        BlockDct {
            inverse: true,
            basis: dct_basis(),
        }
    }

    fn run(&self, x: &RealTensor, inverse: bool) -> Result<RealTensor> {
        let (planes, h, w) = plane_dims(x.shape())?;
        if h % 8 != 0 || w % 8 != 0 {
            return Err(shape_err(format!("{h}x{w} is not a multiple of 8")));
        }
        let c = &self.basis;
        // forward: F = C X C^T; inverse: X = C^T F C
        let m = |a: usize, b: usize| if inverse { c[b][a] } else { c[a][b] };
        let src = x.data();
        let mut out = vec![0.0; x.len()];
        let mut tmp = [[0.0; 8]; 8];
        for pl in 0..planes {
            for bi in (0..h).step_by(8) {
                for bj in (0..w).step_by(8) {
                    let at = |u: usize, v: usize| (pl * h + bi + u) * w + bj + v;
                    for (u, row) in tmp.iter_mut().enumerate() {
                        for (v, t) in row.iter_mut().enumerate() {
                            *t = (0..8).map(|k| m(u, k) * src[at(k, v)]).sum();
                        }
                    }
                    for u in 0..8 {
                        for v in 0..8 {
                            out[at(u, v)] = (0..8).map(|k| tmp[u][k] * m(v, k)).sum();
                        }
                    }
                }
            }
        }
        RealTensor::new(x.shape().to_vec(), out)
    }
}

impl LinearMap for BlockDct {
    fn apply(&self, x: &RealTensor) -> Result<RealTensor> {
        self.run(x, self.inverse)
    }

    fn adjoint(&self, g: &RealTensor) -> Result<RealTensor> {
        self.run(g, !self.inverse)
    }
}

const LUMA_TABLE: [[u32; 8]; 8] = [
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
];

/// Luminance quantization table scaled by the usual quality rule.
pub fn quant_table(quality: u8) -> Result<[[u32; 8]; 8]> {
    if !(1..=100).contains(&quality) {
        return Err(bad(format!("JPEG quality {quality} outside 1..=100")));
    }
    let q = quality as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    Ok(LUMA_TABLE.map(|row| row.map(|b| ((b * scale + 50) / 100).clamp(1, 255))))
}

/// Rounds after snapping to a 2^-20 grid, so floating-point noise from the
/// summation order cannot move a value across a half-integer tie.
pub fn snap_round(x: f64) -> f64 {
    const GRID: f64 = (1u64 << 20) as f64;
    round_half_away((x * GRID).round() / GRID)
}

fn to_pixel(v: f64) -> i64 {
    snap_round(v).clamp(0.0, 255.0) as i64
}

fn image_dims(img: &IntTensor) -> Result<(usize, usize, usize)> {
    match img.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(shape_err(format!("expected [C,H,W], got {s:?}"))),
    }
}

/// Real-valued blur of an image, before rounding.
pub fn gaussian_blur_real(img: &RealTensor, sigma: f64, k: usize) -> Result<RealTensor> {
    DistortionSpec::GaussianBlur { sigma, kernel: k }.validate()?;
    SeparableBlur::new(sigma, k).apply(img)
}

pub fn gaussian_blur(img: &IntTensor, sigma: f64, k: usize) -> Result<IntTensor> {
    image_dims(img)?;
    let out = gaussian_blur_real(&img.to_real(), sigma, k)?;
    IntTensor::new(img.shape().to_vec(), out.data().iter().map(|&v| to_pixel(v)).collect())
}

pub fn median_filter(img: &IntTensor, w: usize) -> Result<IntTensor> {
    DistortionSpec::MedianFilter { window: w }.validate()?;
    let (c, h, wd) = image_dims(img)?;
    let r = (w / 2) as isize;
    let src = img.data();
    let mut out = vec![0i64; src.len()];
    let mut win = Vec::with_capacity(w * w);
    for ch in 0..c {
        for i in 0..h {
            for j in 0..wd {
                win.clear();
                for di in -r..=r {
                    let y = reflect(i as isize + di, h);
                    for dj in -r..=r {
                        win.push(src[(ch * h + y) * wd + reflect(j as isize + dj, wd)]);
                    }
                }
                let mid = win.len() / 2;
                out[(ch * h + i) * wd + j] = *win.select_nth_unstable(mid).1;
            }
        }
    }
    IntTensor::new(img.shape().to_vec(), out)
}

/// Gaussian noise, salt-and-pepper or dropout on an 8-bit image.
pub fn pixel_noise<R: Rng + ?Sized>(
    img: &IntTensor,
    spec: &DistortionSpec,
    cover: Option<&IntTensor>,
    rng: &mut R,
) -> Result<IntTensor> {
    spec.validate()?;
    image_dims(img)?;
    let src = img.data();
    let data: Vec<i64> = match *spec {
        DistortionSpec::GaussianNoise { sigma } => src
            .iter()
            .map(|&v| {
                let n: f64 = rng.sample(StandardNormal);
                to_pixel(v as f64 + sigma * 255.0 * n)
            })
            .collect(),
        DistortionSpec::SaltPepper { p } => src
            .iter()
            .map(|&v| {
                if rng.random_bool(p) {
                    if rng.random_bool(0.5) {
                        255
                    } else {
                        0
                    }
                } else {
                    v
                }
            })
            .collect(),
        DistortionSpec::Dropout { p } => {
            let cover = cover.ok_or(Error::MissingCover)?;
            if cover.shape() != img.shape() {
                return Err(shape_err(format!(
                    "cover {:?} vs stego {:?}",
                    cover.shape(),
                    img.shape()
                )));
            }
            src.iter()
                .zip(cover.data())
                .map(|(&v, &c)| if rng.random_bool(p) { c } else { v })
                .collect()
        }
        other => return Err(bad(format!("{other} is not a pixel-noise distortion"))),
    };
    IntTensor::new(img.shape().to_vec(), data)
}

/// Baseline JPEG luma path per channel: level shift, DCT, quantize,
/// dequantize, inverse DCT. Sides that are not multiples of 8 are
/// reflect-padded and cropped back.
pub fn jpeg_transcode(img: &IntTensor, quality: u8) -> Result<IntTensor> {
    let table = quant_table(quality)?;
    let (c, h, w) = image_dims(img)?;
    let (ph, pw) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
    let src = img.data();
    let padded = RealTensor::from_fn(&[c, ph, pw], |k| {
        let (ch, i, j) = (k / (ph * pw), k / pw % ph, k % pw);
        src[(ch * h + reflect(i as isize, h)) * w + reflect(j as isize, w)] as f64 - 128.0
    });
    let coeffs = BlockDct::forward().apply(&padded)?;
    let quantized = RealTensor::from_fn(&[c, ph, pw], |k| {
        let q = table[k / pw % 8][k % 8] as f64;
        snap_round(coeffs.data()[k] / q) * q
    });
    let back = BlockDct::inverse().apply(&quantized)?;
    let out = IntTensor::from_fn(&[c, h, w], |k| {
        let (ch, i, j) = (k / (h * w), k / w % h, k % w);
        to_pixel(back.data()[(ch * ph + i) * pw + j] + 128.0)
    });
    Ok(out)
}

/// Eval-mode distortion of an 8-bit `[C,H,W]` image.
pub fn apply_eval<R: Rng + ?Sized>(
    spec: &DistortionSpec,
    stego: &IntTensor,
    cover: Option<&IntTensor>,
    rng: &mut R,
) -> Result<IntTensor> {
    spec.validate()?;
    match *spec {
        DistortionSpec::Identity => Ok(stego.clone()),
        DistortionSpec::Jpeg { quality } => jpeg_transcode(stego, quality),
        DistortionSpec::GaussianBlur { sigma, kernel } => gaussian_blur(stego, sigma, kernel),
        DistortionSpec::MedianFilter { window } => median_filter(stego, window),
        _ => pixel_noise(stego, spec, cover, rng),
    }
}

fn tiled(shape: &[usize], f: impl Fn(usize, usize) -> f64) -> Result<RealTensor> {
    let (_, h, w) = plane_dims(shape)?;
    Ok(RealTensor::from_fn(shape, |k| f(k / w % h, k % w)))
}

/// Train-mode distortion of a `[B,C,H,W]` tensor on the tape. Randomness is
/// drawn from the graph's generator.
pub fn apply_train(spec: &DistortionSpec, g: &mut Graph, x: Var, cover: Option<Var>) -> Result<Var> {
    spec.validate()?;
    let shape = g.shape(x).to_vec();
    match *spec {
        DistortionSpec::Identity => Ok(x),
        DistortionSpec::GaussianBlur { sigma, kernel } => g.linear(x, Arc::new(SeparableBlur::new(sigma, kernel))),
        DistortionSpec::MedianFilter { window: 1 } => Ok(x),
        DistortionSpec::MedianFilter { window } => {
            g.linear(x, Arc::new(SeparableBlur::new(window as f64 / 6.0, window)))
        }
        DistortionSpec::Jpeg { quality } => {
            let table = quant_table(quality)?;
            let inv_q = g.constant(tiled(&shape, |i, j| 1.0 / table[i % 8][j % 8] as f64)?);
            let q = g.constant(tiled(&shape, |i, j| table[i % 8][j % 8] as f64)?);
            let shifted = g.affine(x, 1.0, -128.0);
            let coeffs = g.linear(shifted, Arc::new(BlockDct::forward()))?;
            let scaled = g.mul(coeffs, inv_q)?;
            let rounded = g.round_ste(scaled)?;
            let dequant = g.mul(rounded, q)?;
            let back = g.linear(dequant, Arc::new(BlockDct::inverse()))?;
            Ok(g.affine(back, 1.0, 128.0))
        }
        DistortionSpec::GaussianNoise { sigma } => {
            let rng = g.rng();
            let noise = RealTensor::from_fn(&shape, |_| sigma * 255.0 * rng.sample::<f64, _>(StandardNormal));
            let n = g.constant(noise);
            g.add(x, n)
        }
        DistortionSpec::SaltPepper { p } => {
            let rng = g.rng();
            let mut keep = Vec::with_capacity(shape.iter().product());
            let mut fill = Vec::with_capacity(keep.capacity());
            for _ in 0..keep.capacity() {
                let hit = rng.random_bool(p);
                keep.push(if hit { 0.0 } else { 1.0 });
                fill.push(if hit && rng.random_bool(0.5) { 255.0 } else { 0.0 });
            }
            let keep = g.constant(RealTensor::new(shape.clone(), keep)?);
            let fill = g.constant(RealTensor::new(shape, fill)?);
            let kept = g.mul(x, keep)?;
            g.add(kept, fill)
        }
        DistortionSpec::Dropout { p } => {
            let cover = cover.ok_or(Error::MissingCover)?;
            let rng = g.rng();
            let mask: Vec<f64> = (0..shape.iter().product::<usize>())
                .map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 })
                .collect();
            let keep = RealTensor::new(shape.clone(), mask.iter().map(|m| 1.0 - m).collect())?;
            let take = g.constant(RealTensor::new(shape, mask)?);
            let keep = g.constant(keep);
            let a = g.mul(x, keep)?;
            let b = g.mul(cover, take)?;
            g.add(a, b)
        }
    }
}
