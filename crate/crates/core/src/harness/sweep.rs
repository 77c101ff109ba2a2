//! Robustness sweeps: every image is embedded once, attacked with every
//! distortion of the grid, and recovered from its pristine stego.
//!
//! Rows go to two CSV files. The main one is a pure function of the model,
//! the images and the seed, so reruns are byte-identical; wall-clock timings
//! live in a sidecar with the same row order.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::metrics::{bit_accuracy, psnr, ssim};
use crate::error::{Error, Result};
use crate::iflow::IIWNParams;
use crate::noisepool::{apply_eval, DistortionSpec};
use crate::numerics::IntTensor;
use crate::pipeline::{embed, extract, recover};

#[derive(Debug, Clone)]
pub struct SweepImage {
    pub id: String,
    pub image: IntTensor,
}

/// One image under one distortion. Quality and payload columns describe the
/// pristine stego and repeat across the distortions of an image; empty cells
/// mean the step that produces them failed (see `error`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub image: String,
    pub distortion: String,
    pub accuracy: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub aux_bits: Option<usize>,
    pub z_bits: Option<usize>,
    pub o_bits: Option<usize>,
    pub overflow_count: Option<usize>,
    pub recovered: Option<bool>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowTiming {
    pub image: String,
    pub distortion: String,
    pub embed_s: f64,
    pub extract_s: f64,
    pub recover_s: f64,
}

/// Comma-separated distortion specs, e.g. `"jpeg:50,blur:1.5:7,identity"`.
pub fn parse_grid(s: &str) -> Result<Vec<DistortionSpec>> {
    let grid = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<DistortionSpec>>>()?;
    if grid.is_empty() {
        return Err(Error::BadParams("empty distortion grid".into()));
    }
    Ok(grid)
}

/// Watermark for image `index`; a pure function of the seed and the index.
pub fn sweep_bits(seed: u64, index: usize, m: usize) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    (0..m).map(|_| rng.random_bool(0.5)).collect()
}

fn attack_rng(seed: u64, index: usize, distortion: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 << 63 | (index as u64) << 24 | distortion as u64);
    rng
}

fn image_rows(
    theta: &IIWNParams,
    index: usize,
    item: &SweepImage,
    grid: &[DistortionSpec],
    seed: u64,
) -> Vec<(EvalRow, RowTiming)> {
    let bits = sweep_bits(seed, index, theta.geometry.bits());
    let blank = |spec: &DistortionSpec, error: String| EvalRow {
        image: item.id.clone(),
        distortion: spec.to_string(),
        accuracy: None,
        psnr: None,
        ssim: None,
        aux_bits: None,
        z_bits: None,
        o_bits: None,
        overflow_count: None,
        recovered: None,
        error,
    };
    let timing = |spec: &DistortionSpec, embed_s, extract_s, recover_s| RowTiming {
        image: item.id.clone(),
        distortion: spec.to_string(),
        embed_s,
        extract_s,
        recover_s,
    };

    let t0 = Instant::now();
    let art = match embed(&item.image, &bits, theta) {
        Ok(a) => a,
        Err(e) => {
            let embed_s = t0.elapsed().as_secs_f64();
            return grid
                .iter()
                .map(|s| (blank(s, e.name().into()), timing(s, embed_s, 0.0, 0.0)))
                .collect();
        }
    };
    let embed_s = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let recovered = recover(&art.stego, theta);
    let recover_s = t1.elapsed().as_secs_f64();
    let (recovered, recover_error) = match recovered {
        Ok((cover, b)) => (cover == item.image && b == bits, String::new()),
        Err(e) => (false, e.name().to_string()),
    };
    let stego_psnr = psnr(&item.image, &art.stego).ok();
    let stego_ssim = ssim(&item.image, &art.stego).ok();

    grid.iter()
        .enumerate()
        .map(|(j, spec)| {
            let mut row = blank(spec, recover_error.clone());
            row.psnr = stego_psnr;
            row.ssim = stego_ssim;
            row.aux_bits = Some(art.aux_bits);
            row.z_bits = Some(art.z_bits);
            row.o_bits = Some(art.o_bits);
            row.overflow_count = Some(art.overflow_count);
            row.recovered = Some(recovered);
            let t2 = Instant::now();
            let attacked = apply_eval(spec, &art.stego, Some(&item.image), &mut attack_rng(seed, index, j))
                .and_then(|noised| extract(&noised, theta))
                .and_then(|(b, _)| bit_accuracy(&bits, &b));
            let extract_s = t2.elapsed().as_secs_f64();
            match attacked {
                Ok(acc) => row.accuracy = Some(acc),
                Err(e) if row.error.is_empty() => row.error = e.name().into(),
                Err(e) => row.error = format!("{};{}", row.error, e.name()),
            }
            (row, timing(spec, embed_s, extract_s, recover_s))
        })
        .collect()
}

/// Rows in image-major, grid-minor order regardless of worker scheduling.
pub fn run_sweep(
    theta: &IIWNParams,
    images: &[SweepImage],
    grid: &[DistortionSpec],
    seed: u64,
) -> (Vec<EvalRow>, Vec<RowTiming>) {
    images
        .par_iter()
        .enumerate()
        .map(|(i, item)| image_rows(theta, i, item, grid, seed))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .unzip()
}
