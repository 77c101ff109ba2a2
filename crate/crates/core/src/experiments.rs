//! Ablations on the toy configuration. Every run trains from a seed, then
//! embeds seeded watermarks into its own training covers and reports what the
//! two-stage pipeline produced. Runs of one seed share covers and watermarks, so
//! a grid compares weights and nothing else.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::metrics::{bit_accuracy, psnr};
use crate::iflow::IIWNParams;
use crate::numerics::IntTensor;
use crate::pipeline::{extract, network_stage};
use crate::rdh::pee_embed;
use crate::training::{synthetic_scenes, EpochMetrics, ScheduleConfig, TrainConfig, Trainer};

/// Penalty weights compared by [`ablate_penalty`].
pub const PENALTY_GRID: [f64; 4] = [0.0, 1e2, 1e4, 1e6];
/// Latent regularization weights compared by [`ablate_z_reg`].
pub const Z_REG_GRID: [f64; 2] = [0.0, 1e-3];

/// 32x32 gray covers, an 8x8 map, two coupling layers of width 8.
///
/// A toy run takes 1600 optimizer steps, so the second-moment average is
/// shortened to about 100 steps: with the usual 1000 the large gradients of
/// the first epochs, when the fresh network pushes pixels out of range and the
/// penalty fires, keep the step size small for most of the run. The schedule
/// only discounts after five error-free epochs (delta below one bit in 1024).
pub fn toy_config() -> TrainConfig {
    TrainConfig {
        epochs: 200,
        batch_size: 2,
        learning_rate: 2e-3,
        beta2: 0.99,
        image_side: 32,
        channels: 1,
        map_side: 8,
        layers: 2,
        n_feat: 8,
        train_images: 16,
        schedule: ScheduleConfig {
            delta: 1e-4,
            ..ScheduleConfig::default()
        },
        ..TrainConfig::default()
    }
}

/// Tone-curve swing of the penalty ablation covers. Rail-free covers never
/// overflow, so the penalty would have nothing to act on; at this swing about
/// 0.6% of the pixels sit on a rail. At 1% the penalized runs stop learning
/// the watermark.
pub const PENALTY_ABLATION_SWING: f64 = 250.0;

/// The toy configuration on covers that touch the rails.
pub fn penalty_config() -> TrainConfig {
    TrainConfig {
        cover_swing: PENALTY_ABLATION_SWING,
        ..toy_config()
    }
}

/// Covers for a run; a function of the seed only.
pub fn run_covers(cfg: &TrainConfig) -> Vec<IntTensor> {
    synthetic_scenes(
        cfg.train_images,
        cfg.image_side,
        cfg.channels,
        cfg.cover_swing,
        cfg.seed.wrapping_add(100),
    )
}

/// One trained model measured on its training covers. Sizes and counts are
/// totals over the covers; quality figures are means. The final-stego figures
/// cover only the covers whose auxiliary stream fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub lambda_p: f64,
    pub lambda_z: f64,
    pub final_lambda_w: f64,
    pub train_acc: f64,
    /// Clean extraction accuracy from the final stego.
    pub accuracy: f64,
    /// Network stego after clipping, before reversible embedding.
    pub network_psnr: f64,
    /// Final stego.
    pub psnr: f64,
    pub overflow_count: usize,
    pub o_bits: usize,
    pub z_bits: usize,
    pub z_min: i64,
    pub z_max: i64,
    pub max_abs_z: i64,
    /// Covers whose auxiliary stream exceeded the reversible capacity.
    pub unembeddable: usize,
}

/// Seeded watermark for cover `index`, shared by every run of a seed.
fn run_bits(seed: u64, index: usize, m: usize) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6162_6c61_7465);
    rng.set_stream(index as u64);
    (0..m).map(|_| rng.random_bool(0.5)).collect()
}

/// A trained model, its measurements and its per-epoch metrics.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub summary: RunSummary,
    pub params: IIWNParams,
    pub trace: Vec<EpochMetrics>,
}

/// Trains `cfg` on [`run_covers`] and measures the result.
pub fn train_and_measure(cfg: &TrainConfig) -> Result<TrainedRun> {
    let covers = run_covers(cfg);
    let mut trainer = Trainer::new(cfg.clone())?;
    let trace = trainer.run(&covers, |_| {})?;
    let last = trace.last().ok_or_else(|| Error::Config("no epochs".into()))?;
    if !last.total.is_finite() {
        return Err(Error::NonFiniteInput("final loss"));
    }
    let theta = &trainer.params;
    let mut s = RunSummary {
        seed: cfg.seed,
        lambda_p: cfg.weights.lambda_p,
        lambda_z: cfg.weights.lambda_z,
        final_lambda_w: trainer.schedule.lambda_w,
        train_acc: last.acc,
        accuracy: 0.0,
        network_psnr: 0.0,
        psnr: 0.0,
        overflow_count: 0,
        o_bits: 0,
        z_bits: 0,
        z_min: i64::MAX,
        z_max: i64::MIN,
        max_abs_z: 0,
        unembeddable: 0,
    };
    for (i, cover) in covers.iter().enumerate() {
        let bits = run_bits(cfg.seed, i, theta.geometry.bits());
        let net = network_stage(cover, &bits, theta)?;
        s.network_psnr += psnr(cover, &net.clipped)?;
        s.overflow_count += net.overflow_count;
        s.o_bits += net.o_bits;
        s.z_bits += net.z_bits;
        s.z_min = s.z_min.min(net.z_min);
        s.z_max = s.z_max.max(net.z_max);
        match pee_embed(&net.clipped, &net.aux) {
            Ok(rdh) => {
                s.accuracy += bit_accuracy(&bits, &extract(&rdh.image, theta)?.0)?;
                s.psnr += psnr(cover, &rdh.image)?;
            }
            Err(Error::CapacityExceeded { .. }) => s.unembeddable += 1,
            Err(e) => return Err(e),
        }
    }
    let n = covers.len() as f64;
    let embedded = (covers.len() - s.unembeddable).max(1) as f64;
    s.accuracy /= embedded;
    s.network_psnr /= n;
    s.psnr /= embedded;
    s.max_abs_z = s.z_min.abs().max(s.z_max.abs());
    Ok(TrainedRun {
        summary: s,
        params: trainer.params,
        trace,
    })
}

/// One run per (seed, penalty weight), with its per-epoch metrics.
pub fn penalty_grid(base: &TrainConfig, seeds: &[u64], grid: &[f64]) -> Result<Vec<TrainedRun>> {
    let mut out = Vec::with_capacity(seeds.len() * grid.len());
    for &seed in seeds {
        for &lambda_p in grid {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.weights.lambda_p = lambda_p;
            out.push(train_and_measure(&cfg)?);
        }
    }
    Ok(out)
}

/// PSNR, overflow count and overflow-map bits per penalty weight.
pub fn ablate_penalty(base: &TrainConfig, seeds: &[u64], grid: &[f64]) -> Result<Vec<RunSummary>> {
    Ok(penalty_grid(base, seeds, grid)?
        .into_iter()
        .map(|r| r.summary)
        .collect())
}

/// Latent range and z-section bits with and without latent regularization.
pub fn ablate_z_reg(base: &TrainConfig, seeds: &[u64]) -> Result<Vec<RunSummary>> {
    let mut out = Vec::with_capacity(seeds.len() * Z_REG_GRID.len());
    for &seed in seeds {
        for lambda_z in Z_REG_GRID {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.weights.lambda_z = lambda_z;
            out.push(train_and_measure(&cfg)?.summary);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub seed: u64,
    pub lambda_p: f64,
    pub epoch: usize,
    /// Weight in effect during the epoch.
    pub lambda_w: f64,
    /// Number of discounts applied before the epoch.
    pub discounts: u32,
    pub acc: f64,
}

/// Number of discounts `k` with `lambda_w = initial * discount^k`, if any.
pub fn discount_count(lambda_w: f64, initial: f64, discount: f64) -> Option<u32> {
    let k = ((lambda_w / initial).ln() / discount.ln()).round();
    if !(0.0..=f64::from(u32::MAX)).contains(&k) {
        return None;
    }
    let k = k as u32;
    let expected = initial * discount.powi(k as i32);
    ((lambda_w - expected).abs() <= 1e-9 * expected).then_some(k)
}

fn trace_rows(cfg: &TrainConfig, trace: &[EpochMetrics]) -> Result<Vec<TraceRow>> {
    let (initial, discount) = (cfg.weights.lambda_w, cfg.schedule.discount);
    trace
        .iter()
        .map(|m| {
            let discounts = discount_count(m.lambda_w, initial, discount)
                .ok_or_else(|| Error::BadParams(format!("lambda_w {} off the geometric ladder", m.lambda_w)))?;
            Ok(TraceRow {
                seed: cfg.seed,
                lambda_p: cfg.weights.lambda_p,
                epoch: m.epoch,
                lambda_w: m.lambda_w,
                discounts,
                acc: m.acc,
            })
        })
        .collect()
}

/// Per-epoch extraction weight for every (seed, penalty weight) run.
pub fn trace_lambda_w(base: &TrainConfig, seeds: &[u64], grid: &[f64]) -> Result<Vec<TraceRow>> {
    traces_of(base, &penalty_grid(base, seeds, grid)?)
}

/// Trace rows of runs already made by [`penalty_grid`].
pub fn traces_of(base: &TrainConfig, runs: &[TrainedRun]) -> Result<Vec<TraceRow>> {
    let mut rows = Vec::new();
    for run in runs {
        let mut cfg = base.clone();
        cfg.seed = run.summary.seed;
        cfg.weights.lambda_p = run.summary.lambda_p;
        rows.extend(trace_rows(&cfg, &run.trace)?);
    }
    Ok(rows)
}

/// Summary of the run with the given seed and penalty/regularization weight.
pub fn find_run(runs: &[RunSummary], seed: u64, pick: impl Fn(&RunSummary) -> bool) -> Option<&RunSummary> {
    runs.iter().find(|r| r.seed == seed && pick(r))
}

/// Seeds on which the strongest penalty gives fewer overflow bits and a
/// higher network stego PSNR than no penalty. The network stego is compared
/// because the final one only exists where the auxiliary stream fits.
pub fn penalty_direction_holds(runs: &[RunSummary], seeds: &[u64], strong: f64) -> Vec<bool> {
    seeds
        .iter()
        .map(|&seed| {
            match (
                find_run(runs, seed, |r| r.lambda_p == strong),
                find_run(runs, seed, |r| r.lambda_p == 0.0),
            ) {
                (Some(hi), Some(lo)) => hi.o_bits < lo.o_bits && hi.network_psnr > lo.network_psnr,
                _ => false,
            }
        })
        .collect()
}

/// Seeds on which latent regularization gives a smaller latent range and
/// fewer z bits.
pub fn z_reg_direction_holds(runs: &[RunSummary], seeds: &[u64]) -> Vec<bool> {
    seeds
        .iter()
        .map(|&seed| {
            match (
                find_run(runs, seed, |r| r.lambda_z > 0.0),
                find_run(runs, seed, |r| r.lambda_z == 0.0),
            ) {
                (Some(reg), Some(free)) => reg.max_abs_z < free.max_abs_z && reg.z_bits < free.z_bits,
                _ => false,
            }
        })
        .collect()
}

/// A trace that never rises, sits on the geometric ladder, and has no
/// discount in its final `tail` epochs (the epoch before them included, since
/// a row records the weight after that epoch's update).
pub fn trace_is_stable(rows: &[TraceRow], tail: usize) -> bool {
    if rows.len() <= tail {
        return false;
    }
    let monotone = rows.windows(2).all(|w| w[1].lambda_w <= w[0].lambda_w);
    let last = &rows[rows.len() - 1];
    let settled = rows[rows.len() - tail - 1..]
        .iter()
        .all(|r| r.discounts == last.discounts);
    monotone && settled
}
