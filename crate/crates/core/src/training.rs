//! Losses, the adaptive extraction-loss weight, AdamW and the training loop
//! over encoder, noise layer and decoder.
//!
//! One batch records the forward map, a distortion sampled uniformly from
//! the pool plus identity, and the inverse map fed with the noised stego and a
//! rounded standard-normal latent. Rounding on the tape is stochastic.

use std::collections::VecDeque;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::harness::metrics::bit_accuracy;
use crate::iflow::{graph_forward, graph_inverse, map_to_bits, CouplingParams, Geometry, IIWNParams};
use crate::noisepool::{apply_train, DistortionSpec};
use crate::numerics::{Graph, IntTensor, RealTensor, RoundMode, Tensor, Var};

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_l: f64,
    pub lambda_z: f64,
    pub lambda_p: f64,
    pub lambda_w: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_s: 1.0,
            lambda_l: 5.0,
            lambda_z: 1e-3,
            lambda_p: 1e6,
            lambda_w: 1e4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_s,
            self.lambda_l,
            self.lambda_z,
            self.lambda_p,
            self.lambda_w,
        ];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(config_err(format!("loss weights must be finite and >= 0: {all:?}")))
        }
    }
}

/// Extra image-quality term on `(stego, cover)`; the default contributes 0.
pub type PerceptualHook = dyn Fn(&mut Graph, Var, Var) -> Result<Var> + Sync;

/// Scalar loss nodes of one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub stego: Var,
    pub latent: Var,
    pub logits: Var,
    pub l_s: Var,
    pub l_p: Var,
    pub l_z: Var,
    pub l_w: Var,
    pub l_l: Var,
    pub total: Var,
}

/// `mean(relu(x - 255)^2) + mean(relu(-x)^2)`.
pub fn penalty_loss(g: &mut Graph, x: Var) -> Result<Var> {
    let over = g.affine(x, 1.0, -255.0);
    let over = g.relu(over);
    let under = g.affine(x, -1.0, 0.0);
    let under = g.relu(under);
    let o2 = g.mul(over, over)?;
    let u2 = g.mul(under, under)?;
    let a = g.mean(o2);
    let b = g.mean(u2);
    g.add(a, b)
}

/// Mean of squares.
fn mean_square(g: &mut Graph, x: Var) -> Result<Var> {
    let sq = g.mul(x, x)?;
    Ok(g.mean(sq))
}

/// Records every loss term for covers `[B,C,H,W]` and maps `[B,1,L,L]`.
#[allow(clippy::too_many_arguments)]
pub fn compute_losses(
    g: &mut Graph,
    cover: Var,
    map: Var,
    layers: &[CouplingParams<Var>],
    geometry: &Geometry,
    weights: &LossWeights,
    noise: &DistortionSpec,
    perceptual: Option<&PerceptualHook>,
) -> Result<LossParts> {
    let (stego, latent) = graph_forward(g, cover, map, layers, geometry)?;
    let l_s = g.mse(stego, cover)?;
    let l_p = penalty_loss(g, stego)?;
    let l_z = mean_square(g, latent)?;

    let noised = apply_train(noise, g, stego, Some(cover))?;
    let z_shape = g.shape(latent).to_vec();
    let rng = g.rng();
    let z_hat = RealTensor::from_fn(&z_shape, |_| rng.sample::<f64, _>(StandardNormal).round());
    let z_hat = g.constant(z_hat);
    let (_, logits) = graph_inverse(g, noised, z_hat, layers, geometry)?;
    let l_w = g.mse(logits, map)?;
    let l_l = match perceptual {
        Some(hook) => hook(g, stego, cover)?,
        None => g.constant(RealTensor::scalar(0.0)),
    };

    let mut total = g.affine(l_s, weights.lambda_s, 0.0);
    for (term, w) in [
        (l_l, weights.lambda_l),
        (l_z, weights.lambda_z),
        (l_p, weights.lambda_p),
        (l_w, weights.lambda_w),
    ] {
        let scaled = g.affine(term, w, 0.0);
        total = g.add(total, scaled)?;
    }
    Ok(LossParts {
        stego,
        latent,
        logits,
        l_s,
        l_p,
        l_z,
        l_w,
        l_l,
        total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Tolerable extraction error.
    pub delta: f64,
    /// Discount applied to the extraction weight on each trigger.
    pub discount: f64,
    /// Number of epoch accuracies averaged.
    pub window: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            delta: 0.01,
            discount: 0.75,
            window: 5,
        }
    }
}

/// Decays the extraction weight once the windowed accuracy exceeds `1 - delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleState {
    pub config: ScheduleConfig,
    pub window: VecDeque<f64>,
    pub lambda_w: f64,
}

impl ScheduleState {
    pub fn new(config: ScheduleConfig, lambda_w: f64) -> Result<Self> {
        let ScheduleConfig {
            delta,
            discount,
            window,
        } = config;
        if !(delta > 0.0 && delta < 1.0) || !(discount > 0.0 && discount < 1.0) || window == 0 {
            return Err(config_err(format!("invalid schedule {config:?}")));
        }
        Ok(ScheduleState {
            config,
            window: VecDeque::with_capacity(window),
            lambda_w,
        })
    }

    /// Records one epoch accuracy; returns whether the weight was discounted.
    pub fn adapt_lambda_w(&mut self, epoch_acc: f64) -> Result<bool> {
        if !(0.0..=1.0).contains(&epoch_acc) {
            return Err(Error::BadParams(format!("accuracy {epoch_acc} outside [0,1]")));
        }
        if self.window.len() == self.config.window {
            self.window.pop_front();
        }
        self.window.push_back(epoch_acc);
        let full = self.window.len() == self.config.window;
        let mean = self.window.iter().sum::<f64>() / self.window.len() as f64;
        if full && mean > 1.0 - self.config.delta {
            self.lambda_w *= self.config.discount;
            self.window.clear();
            return Ok(true);
        }
        Ok(false)
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<RealTensor>,
    v: Vec<RealTensor>,
}

impl AdamW {
    pub fn new(shapes: &[&[usize]], lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) || !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
            return Err(config_err(format!(
                "invalid optimizer settings lr={lr} b1={beta1} b2={beta2} eps={eps}"
            )));
        }
        Ok(AdamW {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: shapes.iter().map(|s| RealTensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| RealTensor::zeros(s)).collect(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn optimizer_step(&mut self, params: &mut [&mut RealTensor], grads: &[RealTensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::LengthMismatch {
                expected: self.m.len(),
                actual: params.len().min(grads.len()),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(shape_err(format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                pd[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * pd[i]);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub image_side: usize,
    pub channels: usize,
    pub map_side: usize,
    pub layers: usize,
    pub n_feat: usize,
    /// Synthetic covers generated when no image directory is given.
    pub train_images: usize,
    /// Tone-curve swing of those covers; above 128 some pixels saturate.
    pub cover_swing: f64,
    /// Distortions in text form; identity is always added. Empty trains clean.
    pub noise_pool: Vec<String>,
    pub weights: LossWeights,
    pub schedule: ScheduleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 200,
            batch_size: 8,
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            image_side: 32,
            channels: 1,
            map_side: 8,
            layers: 2,
            n_feat: 8,
            train_images: 16,
            cover_swing: RAIL_FREE_SWING,
            noise_pool: Vec::new(),
            weights: LossWeights::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.image_side, self.channels, self.map_side, self.layers, self.n_feat)
    }

    pub fn pool(&self) -> Result<Vec<DistortionSpec>> {
        self.noise_pool.iter().map(|s| s.parse()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.train_images == 0 {
            return Err(config_err("epochs, batch_size and train_images must be positive"));
        }
        if !(self.cover_swing > 0.0 && self.cover_swing.is_finite()) {
            return Err(config_err(format!("cover swing {} must be positive", self.cover_swing)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        self.geometry()?;
        self.pool()?;
        self.weights.validate()?;
        ScheduleState::new(self.schedule, self.weights.lambda_w)?;
        Ok(())
    }
}

/// Per-epoch means; `acc` is the mean per-sample bit accuracy under the
/// sampled distortions and `psnr` is computed from the pooled clipped-stego MSE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    #[serde(rename = "L_s")]
    pub l_s: f64,
    #[serde(rename = "L_p")]
    pub l_p: f64,
    #[serde(rename = "L_z")]
    pub l_z: f64,
    #[serde(rename = "L_w")]
    pub l_w: f64,
    pub total: f64,
    pub acc: f64,
    pub psnr: f64,
    /// Extraction weight in force during the epoch.
    pub lambda_w: f64,
}

pub fn write_metrics_csv<W: Write>(rows: &[EpochMetrics], out: W) -> Result<()> {
    crate::harness::write_csv(rows, out)
}

/// Smooth random scene: a few oriented sinusoids, a gradient and a bright or
/// dark blob, with mild noise, passed through the tone curve
/// `128 + swing * tanh((v - 128) / swing)` and clipped to [0, 255]. A swing
/// below 128 keeps every pixel off the rails; larger swings saturate the
/// brightest and darkest regions.
pub fn synthetic_scene<R: Rng + ?Sized>(side: usize, channels: usize, swing: f64, rng: &mut R) -> IntTensor {
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(20.0..60.0),
                rng.random_range(0.05..0.5),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let (gx, gy): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    let (bx, by) = (rng.random_range(0.0..side as f64), rng.random_range(0.0..side as f64));
    let (br, bamp): (f64, f64) = (
        rng.random_range(2.0..side as f64 / 3.0),
        rng.random_range(-120.0..120.0),
    );
    let offset: f64 = rng.random_range(90.0..165.0);
    let noise: Vec<f64> = (0..channels * side * side)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    IntTensor::from_fn(&[channels, side, side], |k| {
        let (c, i, j) = (k / (side * side), (k / side % side) as f64, (k % side) as f64);
        let mut v = offset + gx * (i - side as f64 / 2.0) + gy * (j - side as f64 / 2.0);
        for (amp, freq, theta, phase) in &waves {
            v += amp * (freq * (i * theta.cos() + j * theta.sin()) + phase + c as f64).sin();
        }
        let d2 = (i - bx).powi(2) + (j - by).powi(2);
        v += bamp * (-d2 / (2.0 * br * br)).exp();
        let v = 128.0 + swing * ((v + noise[k] - 128.0) / swing).tanh();
        (v.round() as i64).clamp(0, 255)
    })
}

/// Tone-curve swing of the default synthetic covers. A map-only up subnet
/// cannot see where rails are, so rail pixels in every cover would let a strong
/// overflow penalty pin its output at zero.
pub const RAIL_FREE_SWING: f64 = 100.0;

/// Rail-free synthetic scene.
pub fn synthetic_cover<R: Rng + ?Sized>(side: usize, channels: usize, rng: &mut R) -> IntTensor {
    synthetic_scene(side, channels, RAIL_FREE_SWING, rng)
}

pub fn synthetic_scenes(n: usize, side: usize, channels: usize, swing: f64, seed: u64) -> Vec<IntTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| synthetic_scene(side, channels, swing, &mut rng))
        .collect()
}

pub fn synthetic_covers(n: usize, side: usize, channels: usize, seed: u64) -> Vec<IntTensor> {
    synthetic_scenes(n, side, channels, RAIL_FREE_SWING, seed)
}

/// `[C,H,W]` items to one `[B,C,H,W]` tensor.
fn batch_tensor(items: &[RealTensor]) -> Result<RealTensor> {
    let batched = items
        .iter()
        .map(|t| {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            t.clone().reshape(&shape)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&batched)
}

fn random_bits<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(0.5)).collect()
}

/// Owns the parameters, optimizer and schedule of one run.
pub struct Trainer {
    pub config: TrainConfig,
    pub params: IIWNParams,
    pub schedule: ScheduleState,
    optimizer: AdamW,
    pool: Vec<DistortionSpec>,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = IIWNParams::init(config.geometry()?, config.seed)?;
        Self::with_params(config, params)
    }

    pub fn with_params(config: TrainConfig, params: IIWNParams) -> Result<Self> {
        config.validate()?;
        if params.geometry != config.geometry()? {
            return Err(config_err("checkpoint geometry differs from the config"));
        }
        let shapes: Vec<&[usize]> = params.tensors().iter().map(|t| t.shape()).collect();
        let optimizer = AdamW::new(
            &shapes,
            config.learning_rate,
            config.beta1,
            config.beta2,
            config.epsilon,
            config.weight_decay,
        )?;
        let mut pool = config.pool()?;
        pool.push(DistortionSpec::Identity);
        let schedule = ScheduleState::new(config.schedule, config.weights.lambda_w)?;
        // distinct stream from the parameter initialization
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7472_6169_6e00_0000);
        Ok(Trainer {
            config,
            params,
            schedule,
            optimizer,
            pool,
            rng,
            epoch: 0,
        })
    }

    /// One pass over `covers` in a seeded random order.
    pub fn train_epoch(&mut self, covers: &[IntTensor]) -> Result<EpochMetrics> {
        let geo = self.params.geometry;
        if covers.is_empty() {
            return Err(Error::BadParams("empty training set".into()));
        }
        if let Some(c) = covers.iter().find(|c| c.shape() != geo.image_shape()) {
            return Err(shape_err(format!(
                "cover {:?} vs geometry {:?}",
                c.shape(),
                geo.image_shape()
            )));
        }
        let mut order: Vec<usize> = (0..covers.len()).collect();
        order.shuffle(&mut self.rng);
        let mut weights = self.config.weights;
        weights.lambda_w = self.schedule.lambda_w;

        let mut sums = [0.0f64; 5];
        let (mut acc_sum, mut sq_err, mut px, mut samples, mut batches) = (0.0, 0.0, 0usize, 0usize, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            let bits: Vec<Vec<bool>> = chunk.iter().map(|_| random_bits(geo.bits(), &mut self.rng)).collect();
            let cover_b = batch_tensor(&chunk.iter().map(|&i| covers[i].to_real()).collect::<Vec<_>>())?;
            let map_b = batch_tensor(
                &bits
                    .iter()
                    .map(|b| crate::iflow::bits_to_map(b, geo.map_side).map(|m| m.to_real()))
                    .collect::<Result<Vec<_>>>()?,
            )?;
            let spec = self.pool[self.rng.random_range(0..self.pool.len())];
            let mut g = Graph::new(RoundMode::Stochastic, self.rng.random());
            let param_vars: Vec<Var> = self.params.tensors().into_iter().map(|t| g.param(t.clone())).collect();
            let layers = self.params.bind(&param_vars)?;
            let cover = g.constant(cover_b.clone());
            let map = g.constant(map_b);
            let parts = compute_losses(&mut g, cover, map, &layers, &geo, &weights, &spec, None)?;
            let grads = g.backward(parts.total)?;
            let grad_list: Vec<RealTensor> = param_vars
                .iter()
                .zip(self.params.tensors())
                .map(|(v, t)| grads.get_or_zeros(*v, t.shape()))
                .collect();
            if grad_list.iter().any(|g| !g.all_finite()) {
                return Err(Error::NonFiniteInput("gradient"));
            }
            self.optimizer
                .optimizer_step(&mut self.params.tensors_mut(), &grad_list)?;

            for (s, v) in sums
                .iter_mut()
                .zip([parts.l_s, parts.l_p, parts.l_z, parts.l_w, parts.total])
            {
                *s += g.value(v).data()[0];
            }
            let logits = g.value(parts.logits);
            let stego = g.value(parts.stego);
            for (b, expected) in bits.iter().enumerate() {
                acc_sum += bit_accuracy(expected, &map_to_bits(&logits.batch_item(b)))?;
                let st = stego.batch_item(b);
                let cv = cover_b.batch_item(b);
                sq_err += st
                    .data()
                    .iter()
                    .zip(cv.data())
                    .map(|(s, c)| (s.clamp(0.0, 255.0) - c).powi(2))
                    .sum::<f64>();
                px += st.len();
            }
            samples += bits.len();
            batches += 1;
        }
        let nb = batches as f64;
        let mse = sq_err / px as f64;
        let metrics = EpochMetrics {
            epoch: self.epoch,
            l_s: sums[0] / nb,
            l_p: sums[1] / nb,
            l_z: sums[2] / nb,
            l_w: sums[3] / nb,
            total: sums[4] / nb,
            acc: acc_sum / samples as f64,
            psnr: if mse == 0.0 {
                f64::INFINITY
            } else {
                10.0 * (255.0f64 * 255.0 / mse).log10()
            },
            lambda_w: weights.lambda_w,
        };
        self.schedule.adapt_lambda_w(metrics.acc)?;
        self.epoch += 1;
        Ok(metrics)
    }

    /// Runs the configured number of epochs, reporting each one.
    pub fn run(&mut self, covers: &[IntTensor], mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<Vec<EpochMetrics>> {
        let mut rows = Vec::with_capacity(self.config.epochs);
        for _ in 0..self.config.epochs {
            let m = self.train_epoch(covers)?;
            on_epoch(&m);
            rows.push(m);
        }
        Ok(rows)
    }
}
