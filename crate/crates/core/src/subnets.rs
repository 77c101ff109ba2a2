//! Resampling sub-networks used inside each coupling layer.
//!
//! A down network maps an image `[N,C,H,W]` to a one-channel `[N,1,L,L]` map
//! through `n_blocks` stride-2 stages; an up network is its mirror. Every
//! stage is conv + leaky rectifier, spatial attention, then a 4x4 stride-2
//! resampling conv that adds (down) or removes (up) `n_feat` channels.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Backend, RealTensor};

const LEAKY_SLOPE: f64 = 0.01;
const ATTENTION_KERNEL: usize = 7;
const RESAMPLE_KERNEL: usize = 4;

/// Image-input networks see `(x - 128) / 64`, keeping 8-bit pixels near unit scale.
const IMAGE_SHIFT: f64 = -2.0;
const IMAGE_SCALE: f64 = 1.0 / 64.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Down,
    Up,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubnetConfig {
    pub n_feat: usize,
    pub n_blocks: usize,
    pub direction: Direction,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl SubnetConfig {
    /// Down network from an `image_side`-wide image with `channels` channels to a
    /// one-channel `map_side` map.
    pub fn down(image_side: usize, map_side: usize, channels: usize, n_feat: usize) -> Result<Self> {
        Ok(SubnetConfig {
            n_feat,
            n_blocks: block_count(image_side, map_side)?,
            direction: Direction::Down,
            in_channels: channels,
            out_channels: 1,
        }
        .validated()?)
    }

    pub fn up(image_side: usize, map_side: usize, channels: usize, n_feat: usize) -> Result<Self> {
        Ok(SubnetConfig {
            n_feat,
            n_blocks: block_count(image_side, map_side)?,
            direction: Direction::Up,
            in_channels: 1,
            out_channels: channels,
        }
        .validated()?)
    }

    fn validated(self) -> Result<Self> {
        if self.n_feat == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::BadParams(format!("degenerate subnet config {self:?}")));
        }
        Ok(self)
    }

    /// Feature channels entering each block, then the count reaching the final conv.
    pub fn channel_progression(&self) -> Vec<usize> {
        let nf = self.n_feat;
        (0..=self.n_blocks)
            .map(|i| match self.direction {
                Direction::Down => nf * (i + 1),
                Direction::Up => nf * (self.n_blocks + 1 - i),
            })
            .collect()
    }
}

/// `log2(image_side / map_side)`, requiring both to be powers of two.
pub fn block_count(image_side: usize, map_side: usize) -> Result<usize> {
    if !image_side.is_power_of_two() || !map_side.is_power_of_two() || map_side > image_side {
        return Err(Error::BadParams(format!(
            "image side {image_side} and map side {map_side} must be powers of two with map <= image"
        )));
    }
    Ok((image_side / map_side).trailing_zeros() as usize)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub conv: ConvParams<T>,
    pub attention: ConvParams<T>,
    pub resample: ConvParams<T>,
}

/// Parameters of one sub-network. `T` is a tensor for direct evaluation or a
/// tape handle while training.
#[derive(Debug, Clone, PartialEq)]
pub struct SubnetParams<T> {
    pub initial: ConvParams<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub last: ConvParams<T>,
}

impl<T> SubnetParams<T> {
    /// Parameters in canonical order: initial, per-block (conv, attention,
    /// resample), final; weight before bias.
    pub fn tensors(&self) -> Vec<&T> {
        let mut out = vec![&self.initial.weight, &self.initial.bias];
        for b in &self.blocks {
            for c in [&b.conv, &b.attention, &b.resample] {
                out.push(&c.weight);
                out.push(&c.bias);
            }
        }
        out.push(&self.last.weight);
        out.push(&self.last.bias);
        out
    }

    /// Rebuilds the structure with each tensor mapped, in [`Self::tensors`] order.
    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> SubnetParams<U> {
        let flat: Vec<U> = self.tensors().into_iter().map(f).collect();
        assemble(flat.into_iter(), self.blocks.len())
    }

    pub fn try_map<U>(&self, f: impl FnMut(&T) -> Result<U>) -> Result<SubnetParams<U>> {
        let flat = self.tensors().into_iter().map(f).collect::<Result<Vec<U>>>()?;
        Ok(assemble(flat.into_iter(), self.blocks.len()))
    }
}

/// Expected `(weight, bias)` shapes in [`SubnetParams::tensors`] order.
pub fn param_shapes(cfg: &SubnetConfig) -> Vec<(Vec<usize>, Vec<usize>)> {
    let conv = |out: usize, inp: usize, k: usize| (vec![out, inp, k, k], vec![out]);
    let chans = cfg.channel_progression();
    let nf = cfg.n_feat;
    let mut shapes = vec![conv(chans[0], cfg.in_channels, 3)];
    for i in 0..cfg.n_blocks {
        let ch = chans[i];
        shapes.push(conv(ch, ch, 3));
        shapes.push(conv(1, 2, ATTENTION_KERNEL));
        shapes.push(match cfg.direction {
            Direction::Down => conv(ch + nf, ch, RESAMPLE_KERNEL),
            // transposed conv weights are laid out [in, out, k, k]
            Direction::Up => (vec![ch, ch - nf, RESAMPLE_KERNEL, RESAMPLE_KERNEL], vec![ch - nf]),
        });
    }
    shapes.push(conv(cfg.out_channels, chans[cfg.n_blocks], 3));
    shapes
}

fn assemble<T>(mut flat: std::vec::IntoIter<T>, n_blocks: usize) -> SubnetParams<T> {
    let mut conv = || ConvParams {
        weight: flat.next().expect("shape list length"),
        bias: flat.next().expect("shape list length"),
    };
    let initial = conv();
    let blocks = (0..n_blocks)
        .map(|_| BlockParams {
            conv: conv(),
            attention: conv(),
            resample: conv(),
        })
        .collect();
    let last = conv();
    SubnetParams { initial, blocks, last }
}

impl SubnetParams<RealTensor> {
    /// Kaiming-uniform weights for the leaky-ReLU stack, so activations keep their
    /// scale through the blocks; biases start at zero. The final conv is scaled
    /// by [`FINAL_INIT_SCALE`].
    pub fn init<R: Rng + ?Sized>(cfg: &SubnetConfig, rng: &mut R) -> Self {
        let shapes = param_shapes(cfg);
        let last = shapes.len() - 1;
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let mut flat = Vec::with_capacity(shapes.len() * 2);
        for (i, (ws, bs)) in shapes.into_iter().enumerate() {
            let fan_in = ws[1..].iter().product::<usize>() as f64;
            let scale = if i == last { FINAL_INIT_SCALE } else { 1.0 };
            let bound = scale * gain * (3.0 / fan_in).sqrt();
            flat.push(RealTensor::from_fn(&ws, |_| rng.random_range(-bound..bound)));
            flat.push(RealTensor::zeros(&bs));
        }
        assemble(flat.into_iter(), cfg.n_blocks)
    }

    pub fn zeros(cfg: &SubnetConfig) -> Self {
        let flat: Vec<RealTensor> = param_shapes(cfg)
            .into_iter()
            .flat_map(|(w, b)| [RealTensor::zeros(&w), RealTensor::zeros(&b)])
            .collect();
        assemble(flat.into_iter(), cfg.n_blocks)
    }

    /// Rebuilds parameters from tensors in canonical order, checking shapes.
    pub fn from_flat(cfg: &SubnetConfig, flat: Vec<RealTensor>) -> Result<Self> {
        let shapes: Vec<Vec<usize>> = param_shapes(cfg).into_iter().flat_map(|(w, b)| [w, b]).collect();
        if shapes.len() != flat.len() {
            return Err(Error::LengthMismatch {
                expected: shapes.len(),
                actual: flat.len(),
            });
        }
        for (s, t) in shapes.iter().zip(&flat) {
            if s.as_slice() != t.shape() {
                return Err(shape_err(format!("parameter {:?}, expected {s:?}", t.shape())));
            }
        }
        Ok(assemble(flat.into_iter(), cfg.n_blocks))
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Scale of the final conv at init relative to Kaiming. Nonzero, so every
/// subnet of a coupling receives gradient from the first step.
pub const FINAL_INIT_SCALE: f64 = 1.0;

/// `features * sigmoid(conv7x7([mean_c, max_c]))`, the gate shared across channels.
pub fn spatial_attention<B: Backend>(b: &mut B, x: &B::V, p: &ConvParams<B::V>) -> Result<B::V> {
    let mean = b.channel_mean(x)?;
    let max = b.channel_max(x)?;
    let pooled = b.concat_channels(&mean, &max)?;
    let logits = b.conv2d(&pooled, &p.weight, &p.bias, 1, ATTENTION_KERNEL / 2)?;
    let gate = b.sigmoid(&logits);
    b.gate_channels(x, &gate)
}

/// Runs a subnet in either direction.
pub fn subnet_forward<B: Backend>(b: &mut B, x: &B::V, p: &SubnetParams<B::V>, cfg: &SubnetConfig) -> Result<B::V> {
    if p.blocks.len() != cfg.n_blocks {
        return Err(shape_err(format!(
            "{} parameter blocks for a {}-block config",
            p.blocks.len(),
            cfg.n_blocks
        )));
    }
    let input = match cfg.direction {
        Direction::Down => b.affine(x, IMAGE_SCALE, IMAGE_SHIFT),
        Direction::Up => x.clone(),
    };
    let mut h = b.conv2d(&input, &p.initial.weight, &p.initial.bias, 1, 1)?;
    for blk in &p.blocks {
        let c = b.conv2d(&h, &blk.conv.weight, &blk.conv.bias, 1, 1)?;
        let c = b.leaky_relu(&c, LEAKY_SLOPE);
        let a = spatial_attention(b, &c, &blk.attention)?;
        let r = match cfg.direction {
            Direction::Down => b.conv2d(&a, &blk.resample.weight, &blk.resample.bias, 2, 1)?,
            Direction::Up => b.conv_transpose2d(&a, &blk.resample.weight, &blk.resample.bias, 2, 1)?,
        };
        h = b.leaky_relu(&r, LEAKY_SLOPE);
    }
    b.conv2d(&h, &p.last.weight, &p.last.bias, 1, 1)
}

pub fn downsample_forward<B: Backend>(b: &mut B, x: &B::V, p: &SubnetParams<B::V>, cfg: &SubnetConfig) -> Result<B::V> {
    if cfg.direction != Direction::Down {
        return Err(Error::BadParams("downsample_forward needs a down config".into()));
    }
    subnet_forward(b, x, p, cfg)
}

pub fn upsample_forward<B: Backend>(b: &mut B, x: &B::V, p: &SubnetParams<B::V>, cfg: &SubnetConfig) -> Result<B::V> {
    if cfg.direction != Direction::Up {
        return Err(Error::BadParams("upsample_forward needs an up config".into()));
    }
    subnet_forward(b, x, p, cfg)
}
