//! Tape-based reverse-mode automatic differentiation over whole tensors.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and `backward` walks it in reverse. Rounding nodes use
//! the straight-through estimator: forward rounds (per [`RoundMode`]),
//! backward passes the gradient through unchanged.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{self, RoundMode};
use super::tensor::RealTensor;
use crate::error::{shape_err, Error, Result};

/// A fixed linear map with a known adjoint, inserted into the tape as one node.
pub trait LinearMap: Send + Sync {
    fn apply(&self, x: &RealTensor) -> Result<RealTensor>;
    fn adjoint(&self, g: &RealTensor) -> Result<RealTensor>;
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    ConvT {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Exp(Var),
    LeakyRelu(Var, f64),
    Ste(Var),
    ChannelMean(Var),
    ChannelMax(Var, Arc<Vec<usize>>),
    Concat(Var, Var),
    Gate(Var, Var),
    Sum(Var),
    Mean(Var),
    Linear(Var, Arc<dyn LinearMap>),
}

struct Node {
    value: RealTensor,
    op: Op,
    needs_grad: bool,
}

/// Recording tape. Values are immutable once pushed.
pub struct Graph {
    nodes: Vec<Node>,
    rounding: RoundMode,
    rng: ChaCha8Rng,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("rounding", &self.rounding)
            .finish()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<RealTensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&RealTensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> RealTensor {
        self.get(v).cloned().unwrap_or_else(|| RealTensor::zeros(shape))
    }
}

impl Graph {
    pub fn new(rounding: RoundMode, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            rounding,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rounding(&self) -> RoundMode {
        self.rounding
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: RealTensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: RealTensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: RealTensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &RealTensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), Some(self.value(b)), stride, pad)?;
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(y, Op::Conv2d { x, w, b, stride, pad }, ng))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = ops::conv_transpose2d(self.value(x), self.value(w), Some(self.value(b)), stride, pad)?;
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(y, Op::ConvT { x, w, b, stride, pad }, ng))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let y = ops::broadcast_binary(self.value(a), self.value(b), f)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(y, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&d| d == 0.0) {
            return Err(Error::DivisionByZero);
        }
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let y = self.value(x).map(|v| v * scale + shift);
        let ng = self.ng(&[x]);
        self.push(y, Op::Affine(x, scale), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(ops::sigmoid);
        let ng = self.ng(&[x]);
        self.push(y, Op::Sigmoid(x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::exp);
        let ng = self.ng(&[x]);
        self.push(y, Op::Exp(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let y = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let ng = self.ng(&[x]);
        self.push(y, Op::LeakyRelu(x, slope), ng)
    }

    /// Straight-through rounding using the graph's [`RoundMode`].
    pub fn round_ste(&mut self, x: Var) -> Result<Var> {
        let mode = self.rounding;
        let y = ops::round_ste(&self.nodes[x.0].value, mode, &mut self.rng)?;
        let ng = self.ng(&[x]);
        Ok(self.push(y, Op::Ste(x), ng))
    }

    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let y = ops::channel_mean(self.value(x))?;
        let ng = self.ng(&[x]);
        Ok(self.push(y, Op::ChannelMean(x), ng))
    }

    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let (y, arg) = ops::channel_max(self.value(x))?;
        let ng = self.ng(&[x]);
        Ok(self.push(y, Op::ChannelMax(x, Arc::new(arg)), ng))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(y, Op::Concat(a, b), ng))
    }

    pub fn gate_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let y = ops::gate_channels(self.value(x), self.value(gate))?;
        let ng = self.ng(&[x, gate]);
        Ok(self.push(y, Op::Gate(x, gate), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = RealTensor::scalar(self.value(x).sum());
        let ng = self.ng(&[x]);
        self.push(y, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let y = RealTensor::scalar(v.sum() / v.len() as f64);
        let ng = self.ng(&[x]);
        self.push(y, Op::Mean(x), ng)
    }

    pub fn linear(&mut self, x: Var, map: Arc<dyn LinearMap>) -> Result<Var> {
        let y = map.apply(self.value(x))?;
        let ng = self.ng(&[x]);
        Ok(self.push(y, Op::Linear(x, map), ng))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: Var) -> Result<Var> {
        let d = self.sub(x, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Fresh `u ~ U[-0.5, 0.5)` noise of a given shape, as a constant.
    pub fn uniform_noise(&mut self, shape: &[usize]) -> Var {
        let rng = &mut self.rng;
        let t = RealTensor::from_fn(shape, |_| rng.random::<f64>() - 0.5);
        self.constant(t)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<RealTensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(RealTensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<RealTensor>], v: Var, g: RealTensor) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        let target = self.nodes[v.0].value.shape();
        let g = if g.shape() == target {
            g
        } else if g.len() != 1 && target.iter().product::<usize>() == 1 {
            // scalar operand broadcast in the forward pass
            RealTensor::full(target, g.sum())
        } else {
            return Err(shape_err(format!("gradient {:?} for node {:?}", g.shape(), target)));
        };
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &RealTensor, grads: &mut [Option<RealTensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, stride, pad } => {
                let (_, _, h, wd) = val(x).dims4()?;
                let k = val(w).shape()[2];
                if needs(x) {
                    let gx = ops::conv_transpose2d_sized(g, val(w), None, stride, pad, h, wd)?;
                    self.accumulate(grads, x, gx)?;
                }
                if needs(w) {
                    let gw = ops::conv2d_weight_grad(val(x), g, k, stride, pad)?;
                    self.accumulate(grads, w, gw)?;
                }
                if needs(b) {
                    self.accumulate(grads, b, ops::channel_sums(g)?)?;
                }
            }
            &Op::ConvT { x, w, b, stride, pad } => {
                let k = val(w).shape()[2];
                if needs(x) {
                    let gx = ops::conv2d(g, val(w), None, stride, pad)?;
                    self.accumulate(grads, x, gx)?;
                }
                if needs(w) {
                    let gw = ops::conv2d_weight_grad(g, val(x), k, stride, pad)?;
                    self.accumulate(grads, w, gw)?;
                }
                if needs(b) {
                    self.accumulate(grads, b, ops::channel_sums(g)?)?;
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.clone())?;
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                if needs(b) {
                    self.accumulate(grads, b, g.map(|v| -v))?;
                }
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    let ga = ops::broadcast_binary(g, val(b), |x, y| x * y)?;
                    self.accumulate(grads, a, ga)?;
                }
                if needs(b) {
                    let gb = ops::broadcast_binary(g, val(a), |x, y| x * y)?;
                    self.accumulate(grads, b, gb)?;
                }
            }
            &Op::Div(a, b) => {
                if needs(a) {
                    let ga = ops::broadcast_binary(g, val(b), |x, y| x / y)?;
                    self.accumulate(grads, a, ga)?;
                }
                if needs(b) {
                    // d(a/b)/db = -out / b
                    let t = ops::broadcast_binary(&node.value, val(b), |o, y| -o / y)?;
                    let gb = t.zip_map(g, |x, y| x * y)?;
                    self.accumulate(grads, b, gb)?;
                }
            }
            &Op::Affine(x, s) => self.accumulate(grads, x, g.map(|v| v * s))?,
            &Op::Sigmoid(x) => {
                let gx = node.value.zip_map(g, |y, gv| gv * y * (1.0 - y))?;
                self.accumulate(grads, x, gx)?;
            }
            &Op::Exp(x) => {
                let gx = node.value.zip_map(g, |y, gv| gv * y)?;
                self.accumulate(grads, x, gx)?;
            }
            &Op::LeakyRelu(x, slope) => {
                let gx = val(x).zip_map(g, |v, gv| if v > 0.0 { gv } else { slope * gv })?;
                self.accumulate(grads, x, gx)?;
            }
            &Op::Ste(x) => self.accumulate(grads, x, g.clone())?,
            &Op::ChannelMean(x) => {
                let (n, c, h, w) = val(x).dims4()?;
                let hw = h * w;
                let inv = c as f64;
                let gx = RealTensor::from_fn(&[n, c, h, w], |i| {
                    let ni = i / (c * hw);
                    g.data()[ni * hw + i % hw] / inv
                });
                self.accumulate(grads, x, gx)?;
            }
            Op::ChannelMax(x, arg) => {
                let (n, c, h, w) = val(*x).dims4()?;
                let hw = h * w;
                let mut gx = RealTensor::zeros(&[n, c, h, w]);
                for ni in 0..n {
                    for p in 0..hw {
                        let ci = arg[ni * hw + p];
                        gx.data_mut()[(ni * c + ci) * hw + p] = g.data()[ni * hw + p];
                    }
                }
                self.accumulate(grads, *x, gx)?;
            }
            &Op::Concat(a, b) => {
                let (n, ca, h, w) = val(a).dims4()?;
                let cb = val(b).shape()[1];
                let hw = h * w;
                let mut ga = Vec::with_capacity(n * ca * hw);
                let mut gb = Vec::with_capacity(n * cb * hw);
                for ni in 0..n {
                    let base = ni * (ca + cb) * hw;
                    ga.extend_from_slice(&g.data()[base..base + ca * hw]);
                    gb.extend_from_slice(&g.data()[base + ca * hw..base + (ca + cb) * hw]);
                }
                self.accumulate(grads, a, RealTensor::new(vec![n, ca, h, w], ga)?)?;
                self.accumulate(grads, b, RealTensor::new(vec![n, cb, h, w], gb)?)?;
            }
            &Op::Gate(x, gate) => {
                if needs(x) {
                    let gx = ops::gate_channels(g, val(gate))?;
                    self.accumulate(grads, x, gx)?;
                }
                if needs(gate) {
                    let (n, c, h, w) = val(x).dims4()?;
                    let hw = h * w;
                    let xv = val(x).data();
                    let mut gg = vec![0.0; n * hw];
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * hw;
                            for p in 0..hw {
                                gg[ni * hw + p] += g.data()[off + p] * xv[off + p];
                            }
                        }
                    }
                    self.accumulate(grads, gate, RealTensor::new(vec![n, 1, h, w], gg)?)?;
                }
            }
            &Op::Sum(x) => {
                let gx = RealTensor::full(val(x).shape(), g.data()[0]);
                self.accumulate(grads, x, gx)?;
            }
            &Op::Mean(x) => {
                let n = val(x).len() as f64;
                let gx = RealTensor::full(val(x).shape(), g.data()[0] / n);
                self.accumulate(grads, x, gx)?;
            }
            Op::Linear(x, map) => {
                let gx = map.adjoint(g)?;
                self.accumulate(grads, *x, gx)?;
            }
        }
        Ok(())
    }
}
