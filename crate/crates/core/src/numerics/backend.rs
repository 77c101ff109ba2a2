//! The small op vocabulary the sub-networks are written against.
//!
//! [`Eval`] computes plain tensors with no bookkeeping; [`Graph`] records the
//! same ops on the tape. One subnet definition serves both.

use super::graph::{Graph, Var};
use super::ops;
use super::tensor::RealTensor;
use crate::error::Result;

pub trait Backend {
    type V: Clone;

    fn conv2d(&mut self, x: &Self::V, w: &Self::V, b: &Self::V, stride: usize, pad: usize) -> Result<Self::V>;
    fn conv_transpose2d(&mut self, x: &Self::V, w: &Self::V, b: &Self::V, stride: usize, pad: usize)
        -> Result<Self::V>;
    fn leaky_relu(&mut self, x: &Self::V, slope: f64) -> Self::V;
    fn sigmoid(&mut self, x: &Self::V) -> Self::V;
    fn channel_mean(&mut self, x: &Self::V) -> Result<Self::V>;
    fn channel_max(&mut self, x: &Self::V) -> Result<Self::V>;
    fn concat_channels(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn gate_channels(&mut self, x: &Self::V, gate: &Self::V) -> Result<Self::V>;
    /// `scale * x + shift`.
    fn affine(&mut self, x: &Self::V, scale: f64, shift: f64) -> Self::V;
}

/// Direct evaluation on owned tensors.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl Backend for Eval {
    type V = RealTensor;

    fn conv2d(
        &mut self,
        x: &RealTensor,
        w: &RealTensor,
        b: &RealTensor,
        stride: usize,
        pad: usize,
    ) -> Result<RealTensor> {
        ops::conv2d(x, w, Some(b), stride, pad)
    }

    fn conv_transpose2d(
        &mut self,
        x: &RealTensor,
        w: &RealTensor,
        b: &RealTensor,
        stride: usize,
        pad: usize,
    ) -> Result<RealTensor> {
        ops::conv_transpose2d(x, w, Some(b), stride, pad)
    }

    fn leaky_relu(&mut self, x: &RealTensor, slope: f64) -> RealTensor {
        x.map(|v| if v > 0.0 { v } else { slope * v })
    }

    fn sigmoid(&mut self, x: &RealTensor) -> RealTensor {
        x.map(ops::sigmoid)
    }

    fn channel_mean(&mut self, x: &RealTensor) -> Result<RealTensor> {
        ops::channel_mean(x)
    }

    fn channel_max(&mut self, x: &RealTensor) -> Result<RealTensor> {
        Ok(ops::channel_max(x)?.0)
    }

    fn concat_channels(&mut self, a: &RealTensor, b: &RealTensor) -> Result<RealTensor> {
        ops::concat_channels(a, b)
    }

    fn gate_channels(&mut self, x: &RealTensor, gate: &RealTensor) -> Result<RealTensor> {
        ops::gate_channels(x, gate)
    }

    fn affine(&mut self, x: &RealTensor, scale: f64, shift: f64) -> RealTensor {
        x.map(|v| v * scale + shift)
    }
}

impl Backend for Graph {
    type V = Var;

    fn conv2d(&mut self, x: &Var, w: &Var, b: &Var, stride: usize, pad: usize) -> Result<Var> {
        Graph::conv2d(self, *x, *w, *b, stride, pad)
    }

    fn conv_transpose2d(&mut self, x: &Var, w: &Var, b: &Var, stride: usize, pad: usize) -> Result<Var> {
        Graph::conv_transpose2d(self, *x, *w, *b, stride, pad)
    }

    fn leaky_relu(&mut self, x: &Var, slope: f64) -> Var {
        Graph::leaky_relu(self, *x, slope)
    }

    fn sigmoid(&mut self, x: &Var) -> Var {
        Graph::sigmoid(self, *x)
    }

    fn channel_mean(&mut self, x: &Var) -> Result<Var> {
        Graph::channel_mean(self, *x)
    }

    fn channel_max(&mut self, x: &Var) -> Result<Var> {
        Graph::channel_max(self, *x)
    }

    fn concat_channels(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Graph::concat_channels(self, *a, *b)
    }

    fn gate_channels(&mut self, x: &Var, gate: &Var) -> Result<Var> {
        Graph::gate_channels(self, *x, *gate)
    }

    fn affine(&mut self, x: &Var, scale: f64, shift: f64) -> Var {
        Graph::affine(self, *x, scale, shift)
    }
}
