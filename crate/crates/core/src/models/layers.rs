//! Shared layer helpers: dense maps, normalization, dropout.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Bound, ModelHandle, Normalization};
use crate::error::{Error, Result};
use crate::grad::{Graph, Tensor, Var, BATCH_NORM_EPS};

/// Running-statistics momentum for batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;

/// Mode and randomness for one forward pass.
pub struct ForwardCtx<'a> {
    pub training: bool,
    pub dropout: f64,
    rng: Option<&'a mut ChaCha8Rng>,
    /// Batch statistics observed by batch-norm layers: (prefix, mean, variance).
    pub(crate) bn_updates: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl ForwardCtx<'static> {
    /// Inference: no dropout, batch norm uses running statistics.
    pub fn eval() -> Self {
        ForwardCtx {
            training: false,
            dropout: 0.0,
            rng: None,
            bn_updates: vec![],
        }
    }
}

impl<'a> ForwardCtx<'a> {
    pub fn train(dropout: f64, rng: &'a mut ChaCha8Rng) -> Self {
        ForwardCtx {
            training: true,
            dropout,
            rng: Some(rng),
            bn_updates: vec![],
        }
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`,
/// otherwise `1 / (1 - rate)`.
pub fn dropout_mask(shape: &[usize], rate: f64, rng: &mut impl Rng) -> Tensor {
    let keep = 1.0 / (1.0 - rate);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Tensor::raw(shape.to_vec(), data)
}

/// Dropout on a plain tensor. The identity in eval mode or at rate 0.
pub fn apply_dropout(h: &Tensor, rate: f64, training: bool, rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if !training || rate == 0.0 {
        return Ok(h.clone());
    }
    let mask = dropout_mask(h.shape(), rate, rng);
    let data = h.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect();
    Ok(Tensor::raw(h.shape().to_vec(), data))
}

pub(crate) struct Net<'n, 'c> {
    pub g: &'n Graph,
    pub p: &'n Bound,
    pub model: &'n ModelHandle,
    pub ctx: &'n mut ForwardCtx<'c>,
}

impl Net<'_, '_> {
    pub fn param(&self, name: &str) -> Var {
        self.p.get(name)
    }

    /// `x W + b` with parameters `{prefix}.w`, `{prefix}.b`.
    pub fn dense(&self, x: Var, prefix: &str) -> Result<Var> {
        let y = self.g.matmul(x, self.param(&format!("{prefix}.w")))?;
        self.g.add(y, self.param(&format!("{prefix}.b")))
    }

    /// Normalization followed by the learned scale and shift.
    pub fn norm(&mut self, x: Var, prefix: &str, kind: Normalization) -> Result<Var> {
        let g = self.g;
        let y = match kind {
            Normalization::None => return Ok(x),
            Normalization::Layer => g.layer_norm(x)?,
            Normalization::Batch => {
                let rows = g.shape(x)[0];
                if self.ctx.training && rows >= 2 {
                    let (mean, var) = column_moments(&g.value(x));
                    self.ctx.bn_updates.push((prefix.to_string(), mean, var));
                    g.batch_norm(x)?
                } else {
                    let buf = |s: &str| &self.model.buffers[&format!("{prefix}.{s}")];
                    let (mean, var) = (buf("mean"), buf("var"));
                    let inv = var.map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt());
                    let centered = g.sub(x, g.constant(mean.clone()))?;
                    g.mul(centered, g.constant(inv))?
                }
            }
        };
        let y = g.mul(y, self.param(&format!("{prefix}.gamma")))?;
        g.add(y, self.param(&format!("{prefix}.beta")))
    }

    /// Inverted dropout in training mode; the identity otherwise.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let rate = self.ctx.dropout;
        if !self.ctx.training || rate == 0.0 {
            return Ok(x);
        }
        let rng = self
            .ctx
            .rng
            .as_deref_mut()
            .ok_or_else(|| Error::Config("training forward pass needs an RNG".into()))?;
        let mask = dropout_mask(&self.g.shape(x), rate, rng);
        self.g.mul(x, self.g.constant(mask))
    }
}

/// Per-column mean and population variance of a matrix.
fn column_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (r, c) = x.dims2().expect("matrix");
    let mut mean = vec![0.0; c];
    for row in x.data().chunks(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / r as f64;
        }
    }
    let mut var = vec![0.0; c];
    for row in x.data().chunks(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m) / r as f64;
        }
    }
    (mean, var)
}

/// Step `t` of `[batch, window, dim]` inputs as a `[batch, dim]` matrix.
pub(crate) fn step(inputs: &Tensor, t: usize) -> Tensor {
    let &[b, l, d] = inputs.shape() else { unreachable!() };
    let mut out = Vec::with_capacity(b * d);
    for i in 0..b {
        out.extend_from_slice(&inputs.data()[(i * l + t) * d..(i * l + t + 1) * d]);
    }
    Tensor::raw(vec![b, d], out)
}

/// `[batch, window, dim]` reordered time-major into `[window * batch, dim]`.
pub(crate) fn time_major(inputs: &Tensor) -> Tensor {
    let &[b, l, d] = inputs.shape() else { unreachable!() };
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..l {
        for i in 0..b {
            out.extend_from_slice(&inputs.data()[(i * l + t) * d..(i * l + t + 1) * d]);
        }
    }
    Tensor::raw(vec![l * b, d], out)
}
