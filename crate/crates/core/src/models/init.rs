//! Parameter layout and initialization for each architecture.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::feedforward::cnn_flat_width;
use super::{Arch, Hyper, Normalization};
use crate::error::{Error, Result};
use crate::grad::Tensor;

/// Normalization actually applied: batch statistics across time steps are
/// ill-defined, so recurrent models use layer normalization instead, and
/// convolutional and attention models do not take the option.
pub(crate) fn effective_norm(arch: Arch, norm: Normalization) -> Normalization {
    match arch {
        Arch::Mlp | Arch::MlpResidual => norm,
        Arch::Rnn | Arch::RnnAttention | Arch::Gru | Arch::Lstm => match norm {
            Normalization::None => Normalization::None,
            _ => Normalization::Layer,
        },
        Arch::Ols | Arch::Cnn | Arch::CnnResidual | Arch::Transformer => Normalization::None,
    }
}

pub(crate) fn validate(arch: Arch, h: &Hyper) -> Result<()> {
    let bad = |msg: String| Err(Error::Config(format!("{arch}: {msg}")));
    if h.input_dim == 0 {
        return bad("input_dim must be positive".into());
    }
    let norm = effective_norm(arch, h.normalization);
    match arch {
        Arch::Ols => {}
        Arch::Mlp => {
            if h.hidden.contains(&0) {
                return bad("hidden widths must be positive".into());
            }
            if norm != Normalization::None && h.hidden.contains(&1) {
                return bad("normalized layers need width >= 2".into());
            }
        }
        Arch::MlpResidual => {
            if h.residual_width < 2 {
                return bad("residual_width must be at least 2".into());
            }
        }
        Arch::Cnn | Arch::CnnResidual => {
            if h.window == 0 {
                return bad("window must be positive".into());
            }
            if h.kernel == 0 || h.kernel % 2 == 0 {
                return bad(format!("kernel must be odd, got {}", h.kernel));
            }
            if h.pool == 0 {
                return bad("pool must be positive".into());
            }
            if h.conv_channels.is_empty() || h.conv_channels.contains(&0) {
                return bad("conv_channels must be non-empty and positive".into());
            }
        }
        Arch::Rnn | Arch::RnnAttention | Arch::Gru | Arch::Lstm => {
            if h.window == 0 {
                return bad("empty sequence: window must be at least 1".into());
            }
            if h.state == 0 || (norm != Normalization::None && h.state < 2) {
                return bad("state width too small".into());
            }
        }
        Arch::Transformer => {
            if h.window == 0 {
                return bad("empty sequence: window must be at least 1".into());
            }
            if h.heads == 0 || h.d_model % h.heads != 0 {
                return bad(format!(
                    "d_model {} is not divisible by {} heads",
                    h.d_model, h.heads
                ));
            }
            if h.d_model < 2 || h.ff_width == 0 || h.layers == 0 {
                return bad("d_model, ff_width and layers must be positive".into());
            }
        }
    }
    Ok(())
}

struct Init {
    rng: ChaCha8Rng,
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl Init {
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) {
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-s..s)).collect();
        self.params.insert(name.into(), Tensor::raw(shape.to_vec(), data));
    }

    fn fill(&mut self, name: &str, shape: &[usize], v: f64) {
        self.params.insert(name.into(), Tensor::full(shape, v));
    }

    fn dense(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.weight(&format!("{prefix}.w"), &[fan_in, fan_out], fan_in, fan_out);
        self.fill(&format!("{prefix}.b"), &[1, fan_out], 0.0);
    }

    fn norm(&mut self, prefix: &str, width: usize, kind: Normalization) {
        if kind == Normalization::None {
            return;
        }
        self.fill(&format!("{prefix}.gamma"), &[1, width], 1.0);
        self.fill(&format!("{prefix}.beta"), &[1, width], 0.0);
        if kind == Normalization::Batch {
            self.buffers.insert(format!("{prefix}.mean"), Tensor::zeros(&[1, width]));
            self.buffers.insert(format!("{prefix}.var"), Tensor::ones(&[1, width]));
        }
    }

    fn conv(&mut self, prefix: &str, out_c: usize, in_c: usize, k: usize) {
        self.weight(prefix, &[out_c, in_c, k, k], in_c * k * k, out_c * k * k);
    }
}

type ParamMaps = (BTreeMap<String, Tensor>, BTreeMap<String, Tensor>);

/// Initial bias of the LSTM forget gate.
pub const LSTM_FORGET_BIAS: f64 = 1.0;

pub(crate) fn initialize(arch: Arch, h: &Hyper, seed: u64) -> Result<ParamMaps> {
    let mut it = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
        params: BTreeMap::new(),
        buffers: BTreeMap::new(),
    };
    let d = h.input_dim;
    let norm = effective_norm(arch, h.normalization);
    match arch {
        Arch::Ols => it.fill("theta", &[d, 1], 0.0),
        Arch::Mlp => {
            let mut width = d;
            for (i, &w) in h.hidden.iter().enumerate() {
                it.dense(&format!("h{i}"), width, w);
                it.norm(&format!("h{i}"), w, norm);
                width = w;
            }
            it.dense("head", width, 1);
        }
        Arch::MlpResidual => {
            let w = h.residual_width;
            it.dense("stem", d, w);
            it.norm("stem", w, norm);
            for j in 0..h.residual_blocks {
                it.dense(&format!("block{j}"), w, w);
                it.norm(&format!("block{j}"), w, norm);
            }
            it.dense("head", w, 1);
        }
        Arch::Cnn => {
            let mut in_c = 1;
            for (i, &c) in h.conv_channels.iter().enumerate() {
                it.conv(&format!("conv{i}.k"), c, in_c, h.kernel);
                it.fill(&format!("conv{i}.b"), &[1, c, 1, 1], 0.0);
                in_c = c;
            }
            it.dense("head", cnn_flat_width(arch, h), 1);
        }
        Arch::CnnResidual => {
            let c = h.conv_channels[0];
            it.conv("stem.k", c, 1, h.kernel);
            it.fill("stem.b", &[1, c, 1, 1], 0.0);
            for j in 0..h.cnn_residual_blocks {
                it.conv(&format!("block{j}.k1"), c, c, h.kernel);
                it.fill(&format!("block{j}.b1"), &[1, c, 1, 1], 0.0);
                it.conv(&format!("block{j}.k2"), c, c, h.kernel);
                it.fill(&format!("block{j}.b2"), &[1, c, 1, 1], 0.0);
            }
            it.dense("head", cnn_flat_width(arch, h), 1);
        }
        Arch::Rnn | Arch::RnnAttention => {
            let s = h.state;
            it.weight("rnn.u", &[d, s], d, s);
            it.weight("rnn.w", &[s, s], s, s);
            it.fill("rnn.b", &[1, s], 0.0);
            it.norm("rnn", s, norm);
            if arch == Arch::RnnAttention {
                let l = h.window;
                it.dense("attn", d + s, l);
                it.weight("ctx.w", &[2 * s, s], 2 * s, s);
                it.weight("out.w", &[s, s], s, s);
                it.weight("out.u", &[d, s], d, s);
                it.fill("out.b", &[1, s], 0.0);
            }
            it.dense("head", s, 1);
        }
        Arch::Gru | Arch::Lstm => {
            let s = h.state;
            let gates = if arch == Arch::Lstm { 4 } else { 2 };
            it.weight("gates.wx", &[d, gates * s], d, s);
            it.weight("gates.wh", &[s, gates * s], s, s);
            it.fill("gates.b", &[1, gates * s], 0.0);
            if arch == Arch::Lstm {
                // Gate blocks are ordered u, f, o, r. Starting the forget gate
                // open keeps early gradients flowing through the cell.
                let b = it.params.get_mut("gates.b").unwrap().data_mut();
                b[s..2 * s].fill(LSTM_FORGET_BIAS);
            }
            it.weight("cand.wh", &[s, s], s, s);
            it.weight("cand.wx", &[d, s], d, s);
            it.fill("cand.b", &[1, s], 0.0);
            it.norm("cand", s, norm);
            it.dense("head", s, 1);
        }
        Arch::Transformer => {
            let m = h.d_model;
            it.dense("embed", d, m);
            for l in 0..h.layers {
                for proj in ["q", "k", "v"] {
                    it.weight(&format!("l{l}.{proj}"), &[m, m], m, m);
                }
                it.dense(&format!("l{l}.o"), m, m);
                it.norm(&format!("l{l}.ln1"), m, Normalization::Layer);
                it.dense(&format!("l{l}.ff1"), m, h.ff_width);
                it.dense(&format!("l{l}.ff2"), h.ff_width, m);
                it.norm(&format!("l{l}.ln2"), m, Normalization::Layer);
            }
            it.dense("head", m, 1);
        }
    }
    Ok((it.params, it.buffers))
}
