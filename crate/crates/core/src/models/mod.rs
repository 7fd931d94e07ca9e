//! The predictor roster: OLS, feed-forward, convolutional, recurrent and
//! attention models behind one forward interface.
//!
//! Every model consumes covariate windows `[batch, window, dim]` and emits
//! forecasts `[batch, 1]`. Feed-forward models use a window of one month.

mod checkpoint;
mod feedforward;
mod init;
mod layers;
mod ols;
mod recurrent;
mod transformer;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Examples;
use crate::error::{Error, Result};
use rand::SeedableRng;

use crate::grad::{grad_check, Graph, Tensor, Var};

pub use layers::{apply_dropout, dropout_mask, ForwardCtx, BN_MOMENTUM};
pub use ols::fit_ols;
pub use recurrent::RecurrentTrace;
pub use transformer::multi_head_attention;

/// Model architecture tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "OLS")]
    Ols,
    #[serde(rename = "MLP")]
    Mlp,
    #[serde(rename = "MLP_Residual")]
    MlpResidual,
    #[serde(rename = "CNN")]
    Cnn,
    #[serde(rename = "CNN_Residual")]
    CnnResidual,
    #[serde(rename = "RNN")]
    Rnn,
    #[serde(rename = "RNN_Attention")]
    RnnAttention,
    #[serde(rename = "GRU")]
    Gru,
    #[serde(rename = "LSTM")]
    Lstm,
    #[serde(rename = "Transformer")]
    Transformer,
}

impl Arch {
    pub const ALL: [Arch; 10] = [
        Arch::Ols,
        Arch::Mlp,
        Arch::MlpResidual,
        Arch::Cnn,
        Arch::CnnResidual,
        Arch::Rnn,
        Arch::RnnAttention,
        Arch::Gru,
        Arch::Lstm,
        Arch::Transformer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Ols => "OLS",
            Arch::Mlp => "MLP",
            Arch::MlpResidual => "MLP_Residual",
            Arch::Cnn => "CNN",
            Arch::CnnResidual => "CNN_Residual",
            Arch::Rnn => "RNN",
            Arch::RnnAttention => "RNN_Attention",
            Arch::Gru => "GRU",
            Arch::Lstm => "LSTM",
            Arch::Transformer => "Transformer",
        }
    }

    /// True for models that read a multi-month window.
    pub fn is_sequential(self) -> bool {
        !matches!(self, Arch::Ols | Arch::Mlp | Arch::MlpResidual)
    }

    pub fn is_recurrent(self) -> bool {
        matches!(self, Arch::Rnn | Arch::RnnAttention | Arch::Gru | Arch::Lstm)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Arch> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown architecture {s:?}")))
    }
}

/// Normalization inserted into hidden layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    None,
    Batch,
    Layer,
}

/// Architecture sizes. Fields that do not apply to an architecture are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    /// Covariates per month; normally filled in from the data.
    pub input_dim: usize,
    /// MLP hidden widths; empty gives a purely linear network.
    pub hidden: Vec<usize>,
    pub residual_width: usize,
    pub residual_blocks: usize,
    /// Months per input window for sequence models and CNNs.
    pub window: usize,
    /// Recurrent state width.
    pub state: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_width: usize,
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub pool: usize,
    pub cnn_residual_blocks: usize,
    /// Apply tanh to the LSTM cell before the output gate.
    pub lstm_tanh: bool,
    /// Applied to feed-forward hidden layers (batch or layer) and to
    /// recurrent candidate pre-activations (layer only).
    pub normalization: Normalization,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            input_dim: 0,
            hidden: vec![32, 16, 8],
            residual_width: 32,
            residual_blocks: 3,
            window: 12,
            state: 32,
            d_model: 32,
            heads: 4,
            layers: 2,
            ff_width: 64,
            conv_channels: vec![8, 16],
            kernel: 3,
            pool: 2,
            cnn_residual_blocks: 2,
            lstm_tanh: false,
            normalization: Normalization::None,
        }
    }
}

/// An architecture, its sizes, and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelHandle {
    pub arch: Arch,
    pub hyper: Hyper,
    /// Trainable tensors by name.
    pub params: BTreeMap<String, Tensor>,
    /// Non-trainable state (batch-norm running statistics).
    pub buffers: BTreeMap<String, Tensor>,
    pub seed: u64,
}

/// Graph leaves for a model's parameters.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("model has no parameter {name:?}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

impl ModelHandle {
    /// Validates the sizes and draws initial parameters from `seed`.
    pub fn new(arch: Arch, hyper: Hyper, seed: u64) -> Result<Self> {
        init::validate(arch, &hyper)?;
        let (params, buffers) = init::initialize(arch, &hyper, seed)?;
        Ok(ModelHandle {
            arch,
            hyper,
            params,
            buffers,
            seed,
        })
    }

    /// Months per input window.
    pub fn window(&self) -> usize {
        if self.arch.is_sequential() {
            self.hyper.window
        } else {
            1
        }
    }

    pub fn n_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Registers every parameter as a differentiable leaf of `g`.
    pub fn bind(&self, g: &Graph) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), g.param(v.clone())))
                .collect(),
        }
    }

    /// Records the forward pass for `inputs: [batch, window, dim]`.
    pub fn forward(
        &self,
        g: &Graph,
        p: &Bound,
        inputs: &Tensor,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let &[b, l, d] = inputs.shape() else {
            return Err(Error::shape("forward", "inputs must be [batch, window, dim]"));
        };
        if d != self.hyper.input_dim {
            return Err(Error::shape(
                "forward",
                format!("model expects {} covariates, got {d}", self.hyper.input_dim),
            ));
        }
        if l != self.window() {
            return Err(Error::shape(
                "forward",
                format!("{} expects windows of {} months, got {l}", self.arch, self.window()),
            ));
        }
        let _ = b;
        let mut net = layers::Net {
            g,
            p,
            model: self,
            ctx,
        };
        match self.arch {
            Arch::Ols => feedforward::ols(&mut net, inputs),
            Arch::Mlp => feedforward::mlp(&mut net, inputs),
            Arch::MlpResidual => feedforward::mlp_residual(&mut net, inputs),
            Arch::Cnn => feedforward::cnn(&mut net, inputs),
            Arch::CnnResidual => feedforward::cnn_residual(&mut net, inputs),
            Arch::Rnn | Arch::RnnAttention | Arch::Gru | Arch::Lstm => {
                recurrent::forward(&mut net, inputs).map(|(y, _)| y)
            }
            Arch::Transformer => transformer::forward(&mut net, inputs),
        }
    }

    /// Recurrent forward pass that also returns per-step internals.
    pub fn forward_traced(
        &self,
        g: &Graph,
        p: &Bound,
        inputs: &Tensor,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<(Var, RecurrentTrace)> {
        if !self.arch.is_recurrent() {
            return Err(Error::Config(format!("{} has no recurrent trace", self.arch)));
        }
        let mut net = layers::Net {
            g,
            p,
            model: self,
            ctx,
        };
        recurrent::forward(&mut net, inputs)
    }

    /// Inference-mode forecasts for `inputs: [batch, window, dim]`.
    pub fn predict(&self, inputs: &Tensor) -> Result<Vec<f64>> {
        let g = Graph::new();
        let p = Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), g.constant(v.clone())))
                .collect(),
        };
        let y = self.forward(&g, &p, inputs, &mut ForwardCtx::eval())?;
        Ok(g.value(y).data().to_vec())
    }

    /// Central-difference check of the gradient of the training-mode MSE
    /// (dropout off) with respect to every parameter.
    pub fn grad_check(&self, inputs: &Tensor, targets: &[f64], eps: f64) -> Result<f64> {
        let names: Vec<&String> = self.params.keys().collect();
        let point: Vec<Tensor> = self.params.values().cloned().collect();
        let target = Tensor::new(vec![targets.len(), 1], targets.to_vec())?;
        grad_check(
            |g, vars| {
                let p = Bound {
                    vars: names.iter().map(|n| n.to_string()).zip(vars.iter().copied()).collect(),
                };
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
                let mut ctx = ForwardCtx::train(0.0, &mut rng);
                let y = self.forward(g, &p, inputs, &mut ctx)?;
                g.mse(y, g.constant(target.clone()))
            },
            &point,
            eps,
        )
    }

    /// Forecasts for every example, evaluated in chunks.
    pub fn predict_examples(&self, ex: &Examples) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(ex.len());
        for batch in ex.batches(1024) {
            out.extend(self.predict(&batch.inputs)?);
        }
        Ok(out)
    }
}

/// A named model entry in a run or study configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Label used in tables and file names; defaults to the architecture name.
    #[serde(default)]
    pub name: Option<String>,
    pub arch: Arch,
    #[serde(default)]
    pub hyper: Hyper,
}

impl ModelSpec {
    pub fn new(arch: Arch) -> Self {
        ModelSpec {
            name: None,
            arch,
            hyper: Hyper::default(),
        }
    }

    pub fn with_hyper(arch: Arch, hyper: Hyper) -> Self {
        ModelSpec {
            name: None,
            arch,
            hyper,
        }
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.arch.name().to_string())
    }

    /// Initializes the model for `input_dim` covariates.
    pub fn build(&self, input_dim: usize, seed: u64) -> Result<ModelHandle> {
        let hyper = Hyper {
            input_dim,
            ..self.hyper.clone()
        };
        ModelHandle::new(self.arch, hyper, seed)
    }
}
