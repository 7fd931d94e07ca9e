//! Mini-batch Adam training against mean squared error, with dropout,
//! normalization, gradient clipping and early stopping on validation loss.

mod optim;

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CovariatePanel, Examples, ObservationSource, Splits};
use crate::error::{Error, Result};
use crate::eval::{ForecastPanel, ForecastRecord, SliceTag};
use crate::grad::{Graph, Tensor};
use crate::models::{fit_ols, Arch, ForwardCtx, ModelHandle, Normalization};

pub use optim::{adam_step, clip_gradient, global_norm, AdamParams, AdamState};

/// Optimizer and regularization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a new best validation loss before stopping.
    pub patience: usize,
    pub dropout: f64,
    pub clip_threshold: f64,
    pub normalization: Normalization,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 256,
            max_epochs: 100,
            patience: 5,
            dropout: 0.1,
            clip_threshold: 5.0,
            normalization: Normalization::None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must be in (0, 1), got {b}"));
            }
        }
        if !(self.clip_threshold > 0.0) {
            return bad(format!("clip_threshold must be positive, got {}", self.clip_threshold));
        }
        if !(self.learning_rate >= 0.0) || !(self.epsilon > 0.0) {
            return bad("learning_rate must be >= 0 and epsilon > 0".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

/// Loss history of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (lowest validation MSE).
    pub best_epoch: usize,
    pub wall_time_secs: f64,
}

impl TrainLog {
    /// CSV with columns `epoch,train_mse,val_mse`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_mse", "val_mse"])?;
        for e in &self.epochs {
            w.write_record([e.epoch.to_string(), e.train_mse.to_string(), e.val_mse.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean squared error with the `1 / n` normalization.
pub fn mse_loss(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Empty("mse of no observations".into()));
    }
    if predictions.len() != targets.len() {
        return Err(Error::shape("mse_loss", "lengths differ"));
    }
    let sse: f64 = predictions.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sse / predictions.len() as f64)
}

/// Layer normalization of each slice along the last axis (no scale/shift).
pub fn layer_norm(h: &Tensor) -> Result<Tensor> {
    let g = Graph::new();
    let y = g.layer_norm(g.constant(h.clone()))?;
    Ok((*g.value(y)).clone())
}

/// Trains a copy of `model` on the training slice, stopping early on the
/// validation slice. Only observation months before `splits.test.start`
/// are read. The model is re-initialized from its seed if its
/// normalization differs from the config.
pub fn train(
    model: &ModelHandle,
    source: &dyn ObservationSource,
    splits: &Splits,
    config: &TrainConfig,
) -> Result<(ModelHandle, TrainLog)> {
    config.validate()?;
    let started = Instant::now();
    let mut model = model.clone();
    if model.hyper.normalization != config.normalization {
        let mut hyper = model.hyper.clone();
        hyper.normalization = config.normalization;
        model = ModelHandle::new(model.arch, hyper, model.seed)?;
    }
    let window = model.window();
    let train_ex = Examples::collect(source, splits.train.clone(), window);
    let val_ex = Examples::collect(source, splits.validation.clone(), window);
    for (name, ex) in [("training", &train_ex), ("validation", &val_ex)] {
        if ex.is_empty() {
            return Err(Error::Empty(format!("{name} slice has no usable observations")));
        }
    }

    if model.arch == Arch::Ols {
        let x = last_steps(&train_ex);
        let theta = fit_ols(&x, train_ex.targets())?;
        let d = theta.len();
        model.params.insert("theta".into(), Tensor::raw(vec![d, 1], theta));
        let train_mse = mse_loss(&model.predict_examples(&train_ex)?, train_ex.targets())?;
        let val_mse = mse_loss(&model.predict_examples(&val_ex)?, val_ex.targets())?;
        let log = TrainLog {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_mse,
                val_mse,
            }],
            best_epoch: 1,
            wall_time_secs: started.elapsed().as_secs_f64(),
        };
        return Ok((model, log));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = AdamState::new(&model.params);
    let adam = config.adam();
    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ModelHandle)> = None;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut sse = 0.0;
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let diverged = |detail: String| Error::Divergence {
                epoch,
                batch: bi + 1,
                detail,
            };
            let batch = train_ex.batch(idx);
            let g = Graph::new();
            let p = model.bind(&g);
            let mut ctx = ForwardCtx::train(config.dropout, &mut rng);
            let step = (|| {
                let y = model.forward(&g, &p, &batch.inputs, &mut ctx)?;
                let t = g.constant(Tensor::raw(vec![idx.len(), 1], batch.targets.clone()));
                let loss = g.mse(y, t)?;
                let grads = g.backward(loss)?;
                Ok::<_, Error>((g.value(loss).item(), grads))
            })();
            let (loss, mut grads) = match step {
                Ok(v) => v,
                Err(e) if e.is_numeric() => return Err(diverged(e.to_string())),
                Err(e) => return Err(e),
            };
            let bn_updates = std::mem::take(&mut ctx.bn_updates);
            drop(ctx);
            let mut named: BTreeMap<String, Tensor> =
                p.iter().map(|(k, &v)| (k.clone(), grads.take(v))).collect();
            clip_gradient(&mut named, config.clip_threshold)?;
            adam_step(&mut model.params, &named, &mut state, &adam)?;
            if model.params.values().any(|t| !t.is_finite()) {
                return Err(diverged("non-finite parameter after update".into()));
            }
            apply_bn_updates(&mut model, bn_updates);
            sse += loss * idx.len() as f64;
        }
        let train_mse = sse / train_ex.len() as f64;
        let val_pred = model.predict_examples(&val_ex).map_err(|e| Error::Divergence {
            epoch,
            batch: 0,
            detail: format!("validation pass: {e}"),
        })?;
        let val_mse = mse_loss(&val_pred, val_ex.targets())?;
        if !train_mse.is_finite() || !val_mse.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: 0,
                detail: "non-finite epoch loss".into(),
            });
        }
        log::debug!("{} epoch {epoch}: train {train_mse:.6e} val {val_mse:.6e}", model.arch);
        epochs.push(EpochRecord {
            epoch,
            train_mse,
            val_mse,
        });
        let improved = best.as_ref().is_none_or(|(v, _, _)| val_mse < *v);
        if improved {
            best = Some((val_mse, epoch, model.clone()));
        }
        let best_epoch = best.as_ref().unwrap().1;
        if epoch - best_epoch >= config.patience {
            break;
        }
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    let log = TrainLog {
        epochs,
        best_epoch,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((best_model, log))
}

fn apply_bn_updates(model: &mut ModelHandle, updates: Vec<(String, Vec<f64>, Vec<f64>)>) {
    use crate::models::BN_MOMENTUM;
    for (prefix, mean, var) in updates {
        for (suffix, batch) in [("mean", mean), ("var", var)] {
            let buf = model.buffers.get_mut(&format!("{prefix}.{suffix}")).unwrap();
            for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
}

/// Design matrix of the last window step of every example.
fn last_steps(ex: &Examples) -> Tensor {
    let d = ex.dim;
    let mut x = Vec::with_capacity(ex.len() * d);
    for k in 0..ex.len() {
        let w = ex.input(k);
        x.extend_from_slice(&w[w.len() - d..]);
    }
    Tensor::raw(vec![ex.len(), d], x)
}

/// Forecasts of `model` for every usable observation in `months`.
pub fn forecast(
    model: &ModelHandle,
    panel: &CovariatePanel,
    months: Range<usize>,
    model_name: &str,
    slice: SliceTag,
) -> Result<ForecastPanel> {
    let ex = Examples::collect(panel, months, model.window());
    let pred = model.predict_examples(&ex)?;
    let records = ex
        .keys()
        .iter()
        .zip(pred)
        .zip(ex.targets())
        .map(|((&(i, t), p), &r)| ForecastRecord {
            month: panel.months()[t],
            asset: panel.assets()[i].clone(),
            predicted: p,
            realized: r,
        })
        .collect();
    ForecastPanel::new(model_name, slice, records)
}

#[cfg(test)]
mod tests;
