//! Kronecker covariates and training examples drawn from them.

use std::ops::Range;

use super::{Month, PanelDataset};
use crate::grad::Tensor;

/// Read access to per-observation covariates and targets. Training code
/// goes through this trait so tests can audit which months are touched.
pub trait ObservationSource {
    fn n_assets(&self) -> usize;
    /// Calendar months with covariates (observation months plus the final one).
    fn n_months(&self) -> usize;
    fn dim(&self) -> usize;
    fn covariates(&self, asset: usize, month: usize) -> Option<&[f64]>;
    fn target(&self, asset: usize, month: usize) -> Option<f64>;
}

/// Appends `x ⊗ c` in macro-major order: entry `(j, k)` is `x[j] * c[k]`.
pub fn kronecker(x: &[f64], c: &[f64], out: &mut Vec<f64>) {
    for &xj in x {
        out.extend(c.iter().map(|&ck| xj * ck));
    }
}

/// Covariates `z = x_t ⊗ c_{i,t}` for every present row, with targets.
#[derive(Clone, Debug)]
pub struct CovariatePanel {
    months: Vec<Month>,
    assets: Vec<String>,
    dim: usize,
    values: Vec<f64>,
    available: Vec<bool>,
    targets: Vec<Option<f64>>,
    oracle: Option<Vec<Option<f64>>>,
}

/// Builds the covariate panel from a (normalized) dataset.
pub fn build_covariates(panel: &PanelDataset) -> CovariatePanel {
    let dim = panel.macro_dim() * panel.char_dim();
    let (n, t_len) = (panel.n_assets(), panel.n_months());
    let mut values = Vec::with_capacity(n * t_len * dim);
    let mut available = Vec::with_capacity(n * t_len);
    let mut targets = Vec::with_capacity(n * t_len);
    let mut oracle = panel.has_oracle().then(|| Vec::with_capacity(n * t_len));
    for i in 0..n {
        for t in 0..t_len {
            match panel.characteristics(i, t) {
                Some(c) => {
                    kronecker(panel.macro_at(t), c, &mut values);
                    available.push(true);
                }
                None => {
                    values.extend(std::iter::repeat_n(0.0, dim));
                    available.push(false);
                }
            }
            targets.push(panel.target(i, t));
            if let Some(o) = oracle.as_mut() {
                o.push(panel.oracle(i, t));
            }
        }
    }
    CovariatePanel {
        months: panel.months().to_vec(),
        assets: panel.assets().to_vec(),
        dim,
        values,
        available,
        targets,
        oracle,
    }
}

impl CovariatePanel {
    pub fn months(&self) -> &[Month] {
        &self.months
    }

    /// Months that carry observations (all but the last calendar month).
    pub fn obs_months(&self) -> &[Month] {
        &self.months[..self.months.len() - 1]
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn oracle(&self, asset: usize, month: usize) -> Option<f64> {
        self.oracle.as_ref()?[asset * self.months.len() + month]
    }

    pub fn has_oracle(&self) -> bool {
        self.oracle.is_some()
    }
}

impl ObservationSource for CovariatePanel {
    fn n_assets(&self) -> usize {
        self.assets.len()
    }

    fn n_months(&self) -> usize {
        self.months.len()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn covariates(&self, asset: usize, month: usize) -> Option<&[f64]> {
        let cell = asset * self.months.len() + month;
        self.available[cell].then(|| &self.values[cell * self.dim..(cell + 1) * self.dim])
    }

    fn target(&self, asset: usize, month: usize) -> Option<f64> {
        self.targets[asset * self.months.len() + month]
    }
}

/// A mini-batch of covariate windows.
#[derive(Clone, Debug)]
pub struct SequenceBatch {
    /// `[batch, window, dim]`; the last step is the observation month.
    pub inputs: Tensor,
    pub targets: Vec<f64>,
}

/// Flattened training examples: trailing windows of `window` consecutive
/// months for one asset, each paired with the return after the last step.
#[derive(Clone, Debug)]
pub struct Examples {
    pub window: usize,
    pub dim: usize,
    inputs: Vec<f64>,
    targets: Vec<f64>,
    /// `(asset, observation month)` of each example.
    keys: Vec<(usize, usize)>,
}

impl Examples {
    /// Collects every observation in `months` that has a target and a full
    /// window of covariates. Order is month-major, then asset.
    pub fn collect(src: &dyn ObservationSource, months: Range<usize>, window: usize) -> Examples {
        assert!(window >= 1);
        let dim = src.dim();
        let mut ex = Examples {
            window,
            dim,
            inputs: Vec::new(),
            targets: Vec::new(),
            keys: Vec::new(),
        };
        for t in months {
            if t + 1 < window {
                continue;
            }
            'asset: for i in 0..src.n_assets() {
                let Some(y) = src.target(i, t) else { continue };
                let start = ex.inputs.len();
                for s in t + 1 - window..=t {
                    match src.covariates(i, s) {
                        Some(z) => ex.inputs.extend_from_slice(z),
                        None => {
                            ex.inputs.truncate(start);
                            continue 'asset;
                        }
                    }
                }
                ex.targets.push(y);
                ex.keys.push((i, t));
            }
        }
        ex
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn keys(&self) -> &[(usize, usize)] {
        &self.keys
    }

    /// Window of example `k`, `[window * dim]` row-major.
    pub fn input(&self, k: usize) -> &[f64] {
        let w = self.window * self.dim;
        &self.inputs[k * w..(k + 1) * w]
    }

    pub fn batch(&self, idx: &[usize]) -> SequenceBatch {
        let w = self.window * self.dim;
        let mut inputs = Vec::with_capacity(idx.len() * w);
        for &k in idx {
            inputs.extend_from_slice(self.input(k));
        }
        SequenceBatch {
            inputs: Tensor::raw(vec![idx.len(), self.window, self.dim], inputs),
            targets: idx.iter().map(|&k| self.targets[k]).collect(),
        }
    }

    /// Consecutive batches of at most `size` examples, in storage order.
    pub fn batches(&self, size: usize) -> impl Iterator<Item = SequenceBatch> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        let chunks: Vec<Vec<usize>> = idx.chunks(size.max(1)).map(<[usize]>::to_vec).collect();
        chunks.into_iter().map(move |c| self.batch(&c))
    }
}
