//! A delayed-recall sequence task for probing recurrent memory.
//!
//! Inputs are i.i.d. standard normal vectors. The target observed after
//! month `t` is the first input coordinate from `lag` months earlier plus
//! Gaussian noise, so a model can only beat the zero forecast by carrying
//! that value through `lag` recurrent steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::ObservationSource;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryTaskSpec {
    pub n_assets: usize,
    pub n_months: usize,
    pub dim: usize,
    pub lag: usize,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for MemoryTaskSpec {
    fn default() -> Self {
        MemoryTaskSpec {
            n_assets: 100,
            n_months: 120,
            dim: 4,
            lag: 10,
            noise_scale: 1.0,
            seed: 0,
        }
    }
}

impl MemoryTaskSpec {
    /// Population R² (%) of the true conditional mean on months past the lag.
    pub fn oracle_r2(&self) -> f64 {
        100.0 / (1.0 + self.noise_scale * self.noise_scale)
    }
}

/// A generated delayed-recall panel.
#[derive(Clone, Debug)]
pub struct MemoryTask {
    spec: MemoryTaskSpec,
    inputs: Vec<f64>,
    targets: Vec<f64>,
}

impl MemoryTask {
    pub fn generate(spec: &MemoryTaskSpec) -> Result<Self> {
        if spec.n_assets == 0 || spec.dim == 0 || spec.n_months <= spec.lag + 1 {
            return Err(Error::Config(format!(
                "memory task needs assets, inputs and more than {} months",
                spec.lag + 1
            )));
        }
        if !(spec.noise_scale >= 0.0 && spec.noise_scale.is_finite()) {
            return Err(Error::Config("noise_scale must be finite and non-negative".into()));
        }
        let (n, t, d) = (spec.n_assets, spec.n_months, spec.dim);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let inputs: Vec<f64> = (0..n * t * d).map(|_| rng.sample(StandardNormal)).collect();
        let mut targets = vec![0.0; n * t];
        for i in 0..n {
            for s in 0..t {
                let signal = if s >= spec.lag { inputs[(i * t + s - spec.lag) * d] } else { 0.0 };
                let eps: f64 = rng.sample(StandardNormal);
                targets[i * t + s] = signal + spec.noise_scale * eps;
            }
        }
        Ok(MemoryTask {
            spec: spec.clone(),
            inputs,
            targets,
        })
    }

    pub fn spec(&self) -> &MemoryTaskSpec {
        &self.spec
    }
}

impl ObservationSource for MemoryTask {
    fn n_assets(&self) -> usize {
        self.spec.n_assets
    }

    fn n_months(&self) -> usize {
        self.spec.n_months
    }

    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn covariates(&self, asset: usize, month: usize) -> Option<&[f64]> {
        let d = self.spec.dim;
        let c = asset * self.spec.n_months + month;
        self.inputs.get(c * d..(c + 1) * d)
    }

    // The final month only supplies covariates, as in a return panel.
    fn target(&self, asset: usize, month: usize) -> Option<f64> {
        (month + 1 < self.spec.n_months).then(|| self.targets[asset * self.spec.n_months + month])
    }
}
