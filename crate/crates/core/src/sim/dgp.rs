use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{rank_map, Month, PanelDataset, PanelRow};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DgpModel {
    /// `0.02 (c1 + c2 + c3 x1)`: three active Kronecker covariates.
    Linear,
    /// `0.04 c1^2 + 0.03 c1 c2 + 0.012 sign(c3 x1)`.
    Nonlinear,
}

/// Noise level that puts the default nonlinear oracle R² near 7.7%.
///
/// With ranked characteristics close to uniform on [-1, 1] and a standard
/// normal macro factor, the nonlinear signal has second moment
/// 0.04²/5 + 0.03²/9 + 0.012² ≈ 5.64e-4; a noise variance of 6.75e-3
/// gives 5.64e-4 / (5.64e-4 + 6.75e-3) ≈ 0.077.
pub const DEFAULT_NOISE_SCALE: f64 = 0.0822;

/// Synthetic panel generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpSpec {
    pub n_assets: usize,
    pub n_months: usize,
    pub n_characteristics: usize,
    /// Macro series, not counting the constant.
    pub n_macro: usize,
    pub model: DgpModel,
    /// Standard deviation of the return noise.
    pub noise_scale: f64,
    /// AR(1) coefficient of the macro series.
    pub persistence: f64,
    /// AR(1) coefficient of the latent characteristic draws.
    pub char_persistence: f64,
    pub seed: u64,
    pub start_month: Month,
}

impl Default for DgpSpec {
    fn default() -> Self {
        DgpSpec {
            n_assets: 200,
            n_months: 180,
            n_characteristics: 4,
            n_macro: 2,
            model: DgpModel::Nonlinear,
            noise_scale: DEFAULT_NOISE_SCALE,
            persistence: 0.95,
            char_persistence: 0.9,
            seed: 0,
            start_month: Month::new(2000, 1).unwrap(),
        }
    }
}

impl DgpSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_assets < 1 || self.n_months < 2 {
            return bad("simulation needs at least one asset and two months");
        }
        if self.n_characteristics < 3 || self.n_macro < 1 {
            return bad("the DGP reads three characteristics and one macro series");
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be positive");
        }
        if !(self.persistence.abs() < 1.0) || !(self.char_persistence.abs() < 1.0) {
            return bad("persistence must lie strictly inside (-1, 1)");
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> DgpSpec {
        DgpSpec {
            seed,
            ..self.clone()
        }
    }
}

/// Conditional mean of next month's return given characteristics `c`
/// (ranked, in [-1, 1]) and macro series `x` (without the constant).
pub fn conditional_mean(model: DgpModel, c: &[f64], x: &[f64]) -> f64 {
    match model {
        DgpModel::Linear => 0.02 * (c[0] + c[1] + c[2] * x[0]),
        DgpModel::Nonlinear => {
            let s = c[2] * x[0];
            let sign = if s > 0.0 {
                1.0
            } else if s < 0.0 {
                -1.0
            } else {
                0.0
            };
            0.04 * c[0] * c[0] + 0.03 * c[0] * c[1] + 0.012 * sign
        }
    }
}

/// Simulates a fully observed panel. Month `t` carries ranked
/// characteristics, the conditional mean of the return at `t + 1` in the
/// oracle column, and the return realized at `t` (noise only in the first
/// month).
pub fn generate_panel(spec: &DgpSpec) -> Result<PanelDataset> {
    spec.validate()?;
    let (n, t_len, k, px) = (spec.n_assets, spec.n_months, spec.n_characteristics, spec.n_macro);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };

    // Stationary unit-variance AR(1) paths.
    let ar = |prev: Option<f64>, rho: f64, e: f64| match prev {
        None => e,
        Some(p) => rho * p + (1.0 - rho * rho).sqrt() * e,
    };
    let mut macro_x = vec![0.0; t_len * px];
    for j in 0..px {
        for t in 0..t_len {
            let prev = (t > 0).then(|| macro_x[(t - 1) * px + j]);
            macro_x[t * px + j] = ar(prev, spec.persistence, normal());
        }
    }
    // latent[asset][month][k]
    let mut latent = vec![0.0; n * t_len * k];
    for i in 0..n {
        for j in 0..k {
            for t in 0..t_len {
                let prev = (t > 0).then(|| latent[(i * t_len + t - 1) * k + j]);
                latent[(i * t_len + t) * k + j] = ar(prev, spec.char_persistence, normal());
            }
        }
    }
    let mut chars = vec![0.0; n * t_len * k];
    let mut column = vec![0.0; n];
    for t in 0..t_len {
        for j in 0..k {
            for (i, v) in column.iter_mut().enumerate() {
                *v = latent[(i * t_len + t) * k + j];
            }
            for (i, r) in rank_map(&column).into_iter().enumerate() {
                chars[(i * t_len + t) * k + j] = r;
            }
        }
    }

    let width = (n.max(2) - 1).to_string().len();
    let mut rows = Vec::with_capacity(n * t_len);
    for i in 0..n {
        let asset = format!("s{i:0width$}");
        for t in 0..t_len {
            let c = &chars[(i * t_len + t) * k..(i * t_len + t + 1) * k];
            let mean = conditional_mean(spec.model, c, &macro_x[t * px..(t + 1) * px]);
            let prior = if t == 0 {
                0.0
            } else {
                let cp = &chars[(i * t_len + t - 1) * k..(i * t_len + t) * k];
                conditional_mean(spec.model, cp, &macro_x[(t - 1) * px..t * px])
            };
            rows.push(PanelRow {
                month: spec.start_month.plus(t as i32),
                asset: asset.clone(),
                ret: Some(prior + spec.noise_scale * normal()),
                chars: c.iter().map(|&v| Some(v)).collect(),
                oracle: Some(mean),
            });
        }
    }
    let char_names = (1..=k).map(|j| format!("c_{j}")).collect();
    let macro_names = (1..=px).map(|j| format!("x_{j}")).collect();
    let table = (0..t_len)
        .map(|t| (spec.start_month.plus(t as i32), macro_x[t * px..(t + 1) * px].to_vec()))
        .collect();
    PanelDataset::from_rows(char_names, rows, Some((macro_names, table)), true)
}

/// Mean squared conditional mean over a noiseless panel of the spec's
/// shape (a Monte Carlo estimate of the signal's second moment).
pub fn signal_moment(spec: &DgpSpec) -> Result<f64> {
    let panel = generate_panel(spec)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..panel.n_assets() {
        for t in 0..panel.n_obs_months() {
            if let Some(g) = panel.oracle(i, t) {
                sum += g * g;
                count += 1;
            }
        }
    }
    Ok(sum / count as f64)
}

/// Population R² of the oracle against the zero forecast:
/// `E[g^2] / (E[g^2] + noise^2)`.
pub fn oracle_r2(spec: &DgpSpec) -> Result<f64> {
    let s = signal_moment(spec)?;
    Ok(s / (s + spec.noise_scale * spec.noise_scale))
}

/// Noise scale at which the oracle's population R² equals `target`.
pub fn calibrate_noise(spec: &DgpSpec, target: f64) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Config(format!("target R² must be in (0, 1), got {target}")));
    }
    let s = signal_moment(spec)?;
    Ok((s * (1.0 / target - 1.0)).sqrt())
}
