use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{generate_panel, DgpSpec};
use crate::data::{build_covariates, CovariatePanel, SplitSpec};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::eval::{build_r2_table, r2_oos, ForecastPanel, ForecastRecord, R2Entry, R2Table, SliceTag};
use crate::models::ModelSpec;
use crate::train::{forecast, train, TrainConfig};

/// Label of the true-conditional-mean row in study tables.
pub const ORACLE: &str = "Oracle";

/// Emits the DGP's conditional mean for every observation in `months`
/// that has a realized target.
pub fn oracle_forecast(panel: &CovariatePanel, months: Range<usize>, slice: SliceTag) -> Result<ForecastPanel> {
    if !panel.has_oracle() {
        return Err(Error::Data("panel carries no oracle column".into()));
    }
    if months.end > panel.obs_months().len() || months.start >= months.end {
        return Err(Error::Data(format!(
            "slice {months:?} outside the panel's {} observation months",
            panel.obs_months().len()
        )));
    }
    use crate::data::ObservationSource;
    let mut records = Vec::new();
    for t in months {
        for i in 0..panel.n_assets() {
            if let (Some(g), Some(r)) = (panel.oracle(i, t), panel.target(i, t)) {
                records.push(ForecastRecord {
                    month: panel.months()[t],
                    asset: panel.assets()[i].clone(),
                    predicted: g,
                    realized: r,
                });
            }
        }
    }
    ForecastPanel::new(ORACLE, slice, records)
}

/// A grid of DGPs, a model list and the number of Monte Carlo repetitions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    /// `(label, spec)`; each repetition reseeds the spec.
    pub dgps: Vec<(String, DgpSpec)>,
    pub models: Vec<ModelSpec>,
    pub train: TrainConfig,
    #[serde(default)]
    pub split: SplitSpec,
    pub reps: usize,
    pub seed: u64,
}

/// R² of one model on one repetition of one DGP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepResult {
    pub dgp: String,
    pub model: String,
    pub rep: usize,
    pub in_sample: f64,
    pub out_of_sample: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub reps: Vec<RepResult>,
    /// Averages over repetitions; models in configured order, oracle last.
    pub table: R2Table,
}

/// Runs every (DGP, repetition, model) combination: consecutive
/// train/validation/test split, training with early stopping on the
/// validation slice, R² on the training and test slices.
pub fn run_simulation_study(cfg: &StudyConfig) -> Result<StudyResult> {
    if cfg.reps == 0 {
        return Err(Error::Config("a study needs at least one repetition".into()));
    }
    let mut reps = Vec::new();
    for (d, (label, spec)) in cfg.dgps.iter().enumerate() {
        for rep in 0..cfg.reps {
            let seed = derive_seed(cfg.seed, &[d as u64, rep as u64]);
            reps.extend(run_repetition(cfg, label, &spec.with_seed(seed), rep)?);
        }
    }
    Ok(StudyResult {
        table: summarize(cfg, &reps),
        reps,
    })
}

fn run_repetition(cfg: &StudyConfig, label: &str, spec: &DgpSpec, rep: usize) -> Result<Vec<RepResult>> {
    let panel = build_covariates(&generate_panel(spec)?);
    let splits = cfg.split.apply(panel.obs_months())?;
    let mut out = Vec::new();
    for (m, model) in cfg.models.iter().enumerate() {
        let name = model.label();
        let attribute = |e: Error| Error::Study {
            model: name.clone(),
            rep,
            source: Box::new(e),
        };
        let model_seed = derive_seed(spec.seed, &[m as u64]);
        let handle = model.build(crate::data::ObservationSource::dim(&panel), model_seed).map_err(attribute)?;
        let tc = TrainConfig {
            seed: model_seed,
            ..cfg.train.clone()
        };
        let (fitted, log) = train(&handle, &panel, &splits, &tc).map_err(attribute)?;
        log::info!("{label} rep {rep} {name}: best epoch {} of {}", log.best_epoch, log.epochs.len());
        let is = forecast(&fitted, &panel, splits.train.clone(), &name, SliceTag::InSample).map_err(attribute)?;
        let oos = forecast(&fitted, &panel, splits.test.clone(), &name, SliceTag::OutOfSample).map_err(attribute)?;
        out.push(RepResult {
            dgp: label.to_string(),
            model: name,
            rep,
            in_sample: r2_oos(&is)?,
            out_of_sample: r2_oos(&oos)?,
        });
    }
    let is = oracle_forecast(&panel, splits.train.clone(), SliceTag::InSample)?;
    let oos = oracle_forecast(&panel, splits.test.clone(), SliceTag::OutOfSample)?;
    out.push(RepResult {
        dgp: label.to_string(),
        model: ORACLE.into(),
        rep,
        in_sample: r2_oos(&is)?,
        out_of_sample: r2_oos(&oos)?,
    });
    Ok(out)
}

/// Averages repetition results in repetition order.
pub fn summarize(cfg: &StudyConfig, reps: &[RepResult]) -> R2Table {
    let mut names: Vec<String> = cfg.models.iter().map(ModelSpec::label).collect();
    names.push(ORACLE.into());
    let mut entries = Vec::new();
    for (label, _) in &cfg.dgps {
        for name in &names {
            let rows: Vec<&RepResult> = reps.iter().filter(|r| &r.dgp == label && &r.model == name).collect();
            if rows.is_empty() {
                continue;
            }
            let n = rows.len() as f64;
            entries.push(R2Entry {
                model: name.clone(),
                group: label.clone(),
                in_sample: Some(rows.iter().map(|r| r.in_sample).sum::<f64>() / n),
                out_of_sample: rows.iter().map(|r| r.out_of_sample).sum::<f64>() / n,
            });
        }
    }
    build_r2_table(entries)
}
