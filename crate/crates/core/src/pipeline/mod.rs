//! Staged, reproducible runs: simulate, train, predict, evaluate, backtest
//! and report. Each stage writes into its own directory under the run
//! directory together with a manifest of content digests; downstream
//! stages verify those digests before reading.

mod config;
mod manifest;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backtest::{cumulative_series, portfolio_report, portfolio_returns};
use crate::data::{build_covariates, rank_normalize, CovariatePanel, ObservationSource, PanelDataset, Splits};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::eval::{build_dm_matrix, MIN_DM_MONTHS, build_r2_table, r2_oos, ForecastPanel, R2Entry, SliceTag};
use crate::grad::Tensor;
use crate::models::{Arch, Hyper, ModelHandle, ModelSpec};
use crate::sim::{generate_panel, oracle_forecast, ORACLE};
use crate::train::{forecast, train, TrainConfig};

pub use config::{EvaluateConfig, Paths, RunConfig};
pub use manifest::{file_digest, sha256_hex, FileDigest, RunManifest, MANIFEST};

/// Process exit status for an error: 2 configuration, 3 data, 4 numeric
/// divergence, 1 anything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Study { source, .. } => exit_code(source),
        _ if e.is_numeric() => 4,
        Error::Data(_) | Error::Csv(_) | Error::Json(_) | Error::Empty(_) | Error::RankDeficient(_) | Error::Degenerate(_) => 3,
        _ => 1,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Simulate,
    Train,
    Predict,
    Evaluate,
    Backtest,
    Report,
    GradCheck,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Train => "train",
            Stage::Predict => "predict",
            Stage::Evaluate => "evaluate",
            Stage::Backtest => "backtest",
            Stage::Report => "report",
            Stage::GradCheck => "gradcheck",
        }
    }
}

/// A run directory plus the effective configuration.
pub struct Pipeline {
    pub config: RunConfig,
    pub root: PathBuf,
    config_hash: String,
}

/// Where a stage wrote its outputs.
#[derive(Clone, Debug)]
pub struct StageOutput {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

impl Pipeline {
    pub fn new(config: RunConfig, root: PathBuf) -> Result<Self> {
        config.validate()?;
        let mut hashed = config.clone();
        // where the run is written does not change what is written
        hashed.paths.out = None;
        let config_hash = sha256_hex(hashed.canonical().as_bytes());
        Ok(Pipeline {
            config,
            root,
            config_hash,
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    /// Latest output directory of `stage`: `root/<stage>` or its newest
    /// `rerun-NNN` subdirectory.
    pub fn latest(&self, stage: Stage) -> Option<PathBuf> {
        let base = self.root.join(stage.name());
        if !base.join(MANIFEST).is_file() {
            return None;
        }
        Some(rerun_dirs(&base).pop().unwrap_or(base))
    }

    /// Fresh directory for a stage's outputs. Earlier outputs are never
    /// overwritten: a rerun goes into the next `rerun-NNN` subdirectory.
    fn fresh_dir(&self, stage: Stage) -> Result<PathBuf> {
        let base = self.root.join(stage.name());
        let dir = if base.join(MANIFEST).is_file() {
            let next = rerun_dirs(&base).len() + 1;
            base.join(format!("rerun-{next:03}"))
        } else {
            base
        };
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    /// Latest verified output of an upstream stage.
    fn upstream(&self, stage: Stage) -> Result<StageOutput> {
        let dir = self.latest(stage).ok_or_else(|| {
            Error::Data(format!(
                "no {} output under {}; run that stage first",
                stage.name(),
                self.root.display()
            ))
        })?;
        let manifest = RunManifest::read(&dir)?;
        manifest.verify(&dir)?;
        Ok(StageOutput { dir, manifest })
    }

    fn require_same_config(&self, up: &StageOutput) -> Result<()> {
        if up.manifest.config_hash != self.config_hash && up.manifest.stage != Stage::Simulate.name() {
            return Err(Error::Config(format!(
                "{} was produced with a different configuration; rerun it or use the matching config",
                up.dir.display()
            )));
        }
        Ok(())
    }

    fn relative(&self, dir: &Path) -> String {
        dir.strip_prefix(&self.root).unwrap_or(dir).display().to_string()
    }

    fn finish(&self, stage: Stage, dir: PathBuf, inputs: Vec<&StageOutput>, files: Vec<String>, t0: Instant) -> Result<StageOutput> {
        let inputs = inputs.iter().map(|o| self.relative(&o.dir)).collect();
        let manifest = RunManifest::write(&dir, stage.name(), &self.config_hash, inputs, files, t0.elapsed().as_secs_f64())?;
        log::info!("{} wrote {} files to {}", stage.name(), manifest.files.len(), dir.display());
        Ok(StageOutput { dir, manifest })
    }

    pub fn simulate(&self) -> Result<StageOutput> {
        let t0 = Instant::now();
        let spec = self
            .config
            .simulate
            .as_ref()
            .ok_or_else(|| Error::Config("`simulate` needs a [simulate] table".into()))?;
        let panel = generate_panel(&spec.with_seed(derive_seed(self.config.seed, &[u64::MAX])))?;
        let dir = self.fresh_dir(Stage::Simulate)?;
        panel.write_csv(&dir.join("panel.csv"))?;
        panel.write_macro_csv(&dir.join("macro.csv"))?;
        self.finish(Stage::Simulate, dir, vec![], vec!["panel.csv".into(), "macro.csv".into()], t0)
    }

    /// Loads, rank-normalizes and splits the configured or simulated panel.
    fn load_panel(&self) -> Result<(CovariatePanel, Splits, Option<StageOutput>)> {
        let (panel_path, macro_path, sim) = match &self.config.paths.panel {
            Some(p) => (p.clone(), self.config.paths.macro_file.clone(), None),
            None => {
                let sim = self.upstream(Stage::Simulate)?;
                (sim.dir.join("panel.csv"), Some(sim.dir.join("macro.csv")), Some(sim))
            }
        };
        let mut panel = PanelDataset::load(&panel_path, macro_path.as_deref(), &self.config.schema()?)?;
        rank_normalize(&mut panel);
        let cov = build_covariates(&panel);
        let splits = self.config.split.apply(cov.obs_months())?;
        Ok((cov, splits, sim))
    }

    fn models(&self) -> Result<&[ModelSpec]> {
        if self.config.models.is_empty() {
            return Err(Error::Config("no models configured".into()));
        }
        Ok(&self.config.models)
    }

    pub fn train(&self) -> Result<StageOutput> {
        let t0 = Instant::now();
        let models = self.models()?;
        let (panel, splits, sim) = self.load_panel()?;
        let dir = self.fresh_dir(Stage::Train)?;
        let mut files = Vec::new();
        for (m, spec) in models.iter().enumerate() {
            let label = spec.label();
            let seed = derive_seed(self.config.seed, &[m as u64]);
            let handle = spec.build(panel.dim(), seed)?;
            let tc = TrainConfig {
                seed,
                ..self.config.train.clone()
            };
            let (fitted, log) = train(&handle, &panel, &splits, &tc)?;
            log::info!("{label}: best epoch {} of {}", log.best_epoch, log.epochs.len());
            fitted.save(&dir.join(format!("{label}.model.json")))?;
            log.write_csv(&dir.join(format!("{label}.log.csv")))?;
            files.push(format!("{label}.model.json"));
            files.push(format!("{label}.log.csv"));
        }
        self.finish(Stage::Train, dir, sim.iter().collect(), files, t0)
    }

    pub fn predict(&self) -> Result<StageOutput> {
        let t0 = Instant::now();
        let trained = self.upstream(Stage::Train)?;
        self.require_same_config(&trained)?;
        let (panel, splits, sim) = self.load_panel()?;
        let dir = self.fresh_dir(Stage::Predict)?;
        let mut files = Vec::new();
        let write = |f: ForecastPanel, files: &mut Vec<String>| -> Result<()> {
            let name = format!("{}.{}.csv", f.model(), f.slice().label());
            f.write_csv(&dir.join(&name))?;
            files.push(name);
            Ok(())
        };
        for spec in self.models()? {
            let label = spec.label();
            let model = ModelHandle::load(&trained.dir.join(format!("{label}.model.json")))?;
            write(forecast(&model, &panel, splits.train.clone(), &label, SliceTag::InSample)?, &mut files)?;
            write(forecast(&model, &panel, splits.test.clone(), &label, SliceTag::OutOfSample)?, &mut files)?;
        }
        if panel.has_oracle() {
            write(oracle_forecast(&panel, splits.train.clone(), SliceTag::InSample)?, &mut files)?;
            write(oracle_forecast(&panel, splits.test.clone(), SliceTag::OutOfSample)?, &mut files)?;
        }
        let mut inputs = vec![&trained];
        inputs.extend(sim.iter());
        self.finish(Stage::Predict, dir, inputs, files, t0)
    }

    /// Forecast panels from the latest predict output, in configured order
    /// (oracle last when present).
    fn forecasts(&self, pred: &StageOutput, slice: SliceTag, with_oracle: bool) -> Result<Vec<ForecastPanel>> {
        let mut labels: Vec<String> = self.models()?.iter().map(ModelSpec::label).collect();
        if with_oracle && pred.manifest.digest_of(&format!("{ORACLE}.{}.csv", slice.label())).is_some() {
            labels.push(ORACLE.into());
        }
        labels
            .iter()
            .map(|l| ForecastPanel::read_csv(&pred.dir.join(format!("{l}.{}.csv", slice.label())), l, slice))
            .collect()
    }

    pub fn evaluate(&self) -> Result<StageOutput> {
        let t0 = Instant::now();
        let pred = self.upstream(Stage::Predict)?;
        self.require_same_config(&pred)?;
        let is = self.forecasts(&pred, SliceTag::InSample, true)?;
        let oos = self.forecasts(&pred, SliceTag::OutOfSample, true)?;
        let mut entries = Vec::new();
        for (a, b) in is.iter().zip(&oos) {
            entries.push(R2Entry {
                model: b.model().to_string(),
                group: self.config.evaluate.label.clone(),
                in_sample: Some(r2_oos(a)?),
                out_of_sample: r2_oos(b)?,
            });
        }
        let dir = self.fresh_dir(Stage::Evaluate)?;
        build_r2_table(entries).write_csv(&dir.join("r2.csv"))?;
        let mut files = vec!["r2.csv".to_string()];
        let fitted: Vec<ForecastPanel> = oos.into_iter().filter(|f| f.model() != ORACLE).collect();
        let months = fitted.first().map_or(0, |f| f.months().len());
        if fitted.len() >= 2 && months >= MIN_DM_MONTHS {
            let dm = build_dm_matrix(&fitted, self.config.evaluate.dm_lag)?;
            dm.write(&dir.join("dm.csv"), &dir.join("dm.txt"))?;
            files.push("dm.csv".into());
            files.push("dm.txt".into());
        } else if fitted.len() >= 2 {
            fs::write(
                dir.join("dm.txt"),
                format!("Not computed: the test slice has {months} months, the comparison needs {MIN_DM_MONTHS}.\n"),
            )?;
            files.push("dm.txt".into());
        }
        self.finish(Stage::Evaluate, dir, vec![&pred], files, t0)
    }

    pub fn backtest(&self) -> Result<StageOutput> {
        let t0 = Instant::now();
        let pred = self.upstream(Stage::Predict)?;
        self.require_same_config(&pred)?;
        let dir = self.fresh_dir(Stage::Backtest)?;
        let mut files = Vec::new();
        for f in self.forecasts(&pred, SliceTag::OutOfSample, true)? {
            let series = portfolio_returns(&f)?;
            let name = f.model();
            portfolio_report(name, &series)?.write_csv(&dir.join(format!("{name}.portfolio.csv")))?;
            cumulative_series(&series)?.write_csv(&dir.join(format!("{name}.cumulative.csv")))?;
            files.push(format!("{name}.portfolio.csv"));
            files.push(format!("{name}.cumulative.csv"));
        }
        self.finish(Stage::Backtest, dir, vec![&pred], files, t0)
    }

    /// Assembles the R² table, comparison matrix, portfolio tables and
    /// cumulative-series pointers into `report.md`.
    pub fn report(&self) -> Result<StageOutput> {
        let t0 = Instant::now();
        let eval = self.upstream(Stage::Evaluate)?;
        let bt = self.upstream(Stage::Backtest)?;
        let mut doc = String::from("# Run report\n\n");
        let _ = writeln!(doc, "Configuration digest: `{}`\n", self.config_hash);
        doc.push_str("## Predictive R² (%)\n\n");
        doc.push_str(&csv_to_markdown(&fs::read_to_string(eval.dir.join("r2.csv"))?));
        doc.push_str("\n## Pairwise forecast comparison\n\n");
        match fs::read_to_string(eval.dir.join("dm.txt")) {
            Ok(t) => {
                doc.push_str("```\n");
                doc.push_str(&t);
                doc.push_str("```\n");
            }
            Err(_) => doc.push_str("Fewer than two fitted models; no comparison.\n"),
        }
        doc.push_str("\n## Decile portfolios\n");
        let mut names: Vec<&str> = bt
            .manifest
            .files
            .iter()
            .filter_map(|f| f.path.strip_suffix(".portfolio.csv"))
            .collect();
        let order: Vec<String> = self.config.models.iter().map(ModelSpec::label).chain([ORACLE.to_string()]).collect();
        names.sort_by_key(|n| order.iter().position(|o| o == n).unwrap_or(usize::MAX));
        for name in &names {
            let _ = writeln!(doc, "\n### {name}\n");
            doc.push_str(&csv_to_markdown(&fs::read_to_string(bt.dir.join(format!("{name}.portfolio.csv")))?));
        }
        doc.push_str("\n## Cumulative log returns\n\n");
        for name in &names {
            let _ = writeln!(doc, "- {name}: `{}/{name}.cumulative.csv`", self.relative(&bt.dir));
        }
        let dir = self.fresh_dir(Stage::Report)?;
        fs::write(dir.join("report.md"), doc)?;
        self.finish(Stage::Report, dir, vec![&eval, &bt], vec!["report.md".into()], t0)
    }

    /// Finite-difference gradient check of every architecture on small
    /// random problems; writes `gradcheck.csv` and fails on any error
    /// above `tolerance`.
    pub fn grad_check(&self, seeds: u64, tolerance: f64) -> Result<StageOutput> {
        let t0 = Instant::now();
        let rows = grad_check_all(self.config.seed, seeds)?;
        let dir = self.fresh_dir(Stage::GradCheck)?;
        let mut csv = String::from("arch,seed,max_rel_error\n");
        for (arch, seed, err) in &rows {
            let _ = writeln!(csv, "{arch},{seed},{err:e}");
        }
        fs::write(dir.join("gradcheck.csv"), csv)?;
        let out = self.finish(Stage::GradCheck, dir, vec![], vec!["gradcheck.csv".into()], t0)?;
        if let Some((arch, seed, err)) = rows.iter().find(|r| !(r.2 < tolerance)) {
            return Err(Error::GradientMismatch(format!(
                "{arch} seed {seed}: relative error {err:e} exceeds {tolerance:e}"
            )));
        }
        Ok(out)
    }
}

fn rerun_dirs(base: &Path) -> Vec<PathBuf> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(base)
        .into_iter()
        .flatten()
        .flatten()
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("rerun-"))
                && p.join(MANIFEST).is_file()
        })
        .collect();
    dirs.sort();
    dirs
}

fn csv_to_markdown(csv: &str) -> String {
    let mut out = String::new();
    for (i, line) in csv.lines().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        let _ = writeln!(out, "| {} |", cells.join(" | "));
        if i == 0 {
            let _ = writeln!(out, "|{}", "---|".repeat(cells.len()));
        }
    }
    out
}

/// Small sizes used by the gradient check.
pub fn grad_check_hyper(input_dim: usize) -> Hyper {
    Hyper {
        input_dim,
        hidden: vec![5, 4],
        residual_width: 4,
        residual_blocks: 2,
        window: 4,
        state: 3,
        d_model: 4,
        heads: 2,
        layers: 1,
        ff_width: 6,
        conv_channels: vec![2, 3],
        kernel: 3,
        pool: 2,
        cnn_residual_blocks: 1,
        ..Hyper::default()
    }
}

/// Central-difference check (step 1e-5) of every architecture at `seeds`
/// seeds. Parameters are moved off exact zeros first so no ReLU sits on
/// its kink. Returns `(arch, seed, max relative error)`.
pub fn grad_check_all(base_seed: u64, seeds: u64) -> Result<Vec<(Arch, u64, f64)>> {
    let (batch, dim) = (3, 3);
    let mut rows = Vec::new();
    for arch in Arch::ALL {
        for s in 0..seeds {
            let seed = derive_seed(base_seed, &[arch as u64, s]);
            let mut model = ModelHandle::new(arch, grad_check_hyper(dim), seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for t in model.params.values_mut() {
                for v in t.data_mut() {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    *v += sign * rng.random_range(0.05..0.3);
                }
            }
            let l = model.window();
            let x: Vec<f64> = (0..batch * l * dim).map(|_| rng.sample(StandardNormal)).collect();
            let y: Vec<f64> = (0..batch).map(|_| rng.sample(StandardNormal)).collect();
            let err = model.grad_check(&Tensor::new(vec![batch, l, dim], x)?, &y, 1e-5)?;
            rows.push((arch, s, err));
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests;
