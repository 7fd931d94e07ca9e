use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{PanelSchema, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::DEFAULT_DM_LAG;
use crate::models::ModelSpec;
use crate::sim::DgpSpec;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Panel CSV; when absent the latest `simulate` output is used.
    pub panel: Option<PathBuf>,
    #[serde(rename = "macro")]
    pub macro_file: Option<PathBuf>,
    /// Column-role file for the panel and macro CSVs.
    pub schema: Option<PathBuf>,
    /// Run directory; `--out` overrides it.
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Newey-West lag of the forecast comparison test.
    pub dm_lag: usize,
    /// Group label written in the R² table.
    pub label: String,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            dm_lag: DEFAULT_DM_LAG,
            label: "test".into(),
        }
    }
}

/// Everything a pipeline run depends on besides its input files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub models: Vec<ModelSpec>,
    pub train: TrainConfig,
    pub split: SplitSpec,
    /// Synthetic panel settings for `simulate`.
    pub simulate: Option<DgpSpec>,
    pub evaluate: EvaluateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            paths: Paths::default(),
            models: vec![],
            train: TrainConfig::default(),
            split: SplitSpec::default(),
            simulate: None,
            evaluate: EvaluateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative data paths are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.paths.panel,
            &mut cfg.paths.macro_file,
            &mut cfg.paths.schema,
            &mut cfg.paths.out,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let Some(d) = &self.simulate {
            d.validate()?;
        }
        let mut labels: Vec<String> = self.models.iter().map(ModelSpec::label).collect();
        labels.sort();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("two models are labelled {:?}; set `name`", w[0])));
        }
        for l in &labels {
            if l.is_empty() || !l.chars().all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c)) {
                return Err(Error::Config(format!("model label {l:?} must be a plain file-name token")));
            }
        }
        Ok(())
    }

    /// Canonical serialization, used for the config digest.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn schema(&self) -> Result<PanelSchema> {
        match &self.paths.schema {
            None => Ok(PanelSchema::default()),
            Some(p) => PanelSchema::from_toml(
                &std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            ),
        }
    }
}
