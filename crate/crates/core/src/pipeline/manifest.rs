use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.toml";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Record of one stage's outputs, stored next to them as `manifest.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub stage: String,
    pub version: String,
    /// Digest of the effective configuration (after command-line overrides).
    pub config_hash: String,
    pub wall_time_secs: f64,
    /// Stage directory this stage read from, relative to the run directory.
    #[serde(default)]
    pub inputs: Vec<String>,
    pub files: Vec<FileDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

impl RunManifest {
    /// Digests every listed file (names relative to `dir`) and writes the manifest.
    pub fn write(
        dir: &Path,
        stage: &str,
        config_hash: &str,
        inputs: Vec<String>,
        mut files: Vec<String>,
        wall_time_secs: f64,
    ) -> Result<RunManifest> {
        files.sort();
        let files = files
            .into_iter()
            .map(|path| {
                let sha256 = file_digest(&dir.join(&path))?;
                Ok(FileDigest { path, sha256 })
            })
            .collect::<Result<Vec<_>>>()?;
        let m = RunManifest {
            stage: stage.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.to_string(),
            wall_time_secs,
            inputs,
            files,
        };
        let text = toml::to_string(&m).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        fs::write(dir.join(MANIFEST), text)?;
        Ok(m)
    }

    pub fn read(dir: &Path) -> Result<RunManifest> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    /// Re-digests every listed file; any difference is a data error.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for f in &self.files {
            let path = dir.join(&f.path);
            let actual = file_digest(&path)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            if actual != f.sha256 {
                return Err(Error::Data(format!(
                    "{} does not match its manifest digest (modified after the {} stage wrote it)",
                    path.display(),
                    self.stage
                )));
            }
        }
        Ok(())
    }

    pub fn digest_of(&self, file: &str) -> Option<&str> {
        self.files.iter().find(|f| f.path == file).map(|f| f.sha256.as_str())
    }
}
