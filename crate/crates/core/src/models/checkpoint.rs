//! JSON checkpoint container for [`ModelHandle`].

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{init, Arch, Hyper, ModelHandle};
use crate::error::{Error, Result};
use crate::grad::Tensor;

const FORMAT: &str = "retlab-model";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    arch: Arch,
    seed: u64,
    hyper: Hyper,
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ModelHandle {
    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            arch: self.arch,
            seed: self.seed,
            hyper: self.hyper.clone(),
            params: self.params.clone(),
            buffers: self.buffers.clone(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    /// Parses a checkpoint and checks every tensor against the layout the
    /// architecture and sizes imply.
    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        init::validate(ck.arch, &ck.hyper)?;
        let (params, buffers) = init::initialize(ck.arch, &ck.hyper, ck.seed)?;
        let check = |kind: &str, want: &BTreeMap<String, Tensor>, got: &BTreeMap<String, Tensor>| {
            if want.len() != got.len() {
                return Err(Error::Data(format!("checkpoint {kind} do not match the architecture")));
            }
            for (name, t) in want {
                let g = got
                    .get(name)
                    .ok_or_else(|| Error::Data(format!("checkpoint lacks {kind} {name:?}")))?;
                let valid = g.shape() == t.shape()
                    && g.shape().iter().product::<usize>() == g.len()
                    && g.is_finite();
                if !valid {
                    return Err(Error::Data(format!("checkpoint {kind} {name:?} is malformed")));
                }
            }
            Ok(())
        };
        check("parameter", &params, &ck.params)?;
        check("buffer", &buffers, &ck.buffers)?;
        Ok(ModelHandle {
            arch: ck.arch,
            hyper: ck.hyper,
            params: ck.params,
            buffers: ck.buffers,
            seed: ck.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
