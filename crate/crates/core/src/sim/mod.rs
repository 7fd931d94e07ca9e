//! Synthetic return panels with a known conditional mean, and the Monte
//! Carlo study that compares fitted models against it.

mod dgp;
mod memory;
mod study;

pub use dgp::{
    calibrate_noise, conditional_mean, generate_panel, oracle_r2, signal_moment, DgpModel, DgpSpec,
    DEFAULT_NOISE_SCALE,
};
pub use memory::{MemoryTask, MemoryTaskSpec};
pub use study::{oracle_forecast, run_simulation_study, summarize, RepResult, StudyConfig, StudyResult, ORACLE};
