//! Panel ingestion, rank normalization, Kronecker covariates and temporal splits.

mod covariates;
mod month;
mod panel;
mod rank;
mod split;

pub use covariates::{
    build_covariates, kronecker, CovariatePanel, Examples, ObservationSource, SequenceBatch,
};
pub use month::Month;
pub use panel::{PanelDataset, PanelRow, PanelSchema};
pub use rank::{rank_map, rank_normalize};
pub use split::{SplitSpec, Splits};
