//! Forecast panels, out-of-sample R² against a zero forecast, and pairwise
//! Diebold-Mariano comparisons.

mod dm;
mod forecast;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dm::{
    build_dm_matrix, dm_statistic, dm_test, loss_differentials, newey_west_variance, DmCell,
    DmMatrix, DEFAULT_DM_LAG, DM_CRITICAL, MIN_DM_MONTHS,
};
pub use forecast::{ForecastPanel, ForecastRecord, SliceTag};

/// `100 * (1 - SSE / sum r^2)`; the denominator is not demeaned.
pub fn r2_oos_values(predicted: &[f64], realized: &[f64]) -> Result<f64> {
    if realized.is_empty() {
        return Err(Error::Empty("R² of no observations".into()));
    }
    if predicted.len() != realized.len() {
        return Err(Error::shape("r2_oos", "prediction and realization counts differ"));
    }
    let sst: f64 = realized.iter().map(|r| r * r).sum();
    if sst == 0.0 {
        return Err(Error::Degenerate("all realized returns are zero".into()));
    }
    let sse: f64 = predicted
        .iter()
        .zip(realized)
        .map(|(p, r)| (r - p) * (r - p))
        .sum();
    Ok(100.0 * (1.0 - sse / sst))
}

pub fn r2_oos(panel: &ForecastPanel) -> Result<f64> {
    r2_oos_values(&panel.predicted(), &panel.realized())
}

/// One model's R² cells within a group (a span, a DGP, ...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct R2Entry {
    pub model: String,
    pub group: String,
    pub in_sample: Option<f64>,
    pub out_of_sample: f64,
}

/// Rows kept in the order they were added.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct R2Table {
    pub rows: Vec<R2Entry>,
}

/// Collects entries into a table without reordering them.
pub fn build_r2_table(entries: impl IntoIterator<Item = R2Entry>) -> R2Table {
    R2Table {
        rows: entries.into_iter().collect(),
    }
}

impl R2Table {
    /// `model,group,is_r2,oos_r2` with percentages to two decimals.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("model,group,is_r2,oos_r2\n");
        for r in &self.rows {
            let is = r.in_sample.map_or(String::new(), |v| format!("{v:.2}"));
            let _ = writeln!(s, "{},{},{},{:.2}", r.model, r.group, is, r.out_of_sample);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn get(&self, model: &str, group: &str) -> Option<&R2Entry> {
        self.rows.iter().find(|r| r.model == model && r.group == group)
    }
}
