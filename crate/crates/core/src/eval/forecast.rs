use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Month;
use crate::error::{Error, Result};

/// Which part of the sample a forecast panel covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SliceTag {
    #[serde(rename = "IS")]
    InSample,
    #[serde(rename = "OOS")]
    OutOfSample,
}

impl SliceTag {
    pub fn label(self) -> &'static str {
        match self {
            SliceTag::InSample => "is",
            SliceTag::OutOfSample => "oos",
        }
    }
}

/// One prediction for `r_{i,t+1}` made at `month` (= t), with its realization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub month: Month,
    pub asset: String,
    pub predicted: f64,
    pub realized: f64,
}

/// Forecasts of one model over one slice, sorted by (month, asset).
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastPanel {
    model: String,
    slice: SliceTag,
    records: Vec<ForecastRecord>,
}

impl ForecastPanel {
    /// Sorts the records and rejects duplicate keys or non-finite values.
    pub fn new(model: &str, slice: SliceTag, mut records: Vec<ForecastRecord>) -> Result<Self> {
        records.sort_by(|a, b| (a.month, &a.asset).cmp(&(b.month, &b.asset)));
        for w in records.windows(2) {
            if w[0].month == w[1].month && w[0].asset == w[1].asset {
                return Err(Error::Data(format!(
                    "duplicate forecast for asset {} in month {}",
                    w[0].asset, w[0].month
                )));
            }
        }
        if let Some(r) = records
            .iter()
            .find(|r| !r.predicted.is_finite() || !r.realized.is_finite())
        {
            return Err(Error::Data(format!(
                "non-finite forecast or realization for asset {} in month {}",
                r.asset, r.month
            )));
        }
        Ok(ForecastPanel {
            model: model.to_string(),
            slice,
            records,
        })
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn slice(&self) -> SliceTag {
        self.slice
    }

    pub fn records(&self) -> &[ForecastRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn predicted(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.predicted).collect()
    }

    pub fn realized(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.realized).collect()
    }

    /// Distinct months in order.
    pub fn months(&self) -> Vec<Month> {
        let set: BTreeSet<Month> = self.records.iter().map(|r| r.month).collect();
        set.into_iter().collect()
    }

    /// Records grouped by month, in month order.
    pub fn by_month(&self) -> impl Iterator<Item = (Month, &[ForecastRecord])> {
        self.records
            .chunk_by(|a, b| a.month == b.month)
            .map(|chunk| (chunk[0].month, chunk))
    }

    /// Same (month, asset) keys in the same order.
    pub fn same_coverage(&self, other: &ForecastPanel) -> bool {
        self.records.len() == other.records.len()
            && self
                .records
                .iter()
                .zip(&other.records)
                .all(|(a, b)| a.month == b.month && a.asset == b.asset)
    }

    /// CSV with columns `month,asset,predicted,realized`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, model: &str, slice: SliceTag) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let records = rdr.deserialize().collect::<std::result::Result<Vec<_>, _>>()?;
        ForecastPanel::new(model, slice, records)
    }
}
