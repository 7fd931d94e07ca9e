use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ForecastPanel;
use crate::error::{Error, Result};

pub const DEFAULT_DM_LAG: usize = 3;
/// Two-sided 5% critical value; a cell is flagged when `|stat|` exceeds it.
pub const DM_CRITICAL: f64 = 1.96;
/// Shortest differential series the test accepts.
pub const MIN_DM_MONTHS: usize = 8;

/// Monthly loss differentials `d_t`: the cross-sectional mean of
/// `e_A^2 - e_B^2`. Both panels must cover the same (month, asset) keys.
pub fn loss_differentials(a: &ForecastPanel, b: &ForecastPanel) -> Result<Vec<f64>> {
    if !a.same_coverage(b) {
        return Err(Error::Data(format!(
            "forecast coverage differs between {} and {}",
            a.model(),
            b.model()
        )));
    }
    let mut d = Vec::new();
    let mut i = 0;
    for (_, month) in a.by_month() {
        let rows_b = &b.records()[i..i + month.len()];
        i += month.len();
        let sum: f64 = month
            .iter()
            .zip(rows_b)
            .map(|(ra, rb)| {
                let ea = ra.realized - ra.predicted;
                let eb = rb.realized - rb.predicted;
                ea * ea - eb * eb
            })
            .sum();
        d.push(sum / month.len() as f64);
    }
    Ok(d)
}

/// Newey-West (Bartlett) long-run variance with `1/T` autocovariances.
pub fn newey_west_variance(d: &[f64], lag: usize) -> f64 {
    let t = d.len() as f64;
    let mean = d.iter().sum::<f64>() / t;
    let gamma = |l: usize| -> f64 {
        d[l..]
            .iter()
            .zip(d)
            .map(|(x, y)| (x - mean) * (y - mean))
            .sum::<f64>()
            / t
    };
    let mut var = gamma(0);
    for l in 1..=lag.min(d.len().saturating_sub(1)) {
        let w = 1.0 - l as f64 / (lag as f64 + 1.0);
        var += 2.0 * w * gamma(l);
    }
    var
}

/// Statistic from a differential series: `mean / sqrt(lrv / T)`.
pub fn dm_statistic(d: &[f64], lag: usize) -> Result<f64> {
    if d.len() < MIN_DM_MONTHS {
        return Err(Error::Data(format!(
            "comparison needs at least {MIN_DM_MONTHS} months, got {}",
            d.len()
        )));
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let var = newey_west_variance(d, lag);
    // Identical forecasts give an all-zero series; exact ties are not
    // meaningful evidence either way.
    if !(var > 0.0) || d.iter().all(|&x| x == 0.0) {
        return Err(Error::Degenerate(format!(
            "loss differential has no variation (long-run variance {var:e})"
        )));
    }
    Ok(mean / (var / d.len() as f64).sqrt())
}

/// Compares row model `a` with column model `b`. Positive values mean `b`
/// has the smaller squared errors.
pub fn dm_test(a: &ForecastPanel, b: &ForecastPanel, lag: usize) -> Result<f64> {
    let d = loss_differentials(a, b)?;
    dm_statistic(&d, lag).map_err(|e| match e {
        Error::Degenerate(msg) => Error::Degenerate(format!("{} vs {}: {msg}", a.model(), b.model())),
        other => other,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DmCell {
    Statistic(f64),
    Degenerate(String),
}

impl DmCell {
    pub fn statistic(&self) -> Option<f64> {
        match self {
            DmCell::Statistic(s) => Some(*s),
            DmCell::Degenerate(_) => None,
        }
    }

    pub fn significant(&self) -> bool {
        self.statistic().is_some_and(|s| s.abs() > DM_CRITICAL)
    }
}

/// Upper-triangular matrix of pairwise statistics; entry (r, c) with r < c
/// compares row model r against column model c.
#[derive(Clone, Debug, PartialEq)]
pub struct DmMatrix {
    pub models: Vec<String>,
    pub lag: usize,
    cells: Vec<Vec<Option<DmCell>>>,
}

impl DmMatrix {
    pub fn cell(&self, row: usize, col: usize) -> Option<&DmCell> {
        self.cells[row][col].as_ref()
    }

    /// Long-format CSV: `row,column,statistic,significant` (empty statistic
    /// for degenerate pairs).
    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("row,column,statistic,significant\n");
        for (r, c, cell) in self.iter() {
            let stat = cell.statistic().map_or(String::new(), |v| format!("{v:.4}"));
            let _ = writeln!(s, "{},{},{},{}", self.models[r], self.models[c], stat, cell.significant());
        }
        s
    }

    fn iter(&self) -> impl Iterator<Item = (usize, usize, &DmCell)> {
        self.cells.iter().enumerate().flat_map(|(r, row)| {
            row.iter()
                .enumerate()
                .filter_map(move |(c, cell)| cell.as_ref().map(|x| (r, c, x)))
        })
    }

    /// Table layout: one column per model from the second on, one row per
    /// model except the last. Significant cells carry a trailing `*`,
    /// degenerate ones read `degen`.
    pub fn to_text(&self) -> String {
        let n = self.models.len();
        let width = self.models.iter().map(String::len).max().unwrap_or(0).max(8) + 2;
        let mut s = format!("{:width$}", "");
        for m in &self.models[1..] {
            let _ = write!(s, "{m:>width$}");
        }
        s.push('\n');
        for r in 0..n - 1 {
            let _ = write!(s, "{:width$}", self.models[r]);
            for c in 1..n {
                let text = match self.cell(r, c) {
                    None => String::new(),
                    Some(DmCell::Degenerate(_)) => "degen".into(),
                    Some(cell @ DmCell::Statistic(v)) => {
                        format!("{v:.2}{}", if cell.significant() { "*" } else { " " })
                    }
                };
                let _ = write!(s, "{text:>width$}");
            }
            s.push('\n');
        }
        let _ = writeln!(
            s,
            "\nPositive: column model beats row model. * |stat| > {DM_CRITICAL} (5%). Newey-West lag {}.",
            self.lag
        );
        s
    }

    pub fn write(&self, csv_path: &Path, text_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv_string())?;
        std::fs::write(text_path, self.to_text())?;
        Ok(())
    }
}

/// Runs `dm_test` for every ordered pair (r < c). Degenerate pairs are kept
/// as cells; coverage mismatches abort.
pub fn build_dm_matrix(panels: &[ForecastPanel], lag: usize) -> Result<DmMatrix> {
    if panels.len() < 2 {
        return Err(Error::Config("a comparison matrix needs at least two models".into()));
    }
    let n = panels.len();
    let mut cells = vec![vec![None; n]; n];
    for r in 0..n {
        for c in r + 1..n {
            cells[r][c] = Some(match dm_test(&panels[r], &panels[c], lag) {
                Ok(s) => DmCell::Statistic(s),
                Err(Error::Degenerate(msg)) => DmCell::Degenerate(msg),
                Err(e) => return Err(e),
            });
        }
    }
    Ok(DmMatrix {
        models: panels.iter().map(|p| p.model().to_string()).collect(),
        lag,
        cells,
    })
}
