//! Decile portfolios sorted on forecasts: equal-weighted decile returns,
//! the high-minus-low spread, summary statistics and cumulative log returns.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Month;
use crate::error::{Error, Result};
use crate::eval::ForecastPanel;

pub const DECILES: usize = 10;

/// Decile (0 = lowest forecast) of each asset. Assets are ranked by
/// forecast with ties broken by identifier; when the count is not a
/// multiple of ten the extra assets go to the lowest deciles.
pub fn sort_deciles(forecasts: &[(&str, f64)]) -> Result<Vec<usize>> {
    sort_groups(forecasts, DECILES)
}

/// [`sort_deciles`] with an arbitrary number of groups.
pub fn sort_groups(forecasts: &[(&str, f64)], groups: usize) -> Result<Vec<usize>> {
    let n = forecasts.len();
    if groups == 0 || n < groups {
        return Err(Error::Data(format!("sorting into {groups} groups needs at least {groups} assets, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        forecasts[a]
            .1
            .total_cmp(&forecasts[b].1)
            .then_with(|| forecasts[a].0.cmp(forecasts[b].0))
    });
    let (base, extra) = (n / groups, n % groups);
    let mut out = vec![0; n];
    let mut pos = 0;
    for d in 0..groups {
        let size = base + usize::from(d < extra);
        for &i in &order[pos..pos + size] {
            out[i] = d;
        }
        pos += size;
    }
    Ok(out)
}

/// Monthly equal-weighted decile returns (as fractions), keyed by the
/// forecast month.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecileSeries {
    pub months: Vec<Month>,
    /// `[decile][month]` mean forecast.
    pub predicted: Vec<Vec<f64>>,
    /// `[decile][month]` mean realized return.
    pub realized: Vec<Vec<f64>>,
    /// Equal-weighted mean realized return of all assets (market benchmark).
    pub market: Vec<f64>,
}

impl DecileSeries {
    /// High minus low realized returns.
    pub fn long_short(&self) -> Vec<f64> {
        self.realized[DECILES - 1]
            .iter()
            .zip(&self.realized[0])
            .map(|(h, l)| h - l)
            .collect()
    }

    pub fn long_short_predicted(&self) -> Vec<f64> {
        self.predicted[DECILES - 1]
            .iter()
            .zip(&self.predicted[0])
            .map(|(h, l)| h - l)
            .collect()
    }
}

/// Re-forms decile portfolios every month of the panel.
pub fn portfolio_returns(panel: &ForecastPanel) -> Result<DecileSeries> {
    let mut s = DecileSeries {
        months: vec![],
        predicted: vec![vec![]; DECILES],
        realized: vec![vec![]; DECILES],
        market: vec![],
    };
    for (month, rows) in panel.by_month() {
        let keyed: Vec<(&str, f64)> = rows.iter().map(|r| (r.asset.as_str(), r.predicted)).collect();
        let deciles = sort_deciles(&keyed).map_err(|e| Error::Data(format!("{month}: {e}")))?;
        let mut sums = [(0.0, 0.0, 0usize); DECILES];
        for (r, &d) in rows.iter().zip(&deciles) {
            sums[d].0 += r.predicted;
            sums[d].1 += r.realized;
            sums[d].2 += 1;
        }
        for (d, (p, r, c)) in sums.iter().enumerate() {
            s.predicted[d].push(p / *c as f64);
            s.realized[d].push(r / *c as f64);
        }
        s.market.push(rows.iter().map(|r| r.realized).sum::<f64>() / rows.len() as f64);
        s.months.push(month);
    }
    if s.months.is_empty() {
        return Err(Error::Empty("no months to form portfolios".into()));
    }
    Ok(s)
}

/// Summary of one portfolio, in percent per month except the Sharpe ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PortfolioStats {
    pub pred: f64,
    pub avg: f64,
    pub std: f64,
    /// Annualized `avg / std * sqrt(12)`; `None` when the series is constant.
    pub sharpe: Option<f64>,
}

/// Mean forecast, mean and sample standard deviation of realized returns
/// (fractions in, percent out) and the annualized Sharpe ratio.
pub fn portfolio_stats(predicted: &[f64], realized: &[f64]) -> Result<PortfolioStats> {
    let n = realized.len();
    if n < 2 {
        return Err(Error::Data(format!("portfolio statistics need at least two months, got {n}")));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let avg = mean(realized);
    let var = realized.iter().map(|r| (r - avg) * (r - avg)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    Ok(PortfolioStats {
        pred: 100.0 * mean(predicted),
        avg: 100.0 * avg,
        std: 100.0 * std,
        sharpe: sharpe_ratio(avg, std),
    })
}

/// `avg / std * sqrt(12)`, undefined for a zero standard deviation.
pub fn sharpe_ratio(avg: f64, std: f64) -> Option<f64> {
    (std > 0.0).then(|| avg / std * 12f64.sqrt())
}

/// Table of deciles Low, 2, ..., 9, High and the H-L spread.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PortfolioReport {
    pub model: String,
    pub rows: Vec<(String, PortfolioStats)>,
}

pub fn portfolio_report(model: &str, series: &DecileSeries) -> Result<PortfolioReport> {
    let mut rows = Vec::with_capacity(DECILES + 1);
    for d in 0..DECILES {
        let label = match d {
            0 => "Low".to_string(),
            d if d == DECILES - 1 => "High".to_string(),
            d => (d + 1).to_string(),
        };
        rows.push((label, portfolio_stats(&series.predicted[d], &series.realized[d])?));
    }
    rows.push((
        "H-L".to_string(),
        portfolio_stats(&series.long_short_predicted(), &series.long_short())?,
    ));
    Ok(PortfolioReport {
        model: model.to_string(),
        rows,
    })
}

impl PortfolioReport {
    /// `portfolio,pred,avg,std,sr` with four decimals; undefined ratios are empty.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("portfolio,pred,avg,std,sr\n");
        for (label, st) in &self.rows {
            let sr = st.sharpe.map_or(String::new(), |v| format!("{v:.4}"));
            let _ = writeln!(s, "{label},{:.4},{:.4},{:.4},{sr}", st.pred, st.avg, st.std);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn row(&self, label: &str) -> Option<&PortfolioStats> {
        self.rows.iter().find(|(l, _)| l == label).map(|(_, s)| s)
    }
}

/// Running sums of `log(1 + r)`, starting from 0 before the first month.
pub fn cumulative_log(returns: &[f64]) -> Result<Vec<f64>> {
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(returns.len() + 1);
    out.push(0.0);
    for (t, &r) in returns.iter().enumerate() {
        if !(r > -1.0) {
            return Err(Error::Data(format!("return {r} at position {t} is a total loss or worse")));
        }
        acc += r.ln_1p();
        out.push(acc);
    }
    Ok(out)
}

/// Cumulative log returns of the long leg (top decile), the short leg
/// (bottom decile, not sign-flipped), the spread and the benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CumulativeSeries {
    /// Month each return is realized in (one after the sort); the first
    /// row is the zero starting point at the first sort.
    pub months: Vec<Month>,
    pub long: Vec<f64>,
    pub short: Vec<f64>,
    pub long_short: Vec<f64>,
    pub market: Vec<f64>,
}

pub fn cumulative_series(series: &DecileSeries) -> Result<CumulativeSeries> {
    let mut months = vec![series.months[0]];
    months.extend(series.months.iter().map(|m| m.plus(1)));
    Ok(CumulativeSeries {
        months,
        long: cumulative_log(&series.realized[DECILES - 1])?,
        short: cumulative_log(&series.realized[0])?,
        long_short: cumulative_log(&series.long_short())?,
        market: cumulative_log(&series.market)?,
    })
}

impl CumulativeSeries {
    /// `month,long,short,long_short,market`.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("month,long,short,long_short,market\n");
        for t in 0..self.months.len() {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                self.months[t], self.long[t], self.short[t], self.long_short[t], self.market[t]
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}
