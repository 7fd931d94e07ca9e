//! Monthly asset panel: characteristics, macro predictors and excess returns.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Month;
use crate::error::{Error, Result};

/// Column roles for the panel and macro CSV files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PanelSchema {
    pub month: String,
    pub asset: String,
    #[serde(rename = "return")]
    pub ret: String,
    /// Explicit characteristic columns; when empty every column starting
    /// with `characteristic_prefix` is used, in file order.
    pub characteristics: Vec<String>,
    pub characteristic_prefix: String,
    /// Optional column carrying the true conditional mean of next month's
    /// return (written by the simulator).
    pub oracle: String,
    pub macro_month: String,
    pub macro_columns: Vec<String>,
    pub macro_prefix: String,
}

impl Default for PanelSchema {
    fn default() -> Self {
        PanelSchema {
            month: "month".into(),
            asset: "asset".into(),
            ret: "ret_excess".into(),
            characteristics: vec![],
            characteristic_prefix: "c_".into(),
            oracle: "oracle_mean".into(),
            macro_month: "month".into(),
            macro_columns: vec![],
            macro_prefix: "x_".into(),
        }
    }
}

impl PanelSchema {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("schema: {e}")))
    }
}

/// Per-(asset, month) records on a gapless monthly calendar.
///
/// The return stored at `(asset, t)` is realized during month `t`; the
/// prediction target of observation `(asset, t)` is the return at `t + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelDataset {
    pub(crate) months: Vec<Month>,
    pub(crate) assets: Vec<String>,
    pub(crate) char_names: Vec<String>,
    pub(crate) macro_names: Vec<String>,
    /// `[asset][month][k]`; missing entries hold 0.
    pub(crate) chars: Vec<f64>,
    pub(crate) char_missing: Vec<bool>,
    /// `[asset][month]`
    pub(crate) present: Vec<bool>,
    pub(crate) returns: Vec<Option<f64>>,
    /// `[month][j]`, entry 0 is the constant 1.
    pub(crate) macro_x: Vec<f64>,
    /// `[asset][month]`: conditional mean of the return at `month + 1`.
    pub(crate) oracle: Option<Vec<Option<f64>>>,
}

/// One panel row before assembly.
#[derive(Clone, Debug)]
pub struct PanelRow {
    pub month: Month,
    pub asset: String,
    pub ret: Option<f64>,
    pub chars: Vec<Option<f64>>,
    pub oracle: Option<f64>,
}

impl PanelDataset {
    /// Assembles a panel from rows in any order plus an optional macro table
    /// (`months` strictly increasing, values without the constant entry).
    pub fn from_rows(
        char_names: Vec<String>,
        rows: Vec<PanelRow>,
        macro_table: Option<(Vec<String>, Vec<(Month, Vec<f64>)>)>,
        has_oracle: bool,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("panel has no rows".into()));
        }
        let k = char_names.len();
        let first = rows.iter().map(|r| r.month).min().unwrap();
        let last = rows.iter().map(|r| r.month).max().unwrap();
        let months: Vec<Month> = (0..=first.months_until(last)).map(|d| first.plus(d)).collect();
        let t_len = months.len();
        let mut assets: Vec<String> = rows.iter().map(|r| r.asset.clone()).collect();
        assets.sort();
        assets.dedup();
        let index: BTreeMap<&str, usize> =
            assets.iter().enumerate().map(|(i, a)| (a.as_str(), i)).collect();

        let cells = assets.len() * t_len;
        let mut chars = vec![0.0; cells * k];
        let mut char_missing = vec![true; cells * k];
        let mut present = vec![false; cells];
        let mut returns = vec![None; cells];
        let mut oracle = has_oracle.then(|| vec![None; cells]);
        for row in &rows {
            if row.chars.len() != k {
                return Err(Error::Data(format!(
                    "row for asset {} in {} has {} characteristics, expected {k}",
                    row.asset,
                    row.month,
                    row.chars.len()
                )));
            }
            let cell = index[row.asset.as_str()] * t_len + first.months_until(row.month) as usize;
            if present[cell] {
                return Err(Error::Data(format!(
                    "duplicate row for asset {} in month {}",
                    row.asset, row.month
                )));
            }
            present[cell] = true;
            returns[cell] = row.ret;
            for (j, v) in row.chars.iter().enumerate() {
                if let Some(v) = v {
                    chars[cell * k + j] = *v;
                    char_missing[cell * k + j] = false;
                }
            }
            if let Some(o) = oracle.as_mut() {
                o[cell] = row.oracle;
            }
        }

        let (macro_names, macro_x) = match macro_table {
            None => (vec!["const".to_string()], vec![1.0; t_len]),
            Some((names, table)) => {
                for pair in table.windows(2) {
                    if pair[1].0 <= pair[0].0 {
                        return Err(Error::Data(format!(
                            "non-monotone month ordering in macro table: {} follows {}",
                            pair[1].0, pair[0].0
                        )));
                    }
                }
                let by_month: BTreeMap<Month, &Vec<f64>> =
                    table.iter().map(|(m, v)| (*m, v)).collect();
                let mut x = Vec::with_capacity(t_len * (names.len() + 1));
                for m in &months {
                    let v = by_month
                        .get(m)
                        .ok_or_else(|| Error::Data(format!("macro table has no row for {m}")))?;
                    if v.len() != names.len() {
                        return Err(Error::Data(format!("macro row {m} has wrong width")));
                    }
                    x.push(1.0);
                    x.extend_from_slice(v);
                }
                let mut all = vec!["const".to_string()];
                all.extend(names);
                (all, x)
            }
        };
        Ok(PanelDataset {
            months,
            assets,
            char_names,
            macro_names,
            chars,
            char_missing,
            present,
            returns,
            macro_x,
            oracle,
        })
    }

    /// Reads the panel CSV and, if given, the macro CSV.
    pub fn load(panel: &Path, macro_path: Option<&Path>, schema: &PanelSchema) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(panel)?;
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Data(format!("{}: missing column {name:?}", panel.display())))
        };
        let (mi, ai, ri) = (col(&schema.month)?, col(&schema.asset)?, col(&schema.ret)?);
        let char_names: Vec<String> = if schema.characteristics.is_empty() {
            headers
                .iter()
                .filter(|h| h.starts_with(&schema.characteristic_prefix))
                .map(str::to_string)
                .collect()
        } else {
            schema.characteristics.clone()
        };
        if char_names.is_empty() {
            return Err(Error::Data(format!("{}: no characteristic columns", panel.display())));
        }
        let ci = char_names.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
        let oi = headers.iter().position(|h| h == schema.oracle);

        let mut rows = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let at = |i: usize| rec.get(i).unwrap_or("");
            let ctx = || format!("{} line {}", panel.display(), line + 2);
            let month: Month = at(mi)
                .parse()
                .map_err(|e| Error::Data(format!("{}: {e}", ctx())))?;
            let asset = at(ai).trim().to_string();
            if asset.is_empty() {
                return Err(Error::Data(format!("{}: empty asset id", ctx())));
            }
            rows.push(PanelRow {
                month,
                asset,
                ret: parse_cell(at(ri), &ctx)?,
                chars: ci.iter().map(|&i| parse_cell(at(i), &ctx)).collect::<Result<_>>()?,
                oracle: oi.map(|i| parse_cell(at(i), &ctx)).transpose()?.flatten(),
            });
        }
        let macro_table = macro_path.map(|p| read_macro(p, schema)).transpose()?;
        PanelDataset::from_rows(char_names, rows, macro_table, oi.is_some())
    }

    /// Writes the panel CSV (`month,asset,ret_excess,c_..[,oracle_mean]`).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["month".to_string(), "asset".into(), "ret_excess".into()];
        header.extend(self.char_names.iter().cloned());
        if self.oracle.is_some() {
            header.push("oracle_mean".into());
        }
        w.write_record(&header)?;
        let k = self.char_dim();
        for t in 0..self.n_months() {
            for i in 0..self.n_assets() {
                let cell = self.cell(i, t);
                if !self.present[cell] {
                    continue;
                }
                let mut rec = vec![self.months[t].to_string(), self.assets[i].clone()];
                rec.push(fmt_opt(self.returns[cell]));
                for j in 0..k {
                    let v = (!self.char_missing[cell * k + j]).then(|| self.chars[cell * k + j]);
                    rec.push(fmt_opt(v));
                }
                if let Some(o) = &self.oracle {
                    rec.push(fmt_opt(o[cell]));
                }
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the macro CSV (`month,x_1..`), omitting the constant entry.
    pub fn write_macro_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["month".to_string()];
        header.extend(self.macro_names[1..].iter().cloned());
        w.write_record(&header)?;
        let p = self.macro_dim();
        for (t, m) in self.months.iter().enumerate() {
            let mut rec = vec![m.to_string()];
            rec.extend(self.macro_x[t * p + 1..(t + 1) * p].iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub(crate) fn cell(&self, asset: usize, month: usize) -> usize {
        asset * self.months.len() + month
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    /// Calendar months covered, including the final month that has no target.
    pub fn n_months(&self) -> usize {
        self.months.len()
    }

    /// Months that can carry an observation (every month but the last).
    pub fn n_obs_months(&self) -> usize {
        self.months.len() - 1
    }

    pub fn months(&self) -> &[Month] {
        &self.months
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn char_names(&self) -> &[String] {
        &self.char_names
    }

    pub fn macro_names(&self) -> &[String] {
        &self.macro_names
    }

    pub fn char_dim(&self) -> usize {
        self.char_names.len()
    }

    /// Width of the macro vector, counting the constant entry.
    pub fn macro_dim(&self) -> usize {
        self.macro_names.len()
    }

    pub fn is_present(&self, asset: usize, month: usize) -> bool {
        self.present[self.cell(asset, month)]
    }

    /// Characteristic vector of a present row (missing entries read as 0).
    pub fn characteristics(&self, asset: usize, month: usize) -> Option<&[f64]> {
        let cell = self.cell(asset, month);
        let k = self.char_dim();
        self.present[cell].then(|| &self.chars[cell * k..(cell + 1) * k])
    }

    pub fn macro_at(&self, month: usize) -> &[f64] {
        let p = self.macro_dim();
        &self.macro_x[month * p..(month + 1) * p]
    }

    /// Excess return realized during `month`.
    pub fn return_at(&self, asset: usize, month: usize) -> Option<f64> {
        self.returns[self.cell(asset, month)]
    }

    /// Prediction target of observation `(asset, month)`: the next month's return.
    pub fn target(&self, asset: usize, month: usize) -> Option<f64> {
        if month + 1 >= self.months.len() || !self.is_present(asset, month) {
            return None;
        }
        self.return_at(asset, month + 1)
    }

    pub fn has_oracle(&self) -> bool {
        self.oracle.is_some()
    }

    /// True conditional mean of the target of `(asset, month)`, if known.
    pub fn oracle(&self, asset: usize, month: usize) -> Option<f64> {
        self.oracle.as_ref()?[self.cell(asset, month)]
    }

    /// Number of observations with a defined target.
    pub fn n_observations(&self) -> usize {
        (0..self.n_assets())
            .flat_map(|i| (0..self.n_obs_months()).map(move |t| (i, t)))
            .filter(|&(i, t)| self.target(i, t).is_some())
            .count()
    }
}

fn parse_cell(s: &str, ctx: &dyn Fn() -> String) -> Result<Option<f64>> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    let v: f64 = s
        .parse()
        .map_err(|_| Error::Data(format!("{}: cannot parse {s:?} as a number", ctx())))?;
    if !v.is_finite() {
        return Err(Error::Data(format!("{}: non-finite value {s:?}", ctx())));
    }
    Ok(Some(v))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

type MacroTable = (Vec<String>, Vec<(Month, Vec<f64>)>);

fn read_macro(path: &Path, schema: &PanelSchema) -> Result<MacroTable> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("{}: missing column {name:?}", path.display())))
    };
    let mi = col(&schema.macro_month)?;
    let names: Vec<String> = if schema.macro_columns.is_empty() {
        headers
            .iter()
            .filter(|h| h.starts_with(&schema.macro_prefix))
            .map(str::to_string)
            .collect()
    } else {
        schema.macro_columns.clone()
    };
    let idx = names.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let mut table = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let ctx = || format!("{} line {}", path.display(), line + 2);
        let month: Month = rec
            .get(mi)
            .unwrap_or("")
            .parse()
            .map_err(|e| Error::Data(format!("{}: {e}", ctx())))?;
        let mut vals = Vec::with_capacity(idx.len());
        for &i in &idx {
            let v = parse_cell(rec.get(i).unwrap_or(""), &ctx)?
                .ok_or_else(|| Error::Data(format!("{}: macro values may not be missing", ctx())))?;
            vals.push(v);
        }
        table.push((month, vals));
    }
    Ok((names, table))
}
