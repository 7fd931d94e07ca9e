use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::Month;
use crate::error::{Error, Result};

/// How observation months are divided into train, validation and test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitSpec {
    /// Validation and test month counts are rounded down; train takes the rest.
    Fractions { train: f64, validation: f64, test: f64 },
    /// First month of the validation and test slices.
    Dates { validation_start: Month, test_start: Month },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Fractions {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

impl SplitSpec {
    /// Train 1976-2007, validation 2008-2012, test 2013-2016.
    pub fn long_span() -> Self {
        SplitSpec::Dates {
            validation_start: Month::new(2008, 1).unwrap(),
            test_start: Month::new(2013, 1).unwrap(),
        }
    }

    /// Partitions `months` (the observation months, in order) into three
    /// contiguous, non-empty index ranges.
    pub fn apply(&self, months: &[Month]) -> Result<Splits> {
        let n = months.len();
        let (a, b) = match *self {
            SplitSpec::Fractions {
                train,
                validation,
                test,
            } => {
                if [train, validation, test].iter().any(|f| !(0.0..=1.0).contains(f))
                    || (train + validation + test - 1.0).abs() > 1e-9
                {
                    return Err(Error::Config(format!(
                        "split fractions must be in [0, 1] and sum to 1, got {train}/{validation}/{test}"
                    )));
                }
                // a small tolerance keeps 0.1 * 40 from flooring to 3
                let n_val = (validation * n as f64 + 1e-9).floor() as usize;
                let n_test = (test * n as f64 + 1e-9).floor() as usize;
                let n_train = n.saturating_sub(n_val + n_test);
                (n_train, n_train + n_val)
            }
            SplitSpec::Dates {
                validation_start,
                test_start,
            } => {
                if test_start <= validation_start {
                    return Err(Error::Config("test must start after validation".into()));
                }
                let pos = |m: Month| months.iter().position(|&x| x >= m).unwrap_or(n);
                (pos(validation_start), pos(test_start))
            }
        };
        let splits = Splits {
            train: 0..a,
            validation: a..b,
            test: b..n,
        };
        for (name, r) in [
            ("train", &splits.train),
            ("validation", &splits.validation),
            ("test", &splits.test),
        ] {
            if r.is_empty() {
                return Err(Error::Data(format!("{name} slice is empty ({n} observation months)")));
            }
        }
        Ok(splits)
    }
}

/// Observation-month index ranges of the three slices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}
