//! Introduces missingness into fully observed data.
//!
//! MCAR blanks each non-exempt cell independently with a fixed rate. The
//! anchored-MAR mechanism keeps a few anchor variables fully observed and
//! lets their levels drive blanking of the rest: every anchor fires an
//! independent Bernoulli with its per-level rate, and a cell is missing if
//! any anchor fires.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::CategoricalDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub variable: usize,
    /// Blanking rate for each level of the anchor, in level order.
    pub rates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mechanism", rename_all = "lowercase")]
pub enum Mechanism {
    Mcar { rate: f64 },
    Mar { anchors: Vec<Anchor> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingnessSpec {
    #[serde(flatten)]
    pub mechanism: Mechanism,
    #[serde(default)]
    pub exempt_variables: BTreeSet<usize>,
}

impl MissingnessSpec {
    pub fn mcar(rate: f64) -> Self {
        MissingnessSpec {
            mechanism: Mechanism::Mcar { rate },
            exempt_variables: BTreeSet::new(),
        }
    }

    /// MAR mechanism whose anchors are automatically exempt.
    pub fn mar(anchors: Vec<Anchor>) -> Self {
        let exempt_variables = anchors.iter().map(|a| a.variable).collect();
        MissingnessSpec {
            mechanism: Mechanism::Mar { anchors },
            exempt_variables,
        }
    }

    pub fn validate(&self, level_counts: &[usize]) -> Result<()> {
        let p = level_counts.len();
        let check_rate = |r: f64| {
            if (0.0..=1.0).contains(&r) {
                Ok(())
            } else {
                Err(Error::Config(format!("missingness rate {r} outside [0, 1]")))
            }
        };
        for &j in &self.exempt_variables {
            if j >= p {
                return Err(Error::Config(format!(
                    "exempt variable {j} outside codebook of {p} variables"
                )));
            }
        }
        match &self.mechanism {
            Mechanism::Mcar { rate } => check_rate(*rate)?,
            Mechanism::Mar { anchors } => {
                if anchors.is_empty() {
                    return Err(Error::Config("MAR mechanism needs at least one anchor".into()));
                }
                for a in anchors {
                    if a.variable >= p {
                        return Err(Error::Config(format!(
                            "anchor variable {} outside codebook of {p} variables",
                            a.variable
                        )));
                    }
                    if !self.exempt_variables.contains(&a.variable) {
                        return Err(Error::Config(format!(
                            "anchor variable {} must be listed as exempt",
                            a.variable
                        )));
                    }
                    if a.rates.len() != level_counts[a.variable] {
                        return Err(Error::Config(format!(
                            "anchor variable {} has {} levels but {} rates",
                            a.variable,
                            level_counts[a.variable],
                            a.rates.len()
                        )));
                    }
                    for &r in &a.rates {
                        check_rate(r)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn row_rate(&self, data: &CategoricalDataset, row: usize) -> f64 {
        match &self.mechanism {
            Mechanism::Mcar { rate } => *rate,
            Mechanism::Mar { anchors } => {
                let keep: f64 = anchors
                    .iter()
                    .map(|a| 1.0 - a.rates[data.column(a.variable)[row] as usize])
                    .product();
                1.0 - keep
            }
        }
    }
}

/// Blank cells of a fully observed dataset according to `spec`. Only the
/// mask changes; observed values are untouched.
pub fn ampute<R: Rng + ?Sized>(
    data: &CategoricalDataset,
    spec: &MissingnessSpec,
    rng: &mut R,
) -> Result<CategoricalDataset> {
    spec.validate(&data.level_counts())?;
    if !data.is_complete() {
        return Err(Error::Dataset("amputation requires fully observed data".into()));
    }
    let n = data.n_rows();
    let p = data.n_vars();
    let mut missing = vec![vec![false; n]; p];
    for (j, col) in missing.iter_mut().enumerate() {
        if spec.exempt_variables.contains(&j) {
            continue;
        }
        match &spec.mechanism {
            Mechanism::Mcar { rate } => {
                for cell in col.iter_mut() {
                    *cell = rng.random::<f64>() < *rate;
                }
            }
            Mechanism::Mar { anchors } => {
                for (i, cell) in col.iter_mut().enumerate() {
                    let mut fired = false;
                    // every anchor consumes its draw so the stream layout
                    // does not depend on earlier outcomes
                    for a in anchors {
                        let r = a.rates[data.column(a.variable)[i] as usize];
                        fired |= rng.random::<f64>() < r;
                    }
                    *cell = fired;
                }
            }
        }
    }
    data.with_mask(missing)
}

/// Expected fraction of non-exempt cells blanked by `spec` on `data`.
pub fn expected_missing_rate(data: &CategoricalDataset, spec: &MissingnessSpec) -> Result<f64> {
    spec.validate(&data.level_counts())?;
    let n = data.n_rows();
    let mean_row_rate = (0..n).map(|i| spec.row_rate(data, i)).sum::<f64>() / n as f64;
    Ok(mean_row_rate)
}
