//! Fully conditional specification driver shared by the GLM and CART
//! engines.
//!
//! A chain fills every missing cell with a draw from the observed marginal,
//! then cycles through the variables with missing data, refitting the
//! engine's conditional model on rows where the target is observed and
//! redrawing the missing entries. Fully observed variables sit at the end of
//! the ordering and are only ever used as predictors.

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CategoricalDataset, Code};
use crate::error::{EngineError, Error, Result};
use crate::rng::{derive_seed, rng_from_seed, sample_weighted};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    /// Column order of the dataset.
    #[default]
    Appearance,
    /// Increasing number of missing cells, ties by column order.
    FewestMissingFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainedConfig {
    pub cycles: usize,
    pub ordering: Ordering,
    pub imputations: usize,
}

impl Default for ChainedConfig {
    fn default() -> Self {
        ChainedConfig {
            cycles: 10,
            ordering: Ordering::Appearance,
            imputations: 10,
        }
    }
}

impl ChainedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cycles < 1 {
            return Err(Error::Config("chained cycles must be at least 1".into()));
        }
        if self.imputations < 2 {
            return Err(Error::Config("number of imputations must be at least 2".into()));
        }
        Ok(())
    }
}

/// One univariate imputation task handed to an engine.
pub struct ConditionalProblem<'a> {
    pub target: usize,
    pub target_name: &'a str,
    /// Current completed values of every variable.
    pub columns: &'a [Vec<Code>],
    pub level_counts: &'a [usize],
    /// Rows where the target is observed.
    pub fit_rows: &'a [usize],
    /// Rows whose target value must be drawn.
    pub impute_rows: &'a [usize],
}

impl ConditionalProblem<'_> {
    /// Every variable other than the target, in column order.
    pub fn predictors(&self) -> Vec<usize> {
        (0..self.columns.len()).filter(|&j| j != self.target).collect()
    }

    pub fn target_levels(&self) -> usize {
        self.level_counts[self.target]
    }

    /// Observed target counts per level over the fitting rows.
    pub fn target_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.target_levels()];
        let y = &self.columns[self.target];
        for &i in self.fit_rows {
            counts[y[i] as usize] += 1;
        }
        counts
    }
}

/// A univariate conditional model that can be fit and sampled from.
pub trait ConditionalEngine: Send + Sync {
    fn name(&self) -> &'static str;

    /// Fit on `problem.fit_rows` and return one draw per
    /// `problem.impute_rows` entry, in the same order.
    fn fit_and_draw(&self, problem: &ConditionalProblem<'_>, rng: &mut dyn RngCore) -> Result<Vec<Code>, EngineError>;
}

/// Imputation order: variables with missing data per `ordering`, then the
/// fully observed variables in column order.
pub fn variable_order(data: &CategoricalDataset, ordering: Ordering) -> Vec<usize> {
    let p = data.n_vars();
    let missing: Vec<usize> = (0..p).map(|j| data.missing_count(j)).collect();
    let mut incomplete: Vec<usize> = (0..p).filter(|&j| missing[j] > 0).collect();
    if ordering == Ordering::FewestMissingFirst {
        incomplete.sort_by_key(|&j| missing[j]);
    }
    incomplete.extend((0..p).filter(|&j| missing[j] == 0));
    incomplete
}

/// Fill every missing cell with an independent draw from the empirical
/// marginal of that variable's observed values.
pub fn initial_impute<R: Rng + ?Sized>(data: &CategoricalDataset, rng: &mut R) -> Result<CategoricalDataset> {
    let fill = initial_fill(data, rng)?;
    data.completed_with(&fill)
}

pub(crate) fn initial_fill<R: Rng + ?Sized>(data: &CategoricalDataset, rng: &mut R) -> Result<Vec<Vec<Code>>> {
    let mut columns = data.columns().to_vec();
    for (j, col) in columns.iter_mut().enumerate() {
        if data.missing_count(j) == 0 {
            continue;
        }
        let counts = data.observed_counts(j);
        if counts.iter().all(|&c| c == 0) {
            return Err(EngineError::NoObservedValues {
                variable: data.codebook().name(j).to_string(),
            }
            .into());
        }
        let weights: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        for (i, cell) in col.iter_mut().enumerate() {
            if data.is_missing(i, j) {
                *cell = sample_weighted(&weights, rng) as Code;
            }
        }
    }
    Ok(columns)
}

/// Run one chain for `cfg.cycles` full cycles and return the final
/// completed dataset.
pub fn run_chain<R: RngCore>(
    data: &CategoricalDataset,
    cfg: &ChainedConfig,
    engine: &dyn ConditionalEngine,
    rng: &mut R,
) -> Result<CategoricalDataset> {
    if cfg.cycles < 1 {
        return Err(Error::Config("chained cycles must be at least 1".into()));
    }
    if data.is_complete() {
        return Ok(data.clone());
    }
    let mut columns = initial_fill(data, rng)?;
    let level_counts = data.level_counts();
    let order = variable_order(data, cfg.ordering);
    let tasks: Vec<(usize, Vec<usize>, Vec<usize>)> = order
        .into_iter()
        .filter(|&j| data.missing_count(j) > 0)
        .map(|j| {
            let mask = data.mask(j);
            let fit = (0..data.n_rows()).filter(|&i| !mask[i]).collect();
            let imp = (0..data.n_rows()).filter(|&i| mask[i]).collect();
            (j, fit, imp)
        })
        .collect();

    for _ in 0..cfg.cycles {
        for (target, fit_rows, impute_rows) in &tasks {
            let target_name = data.codebook().name(*target);
            let problem = ConditionalProblem {
                target: *target,
                target_name,
                columns: &columns,
                level_counts: &level_counts,
                fit_rows,
                impute_rows,
            };
            let draws = engine.fit_and_draw(&problem, rng)?;
            if draws.len() != impute_rows.len() || draws.iter().any(|&c| c as usize >= level_counts[*target]) {
                return Err(EngineError::Numerical {
                    variable: target_name.to_string(),
                    reason: format!("engine '{}' returned invalid imputations", engine.name()),
                }
                .into());
            }
            for (&i, c) in impute_rows.iter().zip(draws) {
                columns[*target][i] = c;
            }
        }
    }
    data.completed_with(&columns)
}

/// `cfg.imputations` independent chains, chain `l` seeded with
/// `derive_seed(master_seed, l)`.
pub fn multiple_impute(
    data: &CategoricalDataset,
    cfg: &ChainedConfig,
    engine: &dyn ConditionalEngine,
    master_seed: u64,
) -> Result<Vec<CategoricalDataset>> {
    cfg.validate()?;
    (0..cfg.imputations as u64)
        .into_par_iter()
        .map(|l| {
            let mut rng = rng_from_seed(derive_seed(master_seed, l));
            run_chain(data, cfg, engine, &mut rng)
        })
        .collect()
}
