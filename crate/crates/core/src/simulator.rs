//! Repeated-sampling evaluation of the imputation engines.
//!
//! Each replication draws a simple random sample without replacement from a
//! finite population, records the pre-missing estimates, blanks cells, and
//! hands the same incomplete sample to every engine. After all replications
//! the harness reports, per estimand and engine, the coverage of the pooled
//! intervals and the relative mean squared error
//!
//! ```text
//! Rel.MSE = Σ_h (q̄_h − Q)² / Σ_h (q̂_h − Q)²
//! ```
//!
//! where q̂_h is the estimate from the sample before amputation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::amputation::{ampute, MissingnessSpec};
use crate::cart::{CartConfig, CartEngine};
use crate::chained::{multiple_impute, ChainedConfig, Ordering};
use crate::data::{
    enumerate_estimands, load_csv, passes_normality_filter, CategoricalDataset, Code, Codebook, Estimand,
    EstimandIndex, EstimandKind, Variable,
};
use crate::dpm::{dpm_multiple_impute, stick_weights, DpmConfig};
use crate::error::{Error, Result};
use crate::glm::{GlmConfig, GlmEngine};
use crate::pooling::{covers, pool, t_critical};
use crate::rng::{derive_seed, rng_from_seed, sample_dirichlet, sample_weighted};

// ---------------------------------------------------------------------------
// synthetic populations

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    /// Latent-class mixture with fixed class weights and per-class level
    /// probabilities `lambda[class][variable][level]`.
    Mixture {
        weights: Vec<f64>,
        lambda: Vec<Vec<Vec<f64>>>,
    },
    /// Latent-class mixture whose level probabilities are drawn once from
    /// Dirichlet(concentration) using the generator seed.
    RandomMixture { weights: Vec<f64>, concentration: f64 },
    /// Explicit joint table, first variable varying slowest.
    JointTable { probabilities: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub rows: usize,
    pub variables: Vec<Variable>,
    pub generator: Generator,
    #[serde(default)]
    pub seed: u64,
    /// Impossible combinations, each a map from variable name to level label.
    /// Records matching every entry of a combination are redrawn.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub structural_zeros: Vec<BTreeMap<String, String>>,
}

/// Redraws allowed per record before the structural zeros are declared to
/// exclude (almost) all of the generator's mass.
const MAX_REDRAWS: usize = 10_000;

fn check_distribution(probs: &[f64], what: &str) -> Result<()> {
    if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::Config(format!(
            "{what} contains a negative or non-finite probability"
        )));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("{what} sums to {total}, expected 1")));
    }
    Ok(())
}

impl SyntheticSpec {
    pub fn codebook(&self) -> Result<Codebook> {
        Codebook::new(self.variables.clone())
    }

    /// Structural zeros as (variable, code) lists.
    pub fn resolved_zeros(&self, cb: &Codebook) -> Result<Vec<Vec<(usize, Code)>>> {
        self.structural_zeros
            .iter()
            .map(|combo| {
                if combo.is_empty() {
                    return Err(Error::Config("empty structural zero".into()));
                }
                combo
                    .iter()
                    .map(|(name, label)| {
                        let j = cb
                            .index_of(name)
                            .ok_or_else(|| Error::Config(format!("structural zero names unknown variable '{name}'")))?;
                        let code = cb.variables[j].levels.iter().position(|l| l == label).ok_or_else(|| {
                            Error::Config(format!("structural zero: '{label}' is not a level of '{name}'"))
                        })?;
                        Ok((j, code as Code))
                    })
                    .collect()
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let cb = self.codebook()?;
        if self.rows == 0 {
            return Err(Error::Config("synthetic population needs at least one row".into()));
        }
        self.resolved_zeros(&cb)?;
        let levels = cb.level_counts();
        match &self.generator {
            Generator::Mixture { weights, lambda } => {
                check_distribution(weights, "mixture weights")?;
                if lambda.len() != weights.len() {
                    return Err(Error::Config(format!(
                        "mixture declares {} weights but {} lambda classes",
                        weights.len(),
                        lambda.len()
                    )));
                }
                for (k, class) in lambda.iter().enumerate() {
                    if class.len() != levels.len() {
                        return Err(Error::Config(format!(
                            "mixture class {k} has wrong number of variables"
                        )));
                    }
                    for (j, probs) in class.iter().enumerate() {
                        if probs.len() != levels[j] {
                            return Err(Error::Config(format!(
                                "mixture class {k}, variable '{}' has {} probabilities, expected {}",
                                cb.name(j),
                                probs.len(),
                                levels[j]
                            )));
                        }
                        check_distribution(probs, &format!("mixture class {k}, variable '{}'", cb.name(j)))?;
                    }
                }
            }
            Generator::RandomMixture { weights, concentration } => {
                check_distribution(weights, "mixture weights")?;
                if !(*concentration > 0.0) {
                    return Err(Error::Config("random mixture concentration must be positive".into()));
                }
            }
            Generator::JointTable { probabilities } => {
                let cells: usize = levels.iter().product();
                if probabilities.len() != cells {
                    return Err(Error::Config(format!(
                        "joint table has {} cells, expected {cells}",
                        probabilities.len()
                    )));
                }
                check_distribution(probabilities, "joint table")?;
            }
        }
        Ok(())
    }
}

/// Draw `spec.rows` i.i.d. records from the declared joint distribution,
/// conditioned on avoiding the structural zeros.
pub fn generate_population<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<CategoricalDataset> {
    spec.validate()?;
    if let Generator::RandomMixture { weights, concentration } = &spec.generator {
        let levels = spec.codebook()?.level_counts();
        let lambda: Vec<Vec<Vec<f64>>> = weights
            .iter()
            .map(|_| {
                levels
                    .iter()
                    .map(|&d| sample_dirichlet(&vec![*concentration; d], rng))
                    .collect()
            })
            .collect();
        let fixed = SyntheticSpec {
            generator: Generator::Mixture {
                weights: weights.clone(),
                lambda,
            },
            ..spec.clone()
        };
        return generate_population(&fixed, rng);
    }
    let cb = Arc::new(spec.codebook()?);
    let zeros = spec.resolved_zeros(&cb)?;
    let levels = cb.level_counts();
    let p = levels.len();
    let draw = |row: &mut [Code], rng: &mut R| match &spec.generator {
        Generator::Mixture { weights, lambda } => {
            let k = sample_weighted(weights, rng);
            for (j, x) in row.iter_mut().enumerate() {
                *x = sample_weighted(&lambda[k][j], rng) as Code;
            }
        }
        Generator::JointTable { probabilities } => {
            let mut idx = sample_weighted(probabilities, rng);
            for j in (0..p).rev() {
                row[j] = (idx % levels[j]) as Code;
                idx /= levels[j];
            }
        }
        Generator::RandomMixture { .. } => unreachable!("resolved above"),
    };
    let forbidden = |row: &[Code]| zeros.iter().any(|combo| combo.iter().all(|&(j, c)| row[j] == c));

    let mut columns: Vec<Vec<Code>> = (0..p).map(|_| Vec::with_capacity(spec.rows)).collect();
    let mut row = vec![0 as Code; p];
    for _ in 0..spec.rows {
        let mut tries = 0;
        loop {
            draw(&mut row, rng);
            if !forbidden(&row) {
                break;
            }
            tries += 1;
            if tries == MAX_REDRAWS {
                return Err(Error::Config(
                    "structural zeros exclude nearly all of the generator's probability mass".into(),
                ));
            }
        }
        for (col, &x) in columns.iter_mut().zip(&row) {
            col.push(x);
        }
    }
    CategoricalDataset::complete(cb, columns)
}

/// Mixture weights from stick fractions, re-exported for building
/// generating specs that mirror the DPM prior.
pub fn mixture_weights_from_sticks(v: &[f64]) -> Vec<f64> {
    stick_weights(v)
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopulationSource {
    Synthetic(SyntheticSpec),
    File { data: PathBuf, codebook: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    Glm,
    Cart,
    Dpm,
}

impl EngineKind {
    pub fn label(self) -> &'static str {
        match self {
            EngineKind::Glm => "GLM",
            EngineKind::Cart => "CART",
            EngineKind::Dpm => "DPM",
        }
    }

    fn stream(self) -> u64 {
        match self {
            EngineKind::Glm => 11,
            EngineKind::Cart => 12,
            EngineKind::Dpm => 13,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainSettings {
    pub cycles: usize,
    pub ordering: Ordering,
}

impl Default for ChainSettings {
    fn default() -> Self {
        ChainSettings {
            cycles: 10,
            ordering: Ordering::Appearance,
        }
    }
}

fn default_level() -> f64 {
    0.95
}

fn default_imputations() -> usize {
    10
}

fn default_max_order() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub population: PopulationSource,
    pub n_sample: usize,
    pub replications: usize,
    pub missingness: MissingnessSpec,
    pub engines: Vec<EngineKind>,
    #[serde(default = "default_imputations")]
    pub imputations: usize,
    #[serde(default = "default_max_order")]
    pub max_order: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub chained: ChainSettings,
    #[serde(default)]
    pub glm: GlmConfig,
    #[serde(default)]
    pub cart: CartConfig,
    /// `imputations` here is ignored in favour of the top-level value.
    #[serde(default)]
    pub dpm: DpmConfig,
    #[serde(default = "default_level")]
    pub confidence_level: f64,
    /// Truncate pooled intervals to [0, 1] before checking coverage.
    #[serde(default)]
    pub clamp_intervals: bool,
}

impl SimulationConfig {
    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: SimulationConfig = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications < 2 {
            return Err(Error::Config("replications must be at least 2".into()));
        }
        if self.imputations < 2 {
            return Err(Error::Config("imputations must be at least 2".into()));
        }
        if self.engines.is_empty() {
            return Err(Error::Config("at least one engine must be selected".into()));
        }
        let mut seen = self.engines.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.engines.len() {
            return Err(Error::Config("engines listed more than once".into()));
        }
        if !(1..=3).contains(&self.max_order) {
            return Err(Error::Config(format!(
                "max_order must be 1..=3, got {}",
                self.max_order
            )));
        }
        if self.n_sample < 1 {
            return Err(Error::Config("n_sample must be positive".into()));
        }
        if !(self.confidence_level > 0.0 && self.confidence_level < 1.0) {
            return Err(Error::Config("confidence_level must be in (0, 1)".into()));
        }
        if self.engines.contains(&EngineKind::Dpm) {
            self.dpm_config().validate()?;
        }
        if self
            .engines
            .iter()
            .any(|e| matches!(e, EngineKind::Glm | EngineKind::Cart))
        {
            self.chained_config().validate()?;
        }
        if let PopulationSource::Synthetic(spec) = &self.population {
            spec.validate()?;
            if self.n_sample > spec.rows {
                return Err(Error::Config(format!(
                    "n_sample {} exceeds population size {}",
                    self.n_sample, spec.rows
                )));
            }
        }
        Ok(())
    }

    pub fn chained_config(&self) -> ChainedConfig {
        ChainedConfig {
            cycles: self.chained.cycles,
            ordering: self.chained.ordering,
            imputations: self.imputations,
        }
    }

    pub fn dpm_config(&self) -> DpmConfig {
        DpmConfig {
            imputations: self.imputations,
            ..self.dpm.clone()
        }
    }

    pub fn load_population(&self) -> Result<CategoricalDataset> {
        match &self.population {
            PopulationSource::Synthetic(spec) => generate_population(spec, &mut rng_from_seed(spec.seed)),
            PopulationSource::File { data, codebook } => {
                let cb = Codebook::from_json_file(codebook)?;
                let pop = load_csv(data, &cb)?;
                if !pop.is_complete() {
                    return Err(Error::Config("population file must be fully observed".into()));
                }
                Ok(pop)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// engines

/// What an imputer sees in one replication.
pub struct ReplicationInput<'a> {
    pub incomplete: &'a CategoricalDataset,
    /// The same sample before amputation. Real engines must not use it.
    pub complete: &'a CategoricalDataset,
    pub seed: u64,
}

/// Produces L completed datasets for one replication.
pub trait MultipleImputer: Send + Sync {
    fn label(&self) -> String;
    /// Stream tag used to derive this engine's seed within a replication.
    fn stream(&self) -> u64;
    fn impute(&self, input: &ReplicationInput<'_>) -> Result<Imputations>;
}

#[derive(Debug, Clone, Default)]
pub struct Imputations {
    pub datasets: Vec<CategoricalDataset>,
    pub warnings: Vec<String>,
}

pub struct ChainedImputer<E> {
    kind: EngineKind,
    engine: E,
    config: ChainedConfig,
}

impl<E: crate::chained::ConditionalEngine> MultipleImputer for ChainedImputer<E> {
    fn label(&self) -> String {
        self.kind.label().to_string()
    }

    fn stream(&self) -> u64 {
        self.kind.stream()
    }

    fn impute(&self, input: &ReplicationInput<'_>) -> Result<Imputations> {
        Ok(Imputations {
            datasets: multiple_impute(input.incomplete, &self.config, &self.engine, input.seed)?,
            warnings: Vec::new(),
        })
    }
}

pub struct DpmImputer {
    config: DpmConfig,
}

impl MultipleImputer for DpmImputer {
    fn label(&self) -> String {
        EngineKind::Dpm.label().to_string()
    }

    fn stream(&self) -> u64 {
        EngineKind::Dpm.stream()
    }

    fn impute(&self, input: &ReplicationInput<'_>) -> Result<Imputations> {
        let run = dpm_multiple_impute(input.incomplete, &self.config, &mut rng_from_seed(input.seed))?;
        Ok(Imputations {
            datasets: run.datasets,
            warnings: run.warnings,
        })
    }
}

/// The imputers selected by `cfg.engines`, in that order.
pub fn build_imputers(cfg: &SimulationConfig) -> Vec<Box<dyn MultipleImputer>> {
    cfg.engines
        .iter()
        .map(|kind| -> Box<dyn MultipleImputer> {
            match kind {
                EngineKind::Glm => Box::new(ChainedImputer {
                    kind: *kind,
                    engine: GlmEngine::new(cfg.glm.clone()),
                    config: cfg.chained_config(),
                }),
                EngineKind::Cart => Box::new(ChainedImputer {
                    kind: *kind,
                    engine: CartEngine::new(cfg.cart.clone()),
                    config: cfg.chained_config(),
                }),
                EngineKind::Dpm => Box::new(DpmImputer {
                    config: cfg.dpm_config(),
                }),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellLabel {
    pub variable: String,
    pub level: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineEstimandStats {
    pub coverage: Option<f64>,
    pub rel_mse: Option<f64>,
    pub replications: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimandRecord {
    pub kind: EstimandKind,
    pub cells: Vec<CellLabel>,
    pub population_value: f64,
    pub pre_missing_coverage: f64,
    pub engines: BTreeMap<String, EngineEstimandStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub replication: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineRunSummary {
    pub engine: String,
    pub successful_replications: usize,
    pub failed_replications: usize,
    pub failures: Vec<FailureRecord>,
    /// Pooled intervals that fell back to the zero-b normal interval.
    pub degenerate_b_intervals: usize,
    /// Pooled intervals reaching outside [0, 1].
    pub boundary_intervals: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub population_rows: usize,
    pub n_sample: usize,
    pub replications: usize,
    pub imputations: usize,
    pub max_order: usize,
    pub master_seed: u64,
    pub confidence_level: f64,
    pub missingness: MissingnessSpec,
    pub engines: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub settings: RunSettings,
    pub estimands: Vec<EstimandRecord>,
    pub engines: Vec<EngineRunSummary>,
    pub summary: SummaryTables,
}

/// Wall-clock timings, kept apart from the report so the report stays
/// byte-reproducible.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SimulationTiming {
    pub total_seconds: f64,
    /// Per replication, seconds spent in each engine (engine order).
    pub replication_engine_seconds: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub report: SimulationReport,
    pub timing: SimulationTiming,
}

struct EngineOutcome {
    q_bar: Vec<f64>,
    covered: Vec<bool>,
    degenerate_b: usize,
    boundary: usize,
    warnings: Vec<String>,
}

struct ReplicationOutcome {
    q_hat: Vec<f64>,
    pre_covered: Vec<bool>,
    engines: Vec<std::result::Result<EngineOutcome, String>>,
    engine_seconds: Vec<f64>,
}

/// Simple random sample of `n` row indices without replacement, sorted.
pub fn sample_rows<R: Rng + ?Sized>(population_rows: usize, n: usize, rng: &mut R) -> Vec<usize> {
    let mut rows = rand::seq::index::sample(rng, population_rows, n).into_vec();
    rows.sort_unstable();
    rows
}

fn run_replication(
    h: usize,
    cfg: &SimulationConfig,
    population: &CategoricalDataset,
    estimands: &[Estimand],
    index: &EstimandIndex,
    imputers: &[Box<dyn MultipleImputer>],
) -> Result<ReplicationOutcome> {
    let seed = derive_seed(cfg.master_seed, h as u64);
    let rows = sample_rows(
        population.n_rows(),
        cfg.n_sample,
        &mut rng_from_seed(derive_seed(seed, 1)),
    );
    let sample = population.select_rows(&rows)?;
    let z = t_critical(f64::INFINITY, cfg.confidence_level);
    let pre = index.estimate_all(&sample);
    let q_hat: Vec<f64> = pre.iter().map(|e| e.q).collect();
    let pre_covered = pre
        .iter()
        .zip(estimands)
        .map(|(e, est)| {
            let half = z * e.u.sqrt();
            e.q - half <= est.population_value && est.population_value <= e.q + half
        })
        .collect();

    let incomplete = ampute(&sample, &cfg.missingness, &mut rng_from_seed(derive_seed(seed, 2)))?;
    let mut engines = Vec::with_capacity(imputers.len());
    let mut engine_seconds = Vec::with_capacity(imputers.len());
    for imputer in imputers {
        let started = Instant::now();
        let input = ReplicationInput {
            incomplete: &incomplete,
            complete: &sample,
            seed: derive_seed(seed, imputer.stream()),
        };
        let outcome = imputer
            .impute(&input)
            .and_then(|imp| pool_replication(cfg, estimands, index, imp))
            .map_err(|e| e.to_string());
        engine_seconds.push(started.elapsed().as_secs_f64());
        engines.push(outcome);
    }
    Ok(ReplicationOutcome {
        q_hat,
        pre_covered,
        engines,
        engine_seconds,
    })
}

fn pool_replication(
    cfg: &SimulationConfig,
    estimands: &[Estimand],
    index: &EstimandIndex,
    imp: Imputations,
) -> Result<EngineOutcome> {
    let per_dataset: Vec<Vec<_>> = imp.datasets.iter().map(|d| index.estimate_all(d)).collect();
    let mut q_bar = Vec::with_capacity(estimands.len());
    let mut covered = Vec::with_capacity(estimands.len());
    let mut degenerate_b = 0;
    let mut boundary = 0;
    let mut column = Vec::with_capacity(per_dataset.len());
    for (e_idx, est) in estimands.iter().enumerate() {
        column.clear();
        column.extend(per_dataset.iter().map(|d| d[e_idx]));
        let mut pe = pool(&column, cfg.confidence_level)?;
        if pe.degenerate_b {
            degenerate_b += 1;
        }
        if pe.touches_boundary() {
            boundary += 1;
            if cfg.clamp_intervals {
                (pe.ci_low, pe.ci_high) = pe.clamped();
            }
        }
        q_bar.push(pe.q_bar);
        covered.push(covers(&pe, est.population_value));
    }
    Ok(EngineOutcome {
        q_bar,
        covered,
        degenerate_b,
        boundary,
        warnings: imp.warnings,
    })
}

/// Run the study described by `cfg` with the built-in engines on `jobs`
/// worker threads.
pub fn run_simulation(cfg: &SimulationConfig, jobs: usize) -> Result<SimulationOutput> {
    cfg.validate()?;
    let population = cfg.load_population()?;
    let imputers = build_imputers(cfg);
    run_simulation_with(cfg, &population, &imputers, jobs)
}

/// Run the study with caller-supplied imputers against `population`.
pub fn run_simulation_with(
    cfg: &SimulationConfig,
    population: &CategoricalDataset,
    imputers: &[Box<dyn MultipleImputer>],
    jobs: usize,
) -> Result<SimulationOutput> {
    if cfg.n_sample > population.n_rows() {
        return Err(Error::Config(format!(
            "n_sample {} exceeds population size {}",
            cfg.n_sample,
            population.n_rows()
        )));
    }
    cfg.missingness.validate(&population.level_counts())?;
    let estimands = enumerate_estimands(population, cfg.n_sample, cfg.max_order)?;
    if estimands.is_empty() {
        return Err(Error::Config(
            "no estimand passes the n·p > 10 and n·(1−p) > 10 filter".into(),
        ));
    }
    let index = EstimandIndex::new(&estimands, &population.level_counts());

    let started = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<ReplicationOutcome> = pool.install(|| {
        (1..=cfg.replications)
            .into_par_iter()
            .map(|h| run_replication(h, cfg, population, &estimands, &index, imputers))
            .collect::<Result<Vec<_>>>()
    })?;
    let total = started.elapsed();

    let report = assemble_report(cfg, population, &estimands, imputers, &outcomes);
    let timing = SimulationTiming {
        total_seconds: Duration::as_secs_f64(&total),
        replication_engine_seconds: outcomes.iter().map(|o| o.engine_seconds.clone()).collect(),
    };
    Ok(SimulationOutput { report, timing })
}

fn assemble_report(
    cfg: &SimulationConfig,
    population: &CategoricalDataset,
    estimands: &[Estimand],
    imputers: &[Box<dyn MultipleImputer>],
    outcomes: &[ReplicationOutcome],
) -> SimulationReport {
    let cb = population.codebook();
    let labels: Vec<String> = imputers.iter().map(|i| i.label()).collect();
    let h_count = outcomes.len() as f64;

    let mut records = Vec::with_capacity(estimands.len());
    for (e_idx, est) in estimands.iter().enumerate() {
        let q = est.population_value;
        let pre_cov = outcomes.iter().filter(|o| o.pre_covered[e_idx]).count() as f64 / h_count;
        let mut engines = BTreeMap::new();
        for (k, label) in labels.iter().enumerate() {
            let mut num = 0.0;
            let mut den = 0.0;
            let mut hits = 0usize;
            let mut ok = 0usize;
            for o in outcomes {
                if let Ok(eo) = &o.engines[k] {
                    ok += 1;
                    num += (eo.q_bar[e_idx] - q).powi(2);
                    den += (o.q_hat[e_idx] - q).powi(2);
                    hits += eo.covered[e_idx] as usize;
                }
            }
            engines.insert(
                label.clone(),
                EngineEstimandStats {
                    coverage: (ok > 0).then(|| hits as f64 / ok as f64),
                    rel_mse: (ok > 0 && den > 0.0).then(|| num / den),
                    replications: ok,
                },
            );
        }
        records.push(EstimandRecord {
            kind: est.kind,
            cells: est
                .cells
                .iter()
                .map(|&(j, c)| CellLabel {
                    variable: cb.name(j).to_string(),
                    level: cb.variables[j].levels[c as usize].clone(),
                })
                .collect(),
            population_value: q,
            pre_missing_coverage: pre_cov,
            engines,
        });
    }

    let engine_summaries = labels
        .iter()
        .enumerate()
        .map(|(k, label)| {
            let mut s = EngineRunSummary {
                engine: label.clone(),
                successful_replications: 0,
                failed_replications: 0,
                failures: Vec::new(),
                degenerate_b_intervals: 0,
                boundary_intervals: 0,
                warnings: Vec::new(),
            };
            for (h, o) in outcomes.iter().enumerate() {
                match &o.engines[k] {
                    Ok(eo) => {
                        s.successful_replications += 1;
                        s.degenerate_b_intervals += eo.degenerate_b;
                        s.boundary_intervals += eo.boundary;
                        for w in &eo.warnings {
                            if !s.warnings.contains(w) {
                                s.warnings.push(w.clone());
                            }
                        }
                    }
                    Err(msg) => {
                        s.failed_replications += 1;
                        s.failures.push(FailureRecord {
                            replication: h + 1,
                            message: msg.clone(),
                        });
                    }
                }
            }
            s
        })
        .collect();

    let mut report = SimulationReport {
        settings: RunSettings {
            population_rows: population.n_rows(),
            n_sample: cfg.n_sample,
            replications: cfg.replications,
            imputations: cfg.imputations,
            max_order: cfg.max_order,
            master_seed: cfg.master_seed,
            confidence_level: cfg.confidence_level,
            missingness: cfg.missingness.clone(),
            engines: labels,
        },
        estimands: records,
        engines: engine_summaries,
        summary: SummaryTables::default(),
    };
    report.summary = summarize(&report);
    report
}

impl SimulationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Every estimand in the report clears the normality filter at the
    /// run's sample size.
    pub fn estimands_pass_filter(&self) -> bool {
        self.estimands
            .iter()
            .all(|e| passes_normality_filter(e.population_value, self.settings.n_sample))
    }
}

// ---------------------------------------------------------------------------
// summaries

/// (min, Q1, median, Q3, max) of one set of values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolation quantile (type 7) of sorted data.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty data");
    let h = (n - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl FiveNumber {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(FiveNumber {
            min: v[0],
            q1: quantile_sorted(&v, 0.25),
            median: quantile_sorted(&v, 0.5),
            q3: quantile_sorted(&v, 0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell {
    pub engine: String,
    pub kind: EstimandKind,
    pub estimands: usize,
    pub rel_mse: Option<FiveNumber>,
    pub median_coverage: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SummaryTables {
    /// Per engine and estimand order.
    pub cells: Vec<SummaryCell>,
    /// Median pre-missing coverage per estimand order.
    pub pre_missing_median_coverage: Vec<(EstimandKind, f64)>,
}

fn median(values: &[f64]) -> Option<f64> {
    FiveNumber::from_values(values).map(|f| f.median)
}

/// Rel.MSE quantiles and median coverage by engine and estimand order.
pub fn summarize(report: &SimulationReport) -> SummaryTables {
    let kinds: Vec<EstimandKind> = EstimandKind::ALL
        .into_iter()
        .filter(|k| report.estimands.iter().any(|e| e.kind == *k))
        .collect();
    let mut cells = Vec::new();
    for engine in &report.settings.engines {
        for &kind in &kinds {
            let of_kind = report.estimands.iter().filter(|e| e.kind == kind);
            let rel: Vec<f64> = of_kind.clone().filter_map(|e| e.engines.get(engine)?.rel_mse).collect();
            let cov: Vec<f64> = of_kind
                .clone()
                .filter_map(|e| e.engines.get(engine)?.coverage)
                .collect();
            cells.push(SummaryCell {
                engine: engine.clone(),
                kind,
                estimands: of_kind.count(),
                rel_mse: FiveNumber::from_values(&rel),
                median_coverage: median(&cov),
            });
        }
    }
    let pre = kinds
        .iter()
        .filter_map(|&kind| {
            let cov: Vec<f64> = report
                .estimands
                .iter()
                .filter(|e| e.kind == kind)
                .map(|e| e.pre_missing_coverage)
                .collect();
            median(&cov).map(|m| (kind, m))
        })
        .collect();
    SummaryTables {
        cells,
        pre_missing_median_coverage: pre,
    }
}

fn kind_title(kind: EstimandKind) -> &'static str {
    match kind {
        EstimandKind::Marginal => "Marginal",
        EstimandKind::Bivariate => "Bivariate",
        EstimandKind::Trivariate => "Trivariate",
    }
}

fn fmt_num(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{v:.0}")
    } else if v.abs() >= 100.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.2}")
    }
}

/// Engines with at least one successful replication, in report order.
fn reported_engines(report: &SimulationReport) -> Vec<String> {
    report
        .engines
        .iter()
        .filter(|e| e.successful_replications > 0)
        .map(|e| e.engine.clone())
        .collect()
}

/// Plain-text tables: Rel.MSE distribution (rows Min..Max, columns order ×
/// engine) followed by median coverage.
pub fn render_text(report: &SimulationReport) -> String {
    let tables = &report.summary;
    let engines = reported_engines(report);
    let kinds: Vec<EstimandKind> = EstimandKind::ALL
        .into_iter()
        .filter(|k| tables.cells.iter().any(|c| c.kind == *k))
        .collect();
    let lookup = |engine: &str, kind: EstimandKind| tables.cells.iter().find(|c| c.engine == engine && c.kind == kind);
    // each order's column group must fit its title with a margin
    let width = 9.max(12_usize.div_ceil(engines.len().max(1)));
    let mut out = String::new();

    let _ = writeln!(
        out,
        "Distribution of relative mean squared errors (n = {}, {} replications, L = {})",
        report.settings.n_sample, report.settings.replications, report.settings.imputations
    );
    let mut header1 = format!("{:<10}", "");
    let mut header2 = format!("{:<10}", "");
    for &kind in &kinds {
        let span = width * engines.len();
        let _ = write!(header1, "{:^span$}", kind_title(kind));
        for e in &engines {
            let _ = write!(header2, "{e:>width$}");
        }
    }
    let _ = writeln!(out, "{}", header1.trim_end());
    let _ = writeln!(out, "{header2}");
    let rows: [(&str, fn(&FiveNumber) -> f64); 5] = [
        ("Min.", |f| f.min),
        ("1st Qu.", |f| f.q1),
        ("Median", |f| f.median),
        ("3rd Qu.", |f| f.q3),
        ("Max.", |f| f.max),
    ];
    for (name, get) in rows {
        let mut line = format!("{name:<10}");
        for &kind in &kinds {
            for e in &engines {
                let cell = lookup(e, kind)
                    .and_then(|c| c.rel_mse.as_ref())
                    .map(|f| fmt_num(get(f)))
                    .unwrap_or_else(|| "-".into());
                let _ = write!(line, "{cell:>width$}");
            }
        }
        let _ = writeln!(out, "{line}");
    }

    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "Median coverage of {:.0}% intervals",
        report.settings.confidence_level * 100.0
    );
    let mut header = format!("{:<12}", "");
    for e in &engines {
        let _ = write!(header, "{e:>width$}");
    }
    let _ = write!(header, "{:>12}", "Pre-missing");
    let _ = writeln!(out, "{header}");
    for &kind in &kinds {
        let mut line = format!("{:<12}", kind_title(kind));
        for e in &engines {
            let cell = lookup(e, kind)
                .and_then(|c| c.median_coverage)
                .map(|v| format!("{v:.3}"))
                .unwrap_or_else(|| "-".into());
            let _ = write!(line, "{cell:>width$}");
        }
        let pre = tables
            .pre_missing_median_coverage
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, v)| format!("{v:.3}"))
            .unwrap_or_else(|| "-".into());
        let _ = write!(line, "{pre:>12}");
        let _ = writeln!(out, "{line}");
    }

    let failed: Vec<&EngineRunSummary> = report.engines.iter().filter(|e| e.failed_replications > 0).collect();
    if !failed.is_empty() {
        let _ = writeln!(out);
        for e in failed {
            let _ = writeln!(
                out,
                "{}: {} of {} replications failed and were excluded",
                e.engine,
                e.failed_replications,
                e.failed_replications + e.successful_replications
            );
        }
    }
    out
}

/// CSV with one row per (order, statistic, engine).
pub fn render_csv(report: &SimulationReport) -> String {
    let engines = reported_engines(report);
    let mut out = String::from("order,statistic,engine,value\n");
    for cell in &report.summary.cells {
        if !engines.contains(&cell.engine) {
            continue;
        }
        let order = kind_title(cell.kind).to_lowercase();
        if let Some(f) = &cell.rel_mse {
            for (name, v) in [
                ("rel_mse_min", f.min),
                ("rel_mse_q1", f.q1),
                ("rel_mse_median", f.median),
                ("rel_mse_q3", f.q3),
                ("rel_mse_max", f.max),
            ] {
                let _ = writeln!(out, "{order},{name},{},{v}", cell.engine);
            }
        }
        if let Some(c) = cell.median_coverage {
            let _ = writeln!(out, "{order},median_coverage,{},{c}", cell.engine);
        }
    }
    for (kind, c) in &report.summary.pre_missing_median_coverage {
        let _ = writeln!(
            out,
            "{},median_coverage,pre-missing,{c}",
            kind_title(*kind).to_lowercase()
        );
    }
    out
}
