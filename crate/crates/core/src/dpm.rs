//! Dirichlet-process mixture of products of multinomials (DPMPM) with a
//! truncated stick-breaking prior, fit by blocked Gibbs sampling with the
//! missing cells treated as unknowns inside the sampler.
//!
//! Model, for records i, variables j and classes k = 1..K:
//!
//! ```text
//! Y_ij | z_i = k     ~ Discrete(lambda[k][j])
//! z_i                ~ Discrete(pi)
//! lambda[k][j]       ~ Dirichlet(1, ..., 1)
//! pi_k               = V_k * prod_{h<k} (1 - V_h)
//! V_k                ~ Beta(1, alpha),  k < K;  V_K = 1
//! alpha              ~ Gamma(shape 0.25, rate 0.25)
//! ```

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::chained::initial_fill;
use crate::data::{CategoricalDataset, Code};
use crate::error::{Error, Result};
use crate::rng::{sample_dirichlet, sample_weighted};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpmConfig {
    /// Truncation level K.
    pub k: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub imputations: usize,
    pub alpha_shape: f64,
    /// Rate (inverse scale) of the Gamma prior on alpha.
    pub alpha_rate: f64,
}

impl Default for DpmConfig {
    fn default() -> Self {
        DpmConfig {
            k: 35,
            iterations: 10_000,
            burn_in: 2_000,
            imputations: 10,
            alpha_shape: 0.25,
            alpha_rate: 0.25,
        }
    }
}

impl DpmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("DPM truncation level K must be at least 1".into()));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::Config(format!(
                "DPM burn_in ({}) must be smaller than iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        if self.imputations < 2 {
            return Err(Error::Config("number of imputations must be at least 2".into()));
        }
        if self.iterations - self.burn_in < self.imputations {
            return Err(Error::Config(format!(
                "DPM needs at least {} post burn-in iterations, has {}",
                self.imputations,
                self.iterations - self.burn_in
            )));
        }
        if !(self.alpha_shape > 0.0 && self.alpha_rate > 0.0) {
            return Err(Error::Config("alpha prior shape and rate must be positive".into()));
        }
        Ok(())
    }

    /// 1-based iterations after which a completed dataset is captured.
    pub fn capture_iterations(&self) -> Vec<usize> {
        let spacing = (self.iterations - self.burn_in) / self.imputations;
        (1..=self.imputations).map(|s| self.burn_in + s * spacing).collect()
    }
}

/// Parameters and latent classes of the mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpmState {
    /// 0-based latent class of each record.
    pub z: Vec<usize>,
    /// Stick fractions, last entry fixed at 1.
    pub v: Vec<f64>,
    pub pi: Vec<f64>,
    /// `lambda[k][j][y]`.
    pub lambda: Vec<Vec<Vec<f64>>>,
    pub alpha: f64,
}

impl DpmState {
    pub fn k(&self) -> usize {
        self.v.len()
    }

    /// Number of distinct classes among the records.
    pub fn occupied_classes(&self) -> usize {
        let mut seen = vec![false; self.k()];
        for &z in &self.z {
            seen[z] = true;
        }
        seen.iter().filter(|&&s| s).count()
    }

    /// Σ_k pi_k Π_{(j,y)} lambda[k][j][y] for distinct variables j.
    pub fn joint_cell_probability(&self, cells: &[(usize, Code)]) -> f64 {
        (0..self.k())
            .map(|k| {
                self.pi[k]
                    * cells
                        .iter()
                        .map(|&(j, y)| self.lambda[k][j][y as usize])
                        .product::<f64>()
            })
            .sum()
    }
}

/// Mixture weights from stick fractions.
pub fn stick_weights(v: &[f64]) -> Vec<f64> {
    let mut rest = 1.0;
    let mut pi = Vec::with_capacity(v.len());
    for (k, &vk) in v.iter().enumerate() {
        if k + 1 == v.len() {
            pi.push(rest);
        } else {
            pi.push(vk * rest);
            rest *= 1.0 - vk;
        }
    }
    pi
}

/// Number of distinct values in `z`.
pub fn occupied_classes(state: &DpmState) -> usize {
    state.occupied_classes()
}

/// Mixture joint probability of a set of (variable, level) cells.
pub fn joint_cell_probability(state: &DpmState, cells: &[(usize, Code)]) -> f64 {
    state.joint_cell_probability(cells)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationDiagnostics {
    pub iteration: usize,
    pub occupied: usize,
    pub alpha: f64,
    pub log_joint: f64,
}

/// Blocked Gibbs sampler over (z, Y_mis, lambda, V, alpha).
pub struct DpmSampler {
    n: usize,
    p: usize,
    level_counts: Vec<usize>,
    /// offset of variable j in a flattened level axis
    offsets: Vec<usize>,
    total_levels: usize,
    /// row-major current completed values
    values: Vec<Code>,
    /// row-major missingness
    missing: Vec<bool>,
    /// observed (j, flat level) pairs of each row are derived from these
    has_missing: bool,
    state: DpmState,
    alpha_shape: f64,
    alpha_rate: f64,
    iteration: usize,
    // scratch
    lambda_t: Vec<f64>,
    log_lambda_t: Vec<f64>,
    class_counts: Vec<usize>,
    level_class_counts: Vec<usize>,
}

impl DpmSampler {
    /// Initialize missing cells from observed marginals and draw the
    /// parameters from their priors (alpha starts at 1).
    pub fn new<R: Rng + ?Sized>(data: &CategoricalDataset, cfg: &DpmConfig, rng: &mut R) -> Result<Self> {
        if cfg.k < 1 {
            return Err(Error::Config("DPM truncation level K must be at least 1".into()));
        }
        let filled = initial_fill(data, rng)?;
        let n = data.n_rows();
        let p = data.n_vars();
        let level_counts = data.level_counts();
        let mut offsets = Vec::with_capacity(p);
        let mut total_levels = 0;
        for &d in &level_counts {
            offsets.push(total_levels);
            total_levels += d;
        }
        let mut values = vec![0 as Code; n * p];
        let mut missing = vec![false; n * p];
        for j in 0..p {
            for i in 0..n {
                values[i * p + j] = filled[j][i];
                missing[i * p + j] = data.is_missing(i, j);
            }
        }
        let k = cfg.k;
        let alpha = 1.0;
        let mut v: Vec<f64> = (0..k)
            .map(|_| Beta::new(1.0, alpha).expect("valid beta").sample(rng))
            .collect();
        v[k - 1] = 1.0;
        let pi = stick_weights(&v);
        let lambda = (0..k)
            .map(|_| {
                level_counts
                    .iter()
                    .map(|&d| sample_dirichlet(&vec![1.0; d], rng))
                    .collect()
            })
            .collect();
        let z = (0..n).map(|_| sample_weighted(&pi, rng)).collect();
        let mut sampler = DpmSampler {
            n,
            p,
            offsets,
            total_levels,
            has_missing: missing.iter().any(|&m| m),
            values,
            missing,
            state: DpmState {
                z,
                v,
                pi,
                lambda,
                alpha,
            },
            alpha_shape: cfg.alpha_shape,
            alpha_rate: cfg.alpha_rate,
            iteration: 0,
            lambda_t: vec![0.0; total_levels * k],
            log_lambda_t: vec![0.0; total_levels * k],
            class_counts: vec![0; k],
            level_class_counts: vec![0; k * total_levels],
            level_counts,
        };
        sampler.count();
        Ok(sampler)
    }

    pub fn state(&self) -> &DpmState {
        &self.state
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Current completed value of a cell.
    pub fn value(&self, row: usize, var: usize) -> Code {
        self.values[row * self.p + var]
    }

    /// Current completed data as a fully observed dataset built on
    /// `template`'s codebook and observed cells.
    pub fn completed(&self, template: &CategoricalDataset) -> Result<CategoricalDataset> {
        let fill: Vec<Vec<Code>> = (0..self.p)
            .map(|j| (0..self.n).map(|i| self.values[i * self.p + j]).collect())
            .collect();
        template.completed_with(&fill)
    }

    /// One full sweep: z, missing cells, lambda, V (and pi), alpha.
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.sample_z(rng);
        if self.has_missing {
            self.sample_missing(rng);
        }
        self.count();
        self.sample_lambda(rng);
        self.sample_sticks(rng);
        self.sample_alpha(rng);
        self.iteration += 1;
    }

    fn sample_z<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let k = self.state.k();
        for (kk, lam) in self.state.lambda.iter().enumerate() {
            for (j, probs) in lam.iter().enumerate() {
                for (y, &pr) in probs.iter().enumerate() {
                    self.lambda_t[(self.offsets[j] + y) * k + kk] = pr;
                }
            }
        }
        let mut logs_ready = false;
        let mut acc = vec![0.0; k];
        for i in 0..self.n {
            let row = &self.values[i * self.p..(i + 1) * self.p];
            let miss = &self.missing[i * self.p..(i + 1) * self.p];
            acc.copy_from_slice(&self.state.pi);
            for j in 0..self.p {
                if miss[j] {
                    continue;
                }
                let base = (self.offsets[j] + row[j] as usize) * k;
                for (a, l) in acc.iter_mut().zip(&self.lambda_t[base..base + k]) {
                    *a *= l;
                }
            }
            let max = acc.iter().cloned().fold(0.0, f64::max);
            if max < 1e-250 {
                // too close to underflow for a direct product; redo in log space
                if !logs_ready {
                    for (dst, &src) in self.log_lambda_t.iter_mut().zip(&self.lambda_t) {
                        *dst = src.ln();
                    }
                    logs_ready = true;
                }
                for (a, p) in acc.iter_mut().zip(&self.state.pi) {
                    *a = p.ln();
                }
                for j in 0..self.p {
                    if miss[j] {
                        continue;
                    }
                    let base = (self.offsets[j] + row[j] as usize) * k;
                    for (a, l) in acc.iter_mut().zip(&self.log_lambda_t[base..base + k]) {
                        *a += l;
                    }
                }
                let max = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for a in acc.iter_mut() {
                    *a = (*a - max).exp();
                }
            }
            self.state.z[i] = sample_weighted(&acc, rng);
        }
    }

    fn sample_missing<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for i in 0..self.n {
            let z = self.state.z[i];
            for j in 0..self.p {
                let idx = i * self.p + j;
                if self.missing[idx] {
                    self.values[idx] = sample_weighted(&self.state.lambda[z][j], rng) as Code;
                }
            }
        }
    }

    fn count(&mut self) {
        self.class_counts.fill(0);
        self.level_class_counts.fill(0);
        let t = self.total_levels;
        for i in 0..self.n {
            let z = self.state.z[i];
            self.class_counts[z] += 1;
            for j in 0..self.p {
                let y = self.values[i * self.p + j] as usize;
                self.level_class_counts[z * t + self.offsets[j] + y] += 1;
            }
        }
    }

    fn sample_lambda<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let t = self.total_levels;
        for kk in 0..self.state.k() {
            for j in 0..self.p {
                let start = kk * t + self.offsets[j];
                let params: Vec<f64> = self.level_class_counts[start..start + self.level_counts[j]]
                    .iter()
                    .map(|&c| 1.0 + c as f64)
                    .collect();
                self.state.lambda[kk][j] = sample_dirichlet(&params, rng);
            }
        }
    }

    fn sample_sticks<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let k = self.state.k();
        let mut tail: usize = self.class_counts.iter().sum();
        for kk in 0..k - 1 {
            tail -= self.class_counts[kk];
            let a = 1.0 + self.class_counts[kk] as f64;
            let b = self.state.alpha + tail as f64;
            let draw: f64 = Beta::new(a, b).expect("positive beta parameters").sample(rng);
            self.state.v[kk] = if draw.is_nan() { 1.0 } else { draw };
        }
        self.state.v[k - 1] = 1.0;
        self.state.pi = stick_weights(&self.state.v);
    }

    fn sample_alpha<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let k = self.state.k();
        let log_rest: f64 = self.state.v[..k - 1]
            .iter()
            .map(|&v| (1.0 - v).max(f64::MIN_POSITIVE).ln())
            .sum();
        let shape = self.alpha_shape + (k - 1) as f64;
        let rate = self.alpha_rate - log_rest;
        let draw: f64 = Gamma::new(shape, 1.0 / rate)
            .expect("positive gamma parameters")
            .sample(rng);
        self.state.alpha = draw.max(f64::MIN_POSITIVE);
    }

    /// Log of the joint density of completed data, classes and parameters.
    pub fn log_joint(&self) -> f64 {
        let st = &self.state;
        let k = st.k();
        let t = self.total_levels;
        let mut lp = 0.0;
        for kk in 0..k {
            if self.class_counts[kk] == 0 {
                continue;
            }
            lp += self.class_counts[kk] as f64 * st.pi[kk].ln();
            for j in 0..self.p {
                let start = kk * t + self.offsets[j];
                for (y, &c) in self.level_class_counts[start..start + self.level_counts[j]]
                    .iter()
                    .enumerate()
                {
                    if c > 0 {
                        lp += c as f64 * st.lambda[kk][j][y].ln();
                    }
                }
            }
        }
        // Dirichlet(1) densities are the constant Γ(D_j)
        lp += k as f64 * self.level_counts.iter().map(|&d| ln_gamma(d as f64)).sum::<f64>();
        for &v in &st.v[..k - 1] {
            lp += st.alpha.ln() + (st.alpha - 1.0) * (1.0 - v).max(f64::MIN_POSITIVE).ln();
        }
        let (a, b) = (self.alpha_shape, self.alpha_rate);
        lp += a * b.ln() - ln_gamma(a) + (a - 1.0) * st.alpha.ln() - b * st.alpha;
        lp
    }
}

/// Output of a DPM imputation run.
#[derive(Debug, Clone)]
pub struct DpmRun {
    pub datasets: Vec<CategoricalDataset>,
    pub capture_iterations: Vec<usize>,
    pub diagnostics: Vec<IterationDiagnostics>,
    pub max_occupied: usize,
    /// Occupancy reached K at some iteration.
    pub saturated: bool,
    pub warnings: Vec<String>,
}

impl DpmRun {
    pub fn occupancy_trace(&self) -> Vec<usize> {
        self.diagnostics.iter().map(|d| d.occupied).collect()
    }

    pub fn alpha_trace(&self) -> Vec<f64> {
        self.diagnostics.iter().map(|d| d.alpha).collect()
    }
}

/// Run one chain for `cfg.iterations` sweeps and capture `cfg.imputations`
/// completed datasets at evenly spaced post burn-in iterations.
pub fn dpm_multiple_impute<R: Rng + ?Sized>(data: &CategoricalDataset, cfg: &DpmConfig, rng: &mut R) -> Result<DpmRun> {
    cfg.validate()?;
    let captures = cfg.capture_iterations();
    if data.is_complete() {
        return Ok(DpmRun {
            datasets: vec![data.clone(); cfg.imputations],
            capture_iterations: captures,
            diagnostics: Vec::new(),
            max_occupied: 0,
            saturated: false,
            warnings: vec!["no missing cells".to_string()],
        });
    }
    let mut sampler = DpmSampler::new(data, cfg, rng)?;
    let mut datasets = Vec::with_capacity(cfg.imputations);
    let mut diagnostics = Vec::with_capacity(cfg.iterations);
    let mut next_capture = 0;
    for _ in 0..cfg.iterations {
        sampler.step(rng);
        let it = sampler.iteration();
        diagnostics.push(IterationDiagnostics {
            iteration: it,
            occupied: sampler.state().occupied_classes(),
            alpha: sampler.state().alpha,
            log_joint: sampler.log_joint(),
        });
        if next_capture < captures.len() && captures[next_capture] == it {
            datasets.push(sampler.completed(data)?);
            next_capture += 1;
        }
    }
    let max_occupied = diagnostics.iter().map(|d| d.occupied).max().unwrap_or(0);
    let saturated = max_occupied >= cfg.k;
    let mut warnings = Vec::new();
    if saturated {
        warnings.push(format!(
            "DPM occupied all K={} latent classes during sampling; increase K and rerun",
            cfg.k
        ));
    }
    Ok(DpmRun {
        datasets,
        capture_iterations: captures,
        diagnostics,
        max_occupied,
        saturated,
        warnings,
    })
}

/// Write one CSV row per iteration: iteration, occupied classes, alpha,
/// log joint density.
pub fn write_diagnostics(path: impl AsRef<Path>, rows: &[IterationDiagnostics]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "iteration,occupied,alpha,log_joint")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.iteration, r.occupied, r.alpha, r.log_joint)?;
    }
    out.flush()?;
    Ok(())
}
