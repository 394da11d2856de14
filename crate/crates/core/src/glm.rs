//! Main-effects multinomial logistic regression for the MI-GLM engine.
//!
//! Predictors are dummy coded with the first level as reference. The model
//! is fit by Newton-Raphson (IRLS) on the ridge-penalized log-likelihood,
//! with the intercepts left unpenalized. Imputations draw one coefficient
//! vector from the normal approximation N(estimate, inverse penalized
//! information) and then sample each row from the softmax probabilities.
//!
//! Dummy columns that are constant over the fitting rows carry no
//! information and are pinned at zero, as are target levels never observed
//! among the fitting rows (those get probability zero). When a predictor's
//! first level is absent from the fitting rows, its first present level
//! becomes the effective reference so the design stays full rank.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::chained::{ConditionalEngine, ConditionalProblem};
use crate::data::Code;
use crate::error::EngineError;
use crate::rng::sample_weighted;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlmConfig {
    /// Ridge penalty on every non-intercept coefficient.
    pub ridge: f64,
    /// Targets with more levels than this are refused.
    pub max_levels: usize,
    pub max_iterations: usize,
    /// Convergence when the largest coefficient change drops below this.
    pub tolerance: f64,
    pub max_step_halvings: usize,
    /// Newton steps are scaled down so no coefficient moves by more than
    /// this in one iteration.
    pub max_step: f64,
}

impl Default for GlmConfig {
    fn default() -> Self {
        GlmConfig {
            ridge: 1e-5,
            max_levels: 10,
            max_iterations: 25,
            tolerance: 1e-8,
            max_step_halvings: 5,
            max_step: 20.0,
        }
    }
}

/// Score max-norm below which a fit counts as converged regardless of the
/// last coefficient change.
const GRADIENT_TOLERANCE: f64 = 1e-9;

/// Column layout of the dummy-coded design shared by fitting and
/// prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignLayout {
    /// (variable, first design column) for each predictor.
    pub predictors: Vec<(usize, usize)>,
    /// Number of design columns, intercept included.
    pub n_columns: usize,
}

impl DesignLayout {
    pub fn new(predictors: &[usize], level_counts: &[usize]) -> Self {
        let mut next = 1;
        let mut out = Vec::with_capacity(predictors.len());
        for &j in predictors {
            out.push((j, next));
            next += level_counts[j] - 1;
        }
        DesignLayout {
            predictors: out,
            n_columns: next,
        }
    }

    fn row_columns(&self, columns: &[Vec<Code>], row: usize, out: &mut Vec<usize>) {
        out.clear();
        out.push(0);
        for &(j, base) in &self.predictors {
            let c = columns[j][row] as usize;
            if c > 0 {
                out.push(base + c - 1);
            }
        }
    }
}

/// A fitted main-effects multinomial logit.
#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub target: usize,
    pub layout: DesignLayout,
    /// One row per target level, in log-odds relative to the reference
    /// level (whose row is zero). Pinned entries are zero.
    pub coefficients: DMatrix<f64>,
    /// Covariance of the free parameters listed in `free_parameters`.
    pub covariance: DMatrix<f64>,
    /// (level, design column) of each free parameter.
    pub free_parameters: Vec<(usize, usize)>,
    /// Levels with nonzero probability.
    pub active_levels: Vec<bool>,
    pub reference_level: usize,
    pub ridge: f64,
    pub iterations: usize,
    /// Largest absolute penalized score at the returned estimate.
    pub gradient_max_norm: f64,
    /// Penalized log-likelihood after each accepted iteration, starting
    /// from the initial point.
    pub log_likelihood_trace: Vec<f64>,
    cholesky_info: DMatrix<f64>,
}

impl LogisticFit {
    pub fn n_levels(&self) -> usize {
        self.coefficients.nrows()
    }

    /// Class probabilities for one design row under coefficient matrix
    /// `coef`.
    fn probabilities_with(&self, coef: &DMatrix<f64>, cols: &[usize], out: &mut [f64]) {
        let d = self.n_levels();
        let mut max = f64::NEG_INFINITY;
        for c in 0..d {
            if self.active_levels[c] {
                let eta: f64 = cols.iter().map(|&a| coef[(c, a)]).sum();
                out[c] = eta;
                max = max.max(eta);
            }
        }
        let mut total = 0.0;
        for c in 0..d {
            if self.active_levels[c] {
                out[c] = (out[c] - max).exp();
                total += out[c];
            } else {
                out[c] = 0.0;
            }
        }
        for v in out.iter_mut() {
            *v /= total;
        }
    }

    /// Fitted class probabilities for each row of `columns` listed in `rows`.
    pub fn predict(&self, columns: &[Vec<Code>], rows: &[usize]) -> Vec<Vec<f64>> {
        let mut cols = Vec::new();
        rows.iter()
            .map(|&i| {
                self.layout.row_columns(columns, i, &mut cols);
                let mut p = vec![0.0; self.n_levels()];
                self.probabilities_with(&self.coefficients, &cols, &mut p);
                p
            })
            .collect()
    }

    /// Coefficient matrix drawn from N(estimate, covariance).
    pub fn draw_coefficients<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        let m = self.free_parameters.len();
        let z = DVector::from_fn(m, |_, _| StandardNormal.sample(rng));
        // info = L L^T, so L^{-T} z has covariance info^{-1}
        let shift = self
            .cholesky_info
            .transpose()
            .solve_upper_triangular(&z)
            .unwrap_or_else(|| DVector::zeros(m));
        let mut coef = self.coefficients.clone();
        for (k, &(c, a)) in self.free_parameters.iter().enumerate() {
            coef[(c, a)] += shift[k];
        }
        coef
    }

    /// Draw one coefficient vector, then one level per row in `rows`.
    pub fn draw_and_impute<R: rand::Rng + ?Sized>(
        &self,
        columns: &[Vec<Code>],
        rows: &[usize],
        rng: &mut R,
    ) -> Vec<Code> {
        let coef = self.draw_coefficients(rng);
        let mut cols = Vec::new();
        let mut p = vec![0.0; self.n_levels()];
        rows.iter()
            .map(|&i| {
                self.layout.row_columns(columns, i, &mut cols);
                self.probabilities_with(&coef, &cols, &mut p);
                sample_weighted(&p, rng) as Code
            })
            .collect()
    }
}

/// The penalized multinomial likelihood restricted to the free parameters.
///
/// The parameter vector is laid out class-major: for each free class (every
/// active level except the reference) the coefficients of the active design
/// columns, intercept first.
pub struct MultinomialModel {
    n_levels: usize,
    free_classes: Vec<usize>,
    active_levels: Vec<bool>,
    reference_level: usize,
    /// design column -> compressed active index
    active_columns: Vec<usize>,
    /// compressed active columns of each fitting row
    rows: Vec<Vec<usize>>,
    y: Vec<usize>,
    ridge: f64,
    layout: DesignLayout,
}

impl MultinomialModel {
    pub fn new(
        target_name: &str,
        columns: &[Vec<Code>],
        target: usize,
        predictors: &[usize],
        level_counts: &[usize],
        fit_rows: &[usize],
        ridge: f64,
    ) -> Result<Self, EngineError> {
        let d = level_counts[target];
        let y: Vec<usize> = fit_rows.iter().map(|&i| columns[target][i] as usize).collect();
        let mut target_counts = vec![0usize; d];
        for &c in &y {
            target_counts[c] += 1;
        }
        let active_levels: Vec<bool> = target_counts.iter().map(|&c| c > 0).collect();
        let present: Vec<usize> = (0..d).filter(|&c| active_levels[c]).collect();
        if present.len() < 2 {
            return Err(EngineError::InsufficientLevels {
                variable: target_name.to_string(),
            });
        }
        let reference_level = present[0];
        let free_classes = present[1..].to_vec();

        let layout = DesignLayout::new(predictors, level_counts);
        let mut active = vec![false; layout.n_columns];
        active[0] = true;
        for &(j, base) in &layout.predictors {
            let mut counts = vec![0usize; level_counts[j]];
            for &i in fit_rows {
                counts[columns[j][i] as usize] += 1;
            }
            let present: Vec<usize> = (0..level_counts[j]).filter(|&c| counts[c] > 0).collect();
            if present.len() < 2 {
                continue;
            }
            // level 0 is the coded reference; if it is absent the first
            // present level stands in for it, so either way every present
            // level after the first gets a dummy
            for &c in &present[1..] {
                active[base + c - 1] = true;
            }
        }
        let mut active_columns = vec![usize::MAX; layout.n_columns];
        let mut next = 0;
        for (a, &on) in active.iter().enumerate() {
            if on {
                active_columns[a] = next;
                next += 1;
            }
        }
        let mut full = Vec::new();
        let rows = fit_rows
            .iter()
            .map(|&i| {
                layout.row_columns(columns, i, &mut full);
                full.iter()
                    .filter(|&&a| active_columns[a] != usize::MAX)
                    .map(|&a| active_columns[a])
                    .collect()
            })
            .collect();

        Ok(MultinomialModel {
            n_levels: d,
            free_classes,
            active_levels,
            reference_level,
            active_columns,
            rows,
            y,
            ridge,
            layout,
        })
    }

    fn n_active_columns(&self) -> usize {
        self.active_columns.iter().filter(|&&a| a != usize::MAX).count()
    }

    pub fn n_parameters(&self) -> usize {
        self.free_classes.len() * self.n_active_columns()
    }

    fn y_class(&self, row: usize) -> Option<usize> {
        // index among free classes, None for the reference
        self.free_classes.iter().position(|&c| c == self.y[row])
    }

    /// Free-class probabilities for one row; returns the log of the
    /// normalizer.
    fn row_probabilities(&self, theta: &[f64], row: usize, probs: &mut [f64]) -> f64 {
        let a_count = self.n_active_columns();
        let cols = &self.rows[row];
        let mut max = 0.0f64; // reference has eta = 0
        for (k, p) in probs.iter_mut().enumerate() {
            let eta: f64 = cols.iter().map(|&a| theta[k * a_count + a]).sum();
            *p = eta;
            max = max.max(eta);
        }
        let mut total = (-max).exp();
        for p in probs.iter_mut() {
            *p = (*p - max).exp();
            total += *p;
        }
        for p in probs.iter_mut() {
            *p /= total;
        }
        max + total.ln()
    }

    fn penalty(&self, theta: &[f64]) -> f64 {
        let a_count = self.n_active_columns();
        theta
            .iter()
            .enumerate()
            .filter(|(idx, _)| idx % a_count != 0)
            .map(|(_, t)| t * t)
            .sum::<f64>()
            * 0.5
            * self.ridge
    }

    pub fn penalized_log_likelihood(&self, theta: &[f64]) -> f64 {
        let a_count = self.n_active_columns();
        let mut probs = vec![0.0; self.free_classes.len()];
        let mut ll = 0.0;
        for i in 0..self.rows.len() {
            let log_norm = self.row_probabilities(theta, i, &mut probs);
            let eta = match self.y_class(i) {
                Some(k) => self.rows[i].iter().map(|&a| theta[k * a_count + a]).sum(),
                None => 0.0,
            };
            ll += eta - log_norm;
        }
        ll - self.penalty(theta)
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        self.gradient_and_information(theta, false).0
    }

    fn gradient_and_information(&self, theta: &[f64], with_info: bool) -> (Vec<f64>, Option<DMatrix<f64>>) {
        let a_count = self.n_active_columns();
        let k_count = self.free_classes.len();
        let m = k_count * a_count;
        let mut grad = vec![0.0; m];
        let mut info = if with_info { Some(DMatrix::zeros(m, m)) } else { None };
        let mut probs = vec![0.0; k_count];
        for i in 0..self.rows.len() {
            self.row_probabilities(theta, i, &mut probs);
            let yk = self.y_class(i);
            let cols = &self.rows[i];
            for k in 0..k_count {
                let resid = if yk == Some(k) { 1.0 } else { 0.0 } - probs[k];
                for &a in cols {
                    grad[k * a_count + a] += resid;
                }
            }
            if let Some(h) = info.as_mut() {
                for k in 0..k_count {
                    for k2 in k..k_count {
                        let w = if k == k2 {
                            probs[k] * (1.0 - probs[k])
                        } else {
                            -probs[k] * probs[k2]
                        };
                        for &a in cols {
                            let r = k * a_count + a;
                            for &a2 in cols {
                                let c = k2 * a_count + a2;
                                if k2 > k || c >= r {
                                    h[(r, c)] += w;
                                }
                            }
                        }
                    }
                }
            }
        }
        for (idx, g) in grad.iter_mut().enumerate() {
            if idx % a_count != 0 {
                *g -= self.ridge * theta[idx];
            }
        }
        if let Some(h) = info.as_mut() {
            for idx in 0..m {
                if idx % a_count != 0 {
                    h[(idx, idx)] += self.ridge;
                }
            }
            h.fill_lower_triangle_with_upper_triangle();
        }
        (grad, info)
    }

    /// Maximize the penalized likelihood by Newton steps with step halving.
    pub fn fit(self, target: usize, target_name: &str, cfg: &GlmConfig) -> Result<LogisticFit, EngineError> {
        let m = self.n_parameters();
        let mut theta = vec![0.0; m];
        let mut ll = self.penalized_log_likelihood(&theta);
        let mut ll_trace = vec![ll];
        let mut change_trace = Vec::new();
        let mut converged = false;
        let mut iterations = 0;

        for _ in 0..cfg.max_iterations {
            iterations += 1;
            let (grad, info) = self.gradient_and_information(&theta, true);
            let info = info.expect("information requested");
            let chol = info.cholesky().ok_or_else(|| EngineError::Numerical {
                variable: target_name.to_string(),
                reason: "penalized information matrix is not positive definite".into(),
            })?;
            let grad = DVector::from_vec(grad);
            let step = chol.solve(&grad);

            // On flat, quasi-separated fits the coefficient changes can stall
            // above the tolerance although the score is already negligible,
            // or the predicted gain drops below the rounding noise of ll so
            // that the line search starts rejecting full steps.
            let score = grad.amax();
            let below_noise = grad.dot(&step) <= 1e-12 * (1.0 + ll.abs()) && score < 100.0 * GRADIENT_TOLERANCE;
            if score < GRADIENT_TOLERANCE || below_noise {
                change_trace.push(step.amax());
                converged = true;
                break;
            }

            let longest = step.amax();
            let mut scale = if longest > cfg.max_step {
                cfg.max_step / longest
            } else {
                1.0
            };
            let mut accepted = None;
            for _ in 0..=cfg.max_step_halvings {
                let candidate: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + scale * s).collect();
                let cand_ll = self.penalized_log_likelihood(&candidate);
                if cand_ll.is_finite() && cand_ll >= ll {
                    accepted = Some((candidate, cand_ll));
                    break;
                }
                scale *= 0.5;
            }
            let Some((candidate, cand_ll)) = accepted else {
                change_trace.push(step.amax());
                // No halving improves. If the predicted gain of the full
                // Newton step is below what f64 can resolve in ll, we are at
                // the optimum.
                converged = grad.dot(&step) <= 1e-10 * (1.0 + ll.abs());
                break;
            };
            let max_change = step.iter().fold(0.0f64, |acc, s| acc.max((scale * s).abs()));
            change_trace.push(max_change);
            theta = candidate;
            ll = cand_ll;
            ll_trace.push(ll);
            if max_change < cfg.tolerance {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(EngineError::NonConvergence {
                variable: target_name.to_string(),
                iterations,
                trace: change_trace,
            });
        }

        let (grad, info) = self.gradient_and_information(&theta, true);
        let info = info.expect("information requested");
        let chol = info.clone().cholesky().ok_or_else(|| EngineError::Numerical {
            variable: target_name.to_string(),
            reason: "penalized information matrix is not positive definite at the estimate".into(),
        })?;
        let covariance = chol.inverse();
        let cholesky_info = chol.l();

        let a_count = self.n_active_columns();
        let mut active_design = vec![0usize; a_count];
        for (a, &compressed) in self.active_columns.iter().enumerate() {
            if compressed != usize::MAX {
                active_design[compressed] = a;
            }
        }
        let mut coefficients = DMatrix::zeros(self.n_levels, self.layout.n_columns);
        let mut free_parameters = Vec::with_capacity(m);
        for (k, &c) in self.free_classes.iter().enumerate() {
            for (compressed, &a) in active_design.iter().enumerate() {
                coefficients[(c, a)] = theta[k * a_count + compressed];
                free_parameters.push((c, a));
            }
        }
        Ok(LogisticFit {
            target,
            layout: self.layout,
            coefficients,
            covariance,
            free_parameters,
            active_levels: self.active_levels,
            reference_level: self.reference_level,
            ridge: self.ridge,
            iterations,
            gradient_max_norm: grad.iter().fold(0.0, |acc, g| acc.max(g.abs())),
            log_likelihood_trace: ll_trace,
            cholesky_info,
        })
    }
}

/// Fit a main-effects multinomial logit of `target` on `predictors` over
/// `fit_rows`.
pub fn fit_multinomial(
    target_name: &str,
    columns: &[Vec<Code>],
    target: usize,
    predictors: &[usize],
    level_counts: &[usize],
    fit_rows: &[usize],
    cfg: &GlmConfig,
) -> Result<LogisticFit, EngineError> {
    if level_counts[target] > cfg.max_levels {
        return Err(EngineError::EngineUnsupported {
            variable: target_name.to_string(),
            levels: level_counts[target],
            max_levels: cfg.max_levels,
        });
    }
    MultinomialModel::new(
        target_name,
        columns,
        target,
        predictors,
        level_counts,
        fit_rows,
        cfg.ridge,
    )?
    .fit(target, target_name, cfg)
}

/// MI-GLM conditional engine.
#[derive(Debug, Clone, Default)]
pub struct GlmEngine {
    pub config: GlmConfig,
}

impl GlmEngine {
    pub fn new(config: GlmConfig) -> Self {
        GlmEngine { config }
    }
}

impl ConditionalEngine for GlmEngine {
    fn name(&self) -> &'static str {
        "glm"
    }

    fn fit_and_draw(&self, problem: &ConditionalProblem<'_>, rng: &mut dyn RngCore) -> Result<Vec<Code>, EngineError> {
        if problem.target_levels() > self.config.max_levels {
            return Err(EngineError::EngineUnsupported {
                variable: problem.target_name.to_string(),
                levels: problem.target_levels(),
                max_levels: self.config.max_levels,
            });
        }
        let counts = problem.target_counts();
        let present: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] > 0).collect();
        if present.len() == 1 {
            return Ok(vec![present[0] as Code; problem.impute_rows.len()]);
        }
        let fit = fit_multinomial(
            problem.target_name,
            problem.columns,
            problem.target,
            &problem.predictors(),
            problem.level_counts,
            problem.fit_rows,
            &self.config,
        )?;
        Ok(fit.draw_and_impute(problem.columns, problem.impute_rows, rng))
    }
}
