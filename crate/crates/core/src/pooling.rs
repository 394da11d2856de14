//! Rubin's combining rules for a scalar estimand.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal, StudentsT};

use crate::data::ProportionEstimate;
use crate::error::{Error, Result};

/// Degrees of freedom above which the t quantile is replaced by the normal
/// one; the two differ by less than 1e-9 there.
const NORMAL_DF_CUTOFF: f64 = 1e10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PooledEstimate {
    pub q_bar: f64,
    pub b: f64,
    pub u_bar: f64,
    pub t: f64,
    /// `f64::INFINITY` when the between-imputation variance is zero.
    pub nu: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub degenerate_b: bool,
}

impl PooledEstimate {
    /// Interval endpoints truncated to [0, 1].
    pub fn clamped(&self) -> (f64, f64) {
        (self.ci_low.max(0.0), self.ci_high.min(1.0))
    }

    /// The unclamped interval reaches below zero or above one.
    pub fn touches_boundary(&self) -> bool {
        self.ci_low < 0.0 || self.ci_high > 1.0
    }
}

/// Two-sided critical value for `level` under a t distribution with `nu`
/// degrees of freedom (normal when `nu` is infinite).
pub fn t_critical(nu: f64, level: f64) -> f64 {
    let p = 0.5 + level / 2.0;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    if !nu.is_finite() || nu > NORMAL_DF_CUTOFF {
        return normal.inverse_cdf(p);
    }
    let dist = StudentsT::new(0.0, 1.0, nu).expect("positive degrees of freedom");
    let mut x = dist.inverse_cdf(p);
    if !x.is_finite() {
        x = normal.inverse_cdf(p);
    }
    // polish with Newton steps on the CDF
    for _ in 0..50 {
        let step = (dist.cdf(x) - p) / dist.pdf(x);
        x -= step;
        if step.abs() < 1e-13 * x.abs().max(1.0) {
            break;
        }
    }
    x
}

/// Pool L completed-data (q, u) pairs at confidence `level`.
///
/// With zero between-imputation variance the t degrees of freedom are
/// undefined; the interval then uses the normal quantile with variance ū and
/// `degenerate_b` is set.
pub fn pool(estimates: &[ProportionEstimate], level: f64) -> Result<PooledEstimate> {
    let l = estimates.len();
    if l < 2 {
        return Err(Error::Config(format!("pooling needs at least 2 imputations, got {l}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("confidence level {level} outside (0, 1)")));
    }
    let lf = l as f64;
    let q_bar = estimates.iter().map(|e| e.q).sum::<f64>() / lf;
    let u_bar = estimates.iter().map(|e| e.u).sum::<f64>() / lf;
    let b = estimates.iter().map(|e| (e.q - q_bar).powi(2)).sum::<f64>() / (lf - 1.0);
    let inflated_b = (1.0 + 1.0 / lf) * b;
    let t = inflated_b + u_bar;

    let degenerate_b = b <= 0.0;
    let nu = if degenerate_b {
        f64::INFINITY
    } else {
        (lf - 1.0) * (1.0 + u_bar / inflated_b).powi(2)
    };
    let half = t_critical(nu, level) * t.sqrt();
    Ok(PooledEstimate {
        q_bar,
        b,
        u_bar,
        t,
        nu,
        ci_low: q_bar - half,
        ci_high: q_bar + half,
        degenerate_b,
    })
}

/// Closed-interval coverage check.
pub fn covers(pe: &PooledEstimate, truth: f64) -> bool {
    pe.ci_low <= truth && truth <= pe.ci_high
}
