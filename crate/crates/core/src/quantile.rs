//! Conditional quantiles by bisection on the mixture CDF.

use crate::density::ConditionalGaussianMixture;
use crate::error::{Error, Result};

/// Root bracket used when none is given (standardized outcome units).
pub const DEFAULT_BRACKET: (f64, f64) = (-10.0, 10.0);
/// How many times the bracket may double before giving up.
pub const MAX_DOUBLINGS: usize = 3;
pub const DEFAULT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct QuantileRequest<'a> {
    pub upsilon: f64,
    pub mixture: &'a ConditionalGaussianMixture,
    pub bracket: (f64, f64),
}

impl<'a> QuantileRequest<'a> {
    pub fn new(upsilon: f64, mixture: &'a ConditionalGaussianMixture) -> Self {
        Self { upsilon, mixture, bracket: DEFAULT_BRACKET }
    }

    pub fn with_bracket(mut self, lo: f64, hi: f64) -> Self {
        self.bracket = (lo, hi);
        self
    }

    /// Bracket spanning ten component standard deviations around the
    /// component means, for mixtures on an arbitrary scale.
    pub fn scaled(upsilon: f64, mixture: &'a ConditionalGaussianMixture) -> Self {
        let (lo, hi, sd) = mixture.support_hint();
        Self::new(upsilon, mixture).with_bracket(lo - 10.0 * sd, hi + 10.0 * sd)
    }
}

/// q with |F(q) − υ| ≤ tol, found by bisection. The bracket is doubled
/// about its centre up to [`MAX_DOUBLINGS`] times if it does not contain υ.
pub fn conditional_quantile(req: &QuantileRequest, tol: f64) -> Result<f64> {
    let u = req.upsilon;
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::InvalidParameter(format!("quantile order must lie in (0, 1), got {u}")));
    }
    let (mut lo, mut hi) = req.bracket;
    if !(lo < hi) {
        return Err(Error::InvalidParameter(format!("empty bracket [{lo}, {hi}]")));
    }
    let f = |v: f64| req.mixture.cdf(v);
    let mut doublings = 0;
    while !(f(lo) <= u && u <= f(hi)) {
        if doublings == MAX_DOUBLINGS {
            return Err(Error::UnbracketedRoot { upsilon: u, lo, hi });
        }
        let (c, half) = (0.5 * (lo + hi), hi - lo);
        lo = c - half;
        hi = c + half;
        doublings += 1;
    }
    loop {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if (fm - u).abs() <= tol || mid <= lo || mid >= hi {
            return Ok(mid);
        }
        if fm < u {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}
