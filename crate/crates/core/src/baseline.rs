//! The earlier, non-sharp bound method: a scan over threshold indicators κ
//! of the ratio E[κ(Y−η)] / ((Γ²−1)^{-1} + E[κ]), with the expectation
//! taken by Monte Carlo against the fitted outcome mixture, and APO bounds
//! obtained by averaging CAPO bounds over the observed covariates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{ConditionalDensity, ConditionalGaussianMixture};
use crate::error::{Error, Result};
use crate::model::{Dataset, Sensitivity};
use crate::rng::{derive_seed, stream};

const TAG_BASELINE: u64 = 0xba5e;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub mc_samples: usize,
    /// Number of thresholds scanned per side; `None` scans every drawn
    /// order statistic.
    pub kappa_grid_size: Option<usize>,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { mc_samples: 500, kappa_grid_size: None, seed: 0 }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_samples < 2 {
            return Err(Error::InvalidConfig(format!("mc_samples must be at least 2, got {}", self.mc_samples)));
        }
        if self.kappa_grid_size == Some(0) {
            return Err(Error::InvalidConfig("kappa_grid_size must be positive".into()));
        }
        Ok(())
    }

    fn stride(&self) -> usize {
        match self.kappa_grid_size {
            Some(g) => self.mc_samples.div_ceil(g).max(1),
            None => 1,
        }
    }
}

fn guard(sens: &Sensitivity) -> Result<f64> {
    let g = sens.big_gamma();
    if g <= 1.0 {
        return Err(Error::BaselineGammaGuard(g));
    }
    Ok(1.0 / (g * g - 1.0))
}

/// Bounds from an ascending sample of outcomes around `eta`. Candidates
/// are κ ≡ 0 and the indicators of every prefix and suffix of the sorted
/// sample whose length is a multiple of `stride` (the full sample always
/// included).
pub fn bounds_from_sorted(sorted: &[f64], eta: f64, sens: &Sensitivity, stride: usize) -> Result<(f64, f64)> {
    let c = guard(sens)?;
    let m = sorted.len();
    if m == 0 {
        return Err(Error::InvalidInput("baseline needs at least one outcome draw".into()));
    }
    let mf = m as f64;
    let (mut best_lo, mut best_hi) = (0.0f64, 0.0f64);
    let mut scan = |iter: &mut dyn Iterator<Item = &f64>| {
        let mut num = 0.0;
        for (k, y) in iter.enumerate() {
            num += y - eta;
            let len = k + 1;
            if len % stride == 0 || len == m {
                let r = (num / mf) / (c + len as f64 / mf);
                best_lo = best_lo.min(r);
                best_hi = best_hi.max(r);
            }
        }
    };
    scan(&mut sorted.iter());
    scan(&mut sorted.iter().rev());
    Ok((eta + best_lo, eta + best_hi))
}

/// Stream key for the draws at one covariate row and treatment value, so
/// identical rows reuse identical draws.
fn row_key(seed: u64, x: &[f64], tau: f64) -> u64 {
    let mut k = derive_seed(seed, TAG_BASELINE, tau.to_bits());
    for v in x {
        k = derive_seed(k, v.to_bits(), 0);
    }
    k
}

/// Baseline bounds at one row for several Γ values, reusing one sorted
/// batch of draws from `mixture`, centred at the mixture mean.
pub fn capo_bounds_multi(
    mixture: &ConditionalGaussianMixture,
    key: u64,
    sens: &[Sensitivity],
    cfg: &BaselineConfig,
) -> Result<Vec<(f64, f64)>> {
    cfg.validate()?;
    let mut rng = stream(key, TAG_BASELINE, 0);
    let mut draws: Vec<f64> = (0..cfg.mc_samples).map(|_| mixture.sample(&mut rng)).collect();
    draws.sort_by(f64::total_cmp);
    let eta = mixture.mean();
    sens.iter().map(|s| bounds_from_sorted(&draws, eta, s, cfg.stride())).collect()
}

/// CAPO bounds at covariates `x` and treatment `tau`.
pub fn baseline_capo_bounds(
    model: &dyn ConditionalDensity,
    x: &[f64],
    tau: f64,
    sens: &Sensitivity,
    cfg: &BaselineConfig,
) -> Result<(f64, f64)> {
    guard(sens)?;
    let mix = model.query(x, Some(tau));
    Ok(capo_bounds_multi(&mix, row_key(cfg.seed, x, tau), std::slice::from_ref(sens), cfg)?[0])
}

/// APO bounds for several Γ values: CAPO bounds averaged over every row.
pub fn baseline_apo_bounds_multi(
    model: &dyn ConditionalDensity,
    data: &Dataset,
    tau: f64,
    sens: &[Sensitivity],
    cfg: &BaselineConfig,
) -> Result<Vec<(f64, f64)>> {
    apo_over_rows(model, data.x(), data.p(), tau, sens, cfg)
}

/// APO bounds averaged over covariate rows given row-major with width `p`.
pub fn apo_over_rows(
    model: &dyn ConditionalDensity,
    x: &[f64],
    p: usize,
    tau: f64,
    sens: &[Sensitivity],
    cfg: &BaselineConfig,
) -> Result<Vec<(f64, f64)>> {
    for s in sens {
        guard(s)?;
    }
    if p == 0 || !x.len().is_multiple_of(p) {
        return Err(Error::InvalidInput("covariate rows do not match their width".into()));
    }
    let mixtures: Vec<_> = x.chunks(p).map(|r| model.query(r, Some(tau))).collect();
    apo_from_mixtures(&mixtures, x, p, tau, sens, cfg)
}

/// Same as [`baseline_apo_bounds_multi`] with the mixtures at (X_i, τ)
/// already evaluated.
pub fn apo_from_mixtures(
    mixtures: &[ConditionalGaussianMixture],
    x: &[f64],
    p: usize,
    tau: f64,
    sens: &[Sensitivity],
    cfg: &BaselineConfig,
) -> Result<Vec<(f64, f64)>> {
    let n = mixtures.len();
    if n == 0 || x.len() != n * p {
        return Err(Error::InvalidInput("baseline needs one mixture per covariate row".into()));
    }
    let rows: Vec<Vec<(f64, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| capo_bounds_multi(&mixtures[i], row_key(cfg.seed, &x[i * p..(i + 1) * p], tau), sens, cfg))
        .collect::<Result<_>>()?;
    let n = n as f64;
    Ok((0..sens.len())
        .map(|k| {
            let (lo, hi) = rows.iter().fold((0.0, 0.0), |acc, r| (acc.0 + r[k].0, acc.1 + r[k].1));
            (lo / n, hi / n)
        })
        .collect())
}

pub fn baseline_apo_bounds(
    model: &dyn ConditionalDensity,
    data: &Dataset,
    tau: f64,
    sens: &Sensitivity,
    cfg: &BaselineConfig,
) -> Result<(f64, f64)> {
    Ok(baseline_apo_bounds_multi(model, data, tau, std::slice::from_ref(sens), cfg)?[0])
}
