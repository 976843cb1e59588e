//! Bandwidth selection by nonparametric bootstrap and percentile
//! confidence intervals for the bound pair.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{bounds_from_weights, inverse_density_weights, BoundForm, BoundPair};
use crate::model::{quantile_sorted, Dataset, KernelFamily, KernelSpec, NuisanceTable, Sensitivity};
use crate::rng::stream;

const TAG_BANDWIDTH: u64 = 0xb0a;
/// Share of failed resamples above which an interval is reported unreliable.
pub const MAX_SKIP_SHARE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub b: usize,
    pub alpha: f64,
    pub bandwidth_grid: Vec<f64>,
    pub seed: u64,
    /// Epoch cap for warm-started refits inside each resample.
    pub refit_epochs_cap: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { b: 100, alpha: 0.05, bandwidth_grid: default_grid(), seed: 0, refit_epochs_cap: 50 }
    }
}

/// 40 equally spaced bandwidths from 0.1 to 2.5.
pub fn default_grid() -> Vec<f64> {
    linspace(0.1, 2.5, 40)
}

pub fn linspace(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    match k {
        0 => vec![],
        1 => vec![lo],
        _ => (0..k).map(|i| if i == k - 1 { hi } else { lo + (hi - lo) * i as f64 / (k - 1) as f64 }).collect(),
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.b == 0 {
            return Err(Error::InvalidConfig("bootstrap needs B >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.bandwidth_grid.is_empty() {
            return Err(Error::InvalidConfig("bandwidth grid is empty".into()));
        }
        if self.bandwidth_grid.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::InvalidConfig("bandwidths must be positive and finite".into()));
        }
        if self.bandwidth_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("bandwidth grid must be strictly ascending".into()));
        }
        Ok(())
    }
}

/// Row indices of resample `b`.
pub trait Resampler: Sync {
    fn indices(&self, n: usize, b: usize, attempt: usize) -> Vec<usize>;
}

/// n draws with replacement from a per-resample stream.
#[derive(Debug, Clone, Copy)]
pub struct WithReplacement {
    pub seed: u64,
    pub tag: u64,
}

impl Resampler for WithReplacement {
    fn indices(&self, n: usize, b: usize, attempt: usize) -> Vec<usize> {
        let mut rng = stream(self.seed, self.tag, (b as u64) << 8 | attempt as u64);
        (0..n).map(|_| rng.random_range(0..n)).collect()
    }
}

/// Every resample is the original data in order.
#[derive(Debug, Clone, Copy)]
pub struct Identity;

impl Resampler for Identity {
    fn indices(&self, n: usize, _b: usize, _attempt: usize) -> Vec<usize> {
        (0..n).collect()
    }
}

/// Estimator settings shared by every bound evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundSettings {
    pub kernel: KernelFamily,
    pub form: BoundForm,
    pub stabilized: bool,
}

impl Default for BoundSettings {
    fn default() -> Self {
        Self { kernel: KernelFamily::default(), form: BoundForm::Sign, stabilized: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthChoice {
    pub h_minus: f64,
    pub h_plus: f64,
    /// Bootstrap MSE per grid point; infinite where an estimate failed.
    pub objective_minus: Vec<f64>,
    pub objective_plus: Vec<f64>,
}

fn estimate(y: &[f64], t: &[f64], nuis: &NuisanceTable, h: f64, tau: f64, sens: &Sensitivity, st: BoundSettings) -> Result<BoundPair> {
    let kernel = KernelSpec::new(st.kernel, h)?;
    let w = inverse_density_weights(t, &nuis.gps, &kernel, tau);
    bounds_from_weights(y, nuis, &w, tau, sens, st.form, st.stabilized)
}

fn argmin_first(obj: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in obj.iter().enumerate() {
        if v < obj[best] {
            best = i;
        }
    }
    best
}

/// Bandwidths minimizing the bootstrap MSE of each bound around its
/// full-sample value. Nuisances are looked up at the resampled rows, not
/// refit. Ties go to the smaller bandwidth.
pub fn select_bandwidth(
    data: &Dataset,
    nuis: &NuisanceTable,
    tau: f64,
    sens: &Sensitivity,
    settings: BoundSettings,
    cfg: &BootstrapConfig,
) -> Result<BandwidthChoice> {
    let resampler = WithReplacement { seed: cfg.seed, tag: TAG_BANDWIDTH };
    select_bandwidth_with(data, nuis, tau, sens, settings, cfg, &resampler)
}

pub fn select_bandwidth_with(
    data: &Dataset,
    nuis: &NuisanceTable,
    tau: f64,
    sens: &Sensitivity,
    settings: BoundSettings,
    cfg: &BootstrapConfig,
    resampler: &dyn Resampler,
) -> Result<BandwidthChoice> {
    cfg.validate()?;
    nuis.validate(data.n())?;
    let grid = &cfg.bandwidth_grid;
    let full: Vec<Option<BoundPair>> = grid.iter().map(|&h| estimate(data.y(), data.t(), nuis, h, tau, sens, settings).ok()).collect();
    let n = data.n();
    let per_resample: Vec<Vec<(f64, f64)>> = (0..cfg.b)
        .into_par_iter()
        .map(|b| {
            let idx = resampler.indices(n, b, 0);
            let y: Vec<f64> = idx.iter().map(|&i| data.y()[i]).collect();
            let t: Vec<f64> = idx.iter().map(|&i| data.t()[i]).collect();
            let sub = nuis.subset(&idx);
            grid.iter()
                .zip(&full)
                .map(|(&h, f)| match (f, estimate(&y, &t, &sub, h, tau, sens, settings)) {
                    (Some(f), Ok(e)) => ((e.lo - f.lo).powi(2), (e.hi - f.hi).powi(2)),
                    _ => (f64::INFINITY, f64::INFINITY),
                })
                .collect()
        })
        .collect();
    let mut obj_lo = vec![0.0; grid.len()];
    let mut obj_hi = vec![0.0; grid.len()];
    for row in &per_resample {
        for (k, &(a, b)) in row.iter().enumerate() {
            obj_lo[k] += a;
            obj_hi[k] += b;
        }
    }
    let bf = cfg.b as f64;
    obj_lo.iter_mut().chain(obj_hi.iter_mut()).for_each(|v| *v /= bf);
    if obj_lo.iter().all(|v| !v.is_finite()) || obj_hi.iter().all(|v| !v.is_finite()) {
        return Err(Error::EmptyNeighborhood { tau });
    }
    Ok(BandwidthChoice {
        h_minus: grid[argmin_first(&obj_lo)],
        h_plus: grid[argmin_first(&obj_hi)],
        objective_minus: obj_lo,
        objective_plus: obj_hi,
    })
}

/// (α/2 quantile of the lower draws, 1−α/2 quantile of the upper draws),
/// using linear interpolation between order statistics.
pub fn percentile_interval(lo_draws: &[f64], hi_draws: &[f64], alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if lo_draws.is_empty() || hi_draws.is_empty() {
        return Err(Error::InvalidInput("percentile interval needs at least one draw".into()));
    }
    let sorted = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        s
    };
    Ok((quantile_sorted(&sorted(lo_draws), alpha / 2.0), quantile_sorted(&sorted(hi_draws), 1.0 - alpha / 2.0)))
}

/// Bound draws collected over the resamples; one `(lo, hi)` list per
/// output cell, each in resample order.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapDraws {
    pub cells: Vec<Vec<(f64, f64)>>,
    pub skipped: Vec<usize>,
    pub b: usize,
}

impl BootstrapDraws {
    pub fn interval(&self, cell: usize, alpha: f64) -> Result<(f64, f64)> {
        let (lo, hi): (Vec<f64>, Vec<f64>) = self.cells[cell].iter().copied().unzip();
        percentile_interval(&lo, &hi, alpha)
    }
}

/// Runs `f(b, attempt)` for every resample in parallel. A failed resample
/// is retried once with `attempt = 1` and then skipped. Each success
/// returns one `(lo, hi)` per cell. More than 10% skipped is an error.
pub fn collect_draws<F>(b: usize, cells: usize, f: F) -> Result<BootstrapDraws>
where
    F: Fn(usize, usize) -> Result<Vec<(f64, f64)>> + Sync,
{
    let outcomes: Vec<Option<Vec<(f64, f64)>>> = (0..b)
        .into_par_iter()
        .map(|i| {
            (0..2).find_map(|attempt| match f(i, attempt) {
                Ok(v) if v.len() == cells && v.iter().all(|p| p.0.is_finite() && p.1.is_finite()) => Some(v),
                _ => None,
            })
        })
        .collect();
    gather_draws(outcomes, cells)
}

/// Aggregates per-resample results (`None` = skipped) in resample order.
pub fn gather_draws(outcomes: Vec<Option<Vec<(f64, f64)>>>, cells: usize) -> Result<BootstrapDraws> {
    let b = outcomes.len();
    let skipped: Vec<usize> = outcomes.iter().enumerate().filter(|(_, o)| o.is_none()).map(|(i, _)| i).collect();
    if skipped.len() as f64 > MAX_SKIP_SHARE * b as f64 || skipped.len() == b {
        return Err(Error::CiUnreliable { skipped: skipped.len(), total: b });
    }
    let mut per_cell = vec![Vec::with_capacity(b); cells];
    for v in outcomes.into_iter().flatten() {
        for (c, p) in v.into_iter().enumerate() {
            per_cell[c].push(p);
        }
    }
    Ok(BootstrapDraws { cells: per_cell, skipped, b })
}
