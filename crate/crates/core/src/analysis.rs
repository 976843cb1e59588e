//! End-to-end sensitivity analysis: cross-fitted nuisances, per-cell
//! bandwidth selection, point-estimate intervals and percentile bootstrap
//! intervals over a (τ, Γ) grid, optionally alongside the baseline method
//! and the doubly robust bounds.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{apo_from_mixtures, BaselineConfig};
use crate::bootstrap::{gather_draws, select_bandwidth, BootstrapConfig, BootstrapDraws, BoundSettings, Resampler, WithReplacement};
use crate::density::{fine_tune, ConditionalDensity, Target};
use crate::error::{Error, Result};
use crate::estimators::{apo_point, bounds_from_weights, dr_bounds_sample, inverse_density_weights, BoundPair, DrInputs, EstimatorKind};
use crate::model::{tau_grid, BoundResult, Dataset, GpsTrimmer, KernelSpec, NuisanceTable, Sensitivity, Standardizer};
use crate::nuisance::{assert_disjoint, fit_model, quantile_pair, refit_model, Backend, CrossFit, FittedModel, Predictions};
use crate::rng::derive_seed;

const TAG_CROSSFIT: u64 = 0xc0f;
const TAG_BANDWIDTH: u64 = 0xb0b;
const TAG_CI: u64 = 0xc1;
const TAG_REFIT: u64 = 0x4ef;
const TAG_BASELINE: u64 = 0xba5;
const TAG_TUNE: u64 = 0x70e;
const TAG_DR: u64 = 0xd4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub trials: usize,
    pub splits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    /// Query treatments in data units; when empty, `tau_count` points
    /// spanning the 5%..95% treatment quantiles are used.
    pub taus: Vec<f64>,
    pub tau_count: usize,
    pub gammas: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
    pub settings: BoundSettings,
    pub bootstrap: BootstrapConfig,
    pub baseline: Option<BaselineConfig>,
    pub doubly_robust: bool,
    /// Select bandwidths once per Γ at the central τ and reuse them.
    pub shared_bandwidth: bool,
    /// Reselect bandwidths inside every bootstrap resample.
    pub rebandwidth: bool,
    pub trim: bool,
    pub standardize: bool,
    pub backend: Backend,
    pub fine_tune: Option<FineTuneConfig>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            taus: vec![],
            tau_count: 15,
            gammas: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            folds: 2,
            seed: 0,
            settings: BoundSettings::default(),
            bootstrap: BootstrapConfig::default(),
            baseline: None,
            doubly_robust: false,
            shared_bandwidth: false,
            rebandwidth: false,
            trim: true,
            standardize: true,
            backend: Backend::default(),
            fine_tune: None,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::InvalidConfig(format!("folds must be at least 2, got {}", self.folds)));
        }
        if self.gammas.is_empty() {
            return Err(Error::InvalidConfig("gamma list is empty".into()));
        }
        if let Some(g) = self.gammas.iter().find(|&&g| !(g >= 1.0 && g.is_finite())) {
            return Err(Error::InvalidConfig(format!("every gamma must be >= 1, got {g}")));
        }
        if self.taus.is_empty() && self.tau_count == 0 {
            return Err(Error::InvalidConfig("need tau values or a positive tau count".into()));
        }
        if self.taus.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidConfig("tau values must be finite".into()));
        }
        if let Some(b) = &self.baseline {
            b.validate()?;
        }
        if let Some(f) = &self.fine_tune {
            if f.trials == 0 || f.splits == 0 {
                return Err(Error::InvalidConfig("fine-tuning needs trials >= 1 and splits >= 1".into()));
            }
        }
        self.bootstrap.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sharp,
    SharpDr,
    Baseline,
}

/// One (τ, Γ, method) row of the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub tau: f64,
    pub gamma: f64,
    pub point: f64,
    pub pei_lo: f64,
    pub pei_hi: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Zero for methods without a bandwidth.
    pub h_minus: f64,
    pub h_plus: f64,
    pub method: Method,
    pub seconds: f64,
    pub alpha: f64,
    pub b: usize,
    pub skipped: usize,
    pub swapped: bool,
}

impl ResultRecord {
    pub fn bound(&self) -> BoundResult {
        BoundResult {
            tau: self.tau,
            gamma: self.gamma,
            point: self.point,
            pei_lo: self.pei_lo,
            pei_hi: self.pei_hi,
            ci_lo: self.ci_lo,
            ci_hi: self.ci_hi,
            h_minus: self.h_minus,
            h_plus: self.h_plus,
            alpha: self.alpha,
            b: self.b,
        }
    }
}

/// Wall time per phase in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub fit: f64,
    pub bandwidth: f64,
    pub bounds: f64,
    pub refit: f64,
    pub bootstrap: f64,
    pub baseline_bounds: f64,
    pub baseline_bootstrap: f64,
    pub total: f64,
}

impl PhaseTimes {
    pub fn sum_of_phases(&self) -> f64 {
        self.fit + self.bandwidth + self.bounds + self.refit + self.bootstrap + self.baseline_bounds + self.baseline_bootstrap
    }

    /// Time attributable to the sharp method, shared nuisance work included.
    pub fn sharp_total(&self) -> f64 {
        self.fit + self.refit + self.bandwidth + self.bounds + self.bootstrap
    }

    /// Time attributable to the baseline, shared nuisance work included.
    pub fn baseline_total(&self) -> f64 {
        self.fit + self.refit + self.baseline_bounds + self.baseline_bootstrap
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub records: Vec<ResultRecord>,
    pub phases: PhaseTimes,
    pub warnings: Vec<String>,
}

/// Everything fixed on the full sample and reused by the resamples.
struct FullSample {
    data: Dataset,
    taus: Vec<f64>,
    sens: Vec<Sensitivity>,
    pred: Predictions,
    gps: Vec<f64>,
    trimmer: Option<GpsTrimmer>,
    quantiles: Vec<(Vec<f64>, Vec<f64>)>,
    dr: Option<DrFit>,
}

impl FullSample {
    fn cells(&self) -> usize {
        self.taus.len() * self.sens.len()
    }

    /// (τ index, Γ index) of a cell; cells are τ-major.
    fn cell(&self, c: usize) -> (usize, usize) {
        (c / self.sens.len(), c % self.sens.len())
    }

    fn trim(&self, gps: &[f64]) -> Vec<f64> {
        match &self.trimmer {
            Some(t) => t.apply(gps),
            None => gps.to_vec(),
        }
    }

    fn table(&self, a: usize, g: usize) -> NuisanceTable {
        NuisanceTable {
            gps: self.gps.clone(),
            eta_at_obs: self.pred.eta_obs.clone(),
            q_lo: self.quantiles[g].0.clone(),
            q_hi: self.quantiles[g].1.clone(),
            eta_at_tau: self.pred.eta_tau[a].clone(),
        }
    }
}

/// Cross-fitted regressions of the bound pseudo-outcomes Y·Γ^{±sign(Y−q)}.
struct DrFit {
    per_gamma: Vec<BoundRegressions>,
}

/// (θ⁻ at obs, θ⁺ at obs, θ⁻ at each τ, θ⁺ at each τ) for one Γ.
type BoundRegressions = (Vec<f64>, Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>);

impl DrFit {
    #[allow(clippy::too_many_arguments)]
    fn fit(
        cf: &CrossFit,
        backend: &Backend,
        scaler: &Arc<Standardizer>,
        data: &Dataset,
        taus: &[f64],
        sens: &[Sensitivity],
        quantiles: &[(Vec<f64>, Vec<f64>)],
        seed: u64,
    ) -> Result<Self> {
        let n = data.n();
        let mut per_gamma = Vec::with_capacity(sens.len());
        for (g, s) in sens.iter().enumerate() {
            let (q_lo, q_hi) = &quantiles[g];
            let mut lo_obs = vec![0.0; n];
            let mut hi_obs = vec![0.0; n];
            let mut lo_tau = vec![vec![0.0; n]; taus.len()];
            let mut hi_tau = vec![vec![0.0; n]; taus.len()];
            for k in 0..cf.folds {
                let train = cf.train_rows(k);
                let rows = cf.predict_rows(k);
                assert_disjoint(train, &rows, n);
                let sub = data.subset(&rows);
                let put = |f: &dyn Fn(&[f64], f64) -> f64, obs: &mut Vec<f64>, at: &mut Vec<Vec<f64>>| {
                    for (j, &i) in rows.iter().enumerate() {
                        obs[i] = f(sub.x_row(j), sub.t()[j]);
                        for (a, &tau) in taus.iter().enumerate() {
                            at[a][i] = f(sub.x_row(j), tau);
                        }
                    }
                };
                if let Backend::Oracle { .. } = backend {
                    let FittedModel::Oracle(view) = &cf.outcome[k] else { unreachable!() };
                    put(&|x, t| view.capo_bounds(x, t, s).0, &mut lo_obs, &mut lo_tau);
                    put(&|x, t| view.capo_bounds(x, t, s).1, &mut hi_obs, &mut hi_tau);
                    continue;
                }
                let y = data.y();
                let pseudo_lo: Vec<f64> = train.iter().map(|&i| y[i] * s.lower_weight(y[i], q_lo[i])).collect();
                let pseudo_hi: Vec<f64> = train.iter().map(|&i| y[i] * s.upper_weight(y[i], q_hi[i])).collect();
                let base = data.subset(train);
                let fit = |pseudo: Vec<f64>, tag: u64| -> Result<FittedModel> {
                    let d = Dataset::new(base.x().to_vec(), base.p(), base.t().to_vec(), pseudo)?;
                    fit_model(backend, scaler, &d, Target::Outcome, derive_seed(seed, TAG_DR, tag))
                };
                let tag = ((g * cf.folds + k) * 2) as u64;
                let m_lo = fit(pseudo_lo, tag)?;
                let m_hi = fit(pseudo_hi, tag + 1)?;
                put(&|x, t| m_lo.query(x, Some(t)).mean(), &mut lo_obs, &mut lo_tau);
                put(&|x, t| m_hi.query(x, Some(t)).mean(), &mut hi_obs, &mut hi_tau);
            }
            per_gamma.push((lo_obs, hi_obs, lo_tau, hi_tau));
        }
        Ok(Self { per_gamma })
    }

    fn inputs(&self, a: usize, g: usize, gps: Vec<f64>, q: &(Vec<f64>, Vec<f64>), idx: Option<&[usize]>) -> DrInputs {
        let (lo_obs, hi_obs, lo_tau, hi_tau) = &self.per_gamma[g];
        let pick = |v: &[f64]| match idx {
            Some(idx) => idx.iter().map(|&i| v[i]).collect(),
            None => v.to_vec(),
        };
        DrInputs {
            gps,
            q_lo: pick(&q.0),
            q_hi: pick(&q.1),
            theta_lo_at_obs: pick(lo_obs),
            theta_hi_at_obs: pick(hi_obs),
            theta_lo_at_tau: pick(&lo_tau[a]),
            theta_hi_at_tau: pick(&hi_tau[a]),
        }
    }
}

/// Lower bound at h⁻ and upper bound at h⁺, each from its own weights.
fn split_bounds(
    data_y: &[f64],
    t: &[f64],
    nuis: &NuisanceTable,
    tau: f64,
    sens: &Sensitivity,
    st: BoundSettings,
    h: (f64, f64),
) -> Result<BoundPair> {
    let at = |bw: f64| -> Result<BoundPair> {
        let k = KernelSpec::new(st.kernel, bw)?;
        let w = inverse_density_weights(t, &nuis.gps, &k, tau);
        bounds_from_weights(data_y, nuis, &w, tau, sens, st.form, st.stabilized)
    };
    let lo = at(h.0)?;
    let hi = if h.1 == h.0 { lo } else { at(h.1)? };
    let swapped = lo.lo > hi.hi;
    Ok(if swapped {
        BoundPair { lo: hi.hi, hi: lo.lo, swapped }
    } else {
        BoundPair { lo: lo.lo, hi: hi.hi, swapped: lo.swapped || hi.swapped }
    })
}

/// Per-resample refit output.
struct Resample {
    idx: Vec<usize>,
    data: Dataset,
    gps: Vec<f64>,
    pred: Predictions,
}

fn refit_resample(
    full: &FullSample,
    cf: &CrossFit,
    cfg: &AnalysisConfig,
    resampler: &dyn Resampler,
    b: usize,
    attempt: usize,
) -> Result<Resample> {
    let n = full.data.n();
    let idx = resampler.indices(n, b, attempt);
    let data = full.data.subset(&idx);
    let mut outcome = Vec::with_capacity(cf.folds);
    let mut gps_models = Vec::with_capacity(cf.folds);
    let mut groups = Vec::with_capacity(cf.folds);
    for k in 0..cf.folds {
        let train_pos: Vec<usize> = (0..n).filter(|&j| cf.fold_of[idx[j]] != k).collect();
        let pred_pos: Vec<usize> = (0..n).filter(|&j| cf.fold_of[idx[j]] == k).collect();
        let orig = |pos: &[usize]| pos.iter().map(|&j| idx[j]).collect::<Vec<_>>();
        assert_disjoint(&orig(&train_pos), &orig(&pred_pos), n);
        if train_pos.len() < 2 {
            return Err(Error::InvalidInput(format!("resample {b} leaves fold {k} without training rows")));
        }
        let train = data.subset(&train_pos);
        let seed = derive_seed(cfg.seed, TAG_REFIT, ((b as u64) << 16) | ((attempt as u64) << 8) | k as u64);
        let cap = cfg.bootstrap.refit_epochs_cap;
        outcome.push(refit_model(&cf.outcome[k], &train, Target::Outcome, cap, seed)?);
        gps_models.push(refit_model(&cf.gps[k], &train, Target::Treatment, cap, seed ^ 1)?);
        groups.push(pred_pos);
    }
    let pred = Predictions::from_groups(&data, &groups, &outcome, &gps_models, &full.taus, cfg.baseline.is_some());
    if pred.gps.iter().any(|g| !(g.is_finite() && *g > 0.0)) || pred.eta_obs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("resample {b} produced non-finite nuisances")));
    }
    let gps = full.trim(&pred.gps);
    Ok(Resample { idx, data, gps, pred })
}

fn select_cell(full: &FullSample, cfg: &AnalysisConfig, bw: &BootstrapConfig, a: usize, g: usize) -> Result<(f64, f64)> {
    let c = select_bandwidth(&full.data, &full.table(a, g), full.taus[a], &full.sens[g], cfg.settings, bw)?;
    Ok((c.h_minus, c.h_plus))
}

fn sharp_draws(full: &FullSample, cfg: &AnalysisConfig, bandwidths: &[(f64, f64)], r: &Resample, b: usize) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(full.cells() * 2);
    for c in 0..full.cells() {
        let (a, g) = full.cell(c);
        let nuis = NuisanceTable {
            gps: r.gps.clone(),
            eta_at_obs: r.pred.eta_obs.clone(),
            q_lo: r.idx.iter().map(|&i| full.quantiles[g].0[i]).collect(),
            q_hi: r.idx.iter().map(|&i| full.quantiles[g].1[i]).collect(),
            eta_at_tau: r.pred.eta_tau[a].clone(),
        };
        let h = if cfg.rebandwidth {
            let bw = BootstrapConfig { seed: derive_seed(cfg.seed, TAG_BANDWIDTH, 1 + b as u64), ..cfg.bootstrap.clone() };
            let ch = select_bandwidth(&r.data, &nuis, full.taus[a], &full.sens[g], cfg.settings, &bw)?;
            (ch.h_minus, ch.h_plus)
        } else {
            bandwidths[c]
        };
        let p = split_bounds(r.data.y(), r.data.t(), &nuis, full.taus[a], &full.sens[g], cfg.settings, h)?;
        out.push((p.lo, p.hi));
    }
    if let Some(dr) = &full.dr {
        for c in 0..full.cells() {
            let (a, g) = full.cell(c);
            let h = bandwidths[c];
            let kernel = KernelSpec::new(cfg.settings.kernel, 0.5 * (h.0 + h.1))?;
            let inp = dr.inputs(a, g, r.gps.clone(), &full.quantiles[g], Some(&r.idx));
            let p = dr_bounds_sample(&r.data, &kernel, full.taus[a], &full.sens[g], &inp)?;
            out.push((p.lo, p.hi));
        }
    }
    Ok(out)
}

/// Baseline APO bounds for every cell; Γ = 1 cells report the plug-in
/// mean η̃(τ), the limit of the baseline as Γ → 1.
fn baseline_cells(
    full: &FullSample,
    data: &Dataset,
    mix_tau: &[Vec<crate::density::ConditionalGaussianMixture>],
    eta_tau: &[Vec<f64>],
    cfg: &BaselineConfig,
) -> Result<Vec<(f64, f64)>> {
    let active: Vec<usize> = (0..full.sens.len()).filter(|&g| full.sens[g].big_gamma() > 1.0).collect();
    let sens: Vec<Sensitivity> = active.iter().map(|&g| full.sens[g]).collect();
    let mut out = vec![(0.0, 0.0); full.cells()];
    for a in 0..full.taus.len() {
        let eta = eta_tau[a].iter().sum::<f64>() / data.n() as f64;
        let vals = if sens.is_empty() { vec![] } else { apo_from_mixtures(&mix_tau[a], data.x(), data.p(), full.taus[a], &sens, cfg)? };
        for g in 0..full.sens.len() {
            out[a * full.sens.len() + g] = match active.iter().position(|&x| x == g) {
                Some(j) => vals[j],
                None => (eta, eta),
            };
        }
    }
    Ok(out)
}

fn elapsed(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Runs the full analysis on `data` (in data units).
pub fn run_analysis(data: &Dataset, cfg: &AnalysisConfig) -> Result<AnalysisReport> {
    let start = Instant::now();
    cfg.validate()?;
    let mut phases = PhaseTimes::default();
    let mut warnings = Vec::new();
    let scaler = Arc::new(if cfg.standardize { Standardizer::fit(data) } else { Standardizer::identity(data.p()) });
    let ds = scaler.apply(data);
    let taus_raw = if cfg.taus.is_empty() { tau_grid(data.t(), cfg.tau_count)? } else { cfg.taus.clone() };
    let taus: Vec<f64> = taus_raw.iter().map(|&t| scaler.t.forward(t)).collect();
    let sens: Vec<Sensitivity> = cfg.gammas.iter().map(|&g| Sensitivity::from_big_gamma(g)).collect::<Result<_>>()?;

    // nuisances
    let t_fit = Instant::now();
    let backend = match (&cfg.backend, &cfg.fine_tune) {
        (Backend::Mdn { outcome, gps }, Some(ft)) => {
            let seed = derive_seed(cfg.seed, TAG_TUNE, 0);
            Backend::Mdn {
                outcome: fine_tune(&ds, Target::Outcome, outcome, ft.trials, ft.splits, seed)?,
                gps: fine_tune(&ds, Target::Treatment, gps, ft.trials, ft.splits, seed ^ 1)?,
            }
        }
        (b, _) => b.clone(),
    };
    let cf = CrossFit::fit(&ds, &backend, &scaler, cfg.folds, derive_seed(cfg.seed, TAG_CROSSFIT, 0))?;
    let pred = cf.predict(&ds, &taus, cfg.baseline.is_some());
    if let Some(i) = pred.gps.iter().position(|g| !(g.is_finite() && *g > 0.0)) {
        return Err(Error::Numeric(format!("fitted GPS is not positive at row {i}")));
    }
    let trimmer = if cfg.trim { Some(GpsTrimmer::from_reference(&pred.gps)?) } else { None };
    let quantiles: Vec<(Vec<f64>, Vec<f64>)> = sens.iter().map(|s| quantile_pair(&pred.outcome_obs, s)).collect::<Result<_>>()?;
    let dr = if cfg.doubly_robust { Some(DrFit::fit(&cf, &backend, &scaler, &ds, &taus, &sens, &quantiles, cfg.seed)?) } else { None };
    let mut full = FullSample { data: ds, taus, sens, gps: vec![], pred, trimmer, quantiles, dr };
    full.gps = full.trim(&full.pred.gps);
    phases.fit = elapsed(t_fit);

    // bandwidths
    let t_bw = Instant::now();
    let bw = BootstrapConfig { seed: derive_seed(cfg.seed, TAG_BANDWIDTH, 0), ..cfg.bootstrap.clone() };
    let n_cells = full.cells();
    let timed_bw: Vec<((f64, f64), f64)> = if cfg.shared_bandwidth {
        let mid = full.taus.len() / 2;
        let per_gamma: Vec<((f64, f64), f64)> = (0..full.sens.len())
            .into_par_iter()
            .map(|g| {
                let t = Instant::now();
                select_cell(&full, cfg, &bw, mid, g).map(|h| (h, elapsed(t)))
            })
            .collect::<Result<_>>()?;
        (0..n_cells)
            .map(|c| {
                let (h, s) = per_gamma[full.cell(c).1];
                (h, s / full.taus.len() as f64)
            })
            .collect()
    } else {
        (0..n_cells)
            .into_par_iter()
            .map(|c| {
                let t = Instant::now();
                let (a, g) = full.cell(c);
                select_cell(&full, cfg, &bw, a, g).map(|h| (h, elapsed(t)))
            })
            .collect::<Result<_>>()?
    };
    let bandwidths: Vec<(f64, f64)> = timed_bw.iter().map(|x| x.0).collect();
    phases.bandwidth = elapsed(t_bw);

    // point-estimate intervals
    let t_bounds = Instant::now();
    let kind = if cfg.settings.stabilized { EstimatorKind::StabAugmented } else { EstimatorKind::PlainDr };
    let pei: Vec<(BoundPair, f64, Option<BoundPair>, f64)> = (0..n_cells)
        .into_par_iter()
        .map(|c| {
            let t = Instant::now();
            let (a, g) = full.cell(c);
            let nuis = full.table(a, g);
            let h = bandwidths[c];
            let pair = split_bounds(full.data.y(), full.data.t(), &nuis, full.taus[a], &full.sens[g], cfg.settings, h)?;
            let mid = KernelSpec::new(cfg.settings.kernel, 0.5 * (h.0 + h.1))?;
            let point = apo_point(&full.data, &nuis, &mid, full.taus[a], kind)?.value;
            let dr = match &full.dr {
                Some(dr) => {
                    let inp = dr.inputs(a, g, full.gps.clone(), &full.quantiles[g], None);
                    Some(dr_bounds_sample(&full.data, &mid, full.taus[a], &full.sens[g], &inp)?)
                }
                None => None,
            };
            Ok((pair, point, dr, elapsed(t)))
        })
        .collect::<Result<_>>()?;
    phases.bounds = elapsed(t_bounds);

    // bootstrap refits
    let t_refit = Instant::now();
    let resampler = WithReplacement { seed: derive_seed(cfg.seed, TAG_CI, 0), tag: TAG_CI };
    let resamples: Vec<Option<Resample>> = (0..cfg.bootstrap.b)
        .into_par_iter()
        .map(|b| (0..2).find_map(|attempt| refit_resample(&full, &cf, cfg, &resampler, b, attempt).ok()))
        .collect();
    phases.refit = elapsed(t_refit);

    let t_boot = Instant::now();
    let sharp_cells = n_cells * if full.dr.is_some() { 2 } else { 1 };
    let draws: BootstrapDraws = gather_draws(
        resamples.par_iter().enumerate().map(|(b, r)| r.as_ref().and_then(|r| sharp_draws(&full, cfg, &bandwidths, r, b).ok())).collect(),
        sharp_cells,
    )?;
    phases.bootstrap = elapsed(t_boot);
    if !draws.skipped.is_empty() {
        warnings.push(format!("skipped {} of {} bootstrap resamples: {:?}", draws.skipped.len(), draws.b, draws.skipped));
    }

    // baseline
    let mut baseline = None;
    if let Some(bcfg) = &cfg.baseline {
        let t = Instant::now();
        let full_cfg = BaselineConfig { seed: derive_seed(cfg.seed, TAG_BASELINE, 0), ..*bcfg };
        let mix = full.pred.mix_tau.as_ref().expect("mixtures kept for the baseline");
        let pei_b = baseline_cells(&full, &full.data, mix, &full.pred.eta_tau, &full_cfg)?;
        phases.baseline_bounds = elapsed(t);
        let t = Instant::now();
        let draws_b = gather_draws(
            resamples
                .par_iter()
                .enumerate()
                .map(|(b, r)| {
                    r.as_ref().and_then(|r| {
                        let c = BaselineConfig { seed: derive_seed(cfg.seed, TAG_BASELINE, 1 + b as u64), ..*bcfg };
                        baseline_cells(&full, &r.data, r.pred.mix_tau.as_ref()?, &r.pred.eta_tau, &c).ok()
                    })
                })
                .collect(),
            n_cells,
        )?;
        phases.baseline_bootstrap = elapsed(t);
        baseline = Some((pei_b, draws_b));
    }

    // records in data units
    let y = scaler.y;
    let hs = scaler.t.sd;
    let alpha = cfg.bootstrap.alpha;
    let boot_share = (phases.refit + phases.bootstrap) / n_cells as f64;
    let mut records = Vec::with_capacity(n_cells * 3);
    for c in 0..n_cells {
        let (a, g) = full.cell(c);
        let (pair, point, dr, secs) = &pei[c];
        let (h_lo, h_hi) = bandwidths[c];
        let (ci_lo, ci_hi) = draws.interval(c, alpha)?;
        let record = |method, point: f64, pei: (f64, f64), ci: (f64, f64), h: (f64, f64), seconds, skipped, swapped| ResultRecord {
            tau: taus_raw[a],
            gamma: cfg.gammas[g],
            point: y.inverse(point),
            pei_lo: y.inverse(pei.0),
            pei_hi: y.inverse(pei.1),
            ci_lo: y.inverse(ci.0),
            ci_hi: y.inverse(ci.1),
            h_minus: h.0 * hs,
            h_plus: h.1 * hs,
            method,
            seconds,
            alpha,
            b: cfg.bootstrap.b,
            skipped,
            swapped,
        };
        if pair.swapped {
            warnings.push(format!("sharp bounds swapped at tau = {}, gamma = {}", taus_raw[a], cfg.gammas[g]));
        }
        records.push(record(
            Method::Sharp,
            *point,
            (pair.lo, pair.hi),
            (ci_lo, ci_hi),
            (h_lo, h_hi),
            timed_bw[c].1 + secs + boot_share,
            draws.skipped.len(),
            pair.swapped,
        ));
        if let Some(d) = dr {
            let ci = draws.interval(n_cells + c, alpha)?;
            let h = 0.5 * (h_lo + h_hi);
            records.push(record(Method::SharpDr, *point, (d.lo, d.hi), ci, (h, h), *secs, draws.skipped.len(), d.swapped));
        }
        if let Some((pei_b, draws_b)) = &baseline {
            let ci = draws_b.interval(c, alpha)?;
            let eta = full.pred.eta_tau[a].iter().sum::<f64>() / full.data.n() as f64;
            let secs = (phases.baseline_bounds + phases.baseline_bootstrap) / n_cells as f64 + boot_share;
            records.push(record(Method::Baseline, eta, pei_b[c], ci, (0.0, 0.0), secs, draws_b.skipped.len(), false));
        }
    }
    phases.total = elapsed(start);
    Ok(AnalysisReport { records, phases, warnings })
}

/// Wall time of both methods at one τ-count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkEntry {
    pub method: Method,
    pub m: usize,
    pub seconds: f64,
    pub phases: PhaseTimes,
}

/// Runs the analysis with the baseline enabled for each τ-count in `ms`.
pub fn run_benchmark(data: &Dataset, base: &AnalysisConfig, ms: &[usize]) -> Result<Vec<BenchmarkEntry>> {
    let mut out = Vec::with_capacity(2 * ms.len());
    for &m in ms {
        let cfg = AnalysisConfig {
            taus: tau_grid(data.t(), m)?,
            baseline: Some(base.baseline.unwrap_or_default()),
            doubly_robust: false,
            ..base.clone()
        };
        let r = run_analysis(data, &cfg)?;
        out.push(BenchmarkEntry { method: Method::Sharp, m, seconds: r.phases.sharp_total(), phases: r.phases });
        out.push(BenchmarkEntry { method: Method::Baseline, m, seconds: r.phases.baseline_total(), phases: r.phases });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{generate, SimConfig};

    fn small(backend: Backend) -> (Dataset, AnalysisConfig) {
        let sim = SimConfig { n: 300, seed: 2, ..Default::default() };
        let data = generate(&sim).unwrap().dataset;
        let cfg = AnalysisConfig {
            taus: vec![0.0, 0.5],
            gammas: vec![1.0, 2.0],
            bootstrap: BootstrapConfig { b: 20, bandwidth_grid: vec![0.2, 0.5, 1.0], ..Default::default() },
            backend,
            seed: 5,
            ..Default::default()
        };
        (data, cfg)
    }

    #[test]
    fn gamma_one_collapses_to_point() {
        let (data, cfg) = small(Backend::LinearGaussian);
        let r = run_analysis(&data, &cfg).unwrap();
        for rec in r.records.iter().filter(|r| r.gamma == 1.0) {
            assert_eq!(rec.h_minus, rec.h_plus);
            assert!((rec.pei_lo - rec.point).abs() < 1e-12 && (rec.pei_hi - rec.point).abs() < 1e-12);
        }
        for pair in r.records.chunks(2) {
            assert!(pair[1].pei_lo <= pair[0].pei_lo + 1e-12 && pair[1].pei_hi >= pair[0].pei_hi - 1e-12);
        }
    }

    #[test]
    fn deterministic_and_complete() {
        let (data, mut cfg) = small(Backend::Oracle { config: SimConfig { n: 300, seed: 2, ..Default::default() } });
        cfg.baseline = Some(BaselineConfig { mc_samples: 50, ..Default::default() });
        cfg.doubly_robust = true;
        let a = run_analysis(&data, &cfg).unwrap();
        let b = run_analysis(&data, &cfg).unwrap();
        assert_eq!(a.records.len(), 2 * 2 * 3);
        let strip = |r: &AnalysisReport| r.records.iter().map(|x| ResultRecord { seconds: 0.0, ..x.clone() }).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        assert!(a.phases.sum_of_phases() <= a.phases.total * 1.05 + 1e-9);
    }

    #[test]
    fn mdn_backend_runs() {
        let tiny = crate::density::MdnConfig {
            extractor_hidden: [16, 16],
            head_hidden: [16, 16],
            components: 2,
            max_epochs: 15,
            ..Default::default()
        };
        let (data, mut cfg) = small(Backend::Mdn { outcome: tiny.clone(), gps: tiny });
        cfg.bootstrap.b = 4;
        cfg.bootstrap.refit_epochs_cap = 3;
        let r = run_analysis(&data, &cfg).unwrap();
        assert!(r.records.iter().all(|x| x.ci_lo.is_finite() && x.ci_hi.is_finite() && x.pei_lo <= x.pei_hi));
    }

    #[test]
    fn rejects_bad_config() {
        let (data, mut cfg) = small(Backend::LinearGaussian);
        cfg.gammas = vec![0.5];
        assert!(matches!(run_analysis(&data, &cfg), Err(Error::InvalidConfig(_))));
        cfg.gammas = vec![2.0];
        cfg.folds = 1;
        assert!(run_analysis(&data, &cfg).is_err());
    }
}
