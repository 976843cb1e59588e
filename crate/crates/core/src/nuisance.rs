//! Nuisance backends, K-fold cross-fitting and the per-row predictions the
//! bound estimators consume.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::density::mdn::{fit_target, refit_target};
use crate::density::{ConditionalDensity, ConditionalGaussianMixture, LinearGaussian, Mdn, MdnConfig, Target};
use crate::error::{Error, Result};
use crate::model::{Dataset, Sensitivity, Standardizer};
use crate::quantile::{conditional_quantile, QuantileRequest, DEFAULT_TOL};
use crate::rng::{derive_seed, stream};
use crate::simulation::{SimConfig, SimOracle};

const TAG_FOLDS: u64 = 0xf01d;
const TAG_FIT: u64 = 0xf17;

/// How the outcome density and the GPS are obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Backend {
    Mdn {
        outcome: MdnConfig,
        gps: MdnConfig,
    },
    LinearGaussian,
    /// The known simulation law; fitting and refitting are no-ops.
    Oracle {
        config: SimConfig,
    },
}

impl Default for Backend {
    fn default() -> Self {
        Backend::Mdn { outcome: MdnConfig::default(), gps: MdnConfig::default() }
    }
}

/// The simulation oracle seen through a standardization map.
#[derive(Debug, Clone)]
pub struct OracleView {
    oracle: Arc<SimOracle>,
    scaler: Arc<Standardizer>,
    target: Target,
}

impl OracleView {
    fn raw_x(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.scaler.x).map(|(&v, a)| a.inverse(v)).collect()
    }

    /// Sharp CAPO bounds on the standardized outcome scale.
    pub fn capo_bounds(&self, x: &[f64], t: f64, sens: &Sensitivity) -> (f64, f64) {
        let (lo, hi) = self.oracle.capo_bounds(&self.raw_x(x), self.scaler.t.inverse(t), sens);
        (self.scaler.y.forward(lo), self.scaler.y.forward(hi))
    }
}

impl ConditionalDensity for OracleView {
    fn query(&self, x: &[f64], t: Option<f64>) -> ConditionalGaussianMixture {
        let raw = self.raw_x(x);
        let ((m, v), scale) = match self.target {
            Target::Outcome => {
                let t = self.scaler.t.inverse(t.expect("outcome query needs a treatment"));
                (self.oracle.outcome_moments(&raw, t), self.scaler.y)
            }
            Target::Treatment => (self.oracle.gps(&raw), self.scaler.t),
        };
        ConditionalGaussianMixture::new(vec![1.0], vec![scale.forward(m)], vec![v / (scale.sd * scale.sd)])
            .expect("oracle moments are finite")
    }
}

/// A fitted density model of either kind.
#[derive(Debug, Clone)]
pub enum FittedModel {
    Mdn(Arc<Mdn>),
    Linear(Arc<LinearGaussian>),
    Oracle(OracleView),
}

impl ConditionalDensity for FittedModel {
    fn query(&self, x: &[f64], t: Option<f64>) -> ConditionalGaussianMixture {
        match self {
            FittedModel::Mdn(m) => m.query(x, t),
            FittedModel::Linear(m) => m.query(x, t),
            FittedModel::Oracle(m) => m.query(x, t),
        }
    }

    fn query_rows(&self, data: &Dataset, t: Option<&[f64]>) -> Vec<ConditionalGaussianMixture> {
        match self {
            FittedModel::Mdn(m) => m.query_rows(data, t),
            FittedModel::Linear(m) => m.query_rows(data, t),
            FittedModel::Oracle(m) => m.query_rows(data, t),
        }
    }
}

/// Fits one model of `target` on `data` (already standardized).
pub fn fit_model(backend: &Backend, scaler: &Arc<Standardizer>, data: &Dataset, target: Target, seed: u64) -> Result<FittedModel> {
    Ok(match backend {
        Backend::Mdn { outcome, gps } => {
            let mut cfg = if target == Target::Outcome { outcome.clone() } else { gps.clone() };
            cfg.seed = seed;
            FittedModel::Mdn(Arc::new(fit_target(data, target, &cfg)?.0))
        }
        Backend::LinearGaussian => FittedModel::Linear(Arc::new(LinearGaussian::fit_target(data, target)?)),
        Backend::Oracle { config } => {
            FittedModel::Oracle(OracleView { oracle: Arc::new(SimOracle::new(config)?), scaler: scaler.clone(), target })
        }
    })
}

/// Refits `model` on a resample: warm start for MDNs, a fresh least-squares
/// fit for the linear model, nothing for the oracle.
pub fn refit_model(model: &FittedModel, data: &Dataset, target: Target, epochs_cap: usize, seed: u64) -> Result<FittedModel> {
    Ok(match model {
        FittedModel::Mdn(m) => FittedModel::Mdn(Arc::new(refit_target(m, data, target, epochs_cap, seed)?.0)),
        FittedModel::Linear(_) => FittedModel::Linear(Arc::new(LinearGaussian::fit_target(data, target)?)),
        FittedModel::Oracle(o) => FittedModel::Oracle(o.clone()),
    })
}

/// Seeded random partition of `n` rows into `k` folds of near-equal size.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, TAG_FOLDS, 0));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k;
    }
    fold
}

/// Panics if a row would be predicted by a model trained on it.
pub fn assert_disjoint(train: &[usize], predict: &[usize], n: usize) {
    let mut seen = vec![false; n];
    for &i in train {
        seen[i] = true;
    }
    assert!(predict.iter().all(|&i| !seen[i]), "cross-fitting would predict a row from a model trained on it");
}

/// One outcome model and one GPS model per fold, each trained on the
/// other folds.
#[derive(Debug, Clone)]
pub struct CrossFit {
    pub folds: usize,
    pub fold_of: Vec<usize>,
    pub outcome: Vec<FittedModel>,
    pub gps: Vec<FittedModel>,
    train_rows: Vec<Vec<usize>>,
}

fn rows_where(fold_of: &[usize], pred: impl Fn(usize) -> bool) -> Vec<usize> {
    (0..fold_of.len()).filter(|&i| pred(fold_of[i])).collect()
}

impl CrossFit {
    pub fn fit(data: &Dataset, backend: &Backend, scaler: &Arc<Standardizer>, folds: usize, seed: u64) -> Result<Self> {
        if folds < 2 {
            return Err(Error::InvalidConfig(format!("cross-fitting needs at least 2 folds, got {folds}")));
        }
        if data.n() < 2 * folds {
            return Err(Error::InvalidInput(format!("{} rows are too few for {folds} folds", data.n())));
        }
        let fold_of = fold_assignment(data.n(), folds, seed);
        let mut outcome = Vec::with_capacity(folds);
        let mut gps = Vec::with_capacity(folds);
        let mut train_rows = Vec::with_capacity(folds);
        for k in 0..folds {
            let train = rows_where(&fold_of, |f| f != k);
            let sub = data.subset(&train);
            outcome.push(fit_model(backend, scaler, &sub, Target::Outcome, derive_seed(seed, TAG_FIT, 2 * k as u64))?);
            gps.push(fit_model(backend, scaler, &sub, Target::Treatment, derive_seed(seed, TAG_FIT, 2 * k as u64 + 1))?);
            train_rows.push(train);
        }
        Ok(Self { folds, fold_of, outcome, gps, train_rows })
    }

    /// Rows the k-th model pair was trained on.
    pub fn train_rows(&self, k: usize) -> &[usize] {
        &self.train_rows[k]
    }

    /// Rows the k-th model pair predicts.
    pub fn predict_rows(&self, k: usize) -> Vec<usize> {
        rows_where(&self.fold_of, |f| f == k)
    }

    /// Out-of-fold predictions for every row of the data the models were
    /// cross-fitted on.
    pub fn predict(&self, data: &Dataset, taus: &[f64], keep_mixtures: bool) -> Predictions {
        let n = data.n();
        let groups: Vec<Vec<usize>> = (0..self.folds)
            .map(|k| {
                let rows = self.predict_rows(k);
                assert_disjoint(&self.train_rows[k], &rows, n);
                rows
            })
            .collect();
        Predictions::from_groups(data, &groups, &self.outcome, &self.gps, taus, keep_mixtures)
    }
}

/// Model outputs at each row: outcome mixtures at the observed treatment,
/// raw GPS values, η̂ at the observed treatment and at each query τ.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub outcome_obs: Vec<ConditionalGaussianMixture>,
    pub gps: Vec<f64>,
    pub eta_obs: Vec<f64>,
    /// `eta_tau[j][i]` = η̂(τ_j, X_i).
    pub eta_tau: Vec<Vec<f64>>,
    /// Outcome mixtures at (X_i, τ_j), kept only on request.
    pub mix_tau: Option<Vec<Vec<ConditionalGaussianMixture>>>,
}

impl Predictions {
    /// `groups[k]` lists the rows predicted by the k-th model pair.
    pub fn from_groups(
        data: &Dataset,
        groups: &[Vec<usize>],
        outcome: &[FittedModel],
        gps_models: &[FittedModel],
        taus: &[f64],
        keep_mixtures: bool,
    ) -> Self {
        let n = data.n();
        let placeholder = ConditionalGaussianMixture::gaussian(0.0, 1.0).expect("valid");
        let mut outcome_obs = vec![placeholder.clone(); n];
        let mut gps = vec![0.0; n];
        let mut eta_tau = vec![vec![0.0; n]; taus.len()];
        let mut mix_tau = keep_mixtures.then(|| vec![vec![placeholder.clone(); n]; taus.len()]);
        for (k, rows) in groups.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let sub = data.subset(rows);
            let mixes = outcome[k].query_rows(&sub, Some(sub.t()));
            let dens = gps_models[k].query_rows(&sub, None);
            for (j, &i) in rows.iter().enumerate() {
                gps[i] = dens[j].pdf(sub.t()[j]);
                outcome_obs[i] = mixes[j].clone();
            }
            for (a, &tau) in taus.iter().enumerate() {
                let at = vec![tau; rows.len()];
                let m = outcome[k].query_rows(&sub, Some(&at));
                for (j, &i) in rows.iter().enumerate() {
                    eta_tau[a][i] = m[j].mean();
                }
                if let Some(store) = mix_tau.as_mut() {
                    for (j, mix) in m.into_iter().enumerate() {
                        store[a][rows[j]] = mix;
                    }
                }
            }
        }
        let eta_obs = outcome_obs.iter().map(|m| m.mean()).collect();
        Self { outcome_obs, gps, eta_obs, eta_tau, mix_tau }
    }
}

/// q̂_{1−γ} and q̂_γ of every mixture.
pub fn quantile_pair(mixtures: &[ConditionalGaussianMixture], sens: &Sensitivity) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut lo = Vec::with_capacity(mixtures.len());
    let mut hi = Vec::with_capacity(mixtures.len());
    for m in mixtures {
        let l = conditional_quantile(&QuantileRequest::scaled(sens.one_minus_gamma(), m), DEFAULT_TOL)?;
        let h = if sens.big_gamma() == 1.0 { l } else { conditional_quantile(&QuantileRequest::scaled(sens.gamma(), m), DEFAULT_TOL)? };
        lo.push(l);
        hi.push(h);
    }
    Ok((lo, hi))
}
