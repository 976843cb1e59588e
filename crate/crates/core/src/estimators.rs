//! Kernel estimators of the APO and of its sharp bounds under the
//! sensitivity model, plus population-level bounds for discrete laws.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, KernelSpec, NuisanceTable, Sensitivity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// η̃(τ) + (1/n) Σ K_h(T_i−τ)/ĝ_i (Y_i − η̂_i)
    PlainDr,
    /// Σ K_h Y_i/ĝ_i / Σ K_h/ĝ_i
    Stabilized,
    /// Same expression as `PlainDr`; kept as a separate name.
    Augmented,
    /// η̃(τ) + Σ K_h/ĝ_i (Y_i − η̂_i) / Σ K_h/ĝ_i
    StabAugmented,
}

impl EstimatorKind {
    pub fn is_stabilized(self) -> bool {
        matches!(self, EstimatorKind::Stabilized | EstimatorKind::StabAugmented)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundForm {
    /// Every observation weighted by Γ^{±sign(Y − q)}.
    #[default]
    Sign,
    /// Tail-mean form over the observations beyond the quantile.
    Subset,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointEstimate {
    pub value: f64,
    /// Set when every kernel weight vanished and only η̃(τ) remains.
    pub no_local_data: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundPair {
    pub lo: f64,
    pub hi: f64,
    /// Set when the raw estimates came out inverted and were swapped.
    pub swapped: bool,
}

impl BoundPair {
    fn ordered(lo: f64, hi: f64) -> Self {
        if lo > hi {
            Self { lo: hi, hi: lo, swapped: true }
        } else {
            Self { lo, hi, swapped: false }
        }
    }
}

fn check(data: &Dataset, nuis: &NuisanceTable) -> Result<()> {
    nuis.validate(data.n())
}

/// K_h(T_i − τ) / ĝ_i for every row.
pub fn inverse_density_weights(t: &[f64], gps: &[f64], kernel: &KernelSpec, tau: f64) -> Vec<f64> {
    t.iter().zip(gps).map(|(&ti, &g)| kernel.eval(ti - tau) / g).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn apo_point(data: &Dataset, nuis: &NuisanceTable, kernel: &KernelSpec, tau: f64, kind: EstimatorKind) -> Result<PointEstimate> {
    check(data, nuis)?;
    let w = inverse_density_weights(data.t(), &nuis.gps, kernel, tau);
    let eta_tilde = mean(&nuis.eta_at_tau);
    let total: f64 = w.iter().sum();
    let no_local_data = total == 0.0;
    if no_local_data && kind.is_stabilized() {
        return Err(Error::EmptyNeighborhood { tau });
    }
    let value = match kind {
        EstimatorKind::PlainDr | EstimatorKind::Augmented => {
            eta_tilde + weighted_residual_sum(data.y(), &nuis.eta_at_obs, &w, |_| 1.0) / data.n() as f64
        }
        EstimatorKind::Stabilized => w.iter().zip(data.y()).map(|(a, y)| a * y).sum::<f64>() / total,
        EstimatorKind::StabAugmented => eta_tilde + weighted_residual_sum(data.y(), &nuis.eta_at_obs, &w, |_| 1.0) / total,
    };
    Ok(PointEstimate { value, no_local_data })
}

/// Σ w_i (Y_i − η̂_i) m(i).
fn weighted_residual_sum(y: &[f64], eta: &[f64], w: &[f64], m: impl Fn(usize) -> f64) -> f64 {
    let mut s = 0.0;
    for i in 0..y.len() {
        s += w[i] * (y[i] - eta[i]) * m(i);
    }
    s
}

/// Sample estimates of the lower and upper APO bounds at τ.
pub fn sharp_bounds_sample(
    data: &Dataset,
    nuis: &NuisanceTable,
    kernel: &KernelSpec,
    tau: f64,
    sens: &Sensitivity,
    form: BoundForm,
    stabilized: bool,
) -> Result<BoundPair> {
    check(data, nuis)?;
    let w = inverse_density_weights(data.t(), &nuis.gps, kernel, tau);
    bounds_from_weights(data.y(), nuis, &w, tau, sens, form, stabilized)
}

/// Bounds from precomputed inverse-density weights; shared by the
/// bandwidth search, which re-evaluates the same rows many times.
pub fn bounds_from_weights(
    y: &[f64],
    nuis: &NuisanceTable,
    w: &[f64],
    tau: f64,
    sens: &Sensitivity,
    form: BoundForm,
    stabilized: bool,
) -> Result<BoundPair> {
    let n = y.len() as f64;
    let eta_tilde = mean(&nuis.eta_at_tau);
    let eta = &nuis.eta_at_obs;
    let up = |i: usize| sens.upper_weight(y[i], nuis.q_hi[i]);
    let down = |i: usize| sens.lower_weight(y[i], nuis.q_lo[i]);
    let (lo, hi) = match form {
        BoundForm::Sign => {
            let s_hi = weighted_residual_sum(y, eta, w, up);
            let s_lo = weighted_residual_sum(y, eta, w, down);
            if stabilized {
                let d_hi: f64 = (0..y.len()).map(|i| w[i] * up(i)).sum();
                let d_lo: f64 = (0..y.len()).map(|i| w[i] * down(i)).sum();
                if d_hi == 0.0 || d_lo == 0.0 {
                    return Err(Error::EmptyNeighborhood { tau });
                }
                (eta_tilde + s_lo / d_lo, eta_tilde + s_hi / d_hi)
            } else {
                (eta_tilde + s_lo / n, eta_tilde + s_hi / n)
            }
        }
        BoundForm::Subset => {
            let factor = sens.tail_factor();
            if factor == 0.0 {
                return Ok(BoundPair::ordered(eta_tilde, eta_tilde));
            }
            let tail = |in_tail: &dyn Fn(usize) -> bool, side: &'static str| -> Result<f64> {
                let idx: Vec<usize> = (0..y.len()).filter(|&i| in_tail(i)).collect();
                if idx.is_empty() {
                    return Err(Error::EmptyTail { side });
                }
                let s: f64 = idx.iter().map(|&i| w[i] * (y[i] - eta[i])).sum();
                let d = if stabilized {
                    let d: f64 = idx.iter().map(|&i| w[i]).sum();
                    if d == 0.0 {
                        return Err(Error::EmptyNeighborhood { tau });
                    }
                    d
                } else {
                    idx.len() as f64
                };
                Ok(eta_tilde + factor * s / d)
            };
            let hi = tail(&|i| y[i] > nuis.q_hi[i], "upper")?;
            let lo = tail(&|i| y[i] <= nuis.q_lo[i], "lower")?;
            (lo, hi)
        }
    };
    Ok(BoundPair::ordered(lo, hi))
}

/// Inputs of the doubly robust bounds: GPS and quantiles at the observed
/// rows, and the two bound regressions θ̂± at (T_i, X_i) and (τ, X_i).
#[derive(Debug, Clone, PartialEq)]
pub struct DrInputs {
    pub gps: Vec<f64>,
    pub q_lo: Vec<f64>,
    pub q_hi: Vec<f64>,
    pub theta_lo_at_obs: Vec<f64>,
    pub theta_hi_at_obs: Vec<f64>,
    pub theta_lo_at_tau: Vec<f64>,
    pub theta_hi_at_tau: Vec<f64>,
}

pub fn dr_bounds_sample(data: &Dataset, kernel: &KernelSpec, tau: f64, sens: &Sensitivity, inp: &DrInputs) -> Result<BoundPair> {
    let n = data.n();
    let lens = [
        inp.gps.len(),
        inp.q_lo.len(),
        inp.q_hi.len(),
        inp.theta_lo_at_obs.len(),
        inp.theta_hi_at_obs.len(),
        inp.theta_lo_at_tau.len(),
        inp.theta_hi_at_tau.len(),
    ];
    if lens.iter().any(|&l| l != n) {
        return Err(Error::InvalidInput(format!("doubly robust inputs {lens:?} do not match n = {n}")));
    }
    let w = inverse_density_weights(data.t(), &inp.gps, kernel, tau);
    let y = data.y();
    let mut s_hi = 0.0;
    let mut s_lo = 0.0;
    for i in 0..n {
        s_hi += w[i] * (y[i] * sens.upper_weight(y[i], inp.q_hi[i]) - inp.theta_hi_at_obs[i]);
        s_lo += w[i] * (y[i] * sens.lower_weight(y[i], inp.q_lo[i]) - inp.theta_lo_at_obs[i]);
    }
    let nf = n as f64;
    Ok(BoundPair::ordered(mean(&inp.theta_lo_at_tau) + s_lo / nf, mean(&inp.theta_hi_at_tau) + s_hi / nf))
}

/// A finitely supported conditional law of Y.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteConditional {
    values: Vec<f64>,
    probs: Vec<f64>,
}

impl DiscreteConditional {
    pub fn new(values: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.len() != probs.len() {
            return Err(Error::InvalidInput("atoms and probabilities must be non-empty and equal in length".into()));
        }
        if values.iter().any(|v| !v.is_finite()) || probs.iter().any(|&p| !(p >= 0.0)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput("probabilities must form a simplex over finite atoms".into()));
        }
        Ok(Self { values, probs })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().zip(&self.probs).map(|(v, p)| v * p).sum()
    }

    /// Atom indices sorted by value, ties by index.
    fn order(&self, descending: bool) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.values.len()).collect();
        idx.sort_by(|&a, &b| {
            let c = self.values[a].total_cmp(&self.values[b]);
            if descending { c.reverse() } else { c }.then(a.cmp(&b))
        });
        idx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Lower,
    Upper,
}

/// Optimal likelihood-ratio weights: Γ on the extreme (1−γ) of the mass
/// (top for the upper bound, bottom for the lower), Γ^{-1} elsewhere, with
/// the boundary atom split fractionally.
pub fn discrete_sharp_weights(dist: &DiscreteConditional, sens: &Sensitivity, side: Side) -> Vec<f64> {
    let g = sens.big_gamma();
    let m = dist.values.len();
    if g == 1.0 {
        return vec![1.0; m];
    }
    let mut w = vec![1.0 / g; m];
    let mut remaining = sens.one_minus_gamma();
    for i in dist.order(side == Side::Upper) {
        if remaining <= 0.0 {
            break;
        }
        let p = dist.probs[i];
        if p == 0.0 {
            continue;
        }
        let take = p.min(remaining);
        w[i] = (g * take + (p - take) / g) / p;
        remaining -= take;
    }
    w
}

/// sup (upper) or inf (lower) of Σ v_j w_j p_j over w ∈ [Γ^{-1}, Γ]^m with
/// Σ w_j p_j = 1, in closed form.
pub fn discrete_sharp_bound(dist: &DiscreteConditional, sens: &Sensitivity, side: Side) -> f64 {
    let w = discrete_sharp_weights(dist, sens, side);
    (0..w.len()).map(|i| dist.values[i] * w[i] * dist.probs[i]).sum()
}

/// Largest exhaustive instance; bigger ones fall back to the sorted scan.
const LP_EXHAUSTIVE_MAX: usize = 12;

/// The same linear program solved without the greedy argument: every
/// vertex of the feasible polytope has all but at most one weight at a box
/// bound, so enumerating those candidates (and keeping the feasible ones)
/// finds the optimum.
pub fn discrete_bound_lp_oracle(dist: &DiscreteConditional, sens: &Sensitivity, side: Side) -> f64 {
    let (v, p) = (&dist.values, &dist.probs);
    let m = v.len();
    let (a, b) = (1.0 / sens.big_gamma(), sens.big_gamma());
    if a == b {
        return dist.mean();
    }
    let better = |cand: f64, best: f64| match side {
        Side::Upper => cand > best,
        Side::Lower => cand < best,
    };
    let mut best = match side {
        Side::Upper => f64::NEG_INFINITY,
        Side::Lower => f64::INFINITY,
    };
    let feas_tol = 1e-12;
    if m <= LP_EXHAUSTIVE_MAX {
        for free in 0..=m {
            // `free == m` means every weight sits at a bound
            if free < m && p[free] == 0.0 {
                continue;
            }
            let others = if free < m { m - 1 } else { m };
            for mask in 0u32..(1 << others) {
                let mut mass = 0.0;
                let mut obj = 0.0;
                let mut bit = 0;
                for j in 0..m {
                    if j == free {
                        continue;
                    }
                    let wj = if mask >> bit & 1 == 1 { b } else { a };
                    bit += 1;
                    mass += wj * p[j];
                    obj += v[j] * wj * p[j];
                }
                if free < m {
                    let wf = (1.0 - mass) / p[free];
                    if wf < a - feas_tol || wf > b + feas_tol {
                        continue;
                    }
                    obj += v[free] * wf * p[free];
                } else if (mass - 1.0).abs() > feas_tol {
                    continue;
                }
                if better(obj, best) {
                    best = obj;
                }
            }
        }
    } else {
        // sorted scan: the k most favourable atoms at the upper box bound,
        // atom k fractional, the rest at the lower bound
        let order = dist.order(side == Side::Upper);
        for k in 0..m {
            let mut mass = 0.0;
            let mut obj = 0.0;
            for (r, &j) in order.iter().enumerate() {
                if r != k {
                    let wj = if r < k { b } else { a };
                    mass += wj * p[j];
                    obj += v[j] * wj * p[j];
                }
            }
            let j = order[k];
            if p[j] == 0.0 {
                continue;
            }
            let wf = (1.0 - mass) / p[j];
            if wf >= a - feas_tol && wf <= b + feas_tol && better(obj + v[j] * wf * p[j], best) {
                best = obj + v[j] * wf * p[j];
            }
        }
    }
    best
}

/// The baseline bound: η + sup/inf over κ ∈ [0,1]^m of
/// E[κ (Y − η)] / ((Γ²−1)^{-1} + E[κ]). The ratio is linear-fractional in
/// κ, so the optimum is an indicator of the atoms above (upper) or below
/// (lower) some threshold; all such thresholds are scanned, including κ ≡ 0.
pub fn discrete_baseline_bound(dist: &DiscreteConditional, eta: f64, sens: &Sensitivity, side: Side) -> Result<f64> {
    let g = sens.big_gamma();
    if g <= 1.0 {
        return Err(Error::BaselineGammaGuard(g));
    }
    let c = 1.0 / (g * g - 1.0);
    let mut num = 0.0;
    let mut den = 0.0;
    let mut best = 0.0f64;
    for i in dist.order(side == Side::Upper) {
        num += dist.probs[i] * (dist.values[i] - eta);
        den += dist.probs[i];
        let r = num / (c + den);
        best = match side {
            Side::Upper => best.max(r),
            Side::Lower => best.min(r),
        };
    }
    Ok(eta + best)
}
