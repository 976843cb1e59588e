//! Synthetic data with latent confounders U and closed-form ground truth.
//!
//! (X, U) ~ N(0, Σ) with tridiagonal within-block correlations and a
//! constant cross block; T = ⟨β_X, X⟩ + ⟨β_U, U⟩ − 0.5 + ε_T and
//! Y(t) = t + ζ a e^{−t a} − ⟨U, γ_U⟩ a + ε_Y with a = ⟨X, γ_X⟩.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::density::mixture::normal_pdf;
use crate::density::{ConditionalDensity, ConditionalGaussianMixture};
use crate::error::{Error, Result};
use crate::model::{quantile_sorted, Dataset, Sensitivity};
use crate::rng::stream;

const TAG_GENERATE: u64 = 0x6e6;
const TAG_CALIBRATE: u64 = 0xca1;
const TAG_TRUTH: u64 = 0x7a7;
const TREATMENT_OFFSET: f64 = -0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub p_x: usize,
    pub p_u: usize,
    pub rho_x: f64,
    pub rho_u: f64,
    /// Cross correlation as a fraction of its diagonal-dominance maximum.
    pub lambda: f64,
    pub beta_x: Vec<f64>,
    pub beta_u: Vec<f64>,
    pub gamma_x: Vec<f64>,
    pub gamma_u: Vec<f64>,
    pub zeta: f64,
    pub sigma_eps_t: f64,
    pub sigma_eps_y: f64,
    pub n: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            p_x: 5,
            p_u: 3,
            rho_x: 0.3,
            rho_u: 0.3,
            lambda: 0.5,
            beta_x: vec![0.3; 5],
            beta_u: vec![0.2; 3],
            gamma_x: vec![0.2; 5],
            gamma_u: vec![0.4, 0.7, 0.7],
            zeta: -0.3,
            sigma_eps_t: 0.5,
            sigma_eps_y: 0.7,
            n: 1000,
            seed: 1,
        }
    }
}

impl SimConfig {
    /// ρ_XU = λ (1 − ρ_X) / p_U.
    pub fn rho_xu(&self) -> f64 {
        self.lambda * (1.0 - self.rho_x) / self.p_u as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.p_x == 0 || self.p_u == 0 {
            return bad("p_x and p_u must be positive".into());
        }
        if self.beta_x.len() != self.p_x || self.gamma_x.len() != self.p_x {
            return bad(format!("beta_x and gamma_x need length p_x = {}", self.p_x));
        }
        if self.beta_u.len() != self.p_u || self.gamma_u.len() != self.p_u {
            return bad(format!("beta_u and gamma_u need length p_u = {}", self.p_u));
        }
        if !(self.rho_x > 0.0 && self.rho_x < 1.0 && self.rho_u > 0.0 && self.rho_u < 1.0) {
            return bad("rho_x and rho_u must lie in (0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1), got {}", self.lambda));
        }
        if !(self.sigma_eps_t >= 0.0 && self.sigma_eps_y >= 0.0) {
            return bad("noise scales must be nonnegative".into());
        }
        let all = [&self.beta_x, &self.beta_u, &self.gamma_x, &self.gamma_u];
        if all.iter().any(|v| v.iter().any(|c| !c.is_finite())) || !self.zeta.is_finite() {
            return bad("coefficients must be finite".into());
        }
        Ok(())
    }
}

fn tridiagonal(p: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |i, j| {
        if i == j {
            1.0
        } else if i.abs_diff(j) == 1 {
            rho
        } else {
            0.0
        }
    })
}

/// Joint covariance of (X, U).
pub fn build_sigma(cfg: &SimConfig) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    let (px, pu) = (cfg.p_x, cfg.p_u);
    let sx = tridiagonal(px, cfg.rho_x);
    let su = tridiagonal(pu, cfg.rho_u);
    let rxu = cfg.rho_xu();
    let sigma = DMatrix::from_fn(px + pu, px + pu, |i, j| match (i < px, j < px) {
        (true, true) => sx[(i, j)],
        (false, false) => su[(i - px, j - px)],
        _ => rxu,
    });
    if sigma.clone().cholesky().is_none() {
        return Err(Error::InvalidConfig("covariance of (X, U) is not positive definite".into()));
    }
    Ok(sigma)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Precomputed conditional moments of the simulation design.
#[derive(Debug, Clone)]
pub struct SimOracle {
    cfg: SimConfig,
    chol: DMatrix<f64>,
    /// Σ_XUᵀ Σ_X^{-1}, so E[U | X = x] = proj · x.
    proj: DMatrix<f64>,
    gps_var: f64,
    /// Regression of ⟨U, γ_U⟩ on (X, T − mean T).
    w_coef: Vec<f64>,
    w_cond_var: f64,
    /// γ_Xᵀ Σ_X γ_X.
    a_var: f64,
    /// γ_Uᵀ Σ_XUᵀ γ_X.
    cross: f64,
}

impl SimOracle {
    pub fn new(cfg: &SimConfig) -> Result<Self> {
        let sigma = build_sigma(cfg)?;
        let (px, pu) = (cfg.p_x, cfg.p_u);
        let sx = sigma.view((0, 0), (px, px)).into_owned();
        let sxu = sigma.view((0, px), (px, pu)).into_owned();
        let su = sigma.view((px, px), (pu, pu)).into_owned();
        let sx_inv = sx.clone().try_inverse().ok_or_else(|| Error::InvalidConfig("Sigma_X is singular".into()))?;
        let proj = sxu.transpose() * &sx_inv;
        let bu = DVector::from_column_slice(&cfg.beta_u);
        let bx = DVector::from_column_slice(&cfg.beta_x);
        let gu = DVector::from_column_slice(&cfg.gamma_u);
        let gx = DVector::from_column_slice(&cfg.gamma_x);
        let u_cond = &su - sxu.transpose() * &sx_inv * &sxu;
        let gps_var = cfg.sigma_eps_t.powi(2) + (bu.transpose() * &u_cond * &bu)[(0, 0)];

        // joint law of Z = (X, T) and W = ⟨U, γ_U⟩
        let cov_xt = &sx * &bx + &sxu * &bu;
        let var_t = (bx.transpose() * &sx * &bx)[(0, 0)]
            + 2.0 * (bx.transpose() * &sxu * &bu)[(0, 0)]
            + (bu.transpose() * &su * &bu)[(0, 0)]
            + cfg.sigma_eps_t.powi(2);
        let mut szz = DMatrix::zeros(px + 1, px + 1);
        szz.view_mut((0, 0), (px, px)).copy_from(&sx);
        for i in 0..px {
            szz[(i, px)] = cov_xt[i];
            szz[(px, i)] = cov_xt[i];
        }
        szz[(px, px)] = var_t;
        let mut czw = DVector::zeros(px + 1);
        let cov_wx = &sxu * &gu;
        for i in 0..px {
            czw[i] = cov_wx[i];
        }
        czw[px] = (gu.transpose() * (sxu.transpose() * &bx + &su * &bu))[(0, 0)];
        let var_w = (gu.transpose() * &su * &gu)[(0, 0)];
        let (w_coef, w_cond_var) = match szz.clone().cholesky() {
            Some(ch) => {
                let k = ch.solve(&czw);
                let v = (var_w - czw.dot(&k)).max(0.0);
                (k.iter().copied().collect(), v)
            }
            // T is a deterministic function of (X, U) when σ_εT = 0 and
            // β = 0; fall back to a pseudo-inverse
            None => {
                let pinv = szz.pseudo_inverse(1e-12).map_err(|e| Error::Numeric(format!("conditioning failed: {e}")))?;
                let k = pinv * &czw;
                let v = (var_w - czw.dot(&k)).max(0.0);
                (k.iter().copied().collect(), v)
            }
        };
        let a_var = (gx.transpose() * &sx * &gx)[(0, 0)];
        let cross = (gu.transpose() * sxu.transpose() * &gx)[(0, 0)];
        let chol = sigma.cholesky().expect("checked in build_sigma").l();
        Ok(Self { cfg: cfg.clone(), chol, proj, gps_var, w_coef, w_cond_var, a_var, cross })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    /// θ(τ) = τ (1 − ζ s² e^{τ² s²/2}) − γ_Uᵀ Σ_XUᵀ γ_X with s² = γ_Xᵀ Σ_X γ_X.
    pub fn true_apo(&self, tau: f64) -> f64 {
        let s2 = self.a_var;
        tau * (1.0 - self.cfg.zeta * s2 * (0.5 * tau * tau * s2).exp()) - self.cross
    }

    fn u_mean(&self, x: &[f64]) -> Vec<f64> {
        (0..self.cfg.p_u).map(|r| (0..self.cfg.p_x).map(|c| self.proj[(r, c)] * x[c]).sum()).collect()
    }

    pub fn true_capo(&self, tau: f64, x: &[f64]) -> f64 {
        let a = dot(x, &self.cfg.gamma_x);
        tau + self.cfg.zeta * a * (-tau * a).exp() - dot(&self.u_mean(x), &self.cfg.gamma_u) * a
    }

    /// Mean and variance of T | X = x.
    pub fn gps(&self, x: &[f64]) -> (f64, f64) {
        let mu = dot(&self.cfg.beta_x, x) + TREATMENT_OFFSET + dot(&self.cfg.beta_u, &self.u_mean(x));
        (mu, self.gps_var)
    }

    /// Mean and variance of T | X = x, U = u.
    pub fn full_gps(&self, x: &[f64], u: &[f64]) -> (f64, f64) {
        (dot(&self.cfg.beta_x, x) + dot(&self.cfg.beta_u, u) + TREATMENT_OFFSET, self.cfg.sigma_eps_t.powi(2))
    }

    /// Mean and variance of the Gaussian law of Y | X = x, T = t.
    pub fn outcome_moments(&self, x: &[f64], t: f64) -> (f64, f64) {
        let px = self.cfg.p_x;
        let a = dot(x, &self.cfg.gamma_x);
        let w_mean = dot(&self.w_coef[..px], x) + self.w_coef[px] * (t - TREATMENT_OFFSET);
        let mean = t + self.cfg.zeta * a * (-t * a).exp() - a * w_mean;
        (mean, a * a * self.w_cond_var + self.cfg.sigma_eps_y.powi(2))
    }

    pub fn outcome_density(&self, x: &[f64], t: f64) -> ConditionalGaussianMixture {
        let (m, v) = self.outcome_moments(x, t);
        ConditionalGaussianMixture::from_parts_unchecked(vec![1.0], vec![m], vec![v])
    }

    /// Sharp CAPO bounds of the observational law at (x, τ): the Gaussian
    /// tail mean gives θ± = m ± (Γ − Γ^{-1}) s φ(Φ^{-1}(γ)).
    pub fn capo_bounds(&self, x: &[f64], tau: f64, sens: &Sensitivity) -> (f64, f64) {
        let (m, v) = self.outcome_moments(x, tau);
        let g = sens.big_gamma();
        if g == 1.0 {
            return (m, m);
        }
        let z = Normal::standard().inverse_cdf(sens.gamma());
        let shift = (g - 1.0 / g) * v.sqrt() * normal_pdf(z);
        (m - shift, m + shift)
    }

    /// Draws (X, U) rows; returns row-major X and U.
    pub fn draw_covariates<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let (px, pu) = (self.cfg.p_x, self.cfg.p_u);
        let d = px + pu;
        let mut x = Vec::with_capacity(n * px);
        let mut u = Vec::with_capacity(n * pu);
        let mut xi = vec![0.0; d];
        for _ in 0..n {
            for v in xi.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            for r in 0..d {
                let val: f64 = (0..=r).map(|c| self.chol[(r, c)] * xi[c]).sum();
                if r < px {
                    x.push(val);
                } else {
                    u.push(val);
                }
            }
        }
        (x, u)
    }

    /// Population sharp APO bounds E_X[θ±(τ, X)] by Monte Carlo over X.
    pub fn apo_bounds_mc(&self, tau: f64, sens: &Sensitivity, draws: usize, seed: u64) -> (f64, f64) {
        let mut rng = stream(seed, TAG_TRUTH, 0);
        let (x, _) = self.draw_covariates(draws, &mut rng);
        let px = self.cfg.p_x;
        let (mut lo, mut hi) = (0.0, 0.0);
        for i in 0..draws {
            let (l, h) = self.capo_bounds(&x[i * px..(i + 1) * px], tau, sens);
            lo += l;
            hi += h;
        }
        (lo / draws as f64, hi / draws as f64)
    }
}

/// A generated sample together with its latent confounders and the frozen
/// outcome noise, so potential outcomes can be evaluated at any t.
#[derive(Debug, Clone)]
pub struct SimSample {
    pub dataset: Dataset,
    /// Row-major n × p_U.
    pub u: Vec<f64>,
    eps_y: Vec<f64>,
    cfg: SimConfig,
}

impl SimSample {
    pub fn potential_outcome(&self, i: usize, t: f64) -> f64 {
        let x = self.dataset.x_row(i);
        let pu = self.cfg.p_u;
        let a = dot(x, &self.cfg.gamma_x);
        t + self.cfg.zeta * a * (-t * a).exp() - dot(&self.u[i * pu..(i + 1) * pu], &self.cfg.gamma_u) * a + self.eps_y[i]
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn u_row(&self, i: usize) -> &[f64] {
        &self.u[i * self.cfg.p_u..(i + 1) * self.cfg.p_u]
    }
}

pub fn generate(cfg: &SimConfig) -> Result<SimSample> {
    let oracle = SimOracle::new(cfg)?;
    generate_with(&oracle, cfg.n, cfg.seed)
}

/// Draws `n` rows from the design held by `oracle`.
pub fn generate_with(oracle: &SimOracle, n: usize, seed: u64) -> Result<SimSample> {
    let cfg = oracle.config().clone();
    if n < 2 {
        return Err(Error::InvalidConfig(format!("sample size must be at least 2, got {n}")));
    }
    let mut rng = stream(seed, TAG_GENERATE, 0);
    let (x, u) = oracle.draw_covariates(n, &mut rng);
    let (px, pu) = (cfg.p_x, cfg.p_u);
    let mut t = Vec::with_capacity(n);
    let mut eps_y = Vec::with_capacity(n);
    for i in 0..n {
        let e_t: f64 = rng.sample(StandardNormal);
        let e_y: f64 = rng.sample(StandardNormal);
        t.push(
            dot(&cfg.beta_x, &x[i * px..(i + 1) * px])
                + dot(&cfg.beta_u, &u[i * pu..(i + 1) * pu])
                + TREATMENT_OFFSET
                + cfg.sigma_eps_t * e_t,
        );
        eps_y.push(cfg.sigma_eps_y * e_y);
    }
    let mut sample = SimSample { dataset: Dataset::new(x.clone(), px, t.clone(), vec![0.0; n])?, u, eps_y, cfg };
    let y: Vec<f64> = (0..n).map(|i| sample.potential_outcome(i, t[i])).collect();
    sample.dataset = Dataset::new(x, px, t, y)?;
    Ok(sample)
}

pub fn true_apo(tau: f64, cfg: &SimConfig) -> Result<f64> {
    Ok(SimOracle::new(cfg)?.true_apo(tau))
}

pub fn true_capo(tau: f64, x: &[f64], cfg: &SimConfig) -> Result<f64> {
    Ok(SimOracle::new(cfg)?.true_capo(tau, x))
}

pub fn oracle_gps(x: &[f64], cfg: &SimConfig) -> Result<(f64, f64)> {
    Ok(SimOracle::new(cfg)?.gps(x))
}

pub fn oracle_full_gps(x: &[f64], u: &[f64], cfg: &SimConfig) -> Result<(f64, f64)> {
    Ok(SimOracle::new(cfg)?.full_gps(x, u))
}

pub fn oracle_outcome_density(x: &[f64], t: f64, cfg: &SimConfig) -> Result<ConditionalGaussianMixture> {
    Ok(SimOracle::new(cfg)?.outcome_density(x, t))
}

/// Leverage of every row in the design [1, X, T, Y] (diagonal of the
/// projection onto its column space). The second value reports whether the
/// design was rank deficient.
pub fn hat_values(data: &Dataset) -> (Vec<f64>, bool) {
    let (n, p) = (data.n(), data.p());
    let d = p + 3;
    let design = DMatrix::from_fn(n, d, |i, j| match j {
        0 => 1.0,
        j if j <= p => data.x_row(i)[j - 1],
        j if j == p + 1 => data.t()[i],
        _ => data.y()[i],
    });
    let svd = design.svd(true, false);
    let u = svd.u.expect("requested U");
    let smax = svd.singular_values.max();
    let tol = smax * (n.max(d) as f64) * f64::EPSILON;
    let keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&k| svd.singular_values[k] > tol).collect();
    let rank_deficient = keep.len() < d;
    let h = (0..n).map(|i| keep.iter().map(|&k| u[(i, k)] * u[(i, k)]).sum()).collect();
    (h, rank_deficient)
}

/// Removes the ⌈fraction·n⌉ rows with the largest leverage (equal leverage:
/// lower row index removed first). Returns the kept rows in their original
/// order, their indices, and the rank-deficiency flag.
pub fn remove_hat_outliers(data: &Dataset, fraction: f64) -> Result<(Dataset, Vec<usize>, bool)> {
    let (n, p) = (data.n(), data.p());
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidParameter(format!("trim fraction must lie in [0, 1), got {fraction}")));
    }
    if n <= p + 3 {
        return Err(Error::InvalidInput(format!("hat-value trimming needs n > p + 3, got n = {n}, p = {p}")));
    }
    let drop = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let (h, rank_deficient) = hat_values(data);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| h[b].total_cmp(&h[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order[drop..].to_vec();
    kept.sort_unstable();
    Ok((data.subset(&kept), kept, rank_deficient))
}

/// Where the calibration ratio evaluates both treatment densities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RatioPoint {
    /// A fixed treatment value shared by every calibration row.
    Fixed(f64),
    /// Each row's own treatment, drawn from T | X, U.
    Observed,
}

/// Ratios f(t | X_i, U_i) / f(t | X_i) on `n_cal` fresh draws.
pub fn density_ratios(oracle: &SimOracle, at: RatioPoint, n_cal: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, TAG_CALIBRATE, 0);
    let (x, u) = oracle.draw_covariates(n_cal, &mut rng);
    let (px, pu) = (oracle.cfg.p_x, oracle.cfg.p_u);
    (0..n_cal)
        .map(|i| {
            let xi = &x[i * px..(i + 1) * px];
            let (mf, vf) = oracle.full_gps(xi, &u[i * pu..(i + 1) * pu]);
            let (mm, vm) = oracle.gps(xi);
            let t = match at {
                RatioPoint::Fixed(tau) => tau,
                RatioPoint::Observed => mf + vf.sqrt() * rng.sample::<f64, _>(StandardNormal),
            };
            let log_pdf = |m: f64, v: f64| -0.5 * (t - m).powi(2) / v - 0.5 * v.ln();
            (log_pdf(mf, vf) - log_pdf(mm, vm)).exp()
        })
        .collect()
}

fn ratio_quantile(oracle: &SimOracle, at: RatioPoint, p_gamma: f64, n_cal: usize) -> Result<f64> {
    let mut sym: Vec<f64> = density_ratios(oracle, at, n_cal, oracle.cfg.seed).into_iter().map(|r| r.max(1.0 / r)).collect();
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("density ratio overflowed during calibration".into()));
    }
    sym.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&sym, p_gamma).max(1.0))
}

fn check_calibration(p_gamma: f64, n_cal: usize) -> Result<()> {
    if !(p_gamma > 0.0 && p_gamma < 1.0) {
        return Err(Error::InvalidParameter(format!("p_gamma must lie in (0, 1), got {p_gamma}")));
    }
    if n_cal == 0 {
        return Err(Error::InvalidParameter("calibration needs n_cal >= 1".into()));
    }
    Ok(())
}

/// Smallest Γ whose interval [Γ^{-1}, Γ] holds a `p_gamma` share of the
/// density ratios at a fixed τ: the empirical p_gamma quantile of max(r, 1/r).
pub fn calibrate_gamma(cfg: &SimConfig, tau: f64, p_gamma: f64, n_cal: usize) -> Result<f64> {
    calibrate_gamma_grid(cfg, &[tau], p_gamma, n_cal)
}

/// Fixed-τ calibration maximized over a τ grid.
pub fn calibrate_gamma_grid(cfg: &SimConfig, taus: &[f64], p_gamma: f64, n_cal: usize) -> Result<f64> {
    check_calibration(p_gamma, n_cal)?;
    if taus.is_empty() {
        return Err(Error::InvalidParameter("calibration needs at least one tau".into()));
    }
    let oracle = SimOracle::new(cfg)?;
    taus.iter().try_fold(1.0f64, |best, &tau| Ok(best.max(ratio_quantile(&oracle, RatioPoint::Fixed(tau), p_gamma, n_cal)?)))
}

/// Calibration with each ratio taken at the row's own drawn treatment, so the
/// ratios describe the confounding the observed data actually carry.
pub fn calibrate_gamma_observed(cfg: &SimConfig, p_gamma: f64, n_cal: usize) -> Result<f64> {
    check_calibration(p_gamma, n_cal)?;
    ratio_quantile(&SimOracle::new(cfg)?, RatioPoint::Observed, p_gamma, n_cal)
}

/// Outcome oracle behind the density contract.
#[derive(Debug, Clone)]
pub struct OracleOutcome(pub std::sync::Arc<SimOracle>);

/// GPS oracle behind the density contract.
#[derive(Debug, Clone)]
pub struct OracleGps(pub std::sync::Arc<SimOracle>);

impl ConditionalDensity for OracleOutcome {
    fn query(&self, x: &[f64], t: Option<f64>) -> ConditionalGaussianMixture {
        self.0.outcome_density(x, t.expect("outcome oracle needs a treatment value"))
    }
}

impl ConditionalDensity for OracleGps {
    fn query(&self, x: &[f64], _t: Option<f64>) -> ConditionalGaussianMixture {
        let (m, v) = self.0.gps(x);
        ConditionalGaussianMixture::from_parts_unchecked(vec![1.0], vec![m], vec![v])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::mixture::gaussian_pdf;

    #[test]
    fn sigma_examples() {
        let cfg = SimConfig::default();
        assert!((cfg.rho_xu() - 0.116_666_7).abs() < 1e-7);
        let s = build_sigma(&cfg).unwrap();
        assert_eq!(s[(0, 1)], 0.3);
        assert_eq!(s[(0, 2)], 0.0);
        assert!((s[(0, 5)] - cfg.rho_xu()).abs() < 1e-15);

        let block = SimConfig { lambda: 0.0, ..SimConfig::default() };
        let s = build_sigma(&block).unwrap();
        assert!(s.view((0, 5), (5, 3)).iter().all(|&v| v == 0.0));

        let tiny = SimConfig {
            p_x: 1,
            p_u: 1,
            beta_x: vec![0.3],
            beta_u: vec![0.2],
            gamma_x: vec![0.2],
            gamma_u: vec![0.4],
            ..SimConfig::default()
        };
        let s = build_sigma(&tiny).unwrap();
        let r = tiny.rho_xu();
        assert_eq!(s, DMatrix::from_row_slice(2, 2, &[1.0, r, r, 1.0]));
    }

    #[test]
    fn rejects_bad_config() {
        assert!(build_sigma(&SimConfig { lambda: 1.0, ..SimConfig::default() }).is_err());
        assert!(build_sigma(&SimConfig { beta_x: vec![0.0; 4], ..SimConfig::default() }).is_err());
    }

    #[test]
    fn true_apo_closed_form() {
        let cfg = SimConfig::default();
        assert!((true_apo(0.0, &cfg).unwrap() + 0.21).abs() < 1e-12);
        let plain = SimConfig { zeta: 0.0, lambda: 0.0, ..SimConfig::default() };
        for tau in [-1.0, 0.3, 2.0] {
            assert!((true_apo(tau, &plain).unwrap() - tau).abs() < 1e-12);
        }
    }

    #[test]
    fn capo_examples() {
        let cfg = SimConfig::default();
        assert_eq!(true_capo(0.7, &[0.0; 5], &cfg).unwrap(), 0.7);
        let o = SimOracle::new(&SimConfig { zeta: 0.0, ..cfg.clone() }).unwrap();
        let x = [0.5, -1.0, 0.2, 0.0, 1.0];
        let a = dot(&x, &cfg.gamma_x);
        let expect = 0.4 - dot(&o.u_mean(&x), &cfg.gamma_u) * a;
        assert!((o.true_capo(0.4, &x) - expect).abs() < 1e-14);
    }

    #[test]
    fn degenerate_generation() {
        let cfg = SimConfig {
            sigma_eps_t: 0.0,
            sigma_eps_y: 0.0,
            beta_x: vec![0.0; 5],
            beta_u: vec![0.0; 3],
            gamma_x: vec![0.0; 5],
            gamma_u: vec![0.0; 3],
            zeta: 0.0,
            n: 50,
            ..SimConfig::default()
        };
        let s = generate(&cfg).unwrap();
        assert!(s.dataset.t().iter().all(|&t| t == -0.5));
        assert!(s.dataset.y().iter().all(|&y| y == -0.5));
    }

    #[test]
    fn consistency_and_determinism() {
        let cfg = SimConfig { n: 300, ..SimConfig::default() };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.dataset, b.dataset);
        for i in 0..300 {
            assert_eq!(a.dataset.y()[i], a.potential_outcome(i, a.dataset.t()[i]));
        }
    }

    #[test]
    fn gps_examples() {
        let cfg = SimConfig { lambda: 0.0, ..SimConfig::default() };
        let (m, v) = oracle_gps(&[0.0; 5], &cfg).unwrap();
        assert_eq!(m, -0.5);
        let su = tridiagonal(3, 0.3);
        let bu = DVector::from_column_slice(&cfg.beta_u);
        assert!((v - (0.25 + (bu.transpose() * su * &bu)[(0, 0)])).abs() < 1e-12);
        let no_u = SimConfig { beta_u: vec![0.0; 3], ..SimConfig::default() };
        assert!((oracle_gps(&[0.3; 5], &no_u).unwrap().1 - 0.25).abs() < 1e-15);
        let (fm, fv) = oracle_full_gps(&[1.0; 5], &[1.0; 3], &SimConfig::default()).unwrap();
        assert!((fm - (1.5 + 0.6 - 0.5)).abs() < 1e-12);
        assert_eq!(fv, 0.25);
    }

    #[test]
    fn outcome_oracle_without_u_effect() {
        let cfg = SimConfig { gamma_u: vec![0.0; 3], ..SimConfig::default() };
        let x = [0.4, -0.2, 1.0, 0.3, 0.0];
        let a = dot(&x, &cfg.gamma_x);
        let m = oracle_outcome_density(&x, 0.8, &cfg).unwrap();
        assert!((m.mean() - (0.8 + cfg.zeta * a * (-0.8 * a).exp())).abs() < 1e-12);
        assert!((m.variance() - 0.49).abs() < 1e-12);
    }

    #[test]
    fn hat_trim_counts_and_outlier() {
        let cfg = SimConfig::default();
        let s = generate(&cfg).unwrap();
        let (kept, idx, rd) = remove_hat_outliers(&s.dataset, 0.1).unwrap();
        assert_eq!(kept.n(), 900);
        assert_eq!(idx.len(), 900);
        assert!(!rd);

        let small = SimConfig { n: 200, ..SimConfig::default() };
        let s = generate(&small).unwrap();
        let mut rows: Vec<Vec<f64>> = (0..200).map(|i| s.dataset.x_row(i).to_vec()).collect();
        let mut t = s.dataset.t().to_vec();
        let mut y = s.dataset.y().to_vec();
        rows[37] = vec![40.0, -35.0, 30.0, 25.0, -50.0];
        t[37] = 60.0;
        y[37] = -80.0;
        let d = Dataset::from_rows(&rows, t, y).unwrap();
        let (_, idx, _) = remove_hat_outliers(&d, 0.1).unwrap();
        assert!(!idx.contains(&37));
    }

    #[test]
    fn hat_trim_ties_and_rank_deficiency() {
        let rows: Vec<Vec<f64>> = (0..10).map(|_| vec![1.0]).collect();
        let d = Dataset::from_rows(&rows, vec![2.0; 10], vec![3.0; 10]).unwrap();
        let (kept, idx, rd) = remove_hat_outliers(&d, 0.2).unwrap();
        assert!(rd);
        assert_eq!(kept.n(), 8);
        assert_eq!(idx, (2..10).collect::<Vec<_>>());
    }

    #[test]
    fn calibration_without_u_effect_on_treatment() {
        let cfg = SimConfig { beta_u: vec![0.0; 3], ..SimConfig::default() };
        let g = calibrate_gamma(&cfg, 0.0, 0.99, 2000).unwrap();
        assert!((g - 1.0).abs() < 1e-6);
        assert!((calibrate_gamma_observed(&cfg, 0.99, 2000).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn observed_calibration_is_moderate_and_decreasing_in_lambda() {
        let at = |lambda| calibrate_gamma_observed(&SimConfig { lambda, ..SimConfig::default() }, 0.99, 10_000).unwrap();
        let g = at(0.5);
        assert!((3.0..=12.0).contains(&g), "{g}");
        assert!(at(0.0) >= g && g >= at(0.99));
    }

    #[test]
    fn calibration_nondecreasing_in_p() {
        let cfg = SimConfig::default();
        let a = calibrate_gamma(&cfg, 0.0, 0.9, 3000).unwrap();
        let b = calibrate_gamma(&cfg, 0.0, 0.99, 3000).unwrap();
        assert!(a <= b);
    }

    #[test]
    fn gaussian_tail_bounds_match_discretization() {
        let o = SimOracle::new(&SimConfig::default()).unwrap();
        let x = [0.5, 0.1, -0.3, 0.8, 0.0];
        let sens = Sensitivity::from_big_gamma(3.0).unwrap();
        let (lo, hi) = o.capo_bounds(&x, 0.2, &sens);
        let (m, v) = o.outcome_moments(&x, 0.2);
        let sd = v.sqrt();
        let k = 40_001;
        let values: Vec<f64> = (0..k).map(|i| m + sd * (-9.0 + 18.0 * i as f64 / (k - 1) as f64)).collect();
        let dens: Vec<f64> = values.iter().map(|y| gaussian_pdf(*y, m, v)).collect();
        let tot: f64 = dens.iter().sum();
        let mut probs: Vec<f64> = dens.iter().map(|p| p / tot).collect();
        probs[0] = 1.0 - probs[1..].iter().sum::<f64>();
        let d = crate::estimators::DiscreteConditional::new(values, probs).unwrap();
        use crate::estimators::{discrete_sharp_bound, Side};
        assert!((discrete_sharp_bound(&d, &sens, Side::Upper) - hi).abs() < 1e-3);
        assert!((discrete_sharp_bound(&d, &sens, Side::Lower) - lo).abs() < 1e-3);
    }
}
