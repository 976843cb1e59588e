//! Shared domain types: observed data, kernels, the sensitivity parameter,
//! per-observation nuisance values, and the small numerical helpers
//! (empirical quantiles, GPS trimming, treatment grids) used throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observed sample of covariates, treatment and outcome.
///
/// Covariates are stored row-major (`n` rows of `p` values).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    x: Vec<f64>,
    t: Vec<f64>,
    y: Vec<f64>,
    p: usize,
}

impl Dataset {
    pub fn new(x: Vec<f64>, p: usize, t: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = t.len();
        if p == 0 {
            return Err(Error::InvalidInput("dataset needs at least one covariate".into()));
        }
        if n < 2 {
            return Err(Error::InvalidInput(format!("dataset needs n >= 2 rows, got {n}")));
        }
        if y.len() != n || x.len() != n * p {
            return Err(Error::InvalidInput(format!(
                "dimension mismatch: t has {n} rows, y has {}, x has {} values for p = {p}",
                y.len(),
                x.len()
            )));
        }
        if let Some(i) = (0..n).find(|&i| !t[i].is_finite() || !y[i].is_finite() || x[i * p..(i + 1) * p].iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidInput(format!("non-finite entry in row {i}")));
        }
        Ok(Self { x, t, y, p })
    }

    /// Builds a dataset from per-row covariate vectors.
    pub fn from_rows(rows: &[Vec<f64>], t: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::InvalidInput("ragged covariate rows".into()));
        }
        Self::new(rows.concat(), p, t, y)
    }

    pub fn n(&self) -> usize {
        self.t.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Rows selected by `idx`, in that order (repeats allowed).
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut x = Vec::with_capacity(idx.len() * self.p);
        for &i in idx {
            x.extend_from_slice(self.x_row(i));
        }
        Dataset { x, t: idx.iter().map(|&i| self.t[i]).collect(), y: idx.iter().map(|&i| self.y[i]).collect(), p: self.p }
    }

    /// Covariates with the treatment appended as the last column.
    pub fn xt_row(&self, i: usize) -> Vec<f64> {
        let mut v = self.x_row(i).to_vec();
        v.push(self.t[i]);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    #[default]
    Epanechnikov,
    Gaussian,
}

impl KernelFamily {
    /// Unscaled kernel K(u).
    pub fn eval(self, u: f64) -> f64 {
        match self {
            KernelFamily::Epanechnikov => {
                if u.abs() <= 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
            KernelFamily::Gaussian => (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt(),
        }
    }
}

/// A kernel family together with a positive bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    family: KernelFamily,
    bandwidth: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidParameter(format!("bandwidth must be positive, got {bandwidth}")));
        }
        Ok(Self { family, bandwidth })
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// K_h(s) = K(s/h)/h.
    pub fn eval(&self, s: f64) -> f64 {
        self.family.eval(s / self.bandwidth) / self.bandwidth
    }
}

pub fn kernel_eval(spec: &KernelSpec, s: f64) -> f64 {
    spec.eval(s)
}

/// The sensitivity parameter Γ ≥ 1 and the derived tail level γ = Γ/(1+Γ).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sensitivity {
    big_gamma: f64,
    gamma: f64,
}

impl Sensitivity {
    pub fn from_big_gamma(big_gamma: f64) -> Result<Self> {
        if !(big_gamma >= 1.0 && big_gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!("Gamma must be a finite value >= 1, got {big_gamma}")));
        }
        Ok(Self { big_gamma, gamma: big_gamma / (1.0 + big_gamma) })
    }

    /// Γ.
    pub fn big_gamma(&self) -> f64 {
        self.big_gamma
    }

    /// γ = Γ/(1+Γ).
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// 1 − γ = 1/(1+Γ), computed without cancellation.
    pub fn one_minus_gamma(&self) -> f64 {
        1.0 / (1.0 + self.big_gamma)
    }

    /// (2γ−1)/γ = (Γ−1)/Γ, the tail-mean prefactor.
    pub fn tail_factor(&self) -> f64 {
        (self.big_gamma - 1.0) / self.big_gamma
    }

    /// Weight attached to an observation by the upper bound:
    /// Γ above the γ-quantile, Γ^{-1} at or below it.
    pub fn upper_weight(&self, y: f64, q_hi: f64) -> f64 {
        if self.big_gamma == 1.0 {
            1.0
        } else if y > q_hi {
            self.big_gamma
        } else {
            1.0 / self.big_gamma
        }
    }

    /// Weight attached by the lower bound: Γ strictly below the
    /// (1−γ)-quantile, Γ^{-1} at or above it.
    pub fn lower_weight(&self, y: f64, q_lo: f64) -> f64 {
        if self.big_gamma == 1.0 {
            1.0
        } else if y < q_lo {
            self.big_gamma
        } else {
            1.0 / self.big_gamma
        }
    }
}

pub fn sensitivity_from_gamma_big(big_gamma: f64) -> Result<Sensitivity> {
    Sensitivity::from_big_gamma(big_gamma)
}

/// Per-observation nuisance values aligned with a [`Dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceTable {
    /// f̂(T_i | X_i), already trimmed when trimming is in use.
    pub gps: Vec<f64>,
    /// η̂(T_i, X_i).
    pub eta_at_obs: Vec<f64>,
    /// q̂_{1−γ} at (X_i, T_i).
    pub q_lo: Vec<f64>,
    /// q̂_γ at (X_i, T_i).
    pub q_hi: Vec<f64>,
    /// η̂(τ, X_i) for the query τ.
    pub eta_at_tau: Vec<f64>,
}

impl NuisanceTable {
    pub fn n(&self) -> usize {
        self.gps.len()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let lens = [self.gps.len(), self.eta_at_obs.len(), self.q_lo.len(), self.q_hi.len(), self.eta_at_tau.len()];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::InvalidInput(format!("nuisance table lengths {lens:?} do not match n = {n}")));
        }
        if let Some(i) = self.gps.iter().position(|&g| !(g > 0.0 && g.is_finite())) {
            return Err(Error::InvalidInput(format!("GPS value at row {i} is not positive")));
        }
        Ok(())
    }

    /// Rows selected by `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> NuisanceTable {
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        NuisanceTable {
            gps: pick(&self.gps),
            eta_at_obs: pick(&self.eta_at_obs),
            q_lo: pick(&self.q_lo),
            q_hi: pick(&self.q_hi),
            eta_at_tau: pick(&self.eta_at_tau),
        }
    }
}

/// Bounds, confidence interval and bandwidths for one (τ, Γ) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundResult {
    pub tau: f64,
    pub gamma: f64,
    pub point: f64,
    pub pei_lo: f64,
    pub pei_hi: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub h_minus: f64,
    pub h_plus: f64,
    pub alpha: f64,
    pub b: usize,
}

/// Empirical quantile with linear interpolation between order statistics
/// (the "type 7" rule). `sorted` must be ascending and non-empty.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

/// Empirical quantile of unsorted data.
pub fn empirical_quantile(values: &[f64], prob: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("quantile of an empty sample".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&sorted, prob))
}

/// Order of the trimming quantile for small propensity values.
pub const GPS_TRIM_LEVEL: f64 = 0.1;

/// Floors GPS values at a threshold computed once from a reference sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpsTrimmer {
    threshold: f64,
}

impl GpsTrimmer {
    /// Threshold = empirical 0.1 quantile of `reference`.
    pub fn from_reference(reference: &[f64]) -> Result<Self> {
        if let Some(g) = reference.iter().find(|&&g| !(g > 0.0)) {
            return Err(Error::InvalidInput(format!("GPS values must be positive, found {g}")));
        }
        Ok(Self { threshold: empirical_quantile(reference, GPS_TRIM_LEVEL)? })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn apply(&self, gps: &[f64]) -> Vec<f64> {
        gps.iter().map(|&g| g.max(self.threshold)).collect()
    }
}

/// Raises every GPS value below the sample's 0.1 quantile to that quantile.
pub fn trim_gps(gps: &[f64]) -> Result<Vec<f64>> {
    Ok(GpsTrimmer::from_reference(gps)?.apply(gps))
}

/// `m` equally spaced treatment values between the empirical 0.05 and 0.95
/// quantiles of `t`. A single point sits at the midpoint.
pub fn tau_grid(t: &[f64], m: usize) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::InvalidParameter("tau grid needs m >= 1".into()));
    }
    if t.len() < 2 {
        return Err(Error::InvalidInput("tau grid needs at least two treatments".into()));
    }
    let mut sorted = t.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&sorted, 0.05);
    let hi = quantile_sorted(&sorted, 0.95);
    if m == 1 {
        return Ok(vec![0.5 * (lo + hi)]);
    }
    let step = (hi - lo) / (m - 1) as f64;
    Ok((0..m).map(|k| if k == m - 1 { hi } else { lo + step * k as f64 }).collect())
}

/// Centering and scaling parameters of one column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub mean: f64,
    pub sd: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine { mean: 0.0, sd: 1.0 };

    /// Sample mean and standard deviation (n−1 denominator); a zero spread
    /// is replaced by 1 so constant columns pass through centered.
    pub fn fit(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        let sd = var.sqrt();
        let sd = if sd > 1e-12 * mean.abs().max(1.0) { sd } else { 1.0 };
        Self { mean, sd }
    }

    pub fn forward(&self, v: f64) -> f64 {
        (v - self.mean) / self.sd
    }

    pub fn inverse(&self, v: f64) -> f64 {
        v * self.sd + self.mean
    }
}

/// Affine maps for every modeling column of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x: Vec<Affine>,
    pub t: Affine,
    pub y: Affine,
}

impl Standardizer {
    pub fn fit(data: &Dataset) -> Self {
        let p = data.p();
        let x = (0..p)
            .map(|j| {
                let col: Vec<f64> = (0..data.n()).map(|i| data.x_row(i)[j]).collect();
                Affine::fit(&col)
            })
            .collect();
        Self { x, t: Affine::fit(data.t()), y: Affine::fit(data.y()) }
    }

    pub fn identity(p: usize) -> Self {
        Self { x: vec![Affine::IDENTITY; p], t: Affine::IDENTITY, y: Affine::IDENTITY }
    }

    pub fn apply(&self, data: &Dataset) -> Dataset {
        let p = data.p();
        let x = data.x().iter().enumerate().map(|(k, &v)| self.x[k % p].forward(v)).collect();
        let t = data.t().iter().map(|&v| self.t.forward(v)).collect();
        let y = data.y().iter().map(|&v| self.y.forward(v)).collect();
        Dataset { x, t, y, p }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epanechnikov_values() {
        let k = KernelSpec::new(KernelFamily::Epanechnikov, 1.0).unwrap();
        assert_eq!(kernel_eval(&k, 0.0), 0.75);
        let k = KernelSpec::new(KernelFamily::Epanechnikov, 0.5).unwrap();
        assert_eq!(kernel_eval(&k, 0.6), 0.0);
    }

    #[test]
    fn gaussian_kernel_integrates_to_one() {
        // composite Simpson on [-8, 8]
        let k = KernelSpec::new(KernelFamily::Gaussian, 1.0).unwrap();
        let m = 4000;
        let (a, b) = (-8.0, 8.0);
        let h = (b - a) / m as f64;
        let mut s = k.eval(a) + k.eval(b);
        for i in 1..m {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * k.eval(a + h * i as f64);
        }
        assert!((s * h / 3.0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn bandwidth_must_be_positive() {
        assert!(KernelSpec::new(KernelFamily::Gaussian, 0.0).is_err());
        assert!(KernelSpec::new(KernelFamily::Gaussian, -1.0).is_err());
    }

    #[test]
    fn sensitivity_values() {
        assert_eq!(sensitivity_from_gamma_big(1.0).unwrap().gamma(), 0.5);
        assert_eq!(sensitivity_from_gamma_big(3.0).unwrap().gamma(), 0.75);
        let s = sensitivity_from_gamma_big(5.21).unwrap();
        assert!((s.gamma() - 0.838_970).abs() < 1e-6);
        assert!(sensitivity_from_gamma_big(0.99).is_err());
    }

    #[test]
    fn trim_examples() {
        let ones = vec![1.0; 10];
        assert_eq!(trim_gps(&ones).unwrap(), ones);

        let mut g = vec![1.0; 10];
        g[0] = 0.01;
        // type-7 quantile at 0.1 over 10 points: 0.01 + 0.9 * (1 - 0.01)
        let trimmed = trim_gps(&g).unwrap();
        assert!((trimmed[0] - 0.901).abs() < 1e-12);
        assert!(trimmed[1..].iter().all(|&v| v == 1.0));

        assert!(trim_gps(&[]).is_err());
    }

    #[test]
    fn trim_is_identity_above_threshold() {
        let g: Vec<f64> = (1..=20).map(|v| v as f64).collect();
        let trimmer = GpsTrimmer::from_reference(&g).unwrap();
        let above: Vec<f64> = g.iter().copied().filter(|&v| v >= trimmer.threshold()).collect();
        assert_eq!(trimmer.apply(&above), above);
    }

    #[test]
    fn tau_grid_examples() {
        let t: Vec<f64> = (0..=100).map(|v| v as f64).collect();
        let g = tau_grid(&t, 2).unwrap();
        assert!((g[0] - 5.0).abs() < 1e-12 && (g[1] - 95.0).abs() < 1e-12);
        assert!((tau_grid(&t, 1).unwrap()[0] - 50.0).abs() < 1e-12);
        assert_eq!(tau_grid(&[2.5; 7], 4).unwrap(), vec![2.5; 4]);
        assert!(tau_grid(&t, 0).is_err());
    }

    #[test]
    fn dataset_rejects_bad_shapes() {
        assert!(Dataset::new(vec![1.0, 2.0], 1, vec![0.0, 1.0], vec![0.0]).is_err());
        assert!(Dataset::new(vec![1.0], 1, vec![0.0], vec![0.0]).is_err());
        assert!(Dataset::new(vec![1.0, f64::NAN], 1, vec![0.0, 1.0], vec![0.0, 1.0]).is_err());
        assert!(Dataset::new(vec![], 0, vec![0.0, 1.0], vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn standardizer_round_trip() {
        let d = Dataset::from_rows(&[vec![1.0], vec![3.0], vec![5.0]], vec![2.0, 4.0, 9.0], vec![0.0, 1.0, 2.0]).unwrap();
        let s = Standardizer::fit(&d);
        let z = s.apply(&d);
        let m: f64 = z.t().iter().sum::<f64>() / 3.0;
        assert!(m.abs() < 1e-12);
        assert!((s.y.inverse(z.y()[2]) - 2.0).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn kernel_even_and_nonnegative(s in -5.0f64..5.0, h in 0.05f64..3.0, gauss in any::<bool>()) {
                let fam = if gauss { KernelFamily::Gaussian } else { KernelFamily::Epanechnikov };
                let k = KernelSpec::new(fam, h).unwrap();
                prop_assert!(k.eval(s) >= 0.0);
                prop_assert_eq!(k.eval(s), k.eval(-s));
            }

            #[test]
            fn gamma_monotone(a in 1.0f64..100.0, d in 1e-6f64..10.0) {
                let s1 = Sensitivity::from_big_gamma(a).unwrap();
                let s2 = Sensitivity::from_big_gamma(a + d).unwrap();
                prop_assert!(s1.gamma() < s2.gamma());
                prop_assert!(s1.gamma() >= 0.5 && s1.gamma() < 1.0);
            }

            #[test]
            fn weight_identities(g in 1.0f64..1e4) {
                let s = Sensitivity::from_big_gamma(g).unwrap();
                let gm = s.gamma();
                prop_assert!((g * s.one_minus_gamma() + gm / g - 1.0).abs() <= 4.0 * f64::EPSILON);
                prop_assert!((s.one_minus_gamma() - (1.0 - gm)).abs() <= 4.0 * f64::EPSILON);
                prop_assert!((s.tail_factor() - (2.0 * gm - 1.0) / gm).abs() <= 1e-12);
            }

            #[test]
            fn frozen_trim_idempotent(v in proptest::collection::vec(1e-4f64..10.0, 1..40)) {
                let trimmer = GpsTrimmer::from_reference(&v).unwrap();
                let once = trimmer.apply(&v);
                prop_assert_eq!(trimmer.apply(&once), once.clone());
                for (a, b) in v.iter().zip(&once) {
                    prop_assert!(b >= a);
                    if *a >= trimmer.threshold() { prop_assert_eq!(a, b); }
                }
            }
        }
    }
}
