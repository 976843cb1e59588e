use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Standard normal distribution function, accurate in both tails.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Density of N(mean, var) at `v`.
pub fn gaussian_pdf(v: f64, mean: f64, var: f64) -> f64 {
    let sd = var.sqrt();
    normal_pdf((v - mean) / sd) / sd
}

/// A finite Gaussian mixture Σ π_k N(μ_k, σ_k²), the conditional law of an
/// outcome (or treatment) at one query point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalGaussianMixture {
    weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
}

impl ConditionalGaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || variances.len() != k {
            return Err(Error::InvalidInput(format!(
                "mixture needs matching non-empty parameter vectors (got {}, {}, {})",
                k,
                means.len(),
                variances.len()
            )));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || ((weights.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput("mixture weights must be a probability vector".into()));
        }
        if variances.iter().any(|&v| !(v > 0.0 && v.is_finite())) || means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidInput("mixture variances must be positive and means finite".into()));
        }
        Ok(Self { weights, means, variances })
    }

    pub fn gaussian(mean: f64, var: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![var])
    }

    pub(crate) fn from_parts_unchecked(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>) -> Self {
        Self { weights, means, variances }
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn pdf(&self, v: f64) -> f64 {
        self.iter().map(|(w, m, s2)| w * gaussian_pdf(v, m, s2)).sum()
    }

    pub fn cdf(&self, v: f64) -> f64 {
        let c: f64 = self.iter().map(|(w, m, s2)| w * normal_cdf((v - m) / s2.sqrt())).sum();
        c.clamp(0.0, 1.0)
    }

    pub fn mean(&self) -> f64 {
        self.iter().map(|(w, m, _)| w * m).sum()
    }

    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        self.iter().map(|(w, m, s2)| w * (s2 + (m - mu).powi(2))).sum()
    }

    /// Draws one value: pick a component by weight, then sample it.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (j, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = j;
                break;
            }
        }
        let z: f64 = StandardNormal.sample(rng);
        self.means[k] + self.variances[k].sqrt() * z
    }

    /// Smallest component mean and largest component standard deviation
    /// span, used for integration ranges and root brackets.
    pub fn support_hint(&self) -> (f64, f64, f64) {
        let lo = self.means.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sd = self.variances.iter().copied().fold(0.0, f64::max).sqrt();
        (lo, hi, sd)
    }

    fn iter(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.weights.iter().zip(&self.means).zip(&self.variances).map(|((&w, &m), &s2)| (w, m, s2))
    }
}

pub fn mixture_pdf(m: &ConditionalGaussianMixture, v: f64) -> f64 {
    m.pdf(v)
}

pub fn mixture_cdf(m: &ConditionalGaussianMixture, v: f64) -> f64 {
    m.cdf(v)
}

pub fn mixture_mean(m: &ConditionalGaussianMixture) -> f64 {
    m.mean()
}
