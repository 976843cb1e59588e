use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::mdn::VARIANCE_FLOOR;
use super::mixture::ConditionalGaussianMixture;
use super::{ConditionalDensity, Target};
use crate::error::{Error, Result};
use crate::model::Dataset;

/// Single Gaussian with mean linear in the inputs and constant variance,
/// fitted by least squares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussian {
    /// Intercept followed by one slope per input.
    coef: Vec<f64>,
    variance: f64,
}

impl LinearGaussian {
    /// Least-squares fit of `targets` on `[1, inputs]`. The residual variance
    /// uses the n − (d + 1) denominator when it is positive.
    pub fn fit(inputs: &[f64], dim: usize, targets: &[f64]) -> Result<Self> {
        let n = targets.len();
        if n == 0 || inputs.len() != n * dim {
            return Err(Error::InvalidInput("linear model inputs do not match targets".into()));
        }
        let design = DMatrix::from_fn(n, dim + 1, |i, j| if j == 0 { 1.0 } else { inputs[i * dim + j - 1] });
        let y = DVector::from_column_slice(targets);
        let svd = design.clone().svd(true, true);
        let coef = svd.solve(&y, 1e-12).map_err(|e| Error::Numeric(format!("least squares failed: {e}")))?;
        let resid = &y - &design * &coef;
        let dof = if n > dim + 1 { n - dim - 1 } else { n };
        let variance = (resid.norm_squared() / dof as f64).max(VARIANCE_FLOOR);
        Ok(Self { coef: coef.iter().copied().collect(), variance })
    }

    pub fn fit_target(data: &Dataset, target: Target) -> Result<Self> {
        let (inputs, dim, y) = target.design(data);
        Self::fit(&inputs, dim, &y)
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coef
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn mean_at(&self, input: &[f64]) -> f64 {
        self.coef[0] + self.coef[1..].iter().zip(input).map(|(b, v)| b * v).sum::<f64>()
    }
}

impl ConditionalDensity for LinearGaussian {
    fn query(&self, x: &[f64], t: Option<f64>) -> ConditionalGaussianMixture {
        let mut mean = self.mean_at(x);
        if let Some(t) = t {
            mean += self.coef[x.len() + 1] * t;
        }
        ConditionalGaussianMixture::from_parts_unchecked(vec![1.0], vec![mean], vec![self.variance])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, d) = (200, 3);
        let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..n).map(|i| 0.5 + x[i * d] - 2.0 * x[i * d + 1] + 0.3 * x[i * d + 2] + rng.random_range(-0.5..0.5)).collect();
        let fit = LinearGaussian::fit(&x, d, &y).unwrap();

        // independent route: (AᵀA) b = Aᵀy solved by Gaussian elimination
        let k = d + 1;
        let mut ata = vec![vec![0.0; k + 1]; k];
        for i in 0..n {
            let row: Vec<f64> = std::iter::once(1.0).chain(x[i * d..(i + 1) * d].iter().copied()).collect();
            for a in 0..k {
                for b in 0..k {
                    ata[a][b] += row[a] * row[b];
                }
                ata[a][k] += row[a] * y[i];
            }
        }
        for c in 0..k {
            let piv = ata[c][c];
            for r in 0..k {
                if r != c {
                    let f = ata[r][c] / piv;
                    for j in c..=k {
                        ata[r][j] -= f * ata[c][j];
                    }
                }
            }
        }
        for c in 0..k {
            assert!((fit.coefficients()[c] - ata[c][k] / ata[c][c]).abs() < 1e-6);
        }
    }

    #[test]
    fn exact_on_noiseless_linear_data() {
        let x: Vec<f64> = (0..50).map(|i| i as f64 / 10.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.0 - 3.0 * v).collect();
        let fit = LinearGaussian::fit(&x, 1, &y).unwrap();
        assert!((fit.coefficients()[0] - 1.0).abs() < 1e-10);
        assert!((fit.coefficients()[1] + 3.0).abs() < 1e-10);
        assert_eq!(fit.variance(), VARIANCE_FLOOR);
        let m = fit.query(&[2.0], None);
        assert!((m.mean() + 5.0).abs() < 1e-9);
    }
}
