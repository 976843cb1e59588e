//! Conditional density models for the outcome f(y | x, t) and the
//! generalized propensity score f(t | x).

pub mod linear;
pub mod mdn;
pub mod mixture;
pub mod tune;

use serde::{Deserialize, Serialize};

use crate::model::Dataset;
pub use linear::LinearGaussian;
pub use mdn::{fit_gps, fit_outcome_density, warm_start_refit_gps, warm_start_refit_outcome, Mdn, MdnConfig};
pub use mixture::{mixture_cdf, mixture_mean, mixture_pdf, ConditionalGaussianMixture};
pub use tune::fine_tune;

/// Anything that returns a conditional Gaussian mixture at a query point.
/// Outcome models take `t = Some(..)`; GPS models ignore the treatment.
pub trait ConditionalDensity: Send + Sync {
    fn query(&self, x: &[f64], t: Option<f64>) -> ConditionalGaussianMixture;

    /// Mixtures at every row of `data`, with the treatment taken from `t`
    /// when given (one value per row).
    fn query_rows(&self, data: &Dataset, t: Option<&[f64]>) -> Vec<ConditionalGaussianMixture> {
        (0..data.n()).map(|i| self.query(data.x_row(i), t.map(|t| t[i]))).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub final_train_nll: f64,
    pub final_valid_nll: f64,
}

/// Which variable a density model describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// Y given (X, T).
    Outcome,
    /// T given X.
    Treatment,
}

impl Target {
    /// Row-major inputs, their width, and the target column.
    pub fn design(self, data: &Dataset) -> (Vec<f64>, usize, Vec<f64>) {
        match self {
            Target::Outcome => ((0..data.n()).flat_map(|i| data.xt_row(i)).collect(), data.p() + 1, data.y().to_vec()),
            Target::Treatment => (data.x().to_vec(), data.p(), data.t().to_vec()),
        }
    }
}
