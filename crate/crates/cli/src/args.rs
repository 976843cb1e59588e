use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

#[derive(Debug, Parser)]
#[command(name = "cmsm", version, about = "Sharp sensitivity bounds for continuous treatments", args_override_self = true)]
pub struct Cli {
    /// Worker threads (defaults to the available parallelism).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Generate a synthetic dataset with known dose-response.
    Simulate(SimulateArgs),
    /// Log-transform, trim high-leverage rows and standardize a CSV.
    Preprocess(PreprocessArgs),
    /// Bounds and confidence intervals over a (tau, Gamma) grid.
    Sensitivity(SensitivityArgs),
    /// Calibrate Gamma on the simulation design.
    CalibrateGamma(CalibrateArgs),
    /// Time the sharp method against the baseline for 2, 3 and 4 tau values.
    Benchmark(BenchmarkArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// TOML or JSON file with simulation parameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, env = "CMSM_SEED")]
    pub seed: Option<u64>,
    /// Rows drawn before trimming.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub no_trim: bool,
    #[arg(long, default_value_t = 0.1)]
    pub trim_fraction: f64,
    /// Also write the latent confounders of the kept rows here.
    #[arg(long)]
    pub latent: Option<PathBuf>,
    /// Points of the tau grid on which the true APO is recorded.
    #[arg(long, default_value_t = 15)]
    pub tau_count: usize,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    /// Columns to replace by their natural logarithm.
    #[arg(long, value_delimiter = ',')]
    pub log: Vec<String>,
    /// Share of rows with the largest hat values to drop.
    #[arg(long, default_value_t = 0.0)]
    pub trim_fraction: f64,
    #[arg(long)]
    pub no_standardize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Mdn,
    Linear,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FormKind {
    Sign,
    Subset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    Epanechnikov,
    Gaussian,
}

/// Every field is optional so a TOML file can supply it; flags win.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct SensitivityOpts {
    #[arg(long, short)]
    pub input: Option<PathBuf>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    #[arg(long, env = "CMSM_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Treatment values (data units).
    #[arg(long = "tau", value_delimiter = ',')]
    #[serde(rename = "tau")]
    pub taus: Option<Vec<f64>>,
    #[arg(long)]
    pub tau_count: Option<usize>,
    #[arg(long = "gamma", value_delimiter = ',')]
    #[serde(rename = "gamma")]
    pub gammas: Option<Vec<f64>>,
    /// Bootstrap resamples.
    #[arg(long = "bootstrap", short = 'b')]
    #[serde(rename = "bootstrap")]
    pub b: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Candidate bandwidths (standardized treatment units).
    #[arg(long, value_delimiter = ',')]
    pub bandwidths: Option<Vec<f64>>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub baseline: Option<bool>,
    #[arg(long)]
    pub mc_samples: Option<usize>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Simulation parameters for the oracle backend (a simulate sidecar works).
    #[arg(long)]
    pub oracle_config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub form: Option<FormKind>,
    #[arg(long, value_enum)]
    pub kernel: Option<KernelKind>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub unstabilized: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub shared_bandwidth: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub rebandwidth: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub doubly_robust: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub no_gps_trim: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub no_standardize: Option<bool>,
    #[arg(long)]
    pub refit_epochs: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub components: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Random-search trials for the MDN hyperparameters (0 = off).
    #[arg(long)]
    pub fine_tune_trials: Option<usize>,
    #[arg(long)]
    pub fine_tune_splits: Option<usize>,
    /// Write zeros in every timing field.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub omit_timings: Option<bool>,
}

#[derive(Debug, Args)]
pub struct SensitivityArgs {
    /// TOML file supplying any of the flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub opts: SensitivityOpts,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "CMSM_SEED")]
    pub seed: Option<u64>,
    /// Evaluate the ratios at fixed treatment values and report the largest
    /// calibrated Gamma over them, instead of at each row's own treatment.
    #[arg(long)]
    pub fixed_tau: bool,
    #[arg(long = "tau", value_delimiter = ',')]
    pub taus: Vec<f64>,
    /// Grid size used by --fixed-tau when no tau is given.
    #[arg(long, default_value_t = 15)]
    pub tau_count: usize,
    #[arg(long, default_value_t = 0.99)]
    pub p_gamma: f64,
    #[arg(long, default_value_t = 10_000)]
    pub n_cal: usize,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "CMSM_SEED")]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long = "bootstrap", short = 'b', default_value_t = 100)]
    pub b: usize,
    #[arg(long = "gamma", value_delimiter = ',', default_values_t = [2.0, 5.0])]
    pub gammas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 3, 4])]
    pub ms: Vec<usize>,
    #[arg(long, value_enum, default_value_t = BackendKind::Linear)]
    pub backend: BackendKind,
    #[arg(long, default_value_t = 500)]
    pub mc_samples: usize,
    /// Write zeros in every timing field.
    #[arg(long)]
    pub omit_timings: bool,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}
