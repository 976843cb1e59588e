use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cmsm_core::analysis::{run_analysis, run_benchmark, AnalysisConfig, AnalysisReport, BenchmarkEntry, FineTuneConfig, PhaseTimes};
use cmsm_core::baseline::BaselineConfig;
use cmsm_core::bootstrap::BootstrapConfig;
use cmsm_core::density::MdnConfig;
use cmsm_core::estimators::BoundForm;
use cmsm_core::model::{tau_grid, Affine, KernelFamily};
use cmsm_core::nuisance::Backend;
use cmsm_core::simulation::{calibrate_gamma, calibrate_gamma_observed, generate, remove_hat_outliers, true_apo, SimConfig};

use crate::args::*;
use crate::error::{CliError, CliResult};
use crate::table::Table;

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| CliError::io(path, e))
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Simulation parameters from TOML, plain JSON, or a simulate sidecar.
pub fn load_sim_config(path: &Path) -> CliResult<SimConfig> {
    let text = read_text(path)?;
    let bad = |e: String| CliError::Validation(format!("{}: {e}", path.display()));
    if path.extension().is_some_and(|e| e == "toml") {
        return toml::from_str(&text).map_err(|e| bad(e.to_string()));
    }
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let inner = v.get("config").cloned().unwrap_or(v);
    serde_json::from_value(inner).map_err(|e| bad(e.to_string()))
}

fn sim_config(path: Option<&PathBuf>, seed: Option<u64>) -> CliResult<SimConfig> {
    let mut cfg = match path {
        Some(p) => load_sim_config(p)?,
        None => SimConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthPoint {
    tau: f64,
    apo: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SimSidecar {
    config: SimConfig,
    n_generated: usize,
    n_rows: usize,
    trim_fraction: f64,
    rank_deficient: bool,
    kept_rows: Vec<usize>,
    latent_path: Option<PathBuf>,
    truth: Vec<TruthPoint>,
}

pub fn sidecar_path(out: &Path) -> PathBuf {
    out.with_extension("json")
}

pub fn simulate(a: &SimulateArgs) -> CliResult<()> {
    let mut cfg = sim_config(a.config.as_ref(), a.seed)?;
    if let Some(n) = a.n {
        cfg.n = n;
    }
    cfg.validate()?;
    let sample = generate(&cfg)?;
    let fraction = if a.no_trim { 0.0 } else { a.trim_fraction };
    let (data, kept, rank_deficient) = remove_hat_outliers(&sample.dataset, fraction)?;
    if rank_deficient {
        eprintln!("warning: design matrix is rank deficient; hat values use a pseudo-inverse");
    }
    Table::from_dataset(&data).write(&a.out)?;
    if let Some(lp) = &a.latent {
        let names = (1..=cfg.p_u).map(|j| format!("u{j}")).collect();
        let rows = kept.iter().map(|&i| sample.u_row(i).to_vec()).collect();
        Table { names, rows }.write(lp)?;
    }
    let truth = tau_grid(data.t(), a.tau_count)?
        .into_iter()
        .map(|tau| Ok(TruthPoint { tau, apo: true_apo(tau, &cfg)? }))
        .collect::<CliResult<Vec<_>>>()?;
    let side = SimSidecar {
        config: cfg.clone(),
        n_generated: cfg.n,
        n_rows: data.n(),
        trim_fraction: fraction,
        rank_deficient,
        kept_rows: kept,
        latent_path: a.latent.clone(),
        truth,
    };
    write_json(&sidecar_path(&a.out), &side)
}

#[derive(Debug, Serialize, Deserialize)]
struct ColumnMap {
    name: String,
    log: bool,
    mean: f64,
    sd: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct PreprocessSidecar {
    columns: Vec<ColumnMap>,
    n_in: usize,
    n_out: usize,
    trim_fraction: f64,
    rank_deficient: bool,
    kept_rows: Vec<usize>,
}

pub fn preprocess(a: &PreprocessArgs) -> CliResult<()> {
    let mut table = Table::read(&a.input)?;
    let n_in = table.rows.len();
    let mut logged = vec![false; table.names.len()];
    for name in &a.log {
        let c = table.column(name).ok_or_else(|| CliError::Validation(format!("log column {name:?} not found in header")))?;
        let bad: Vec<usize> = (0..n_in).filter(|&r| table.rows[r][c].is_nan() || table.rows[r][c] <= 0.0).map(|r| r + 1).collect();
        if !bad.is_empty() {
            let shown: Vec<String> = bad.iter().take(20).map(usize::to_string).collect();
            let more = if bad.len() > 20 { format!(" and {} more", bad.len() - 20) } else { String::new() };
            return Err(CliError::Validation(format!("cannot log column {name:?}: nonpositive values in rows {}{more}", shown.join(", "))));
        }
        for row in &mut table.rows {
            row[c] = row[c].ln();
        }
        logged[c] = true;
    }
    let data = table.to_dataset()?;
    let (kept, rank_deficient) = if a.trim_fraction > 0.0 {
        let (_, kept, rd) = remove_hat_outliers(&data, a.trim_fraction)?;
        (kept, rd)
    } else {
        ((0..n_in).collect(), false)
    };
    if rank_deficient {
        eprintln!("warning: design matrix is rank deficient; hat values use a pseudo-inverse");
    }
    table.rows = kept.iter().map(|&i| table.rows[i].clone()).collect();
    let mut columns = Vec::with_capacity(table.names.len());
    for c in 0..table.names.len() {
        let col: Vec<f64> = table.rows.iter().map(|r| r[c]).collect();
        let map = if a.no_standardize { Affine::IDENTITY } else { Affine::fit(&col) };
        for row in &mut table.rows {
            row[c] = map.forward(row[c]);
        }
        columns.push(ColumnMap { name: table.names[c].clone(), log: logged[c], mean: map.mean, sd: map.sd });
    }
    table.write(&a.out)?;
    let side =
        PreprocessSidecar { columns, n_in, n_out: table.rows.len(), trim_fraction: a.trim_fraction, rank_deficient, kept_rows: kept };
    write_json(&a.out.with_extension("affine.json"), &side)
}

macro_rules! merge {
    ($a:expr, $b:expr; $($f:ident),*) => {
        SensitivityOpts { $($f: $a.$f.or($b.$f)),* }
    };
}

fn merged(args: &SensitivityArgs) -> CliResult<SensitivityOpts> {
    let file = match &args.config {
        Some(p) => toml::from_str::<SensitivityOpts>(&read_text(p)?).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?,
        None => SensitivityOpts::default(),
    };
    let f = args.opts.clone();
    Ok(merge!(f, file; input, out, seed, folds, taus, tau_count, gammas, b, alpha, bandwidths, baseline,
        mc_samples, backend, oracle_config, form, kernel, unstabilized, shared_bandwidth, rebandwidth,
        doubly_robust, no_gps_trim, no_standardize, refit_epochs, max_epochs, components, learning_rate,
        fine_tune_trials, fine_tune_splits, omit_timings))
}

/// Analysis configuration from merged options (defaults fill the gaps).
pub fn analysis_config(o: &SensitivityOpts) -> CliResult<AnalysisConfig> {
    let d = AnalysisConfig::default();
    let mut mdn = MdnConfig::default();
    if let Some(e) = o.max_epochs {
        mdn.max_epochs = e;
    }
    if let Some(k) = o.components {
        mdn.components = k;
    }
    if let Some(lr) = o.learning_rate {
        mdn.learning_rate = lr;
    }
    let backend = match o.backend.unwrap_or(BackendKind::Mdn) {
        BackendKind::Mdn => Backend::Mdn { outcome: mdn.clone(), gps: mdn },
        BackendKind::Linear => Backend::LinearGaussian,
        BackendKind::Oracle => {
            let path = o.oracle_config.as_ref().ok_or_else(|| CliError::Validation("the oracle backend needs --oracle-config".into()))?;
            Backend::Oracle { config: load_sim_config(path)? }
        }
    };
    let flag = |v: Option<bool>| v.unwrap_or(false);
    let db = BootstrapConfig::default();
    let cfg = AnalysisConfig {
        taus: o.taus.clone().unwrap_or_default(),
        tau_count: o.tau_count.unwrap_or(d.tau_count),
        gammas: o.gammas.clone().unwrap_or(d.gammas),
        folds: o.folds.unwrap_or(d.folds),
        seed: o.seed.unwrap_or(0),
        settings: cmsm_core::bootstrap::BoundSettings {
            kernel: match o.kernel {
                Some(KernelKind::Gaussian) => KernelFamily::Gaussian,
                Some(KernelKind::Epanechnikov) => KernelFamily::Epanechnikov,
                None => d.settings.kernel,
            },
            form: match o.form {
                Some(FormKind::Subset) => BoundForm::Subset,
                _ => BoundForm::Sign,
            },
            stabilized: !flag(o.unstabilized),
        },
        bootstrap: BootstrapConfig {
            b: o.b.unwrap_or(db.b),
            alpha: o.alpha.unwrap_or(db.alpha),
            bandwidth_grid: o.bandwidths.clone().unwrap_or(db.bandwidth_grid),
            seed: 0,
            refit_epochs_cap: o.refit_epochs.unwrap_or(db.refit_epochs_cap),
        },
        baseline: flag(o.baseline).then(|| BaselineConfig { mc_samples: o.mc_samples.unwrap_or(500), ..Default::default() }),
        doubly_robust: flag(o.doubly_robust),
        shared_bandwidth: flag(o.shared_bandwidth),
        rebandwidth: flag(o.rebandwidth),
        trim: !flag(o.no_gps_trim),
        standardize: !flag(o.no_standardize),
        backend,
        fine_tune: match o.fine_tune_trials {
            Some(t) if t > 0 => Some(FineTuneConfig { trials: t, splits: o.fine_tune_splits.unwrap_or(3) }),
            _ => None,
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

fn zero_timings(r: &mut AnalysisReport) {
    r.phases = PhaseTimes::default();
    for rec in &mut r.records {
        rec.seconds = 0.0;
    }
}

pub fn sensitivity(args: &SensitivityArgs) -> CliResult<()> {
    let o = merged(args)?;
    let input = o.input.clone().ok_or_else(|| CliError::Validation("missing --input".into()))?;
    let out = o.out.clone().ok_or_else(|| CliError::Validation("missing --out".into()))?;
    let cfg = analysis_config(&o)?;
    let data = Table::read(&input)?.to_dataset()?;
    let mut report = run_analysis(&data, &cfg)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if o.omit_timings.unwrap_or(false) {
        zero_timings(&mut report);
    }
    write_json(&out, &report)
}

#[derive(Debug, Serialize, Deserialize)]
struct CalibrationPoint {
    tau: f64,
    gamma: f64,
}

#[derive(Debug, Serialize)]
struct CalibrationReport {
    gamma: f64,
    at: &'static str,
    p_gamma: f64,
    n_cal: usize,
    per_tau: Vec<CalibrationPoint>,
    config: SimConfig,
}

pub fn calibrate(a: &CalibrateArgs) -> CliResult<()> {
    let mut cfg = sim_config(a.config.as_ref(), a.seed)?;
    if let Some(l) = a.lambda {
        cfg.lambda = l;
        cfg.validate()?;
    }
    let (gamma, at, per_tau) = if a.fixed_tau {
        let taus = if a.taus.is_empty() { tau_grid(generate(&cfg)?.dataset.t(), a.tau_count)? } else { a.taus.clone() };
        let per_tau = taus
            .iter()
            .map(|&tau| Ok(CalibrationPoint { tau, gamma: calibrate_gamma(&cfg, tau, a.p_gamma, a.n_cal)? }))
            .collect::<CliResult<Vec<_>>>()?;
        (per_tau.iter().map(|p| p.gamma).fold(1.0, f64::max), "fixed", per_tau)
    } else {
        (calibrate_gamma_observed(&cfg, a.p_gamma, a.n_cal)?, "observed", Vec::new())
    };
    println!("{gamma}");
    if let Some(out) = &a.out {
        write_json(out, &CalibrationReport { gamma, at, p_gamma: a.p_gamma, n_cal: a.n_cal, per_tau, config: cfg })?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub n_rows: usize,
    pub gammas: Vec<f64>,
    pub b: usize,
    pub entries: Vec<BenchmarkEntry>,
}

pub fn benchmark(a: &BenchmarkArgs) -> CliResult<()> {
    let mut cfg = sim_config(a.config.as_ref(), a.seed)?;
    cfg.n = a.n;
    let sample = generate(&cfg)?;
    let (data, _, _) = remove_hat_outliers(&sample.dataset, 0.1)?;
    let backend = match a.backend {
        BackendKind::Mdn => Backend::default(),
        BackendKind::Linear => Backend::LinearGaussian,
        BackendKind::Oracle => Backend::Oracle { config: cfg.clone() },
    };
    let base = AnalysisConfig {
        gammas: a.gammas.clone(),
        seed: cfg.seed,
        bootstrap: BootstrapConfig { b: a.b, ..Default::default() },
        baseline: Some(BaselineConfig { mc_samples: a.mc_samples, ..Default::default() }),
        backend,
        ..Default::default()
    };
    let mut entries = run_benchmark(&data, &base, &a.ms)?;
    for e in &entries {
        eprintln!("{:>8?} m={} {:.3}s", e.method, e.m, e.seconds);
    }
    if a.omit_timings {
        for e in &mut entries {
            e.seconds = 0.0;
            e.phases = PhaseTimes::default();
        }
    }
    let report = BenchmarkReport { n_rows: data.n(), gammas: a.gammas.clone(), b: a.b, entries };
    match &a.out {
        Some(p) => write_json(p, &report),
        None => {
            println!("{}", serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?);
            Ok(())
        }
    }
}
