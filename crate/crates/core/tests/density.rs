use cmsm_core::density::mdn::{fit_mdn, fit_target, refit_mdn, VARIANCE_FLOOR};
use cmsm_core::density::tune::sample_configs;
use cmsm_core::density::{fine_tune, fit_gps, fit_outcome_density, mixture_cdf, ConditionalDensity, MdnConfig, Target};
use cmsm_core::model::Dataset;
use cmsm_core::simulation::{generate, SimConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn small(components: usize, seed: u64) -> MdnConfig {
    MdnConfig { extractor_hidden: [16, 16], head_hidden: [16, 16], components, max_epochs: 400, seed, ..MdnConfig::default() }
}

fn normals(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// n rows with p covariates and treatment drawn i.i.d. standard normal.
fn design(n: usize, p: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (normals(n * p, &mut rng), normals(n, &mut rng))
}

#[test]
fn independent_outcome_recovers_standard_normal() {
    let (x, t) = design(5000, 2, 1);
    let y = normals(5000, &mut ChaCha8Rng::seed_from_u64(2));
    let data = Dataset::new(x, 2, t, y).unwrap();
    let (model, report) = fit_outcome_density(&data, &small(3, 3)).unwrap();
    assert!(report.epochs_run <= 400);
    for &a in &[-1.5, 0.0, 1.5] {
        for &b in &[-1.0, 0.5] {
            for &t in &[-1.0, 0.0, 1.0] {
                let m = model.query(&[a, b], Some(t));
                assert!(m.mean().abs() < 0.1, "mean {} at ({a},{b},{t})", m.mean());
                assert!((m.variance() - 1.0).abs() < 0.3, "variance {}", m.variance());
            }
        }
    }
}

#[test]
fn constant_outcome_engages_variance_floor() {
    let (x, t) = design(200, 2, 4);
    let data = Dataset::new(x, 2, t, vec![2.5; 200]).unwrap();
    let (model, _) = fit_outcome_density(&data, &small(3, 5)).unwrap();
    let m = model.query(&[0.3, -0.2], Some(1.0));
    assert!((m.mean() - 2.5).abs() < 1e-3);
    assert!(m.variance() <= 2.0 * VARIANCE_FLOOR);

    let gps = Dataset::new(data.x().to_vec(), 2, vec![-1.0; 200], data.y().to_vec()).unwrap();
    let (g, _) = fit_gps(&gps, &small(2, 6)).unwrap();
    assert!((g.query(&[1.0, 1.0], None).mean() + 1.0).abs() < 1e-3);
}

#[test]
fn single_component_reaches_gaussian_entropy() {
    let (x, t) = design(6000, 1, 7);
    let y: Vec<f64> = normals(6000, &mut ChaCha8Rng::seed_from_u64(8)).iter().map(|v| 0.5 + 2.0 * v).collect();
    let entropy = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * 4.0).ln();
    let data = Dataset::new(x[..5000].to_vec(), 1, t[..5000].to_vec(), y[..5000].to_vec()).unwrap();
    let (model, _) = fit_outcome_density(&data, &small(1, 9)).unwrap();
    let held: Vec<f64> = (5000..6000).flat_map(|i| [x[i], t[i]]).collect();
    let nll = model.nll(&held, &y[5000..]);
    assert!((nll - entropy).abs() < 0.05, "nll {nll} vs entropy {entropy}");
}

#[test]
fn gps_tracks_linear_mean() {
    let beta = [0.8, -0.5, 0.3];
    let (x, _) = design(4000, 3, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let t: Vec<f64> = (0..4000)
        .map(|i| beta.iter().zip(&x[i * 3..i * 3 + 3]).map(|(b, v)| b * v).sum::<f64>() + 0.5 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let data = Dataset::new(x, 3, t, vec![0.0; 4000]).unwrap();
    let (model, _) = fit_gps(&data, &small(3, 12)).unwrap();
    let grid = [-1.0, 0.0, 1.0];
    let mut err = 0.0;
    let mut count = 0.0;
    for &a in &grid {
        for &b in &grid {
            for &c in &grid {
                let truth = beta[0] * a + beta[1] * b + beta[2] * c;
                err += (model.query(&[a, b, c], None).mean() - truth).abs();
                count += 1.0;
            }
        }
    }
    assert!(err / count < 0.1, "mean absolute error {}", err / count);
}

#[test]
fn gps_without_signal_matches_marginal() {
    let (x, _) = design(3000, 2, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    // skewed marginal: a two-part mixture
    let t: Vec<f64> = (0..3000)
        .map(|_| if rng.random::<f64>() < 0.3 { 2.0 + 0.5 * rng.sample::<f64, _>(StandardNormal) } else { rng.sample(StandardNormal) })
        .collect();
    let mut sorted = t.clone();
    sorted.sort_by(f64::total_cmp);
    let data = Dataset::new(x, 2, t, vec![0.0; 3000]).unwrap();
    let (model, _) = fit_gps(&data, &small(4, 15)).unwrap();
    let m = model.query(&[0.2, -0.4], None);
    let n = sorted.len() as f64;
    let ks = sorted
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = mixture_cdf(&m, v);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.05, "KS distance {ks}");
}

#[test]
fn training_is_reproducible() {
    let cfg = SimConfig { n: 300, seed: 3, ..SimConfig::default() };
    let data = generate(&cfg).unwrap().dataset;
    let c = MdnConfig { max_epochs: 30, ..small(3, 21) };
    let (a, ra) = fit_outcome_density(&data, &c).unwrap();
    let (b, rb) = fit_outcome_density(&data, &c).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
}

#[test]
fn warm_start_is_cheaper_than_cold_start() {
    let cfg = SimConfig { n: 2000, seed: 5, ..SimConfig::default() };
    let sample = generate(&cfg).unwrap().dataset;
    let test = generate(&SimConfig { seed: 99, ..cfg.clone() }).unwrap().dataset;
    let (inputs, dim, y) = Target::Outcome.design(&sample);
    let (test_in, _, test_y) = Target::Outcome.design(&test);
    let conf = MdnConfig { max_epochs: 500, ..small(3, 31) };
    let (source, _) = fit_mdn(&inputs, dim, &y, &conf).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let idx: Vec<usize> = (0..y.len()).map(|_| rng.random_range(0..y.len())).collect();
    let rx: Vec<f64> = idx.iter().flat_map(|&i| inputs[i * dim..(i + 1) * dim].to_vec()).collect();
    let ry: Vec<f64> = idx.iter().map(|&i| y[i]).collect();

    let (cold, cold_report) = fit_mdn(&rx, dim, &ry, &MdnConfig { seed: 33, ..conf.clone() }).unwrap();
    let cap = (cold_report.epochs_run / 4).max(1);
    let (warm, warm_report) = refit_mdn(&source, &rx, &ry, cap, 33).unwrap();
    assert!(warm_report.epochs_run <= cap);
    let (c, w) = (cold.nll(&test_in, &test_y), warm.nll(&test_in, &test_y));
    assert!(w <= c + 0.05, "warm {w} vs cold {c} ({} cold epochs)", cold_report.epochs_run);

    let (same, _) = refit_mdn(&source, &inputs, &y, 0, 1).unwrap();
    assert_eq!(same.to_bytes().unwrap(), source.to_bytes().unwrap());
    let (again, _) = refit_mdn(&source, &rx, &ry, cap, 33).unwrap();
    assert_eq!(again.to_bytes().unwrap(), warm.to_bytes().unwrap());
}

#[test]
fn fine_tuned_config_beats_random_configs() {
    let base = MdnConfig { max_epochs: 60, ..MdnConfig::default() };
    let mut wins = 0;
    let trials = 5;
    for trial in 0..trials {
        let cfg = SimConfig { n: 500, seed: 100 + trial, ..SimConfig::default() };
        let data = generate(&cfg).unwrap().dataset;
        let held = generate(&SimConfig { seed: 200 + trial, ..cfg.clone() }).unwrap().dataset;
        let chosen = fine_tune(&data, Target::Outcome, &base, 4, 2, trial).unwrap();
        chosen.validate().unwrap();
        let rival = sample_configs(&base, 1, 1000 + trial).pop().unwrap();
        let (held_in, _, held_y) = Target::Outcome.design(&held);
        let score = |c: &MdnConfig| fit_target(&data, Target::Outcome, c).unwrap().0.nll(&held_in, &held_y);
        if score(&chosen) <= score(&rival) {
            wins += 1;
        }
    }
    assert!(wins * 5 >= trials * 4, "fine-tuned config won {wins} of {trials}");
}

#[test]
fn fine_tune_with_one_candidate_returns_it() {
    let data = generate(&SimConfig { n: 200, seed: 1, ..SimConfig::default() }).unwrap().dataset;
    let base = MdnConfig { max_epochs: 5, ..MdnConfig::default() };
    let only = sample_configs(&base, 1, 77).pop().unwrap();
    assert_eq!(fine_tune(&data, Target::Outcome, &base, 1, 2, 77).unwrap(), only);
}
