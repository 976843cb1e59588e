//! Random-search hyperparameter tuning for the MDN: sample configurations,
//! score each by mean held-out NLL over several random 80/10/10 splits.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use super::mdn::{fit_on_split, MdnConfig, EXTRACTOR_CANDIDATES, HEAD_CANDIDATES};
use super::Target;
use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::rng::stream;

const TAG_SAMPLE: u64 = 0xf1e;
const TAG_SPLIT: u64 = 0xf1f;

/// Draws `m` configurations: learning rate on the 1e-4..1e-3 grid (step
/// 1e-4), 3..=30 components, layer widths from the candidate sets. Fields
/// not searched are copied from `base`.
pub fn sample_configs(base: &MdnConfig, m: usize, seed: u64) -> Vec<MdnConfig> {
    let mut rng = stream(seed, TAG_SAMPLE, 0);
    (0..m)
        .map(|_| {
            let mut c = base.clone();
            c.learning_rate = rng.random_range(1..=10) as f64 * 1e-4;
            c.components = rng.random_range(3..=30);
            c.extractor_hidden = [*EXTRACTOR_CANDIDATES.choose(&mut rng).unwrap(), *EXTRACTOR_CANDIDATES.choose(&mut rng).unwrap()];
            c.head_hidden = [*HEAD_CANDIDATES.choose(&mut rng).unwrap(), *HEAD_CANDIDATES.choose(&mut rng).unwrap()];
            c
        })
        .collect()
}

/// Mean test NLL of each candidate over `splits` random 80/10/10 splits
/// (`None` when training diverged on any split).
pub fn score_candidates(data: &Dataset, target: Target, candidates: &[MdnConfig], splits: usize, seed: u64) -> Result<Vec<Option<f64>>> {
    let n = data.n();
    if n < 30 {
        return Err(Error::InvalidInput(format!("fine-tuning needs at least 30 rows, got {n}")));
    }
    if splits == 0 {
        return Err(Error::InvalidParameter("fine-tuning needs at least one split".into()));
    }
    let (inputs, dim, y) = target.design(data);
    let partitions: Vec<(Vec<usize>, Vec<usize>, Vec<usize>)> = (0..splits)
        .map(|s| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut stream(seed, TAG_SPLIT, s as u64));
            let n_test = n / 10;
            let n_valid = n / 10;
            let test = idx.split_off(n - n_test);
            let valid = idx.split_off(n - n_test - n_valid);
            (idx, valid, test)
        })
        .collect();
    let mut scores = Vec::with_capacity(candidates.len());
    for cfg in candidates {
        cfg.validate()?;
        let mut total = 0.0;
        let mut ok = true;
        for (train, valid, test) in &partitions {
            match fit_on_split(&inputs, dim, &y, train, valid, cfg) {
                Ok((model, _)) => {
                    let tx = super::mdn::gather(&inputs, dim, test);
                    let ty: Vec<f64> = test.iter().map(|&i| y[i]).collect();
                    let nll = model.nll(&tx, &ty);
                    if !nll.is_finite() {
                        ok = false;
                        break;
                    }
                    total += nll;
                }
                Err(Error::TrainingDiverged { .. }) => {
                    ok = false;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        scores.push(ok.then(|| total / partitions.len() as f64));
    }
    Ok(scores)
}

/// Index of the smallest score; ties go to the earlier candidate.
pub fn best_index(scores: &[Option<f64>]) -> Result<usize> {
    scores
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.map(|v| (i, v)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .ok_or(Error::FineTuneFailed)
}

/// Random search over `m` sampled configurations scored on `n_splits`
/// random splits; returns the configuration with the lowest mean test NLL.
pub fn fine_tune(data: &Dataset, target: Target, base: &MdnConfig, m: usize, n_splits: usize, seed: u64) -> Result<MdnConfig> {
    if m == 0 {
        return Err(Error::InvalidParameter("fine-tuning needs at least one trial".into()));
    }
    let candidates = sample_configs(base, m, seed);
    let scores = score_candidates(data, target, &candidates, n_splits, seed)?;
    Ok(candidates[best_index(&scores)?].clone())
}
