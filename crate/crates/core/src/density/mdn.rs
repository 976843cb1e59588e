//! Mixture density network with a fixed architecture: a two-layer feature
//! extractor and a two-layer density head (each layer Linear → LeakyReLU →
//! Dropout) feeding three parallel linear heads for mixture logits, means and
//! variances. Gradients are derived by hand for this graph; training uses Adam
//! on the mean negative log-likelihood with early stopping on a validation
//! split.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mixture::ConditionalGaussianMixture;
use super::{ConditionalDensity, Target, TrainReport};
use crate::error::{Error, Result};
use crate::model::{Affine, Dataset};
use crate::rng::derive_seed;

/// Extractor layer widths the fine-tuner samples from.
pub const EXTRACTOR_CANDIDATES: [usize; 4] = [8, 16, 32, 64];
/// Density-head layer widths the fine-tuner samples from.
pub const HEAD_CANDIDATES: [usize; 4] = [16, 32, 64, 128];
/// Floor added to every component variance (standardized target units).
pub const VARIANCE_FLOOR: f64 = 1e-6;
/// Largest sample trained full-batch when no batch size is configured.
pub const FULL_BATCH_LIMIT: usize = 2048;
const DEFAULT_BATCH: usize = 256;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

const FORMAT_TAG: &str = "cmsm-mdn";
const FORMAT_VERSION: u32 = 1;
const BINARY_MAGIC: &[u8; 8] = b"CMSMMDN\0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdnConfig {
    pub extractor_hidden: [usize; 2],
    pub head_hidden: [usize; 2],
    pub components: usize,
    pub learning_rate: f64,
    pub leaky_slope: f64,
    pub dropout_p: f64,
    pub patience_epochs: usize,
    pub max_epochs: usize,
    /// `None` trains full-batch up to [`FULL_BATCH_LIMIT`] rows.
    #[serde(default)]
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for MdnConfig {
    fn default() -> Self {
        Self {
            extractor_hidden: [32, 32],
            head_hidden: [64, 64],
            components: 5,
            learning_rate: 1e-3,
            leaky_slope: 0.04,
            dropout_p: 0.04,
            patience_epochs: 5,
            max_epochs: 500,
            batch_size: None,
            seed: 0,
        }
    }
}

impl MdnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if let Some(h) = self.extractor_hidden.iter().find(|h| !EXTRACTOR_CANDIDATES.contains(h)) {
            return bad(format!("extractor width {h} not in {EXTRACTOR_CANDIDATES:?}"));
        }
        if let Some(h) = self.head_hidden.iter().find(|h| !HEAD_CANDIDATES.contains(h)) {
            return bad(format!("head width {h} not in {HEAD_CANDIDATES:?}"));
        }
        if !(1..=30).contains(&self.components) {
            return bad(format!("component count {} outside [1, 30]", self.components));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.dropout_p) || !(self.leaky_slope >= 0.0) {
            return bad("dropout must lie in [0, 1) and the leaky slope be nonnegative".into());
        }
        if self.patience_epochs == 0 || self.max_epochs == 0 || self.batch_size == Some(0) {
            return bad("patience, max_epochs and batch size must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Layer {
    n_in: usize,
    n_out: usize,
    offset: usize,
}

impl Layer {
    fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.n_in * self.n_out]
    }

    fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        let b = self.offset + self.n_in * self.n_out;
        &params[b..b + self.n_out]
    }

    fn len(&self) -> usize {
        self.n_out * (self.n_in + 1)
    }

    /// out[r, o] = Σ_i in[r, i] W[o, i] + b[o]
    fn forward(&self, params: &[f64], input: &[f64], rows: usize) -> Vec<f64> {
        let w = self.weights(params);
        let b = self.bias(params);
        let mut out = vec![0.0; rows * self.n_out];
        for r in 0..rows {
            let x = &input[r * self.n_in..(r + 1) * self.n_in];
            for o in 0..self.n_out {
                let wo = &w[o * self.n_in..(o + 1) * self.n_in];
                out[r * self.n_out + o] = b[o] + x.iter().zip(wo).map(|(a, c)| a * c).sum::<f64>();
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns d(input).
    fn backward(&self, params: &[f64], input: &[f64], d_out: &[f64], rows: usize, grad: &mut [f64], need_input: bool) -> Vec<f64> {
        let w = self.weights(params);
        let (gw, gb) = grad[self.offset..self.offset + self.len()].split_at_mut(self.n_in * self.n_out);
        let mut d_in = if need_input { vec![0.0; rows * self.n_in] } else { Vec::new() };
        for r in 0..rows {
            let x = &input[r * self.n_in..(r + 1) * self.n_in];
            for o in 0..self.n_out {
                let g = d_out[r * self.n_out + o];
                if g == 0.0 {
                    continue;
                }
                gb[o] += g;
                let gwo = &mut gw[o * self.n_in..(o + 1) * self.n_in];
                for (acc, xi) in gwo.iter_mut().zip(x) {
                    *acc += g * xi;
                }
                if need_input {
                    let wo = &w[o * self.n_in..(o + 1) * self.n_in];
                    let di = &mut d_in[r * self.n_in..(r + 1) * self.n_in];
                    for (acc, wi) in di.iter_mut().zip(wo) {
                        *acc += g * wi;
                    }
                }
            }
        }
        d_in
    }
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

const N_HIDDEN: usize = 4;
const PI_HEAD: usize = 4;
const MU_HEAD: usize = 5;
const VAR_HEAD: usize = 6;

/// Intermediate values kept for backpropagation.
struct Trace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    masks: Vec<Vec<f64>>,
    features: Vec<f64>,
    logits: Vec<f64>,
    means: Vec<f64>,
    var_pre: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mdn {
    config: MdnConfig,
    input_dim: usize,
    layers: Vec<Layer>,
    params: Vec<f64>,
    input_scaler: Vec<Affine>,
    target_scaler: Affine,
}

impl Mdn {
    /// Fresh network with PyTorch-style uniform(±1/√fan_in) initialization.
    pub fn new(config: MdnConfig, input_scaler: Vec<Affine>, target_scaler: Affine) -> Result<Self> {
        config.validate()?;
        let input_dim = input_scaler.len();
        if input_dim == 0 {
            return Err(Error::InvalidInput("MDN needs at least one input".into()));
        }
        let widths = [input_dim, config.extractor_hidden[0], config.extractor_hidden[1], config.head_hidden[0], config.head_hidden[1]];
        let mut layers = Vec::with_capacity(N_HIDDEN + 3);
        let mut offset = 0;
        for pair in widths.windows(2) {
            let l = Layer { n_in: pair[0], n_out: pair[1], offset };
            offset += l.len();
            layers.push(l);
        }
        for _ in 0..3 {
            let l = Layer { n_in: widths[N_HIDDEN], n_out: config.components, offset };
            offset += l.len();
            layers.push(l);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x1417, 0));
        let mut params = vec![0.0; offset];
        for l in &layers {
            let bound = 1.0 / (l.n_in as f64).sqrt();
            for v in &mut params[l.offset..l.offset + l.len()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(Self { config, input_dim, layers, params, input_scaler, target_scaler })
    }

    /// Point mass at `c`: every component predicts `c` with the floor
    /// variance, whatever the input.
    fn collapse_to_constant(&mut self, c: f64) {
        let level = self.target_scaler.forward(c);
        for (head, bias) in [(MU_HEAD, level), (VAR_HEAD, -50.0)] {
            let l = self.layers[head];
            let w = l.offset + l.n_in * l.n_out;
            self.params[l.offset..w].fill(0.0);
            self.params[w..w + l.n_out].fill(bias);
        }
    }

    pub fn config(&self) -> &MdnConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    fn scale_inputs(&self, inputs: &[f64]) -> Vec<f64> {
        inputs.iter().enumerate().map(|(k, &v)| self.input_scaler[k % self.input_dim].forward(v)).collect()
    }

    fn forward(&self, x: &[f64], rows: usize, dropout: Option<&mut ChaCha8Rng>) -> Trace {
        let slope = self.config.leaky_slope;
        let keep = 1.0 - self.config.dropout_p;
        let mut rng = dropout;
        let mut inputs = Vec::with_capacity(N_HIDDEN);
        let mut pre = Vec::with_capacity(N_HIDDEN);
        let mut masks = Vec::with_capacity(N_HIDDEN);
        let mut a = x.to_vec();
        for l in &self.layers[..N_HIDDEN] {
            let z = l.forward(&self.params, &a, rows);
            let mut act: Vec<f64> = z.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
            let mask = match rng.as_deref_mut() {
                Some(r) if self.config.dropout_p > 0.0 => {
                    let m: Vec<f64> = (0..act.len()).map(|_| if r.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
                    act.iter_mut().zip(&m).for_each(|(v, s)| *v *= s);
                    m
                }
                _ => Vec::new(),
            };
            inputs.push(std::mem::replace(&mut a, act));
            pre.push(z);
            masks.push(mask);
        }
        let logits = self.layers[PI_HEAD].forward(&self.params, &a, rows);
        let means = self.layers[MU_HEAD].forward(&self.params, &a, rows);
        let var_pre = self.layers[VAR_HEAD].forward(&self.params, &a, rows);
        Trace { inputs, pre, masks, features: a, logits, means, var_pre }
    }

    /// Per-row NLL (standardized units) and, optionally, d(loss)/d(head outputs).
    fn head_loss(&self, tr: &Trace, y: &[f64], grads: Option<(&mut [f64], &mut [f64], &mut [f64])>) -> Vec<f64> {
        let k = self.config.components;
        let rows = y.len();
        let scale = 1.0 / rows as f64;
        let mut out = Vec::with_capacity(rows);
        let mut grads = grads;
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let mut lp = vec![0.0; k];
        let mut s2 = vec![0.0; k];
        for r in 0..rows {
            let a = &tr.logits[r * k..(r + 1) * k];
            let mu = &tr.means[r * k..(r + 1) * k];
            let zv = &tr.var_pre[r * k..(r + 1) * k];
            let amax = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse_a = amax + a.iter().map(|v| (v - amax).exp()).sum::<f64>().ln();
            for j in 0..k {
                s2[j] = softplus(zv[j]) + VARIANCE_FLOOR;
                let d = y[r] - mu[j];
                lp[j] = a[j] - lse_a - half_ln_2pi - 0.5 * s2[j].ln() - 0.5 * d * d / s2[j];
            }
            let lmax = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = lmax + lp.iter().map(|v| (v - lmax).exp()).sum::<f64>().ln();
            out.push(-lse);
            if let Some((ga, gm, gv)) = grads.as_mut() {
                for j in 0..k {
                    let resp = (lp[j] - lse).exp();
                    let pi = (a[j] - lse_a).exp();
                    let d = y[r] - mu[j];
                    ga[r * k + j] = scale * (pi - resp);
                    gm[r * k + j] = -scale * resp * d / s2[j];
                    let ds2 = resp * (0.5 / s2[j] - 0.5 * d * d / (s2[j] * s2[j]));
                    gv[r * k + j] = scale * ds2 * sigmoid(zv[j]);
                }
            }
        }
        out
    }

    /// Mean NLL gradient over one batch (scaled inputs/targets).
    fn gradient(&self, x: &[f64], y: &[f64], rng: &mut ChaCha8Rng) -> (f64, Vec<f64>) {
        let rows = y.len();
        let k = self.config.components;
        let tr = self.forward(x, rows, Some(rng));
        let mut ga = vec![0.0; rows * k];
        let mut gm = vec![0.0; rows * k];
        let mut gv = vec![0.0; rows * k];
        let nll = self.head_loss(&tr, y, Some((&mut ga, &mut gm, &mut gv)));
        let loss = nll.iter().sum::<f64>() / rows as f64;

        let mut grad = vec![0.0; self.params.len()];
        let mut d_feat = self.layers[PI_HEAD].backward(&self.params, &tr.features, &ga, rows, &mut grad, true);
        for (head, g) in [(MU_HEAD, &gm), (VAR_HEAD, &gv)] {
            let d = self.layers[head].backward(&self.params, &tr.features, g, rows, &mut grad, true);
            d_feat.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
        }
        let slope = self.config.leaky_slope;
        let mut d_act = d_feat;
        for l in (0..N_HIDDEN).rev() {
            let mask = &tr.masks[l];
            let z = &tr.pre[l];
            for (idx, g) in d_act.iter_mut().enumerate() {
                if !mask.is_empty() {
                    *g *= mask[idx];
                }
                if z[idx] <= 0.0 {
                    *g *= slope;
                }
            }
            d_act = self.layers[l].backward(&self.params, &tr.inputs[l], &d_act, rows, &mut grad, l > 0);
        }
        (loss, grad)
    }

    fn mixture_from_heads(&self, tr: &Trace, r: usize) -> ConditionalGaussianMixture {
        let k = self.config.components;
        let a = &tr.logits[r * k..(r + 1) * k];
        let amax = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = a.iter().map(|v| (v - amax).exp()).collect();
        let tot: f64 = e.iter().sum();
        let ts = self.target_scaler;
        let weights = e.iter().map(|v| v / tot).collect();
        let means = tr.means[r * k..(r + 1) * k].iter().map(|&m| ts.inverse(m)).collect();
        let variances = tr.var_pre[r * k..(r + 1) * k].iter().map(|&z| (softplus(z) + VARIANCE_FLOOR) * ts.sd * ts.sd).collect();
        ConditionalGaussianMixture::from_parts_unchecked(weights, means, variances)
    }

    /// Conditional mixtures for a batch of raw input rows (evaluation mode).
    pub fn predict_batch(&self, inputs: &[f64]) -> Vec<ConditionalGaussianMixture> {
        let rows = inputs.len() / self.input_dim;
        let tr = self.forward(&self.scale_inputs(inputs), rows, None);
        (0..rows).map(|r| self.mixture_from_heads(&tr, r)).collect()
    }

    pub fn predict(&self, input: &[f64]) -> ConditionalGaussianMixture {
        self.predict_batch(input).pop().expect("one row")
    }

    /// Mean negative log-likelihood in original target units.
    pub fn nll(&self, inputs: &[f64], targets: &[f64]) -> f64 {
        let rows = targets.len();
        let tr = self.forward(&self.scale_inputs(inputs), rows, None);
        let y: Vec<f64> = targets.iter().map(|&v| self.target_scaler.forward(v)).collect();
        let nll = self.head_loss(&tr, &y, None);
        nll.iter().sum::<f64>() / rows as f64 + self.target_scaler.sd.ln()
    }

    /// Trains in place with early stopping on the validation rows, keeping the
    /// parameters with the best validation loss seen. `max_epochs = 0` leaves
    /// the model untouched.
    pub fn train(&mut self, train: (&[f64], &[f64]), valid: (&[f64], &[f64]), max_epochs: usize, seed: u64) -> Result<TrainReport> {
        let (tx, ty) = train;
        let (vx, vy) = valid;
        if tx.len() != ty.len() * self.input_dim || vx.len() != vy.len() * self.input_dim || ty.is_empty() {
            return Err(Error::InvalidInput("training arrays have inconsistent shapes".into()));
        }
        let d = self.input_dim;
        let sx = self.scale_inputs(tx);
        let sy: Vec<f64> = ty.iter().map(|&v| self.target_scaler.forward(v)).collect();
        let n = sy.len();
        let batch = self.config.batch_size.unwrap_or(if n <= FULL_BATCH_LIMIT { n } else { DEFAULT_BATCH }).min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7247, 0));
        let mut m1 = vec![0.0; self.params.len()];
        let mut m2 = vec![0.0; self.params.len()];
        let mut step = 0i32;
        let mut order: Vec<usize> = (0..n).collect();
        let mut history: Vec<f64> = Vec::new();
        let eval_valid = |m: &Mdn| if vy.is_empty() { m.nll(tx, ty) } else { m.nll(vx, vy) };
        let mut best = (eval_valid(self), self.params.clone());
        let patience = self.config.patience_epochs;
        let mut epochs_run = 0;

        for epoch in 1..=max_epochs {
            if batch < n {
                order.shuffle(&mut rng);
            }
            for chunk in order.chunks(batch) {
                let (bx, by): (Vec<f64>, Vec<f64>) = if batch == n {
                    (sx.clone(), sy.clone())
                } else {
                    let mut bx = Vec::with_capacity(chunk.len() * d);
                    for &i in chunk {
                        bx.extend_from_slice(&sx[i * d..(i + 1) * d]);
                    }
                    (bx, chunk.iter().map(|&i| sy[i]).collect())
                };
                let (loss, grad) = self.gradient(&bx, &by, &mut rng);
                if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::TrainingDiverged { epoch });
                }
                step += 1;
                let lr = self.config.learning_rate;
                let c1 = 1.0 - ADAM_BETA1.powi(step);
                let c2 = 1.0 - ADAM_BETA2.powi(step);
                for (((p, g), a), b) in self.params.iter_mut().zip(&grad).zip(&mut m1).zip(&mut m2) {
                    *a = ADAM_BETA1 * *a + (1.0 - ADAM_BETA1) * g;
                    *b = ADAM_BETA2 * *b + (1.0 - ADAM_BETA2) * g * g;
                    *p -= lr * (*a / c1) / ((*b / c2).sqrt() + ADAM_EPS);
                }
            }
            epochs_run = epoch;
            let v = eval_valid(self);
            if !v.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            if v < best.0 {
                best = (v, self.params.clone());
            }
            history.push(v);
            // stop once the mean of the last `patience` losses exceeds the
            // mean of the `patience` losses before them
            let h = history.len();
            if h >= 2 * patience {
                let recent: f64 = history[h - patience..].iter().sum();
                let earlier: f64 = history[h - 2 * patience..h - patience].iter().sum();
                if recent > earlier {
                    break;
                }
            }
        }
        if epochs_run > 0 {
            self.params = best.1;
        }
        Ok(TrainReport { epochs_run, final_train_nll: self.nll(tx, ty), final_valid_nll: eval_valid(self) })
    }

    fn header(&self) -> ModelHeader {
        ModelHeader {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            config: self.config.clone(),
            input_scaler: self.input_scaler.clone(),
            target_scaler: self.target_scaler,
            layers: self.layers.iter().map(|l| [l.n_out, l.n_in]).collect(),
        }
    }

    fn from_header(h: ModelHeader, params: Vec<f64>) -> Result<Self> {
        if h.format != FORMAT_TAG || h.version != FORMAT_VERSION {
            return Err(Error::Serialization(format!("unsupported model format {} v{}", h.format, h.version)));
        }
        let model = Mdn::new(h.config, h.input_scaler, h.target_scaler)?;
        let shapes: Vec<[usize; 2]> = model.layers.iter().map(|l| [l.n_out, l.n_in]).collect();
        if shapes != h.layers || params.len() != model.params.len() {
            return Err(Error::Serialization("layer shapes do not match the configuration".into()));
        }
        Ok(Self { params, ..model })
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDocument { header: self.header(), params: self.params.clone() };
        serde_json::to_string(&doc).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(s).map_err(|e| Error::Serialization(e.to_string()))?;
        Self::from_header(doc.header, doc.params)
    }

    /// Binary layout: magic, u32 version, u32 header length, JSON header,
    /// u64 parameter count, parameters as little-endian f64.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header()).map_err(|e| Error::Serialization(e.to_string()))?;
        let mut out = Vec::with_capacity(24 + header.len() + 8 * self.params.len());
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = || Error::Serialization("truncated or corrupt model file".into());
        let take = |from: usize, len: usize| bytes.get(from..from + len).ok_or_else(corrupt);
        if take(0, 8)? != BINARY_MAGIC {
            return Err(Error::Serialization("not a model file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(take(8, 4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Serialization(format!("unsupported binary version {version}")));
        }
        let hlen = u32::from_le_bytes(take(12, 4)?.try_into().unwrap()) as usize;
        let header: ModelHeader = serde_json::from_slice(take(16, hlen)?).map_err(|e| Error::Serialization(e.to_string()))?;
        let mut pos = 16 + hlen;
        let count = u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()) as usize;
        pos += 8;
        let raw = take(pos, count.checked_mul(8).ok_or_else(corrupt)?)?;
        let params = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Self::from_header(header, params)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    version: u32,
    config: MdnConfig,
    input_scaler: Vec<Affine>,
    target_scaler: Affine,
    /// (n_out, n_in) per layer: four hidden layers, then logits, means, variances.
    layers: Vec<[usize; 2]>,
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    #[serde(flatten)]
    header: ModelHeader,
    params: Vec<f64>,
}

impl ConditionalDensity for Mdn {
    fn query(&self, x: &[f64], t: Option<f64>) -> ConditionalGaussianMixture {
        match t {
            Some(t) => {
                let mut v = x.to_vec();
                v.push(t);
                self.predict(&v)
            }
            None => self.predict(x),
        }
    }

    fn query_rows(&self, data: &Dataset, t: Option<&[f64]>) -> Vec<ConditionalGaussianMixture> {
        match t {
            Some(t) => {
                let mut inputs = Vec::with_capacity(data.n() * (data.p() + 1));
                for i in 0..data.n() {
                    inputs.extend_from_slice(data.x_row(i));
                    inputs.push(t[i]);
                }
                self.predict_batch(&inputs)
            }
            None => self.predict_batch(data.x()),
        }
    }
}

/// Deterministic split of `n` rows into (train, valid) with about 10% held out.
pub(crate) fn validation_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5a11, 0)));
    let n_valid = (n / 10).max(1).min(n - 1);
    let valid = idx.split_off(n - n_valid);
    (idx, valid)
}

pub(crate) fn gather(inputs: &[f64], dim: usize, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * dim);
    for &i in idx {
        out.extend_from_slice(&inputs[i * dim..(i + 1) * dim]);
    }
    out
}

/// Trains a fresh MDN on the `train` rows, early-stopping on the `valid`
/// rows. Scalers are fitted on the training rows.
pub(crate) fn fit_on_split(
    inputs: &[f64],
    dim: usize,
    targets: &[f64],
    train: &[usize],
    valid: &[usize],
    config: &MdnConfig,
) -> Result<(Mdn, TrainReport)> {
    let tx = gather(inputs, dim, train);
    let ty: Vec<f64> = train.iter().map(|&i| targets[i]).collect();
    let scaler: Vec<Affine> = (0..dim).map(|j| Affine::fit(&(0..ty.len()).map(|i| tx[i * dim + j]).collect::<Vec<_>>())).collect();
    let mut model = Mdn::new(config.clone(), scaler, Affine::fit(&ty))?;
    if ty.iter().all(|&v| v == ty[0]) {
        model.collapse_to_constant(ty[0]);
        let vy: Vec<f64> = valid.iter().map(|&i| targets[i]).collect();
        let vx = gather(inputs, dim, valid);
        let final_valid_nll = if vy.is_empty() { model.nll(&tx, &ty) } else { model.nll(&vx, &vy) };
        let final_train_nll = model.nll(&tx, &ty);
        return Ok((model, TrainReport { epochs_run: 0, final_train_nll, final_valid_nll }));
    }
    let report = model.train(
        (&tx, &ty),
        (&gather(inputs, dim, valid), &valid.iter().map(|&i| targets[i]).collect::<Vec<_>>()),
        config.max_epochs,
        config.seed,
    )?;
    Ok((model, report))
}

/// Fits an MDN of `targets` on row-major `inputs` (width `dim`) from scratch,
/// holding out about 10% of the rows for early stopping.
pub fn fit_mdn(inputs: &[f64], dim: usize, targets: &[f64], config: &MdnConfig) -> Result<(Mdn, TrainReport)> {
    let n = targets.len();
    if n < 20 {
        return Err(Error::InvalidInput(format!("MDN training needs n >= 20 rows, got {n}")));
    }
    if inputs.len() != n * dim {
        return Err(Error::InvalidInput("input matrix does not match the target length".into()));
    }
    let (tr, va) = validation_split(n, config.seed);
    fit_on_split(inputs, dim, targets, &tr, &va, config)
}

/// Continues training `model` on new rows (same configuration and scalers)
/// for at most `epochs_cap` epochs.
pub fn refit_mdn(model: &Mdn, inputs: &[f64], targets: &[f64], epochs_cap: usize, seed: u64) -> Result<(Mdn, TrainReport)> {
    let dim = model.input_dim;
    let n = targets.len();
    if n < 2 || inputs.len() != n * dim {
        return Err(Error::InvalidInput("refit data has inconsistent shape".into()));
    }
    let mut out = model.clone();
    let (tr, va) = validation_split(n, seed);
    let report = out.train(
        (&gather(inputs, dim, &tr), &tr.iter().map(|&i| targets[i]).collect::<Vec<_>>()),
        (&gather(inputs, dim, &va), &va.iter().map(|&i| targets[i]).collect::<Vec<_>>()),
        epochs_cap,
        seed,
    )?;
    Ok((out, report))
}

pub fn fit_target(data: &Dataset, target: Target, config: &MdnConfig) -> Result<(Mdn, TrainReport)> {
    let (inputs, dim, y) = target.design(data);
    fit_mdn(&inputs, dim, &y, config)
}

pub fn refit_target(model: &Mdn, resample: &Dataset, target: Target, epochs_cap: usize, seed: u64) -> Result<(Mdn, TrainReport)> {
    let (inputs, _, y) = target.design(resample);
    refit_mdn(model, &inputs, &y, epochs_cap, seed)
}

/// MDN for f(y | x, t).
pub fn fit_outcome_density(data: &Dataset, config: &MdnConfig) -> Result<(Mdn, TrainReport)> {
    fit_target(data, Target::Outcome, config)
}

/// MDN for the generalized propensity score f(t | x).
pub fn fit_gps(data: &Dataset, config: &MdnConfig) -> Result<(Mdn, TrainReport)> {
    fit_target(data, Target::Treatment, config)
}

/// Warm-started refit of an outcome model on a resample.
pub fn warm_start_refit_outcome(model: &Mdn, resample: &Dataset, epochs_cap: usize, seed: u64) -> Result<(Mdn, TrainReport)> {
    refit_target(model, resample, Target::Outcome, epochs_cap, seed)
}

/// Warm-started refit of a GPS model on a resample.
pub fn warm_start_refit_gps(model: &Mdn, resample: &Dataset, epochs_cap: usize, seed: u64) -> Result<(Mdn, TrainReport)> {
    refit_target(model, resample, Target::Treatment, epochs_cap, seed)
}
