//! Time-conditioned binary discriminator `d_t(x) = sigmoid(z_t(x))`.
//!
//! The logit `z` doubles as the log density-ratio estimate: `d / (1 - d) = exp(z)`.
//! The network is a small fully connected SiLU MLP on `[x, sin(f_k ᾱ_t), cos(f_k ᾱ_t)]`,
//! trained with hand-written backprop on the λ(t)-weighted binary cross-entropy.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{chain_rng, Entropy, StreamRng};
use crate::schedule::NoiseSchedule;

pub const CHECKPOINT_VERSION: &str = "diffrs-disc/1";

/// Logits are clamped to this magnitude before exponentiating.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Default gradient-norm clip for training.
pub const GRAD_CLIP: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeEmbedding {
    pub num_frequencies: usize,
    /// Highest angular frequency is `π · scale`; the rest are log-spaced down to `π`.
    pub scale: f64,
}

impl Default for TimeEmbedding {
    fn default() -> Self {
        Self {
            num_frequencies: 8,
            scale: 32.0,
        }
    }
}

impl TimeEmbedding {
    pub fn width(&self) -> usize {
        2 * self.num_frequencies
    }

    fn frequency(&self, k: usize) -> f64 {
        let exponent = if self.num_frequencies > 1 {
            k as f64 / (self.num_frequencies - 1) as f64
        } else {
            0.0
        };
        std::f64::consts::PI * self.scale.powf(exponent)
    }

    fn write_features(&self, alpha_bar: f64, out: &mut Vec<f64>) {
        for k in 0..self.num_frequencies {
            let a = self.frequency(k) * alpha_bar;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs × inputs`.
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl Dense {
    fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    fn forward(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            out.push(self.biases[o] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>());
        }
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

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Discriminator probability `d = sigmoid(z)`.
pub fn probability(logit: f64) -> f64 {
    sigmoid(logit)
}

/// `1 - d`, computed without cancellation.
pub fn complement_probability(logit: f64) -> f64 {
    sigmoid(-logit)
}

/// Ratio estimate `L̂ = d / (1 - d) = exp(z)`, with `z` clamped to `±LOGIT_CLAMP`.
pub fn ratio_from_logit(logit: f64) -> f64 {
    logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorModel {
    widths: Vec<usize>,
    embedding: TimeEmbedding,
    layers: Vec<Dense>,
}

impl DiscriminatorModel {
    /// `widths` runs from the input width (`dim + 2·num_frequencies`) to a final width of 1.
    pub fn init(dim: usize, widths: &[usize], embedding: TimeEmbedding, seed: u64) -> Result<Self> {
        Self::check_widths(dim, widths, &embedding)?;
        let mut rng = chain_rng(seed, 0);
        let n_layers = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (inputs, outputs) = (w[0], w[1]);
                // LeCun-normal; the output layer starts 10x smaller so fresh logits sit near 0
                let mut sd = (1.0 / inputs as f64).sqrt();
                if i + 1 == n_layers {
                    sd *= 0.1;
                }
                Dense {
                    inputs,
                    outputs,
                    weights: (0..inputs * outputs)
                        .map(|_| sd * rng.standard_normal())
                        .collect(),
                    biases: vec![0.0; outputs],
                }
            })
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            embedding,
            layers,
        })
    }

    /// Architecture used throughout: two hidden SiLU layers of 64 units.
    pub fn default_widths(dim: usize, embedding: &TimeEmbedding) -> Vec<usize> {
        vec![dim + embedding.width(), 64, 64, 1]
    }

    fn check_widths(dim: usize, widths: &[usize], embedding: &TimeEmbedding) -> Result<()> {
        if widths.len() < 2 {
            return Err(Error::InvalidDiscriminator(
                "need at least input and output widths".into(),
            ));
        }
        if widths[0] != dim + embedding.width() {
            return Err(Error::InvalidDiscriminator(format!(
                "input width {} != dim {dim} + 2 x {} frequencies",
                widths[0], embedding.num_frequencies
            )));
        }
        if *widths.last().unwrap() != 1 {
            return Err(Error::InvalidDiscriminator("output width must be 1".into()));
        }
        if widths.contains(&0) {
            return Err(Error::InvalidDiscriminator("zero-width layer".into()));
        }
        Ok(())
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn embedding(&self) -> &TimeEmbedding {
        &self.embedding
    }

    /// Data dimension this model accepts.
    pub fn dim(&self) -> usize {
        self.widths[0] - self.embedding.width()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    /// All parameters, layer by layer, weights (row-major) then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::InvalidDiscriminator(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut rest = params;
        for l in &mut self.layers {
            let (w, tail) = rest.split_at(l.weights.len());
            let (b, tail) = tail.split_at(l.biases.len());
            l.weights.copy_from_slice(w);
            l.biases.copy_from_slice(b);
            rest = tail;
        }
        Ok(())
    }

    fn input(&self, x: &[f64], alpha_bar: f64) -> Vec<f64> {
        let mut input = Vec::with_capacity(self.widths[0]);
        input.extend_from_slice(x);
        self.embedding.write_features(alpha_bar, &mut input);
        input
    }

    /// Forward pass keeping pre-activations of every layer.
    fn forward_trace(&self, input: Vec<f64>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut activations = vec![input];
        let mut pre = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.outputs);
            layer.forward(activations.last().unwrap(), &mut z);
            if i + 1 < self.layers.len() {
                activations.push(z.iter().map(|&v| silu(v)).collect());
            }
            pre.push(z);
        }
        (activations, pre)
    }

    fn logit_at(&self, x: &[f64], alpha_bar: f64) -> f64 {
        let mut h = self.input(x, alpha_bar);
        let mut z = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.forward(&h, &mut z);
            if i + 1 < self.layers.len() {
                h.clear();
                h.extend(z.iter().map(|&v| silu(v)));
            }
        }
        z[0]
    }

    /// Logit `z = log(d / (1 - d))` at `(x, t)`, for `0 ≤ t ≤ T`.
    pub fn logit(&self, x: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        schedule.check_t(t, 0, schedule.steps())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("discriminator input {x:?}")));
        }
        Ok(self.logit_at(x, schedule.alpha_bar(t)))
    }

    /// Weighted BCE over `batch` and its gradient in [`params`](Self::params) order.
    ///
    /// The loss is `(1/n_real) Σ_real λ softplus(-z) + (1/n_fake) Σ_fake λ softplus(z)`.
    pub fn loss_and_gradient(
        &self,
        batch: &[TrainingExample],
        schedule: &NoiseSchedule,
    ) -> (f64, Vec<f64>) {
        let n_real = batch.iter().filter(|e| e.real).count().max(1) as f64;
        let n_fake = batch.iter().filter(|e| !e.real).count().max(1) as f64;
        let mut grads: Vec<Dense> = self
            .layers
            .iter()
            .map(|l| Dense {
                inputs: l.inputs,
                outputs: l.outputs,
                weights: vec![0.0; l.weights.len()],
                biases: vec![0.0; l.biases.len()],
            })
            .collect();
        let mut loss = 0.0;
        for ex in batch {
            let input = self.input(&ex.x, schedule.alpha_bar(ex.t));
            let (acts, pre) = self.forward_trace(input);
            let z = pre.last().unwrap()[0];
            let (l, dz) = if ex.real {
                (softplus(-z), sigmoid(z) - 1.0)
            } else {
                (softplus(z), sigmoid(z))
            };
            let scale = ex.weight / if ex.real { n_real } else { n_fake };
            loss += scale * l;
            let mut delta = vec![dz * scale];
            for li in (0..self.layers.len()).rev() {
                let layer = &self.layers[li];
                let g = &mut grads[li];
                let a_in = &acts[li];
                for o in 0..layer.outputs {
                    g.biases[o] += delta[o];
                    let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    row.iter_mut()
                        .zip(a_in)
                        .for_each(|(w, a)| *w += delta[o] * a);
                }
                if li == 0 {
                    break;
                }
                let below = &pre[li - 1];
                delta = (0..layer.inputs)
                    .map(|i| {
                        let back: f64 = (0..layer.outputs)
                            .map(|o| layer.weights[o * layer.inputs + i] * delta[o])
                            .sum();
                        back * silu_grad(below[i])
                    })
                    .collect();
            }
        }
        let mut flat = Vec::with_capacity(self.param_count());
        for g in grads {
            flat.extend(g.weights);
            flat.extend(g.biases);
        }
        (loss, flat)
    }

    /// Writes the JSON checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read(path)?;
        Self::from_checkpoint_bytes(&text)
    }

    pub fn to_checkpoint_json(&self) -> Result<String> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION.to_string(),
            widths: self.widths.clone(),
            time_embedding: self.embedding,
            params: self
                .layers
                .iter()
                .map(|l| l.weights.iter().chain(&l.biases).copied().collect())
                .collect(),
            checksum: String::new(),
        };
        let ck = Checkpoint {
            checksum: ck.digest(),
            ..ck
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(bytes)
            .map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: ck.version,
                expected: CHECKPOINT_VERSION.into(),
            });
        }
        if ck.digest() != ck.checksum {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let emb = ck.time_embedding;
        let dim = ck
            .widths
            .first()
            .and_then(|w| w.checked_sub(emb.width()))
            .ok_or_else(|| Error::Checkpoint("input width smaller than embedding".into()))?;
        Self::check_widths(dim, &ck.widths, &emb).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.params.len() != ck.widths.len() - 1 {
            return Err(Error::Checkpoint("layer count mismatch".into()));
        }
        let layers = ck
            .widths
            .windows(2)
            .zip(ck.params)
            .map(|(w, p)| {
                let (inputs, outputs) = (w[0], w[1]);
                if p.len() != inputs * outputs + outputs {
                    return Err(Error::Checkpoint("parameter count mismatch".into()));
                }
                if p.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Checkpoint("non-finite parameter".into()));
                }
                let (weights, biases) = p.split_at(inputs * outputs);
                Ok(Dense {
                    inputs,
                    outputs,
                    weights: weights.to_vec(),
                    biases: biases.to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            widths: ck.widths,
            embedding: emb,
            layers,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    version: String,
    widths: Vec<usize>,
    time_embedding: TimeEmbedding,
    params: Vec<Vec<f64>>,
    checksum: String,
}

impl Checkpoint {
    fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.version.as_bytes());
        for w in &self.widths {
            h.update((*w as u64).to_le_bytes());
        }
        h.update((self.time_embedding.num_frequencies as u64).to_le_bytes());
        h.update(self.time_embedding.scale.to_le_bytes());
        for layer in &self.params {
            h.update((layer.len() as u64).to_le_bytes());
            for p in layer {
                h.update(p.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Temporal weighting λ(t) of the BCE loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaRule {
    Uniform,
    /// `β_t / (1 - ᾱ_t)`.
    #[default]
    BetaOverVar,
}

impl LambdaRule {
    pub fn weight(self, schedule: &NoiseSchedule, t: usize) -> f64 {
        match self {
            LambdaRule::Uniform => 1.0,
            LambdaRule::BetaOverVar => {
                let var = 1.0 - schedule.alpha_bar(t);
                if var > 0.0 {
                    schedule.beta(t) / var
                } else {
                    1.0
                }
            }
        }
    }

    /// `E_t[λ(t)]` for `t` uniform on `{1..T}`.
    pub fn mean_weight(self, schedule: &NoiseSchedule) -> f64 {
        let steps = schedule.steps();
        (1..=steps).map(|t| self.weight(schedule, t)).sum::<f64>() / steps as f64
    }
}

/// One perturbed training point.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub x: Vec<f64>,
    pub t: usize,
    pub real: bool,
    /// λ(t).
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Real examples per minibatch; each batch also holds as many fake ones.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: LambdaRule,
    pub grad_clip: f64,
    pub seed: u64,
    /// Number of timestep buckets in the accuracy report.
    pub report_buckets: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 128,
            learning_rate: 0.05,
            lambda: LambdaRule::BetaOverVar,
            grad_clip: GRAD_CLIP,
            seed: 0,
            report_buckets: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub mean_loss: f64,
    /// Fraction of real examples with `z > 0`, per timestep bucket.
    pub real_accuracy: Vec<f64>,
    /// Fraction of fake examples with `z < 0`, per timestep bucket.
    pub fake_accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Pearson correlation of logits against the exact log-ratio, when measured.
    pub oracle_correlation: Option<f64>,
}

fn perturbed_example<E: Entropy + ?Sized>(
    x0: &[f64],
    real: bool,
    schedule: &NoiseSchedule,
    lambda: LambdaRule,
    rng: &mut E,
) -> Result<TrainingExample> {
    let steps = schedule.steps();
    let t = 1 + ((rng.uniform() * steps as f64) as usize).min(steps - 1);
    let x = schedule.forward_perturb(x0, t, rng)?;
    Ok(TrainingExample {
        x,
        t,
        real,
        weight: lambda.weight(schedule, t),
    })
}

/// Minibatch gradient descent on the λ(t)-weighted BCE between perturbed
/// `real_x0` (label 1) and perturbed `fake_x0` (label 0).
pub fn train_discriminator(
    mut model: DiscriminatorModel,
    real_x0: &[Vec<f64>],
    fake_x0: &[Vec<f64>],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(DiscriminatorModel, TrainReport)> {
    if real_x0.is_empty() || fake_x0.is_empty() {
        return Err(Error::InvalidArgument(
            "training sets must be nonempty".into(),
        ));
    }
    if cfg.batch_size == 0 || cfg.report_buckets == 0 {
        return Err(Error::InvalidArgument(
            "batch size and report buckets must be positive".into(),
        ));
    }
    let dim = model.dim();
    if let Some(bad) = real_x0.iter().chain(fake_x0).find(|x| x.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    let mut rng: StreamRng = chain_rng(cfg.seed, 1);
    let steps = schedule.steps();
    let buckets = cfg.report_buckets;
    let bucket_of = |t: usize| ((t - 1) * buckets / steps).min(buckets - 1);
    let mut real_order: Vec<usize> = (0..real_x0.len()).collect();
    let mut fake_order: Vec<usize> = (0..fake_x0.len()).collect();
    let per_epoch = real_x0.len().max(fake_x0.len());
    let n_batches = per_epoch.div_ceil(cfg.batch_size);
    let mut params = model.params();
    let mut report = TrainReport::default();

    for epoch in 0..cfg.epochs {
        real_order.shuffle(&mut rng);
        fake_order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut hits = vec![[0usize; 4]; buckets]; // real ok, real n, fake ok, fake n
        for b in 0..n_batches {
            let mut batch = Vec::with_capacity(2 * cfg.batch_size);
            for j in 0..cfg.batch_size {
                let k = b * cfg.batch_size + j;
                let r = &real_x0[real_order[k % real_x0.len()]];
                batch.push(perturbed_example(r, true, schedule, cfg.lambda, &mut rng)?);
                let f = &fake_x0[fake_order[k % fake_x0.len()]];
                batch.push(perturbed_example(f, false, schedule, cfg.lambda, &mut rng)?);
            }
            for ex in &batch {
                let z = model.logit_at(&ex.x, schedule.alpha_bar(ex.t));
                let h = &mut hits[bucket_of(ex.t)];
                if ex.real {
                    h[0] += usize::from(z > 0.0);
                    h[1] += 1;
                } else {
                    h[2] += usize::from(z < 0.0);
                    h[3] += 1;
                }
            }
            let (loss, mut grad) = model.loss_and_gradient(&batch, schedule);
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            loss_sum += loss;
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > cfg.grad_clip {
                let s = cfg.grad_clip / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
            params
                .iter_mut()
                .zip(&grad)
                .for_each(|(p, g)| *p -= cfg.learning_rate * g);
            model.set_params(&params)?;
        }
        let ratio = |ok: usize, n: usize| {
            if n == 0 {
                f64::NAN
            } else {
                ok as f64 / n as f64
            }
        };
        report.epochs.push(EpochStats {
            mean_loss: loss_sum / n_batches as f64,
            real_accuracy: hits.iter().map(|h| ratio(h[0], h[1])).collect(),
            fake_accuracy: hits.iter().map(|h| ratio(h[2], h[3])).collect(),
        });
    }
    Ok((model, report))
}
