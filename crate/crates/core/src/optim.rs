//! Masked cross-entropy, the warmup/decay schedule, Adam, and the
//! pre-training loop with gradient accumulation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Gradients, ParamStore, Tape};
use crate::corpus::CleanText;
use crate::mlm::{batch_with_streams, example_rng, Batch, MaskingConfig, MlmError, IGNORE};
use crate::model::{Encoder, Mode, ModelError};
use crate::tensor::{cast, Float, Tensor};
use crate::tokenizer::{TokenSequence, Vocabulary};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("no supervised positions: every label is IGNORE")]
    NoSupervision,
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("invalid config `{key}`: {message}")]
    InvalidConfig { key: &'static str, message: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("pre-training corpus is empty")]
    EmptyCorpus,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mlm(#[from] MlmError),
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Mean of `-log softmax(logits)[label]` over positions whose label is not
/// [`IGNORE`]. `logits` has shape `(.., V)` with one row per label.
pub fn masked_cross_entropy<F: Float>(logits: &Tensor<F>, labels: &[i32]) -> Result<f64, OptimError> {
    if logits.rows() != labels.len() {
        return Err(OptimError::Shape(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let v = logits.last_dim();
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        if label < 0 || label as usize >= v {
            return Err(OptimError::Shape(format!("label {label} outside {v} classes")));
        }
        let row: Vec<f64> = logits.row(i).iter().map(|x| x.to_f64().unwrap()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += log_z - row[label as usize];
        count += 1;
    }
    if count == 0 {
        return Err(OptimError::NoSupervision);
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub min_lr: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self::pretraining()
    }
}

impl SchedulerConfig {
    /// Peak 1e-4 after 10,000 warmup steps, decaying to 0 at step 1,000,000.
    pub fn pretraining() -> Self {
        Self {
            peak_lr: 1e-4,
            warmup_steps: 10_000,
            total_steps: 1_000_000,
            min_lr: 0.0,
        }
    }

    /// Linear decay from `lr` to 0 without warmup.
    pub fn linear_decay(lr: f64, total_steps: u64) -> Self {
        Self {
            peak_lr: lr,
            warmup_steps: 0,
            total_steps,
            min_lr: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        if self.warmup_steps > self.total_steps {
            return Err(OptimError::InvalidConfig {
                key: "warmup_steps",
                message: format!("{} exceeds total_steps {}", self.warmup_steps, self.total_steps),
            });
        }
        if !(self.peak_lr >= 0.0) || !self.peak_lr.is_finite() {
            return Err(OptimError::InvalidConfig {
                key: "peak_lr",
                message: format!("{} is not a finite non-negative rate", self.peak_lr),
            });
        }
        if !(self.min_lr >= 0.0) || self.min_lr > self.peak_lr {
            return Err(OptimError::InvalidConfig {
                key: "min_lr",
                message: format!("{} is not in [0, peak_lr]", self.min_lr),
            });
        }
        Ok(())
    }
}

/// Linear ramp from 0 to `peak_lr` over the warmup, then linear decay to
/// `min_lr` at `total_steps`. Steps outside `[0, total_steps]` are clamped.
pub fn lr_at_step(step: u64, cfg: &SchedulerConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    if step == cfg.warmup_steps || cfg.total_steps == cfg.warmup_steps {
        return cfg.peak_lr;
    }
    let frac = (cfg.total_steps - step) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    cfg.min_lr + (cfg.peak_lr - cfg.min_lr) * frac
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(OptimError::InvalidConfig {
                    key,
                    message: format!("{v} is not in [0, 1)"),
                });
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(OptimError::InvalidConfig {
                key: "epsilon",
                message: "must be positive".into(),
            });
        }
        if !(self.weight_decay >= 0.0) {
            return Err(OptimError::InvalidConfig {
                key: "weight_decay",
                message: "must be non-negative".into(),
            });
        }
        Ok(())
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState<F> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub t: u64,
}

impl<F: Float> AdamState<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        let zeros: Vec<Tensor<F>> = (0..params.len())
            .map(|i| Tensor::zeros(params.tensor(i).shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// treated as having a zero gradient. Weight decay, when non-zero, is added
/// to the gradient as an L2 term. Nothing is modified if any gradient is
/// non-finite.
pub fn adam_step<F: Float>(
    params: &mut ParamStore<F>,
    grads: &Gradients<F>,
    state: &mut AdamState<F>,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<(), OptimError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(OptimError::Shape(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for id in 0..params.len() {
        if let Some(g) = grads.get(id) {
            if g.shape() != params.tensor(id).shape() {
                return Err(OptimError::Shape(format!(
                    "gradient for `{}` has shape {:?}, parameter {:?}",
                    params.name(id),
                    g.shape(),
                    params.tensor(id).shape()
                )));
            }
        }
    }
    if let Some(id) = grads.first_non_finite() {
        return Err(OptimError::NonFiniteGradient(params.name(id).to_string()));
    }
    state.t += 1;
    let (b1, b2) = (cast::<F>(cfg.beta1), cast::<F>(cfg.beta2));
    let c1 = cast::<F>(1.0 - cfg.beta1.powi(state.t as i32));
    let c2 = cast::<F>(1.0 - cfg.beta2.powi(state.t as i32));
    let (lr, eps, wd) = (cast::<F>(lr), cast::<F>(cfg.epsilon), cast::<F>(cfg.weight_decay));
    let one = F::one();
    for id in 0..params.len() {
        let g = grads.get(id);
        let p = params.tensor_mut(id).data_mut();
        let m = state.m[id].data_mut();
        let v = state.v[id].data_mut();
        for i in 0..p.len() {
            let gi = g.map_or(F::zero(), |g| g.data()[i]) + wd * p[i];
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Loss and summed gradients of one optimizer step made of `micro_batches`.
///
/// Each micro-batch loss is its summed token loss divided by the supervised
/// count of the whole step, so the result equals the mean over every
/// supervised position regardless of how the positions are split. Micro
/// batches run in parallel and are reduced in their given order.
pub fn step_gradients<F: Float>(
    enc: &Encoder<F>,
    micro_batches: &[Batch],
    mode: Mode,
    dropout_seeds: &[u64],
) -> Result<(f64, Gradients<F>), OptimError> {
    assert_eq!(micro_batches.len(), dropout_seeds.len());
    let total: usize = micro_batches.iter().map(Batch::num_supervised).sum();
    if total == 0 {
        return Err(OptimError::NoSupervision);
    }
    let parts: Vec<Result<Option<(f64, Gradients<F>)>, OptimError>> = micro_batches
        .par_iter()
        .zip(dropout_seeds.par_iter())
        .map(|(b, &seed)| {
            if b.num_supervised() == 0 {
                return Ok(None);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new(&enc.params);
            let states = enc.forward(&mut tape, b, mode, &mut rng)?;
            let loss = enc.mlm_loss(&mut tape, &states, b, Some(total))?;
            let value = tape.value(loss).data()[0].to_f64().unwrap();
            Ok(Some((value, tape.backward(loss))))
        })
        .collect();
    let mut loss = 0.0;
    let mut grads = Gradients::empty(enc.params.len());
    for part in parts {
        if let Some((l, g)) = part? {
            loss += l;
            grads.add_scaled(&g, F::one());
        }
    }
    Ok((loss, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub micro_batch: usize,
    pub accum: usize,
    pub total_steps: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            micro_batch: 32,
            accum: 8,
            total_steps: 1_000_000,
            checkpoint_every: 1000,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if self.micro_batch == 0 {
            return Err(OptimError::InvalidConfig {
                key: "micro_batch",
                message: "must be at least 1".into(),
            });
        }
        if self.accum == 0 {
            return Err(OptimError::InvalidConfig {
                key: "accum",
                message: "must be at least 1".into(),
            });
        }
        if self.checkpoint_every == 0 {
            return Err(OptimError::InvalidConfig {
                key: "checkpoint_every",
                message: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub encoder: Encoder<f32>,
    pub log: Vec<StepLog>,
    pub checkpoints: Vec<PathBuf>,
}

/// Cycles through the corpus in a freshly shuffled order each epoch.
struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    seed: u64,
}

impl EpochSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            cursor: 0,
            epoch: 0,
            seed,
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        let mut rng = example_rng(self.seed ^ 0x005e_ed0f_e90c, self.epoch);
        self.order.sort_unstable();
        self.order.shuffle(&mut rng);
    }

    fn next(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.epoch += 1;
            self.cursor = 0;
            self.shuffle();
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

/// Writes an encoder checkpoint, plus the vocabulary when given.
pub fn write_checkpoint(enc: &Encoder<f32>, vocab: Option<&Vocabulary>, dir: &Path) -> Result<(), OptimError> {
    enc.save(dir)?;
    if let Some(v) = vocab {
        v.save(dir)?;
    }
    Ok(())
}

/// MLM pre-training on pre-encoded sequences.
///
/// Every optimizer step draws `micro_batch × accum` examples. The `k`-th
/// example drawn overall is masked with its own random stream, so batching
/// and accumulation settings do not change which masks are produced. With an
/// output directory, `loss.csv` (`step,lr,loss`) and checkpoints
/// (`checkpoint-<step>` every `checkpoint_every` steps, and `final`) are
/// written there.
#[allow(clippy::too_many_arguments)]
pub fn pretrain(
    mut encoder: Encoder<f32>,
    corpus: &[TokenSequence],
    vocab: Option<&Vocabulary>,
    masking: &MaskingConfig,
    schedule: &SchedulerConfig,
    adam: &AdamConfig,
    cfg: &PretrainConfig,
    out_dir: Option<&Path>,
) -> Result<PretrainOutcome, OptimError> {
    masking.validate()?;
    schedule.validate()?;
    adam.validate()?;
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(OptimError::EmptyCorpus);
    }
    if let Some(s) = corpus.iter().find(|s| s.len() > masking.max_len) {
        return Err(MlmError::SequenceTooLong {
            len: s.len(),
            max_len: masking.max_len,
        }
        .into());
    }
    let vocab_size = encoder.config.vocab_size;
    let mut sampler = EpochSampler::new(corpus.len(), cfg.seed);
    let mut state = AdamState::new(&encoder.params);
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(csv::Writer::from_path(dir.join("loss.csv"))?)
        }
        None => None,
    };
    let mut drawn: u64 = 0;
    for step in 1..=cfg.total_steps {
        let mut micro = Vec::with_capacity(cfg.accum);
        let mut seeds = Vec::with_capacity(cfg.accum);
        for a in 0..cfg.accum {
            let idx: Vec<usize> = (0..cfg.micro_batch).map(|_| sampler.next()).collect();
            let seqs: Vec<&TokenSequence> = idx.iter().map(|&i| &corpus[i]).collect();
            let streams: Vec<u64> = (drawn..drawn + idx.len() as u64).collect();
            drawn += idx.len() as u64;
            micro.push(batch_with_streams(&seqs, &streams, masking, vocab_size)?);
            seeds.push(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (step * cfg.accum as u64 + a as u64));
        }
        let lr = lr_at_step(step, schedule);
        let loss = match step_gradients(&encoder, &micro, Mode::Train, &seeds) {
            Ok((loss, grads)) => {
                adam_step(&mut encoder.params, &grads, &mut state, adam, lr)?;
                loss
            }
            Err(OptimError::NoSupervision) => {
                log::warn!("step {step}: no masked positions drawn, update skipped");
                f64::NAN
            }
            Err(e) => return Err(e),
        };
        let entry = StepLog { step, lr, loss };
        if let Some(w) = writer.as_mut() {
            w.serialize(&entry)?;
        }
        if step % 100 == 0 {
            log::info!("step {step} lr {lr:.3e} loss {loss:.4}");
        }
        log.push(entry);
        if let Some(dir) = out_dir {
            if step % cfg.checkpoint_every == 0 && step != cfg.total_steps {
                let path = dir.join(format!("checkpoint-{step}"));
                write_checkpoint(&encoder, vocab, &path)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(mut w) = writer {
        w.flush()?;
    }
    if let Some(dir) = out_dir {
        let path = dir.join("final");
        write_checkpoint(&encoder, vocab, &path)?;
        checkpoints.push(path);
    }
    Ok(PretrainOutcome {
        encoder,
        log,
        checkpoints,
    })
}

/// Encodes cleaned texts with `<cls>`/`<sep>` and runs [`pretrain`].
#[allow(clippy::too_many_arguments)]
pub fn pretrain_texts(
    encoder: Encoder<f32>,
    texts: &[CleanText],
    vocab: &Vocabulary,
    masking: &MaskingConfig,
    schedule: &SchedulerConfig,
    adam: &AdamConfig,
    cfg: &PretrainConfig,
    out_dir: Option<&Path>,
) -> Result<PretrainOutcome, OptimError> {
    let seqs: Vec<TokenSequence> = texts.iter().map(|t| vocab.encode(t.as_str(), true)).collect();
    pretrain(encoder, &seqs, Some(vocab), masking, schedule, adam, cfg, out_dir)
}

/// Top-1 accuracy of the MLM head at supervised positions, in eval mode.
pub fn mlm_top1_accuracy<F: Float>(enc: &Encoder<F>, batches: &[Batch]) -> Result<f64, OptimError> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for b in batches {
        let positions: Vec<usize> = (0..b.labels.len()).filter(|&i| b.labels[i] != IGNORE).collect();
        if positions.is_empty() {
            continue;
        }
        let mut tape = Tape::new(&enc.params);
        let states = enc.forward(&mut tape, b, Mode::Eval, &mut rand::rng())?;
        let logits = enc.mlm_logits_at(&mut tape, &states, &positions);
        let lv = tape.value(logits);
        for (r, &p) in positions.iter().enumerate() {
            let row = lv.row(r);
            let best = (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            hits += usize::from(best as i32 == b.labels[p]);
            total += 1;
        }
    }
    if total == 0 {
        return Err(OptimError::NoSupervision);
    }
    Ok(hits as f64 / total as f64)
}
