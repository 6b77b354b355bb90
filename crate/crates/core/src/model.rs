//! Post-layer-norm transformer encoder with masked-language-modeling,
//! sequence-classification and token-classification heads.
//!
//! Parameters live in a [`ParamStore`] under stable dotted names, so the
//! optimizer, checkpoints and gradient checks all address them uniformly.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::mlm::{Batch, IGNORE};
use crate::tensor::{cast, Float, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid encoder config `{key}`: {message}")]
    InvalidConfig { key: &'static str, message: String },
    #[error("token id {id} is outside the vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("segment id {id} is outside the {segments} segment embeddings")]
    SegmentOutOfRange { id: u32, segments: usize },
    #[error("sequence length {len} exceeds max_positions {max_positions}")]
    SequenceTooLong { len: usize, max_positions: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("missing head `{0}`")]
    MissingHead(&'static str),
    #[error("batch has no supervised positions")]
    NoSupervision,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn default_segments() -> usize {
    2
}

fn default_eps() -> f64 {
    1e-12
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub feedforward: usize,
    pub heads: usize,
    pub blocks: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    #[serde(default = "default_segments")]
    pub segments: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
}

impl EncoderConfig {
    /// BERT-base dimensions with a 30,000-token vocabulary and 256 positions.
    pub fn base() -> Self {
        Self {
            hidden: 768,
            feedforward: 3072,
            heads: 12,
            blocks: 12,
            max_positions: 256,
            vocab_size: 30_000,
            dropout: 0.1,
            segments: 2,
            layer_norm_eps: 1e-12,
        }
    }

    /// A small configuration with feedforward width `4·hidden`.
    pub fn toy(vocab_size: usize, hidden: usize, blocks: usize, heads: usize, max_positions: usize) -> Self {
        Self {
            hidden,
            feedforward: 4 * hidden,
            heads,
            blocks,
            max_positions,
            vocab_size,
            dropout: 0.1,
            segments: 2,
            layer_norm_eps: 1e-12,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |key, message: String| Err(ModelError::InvalidConfig { key, message });
        if self.hidden == 0 {
            return bad("hidden", "must be positive".into());
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad("heads", format!("hidden {} is not divisible by heads {}", self.hidden, self.heads));
        }
        if self.feedforward == 0 {
            return bad("feedforward", "must be positive".into());
        }
        if self.max_positions < 2 {
            return bad("max_positions", "must be at least 2".into());
        }
        if self.vocab_size == 0 {
            return bad("vocab_size", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("{} is not in [0, 1)", self.dropout));
        }
        if self.segments == 0 {
            return bad("segments", "must be positive".into());
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps", "must be positive".into());
        }
        Ok(())
    }

    /// Names and shapes of the encoder and MLM-head parameters, in
    /// creation order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (h, f) = (self.hidden, self.feedforward);
        let mut out = vec![
            ("embeddings.token".to_string(), vec![self.vocab_size, h]),
            ("embeddings.position".to_string(), vec![self.max_positions, h]),
            ("embeddings.segment".to_string(), vec![self.segments, h]),
        ];
        push_ln(&mut out, "embeddings.ln", h);
        for i in 0..self.blocks {
            for p in ["q", "k", "v", "o"] {
                push_dense(&mut out, &format!("blocks.{i}.attn.{p}"), h, h);
            }
            push_ln(&mut out, &format!("blocks.{i}.attn_ln"), h);
            push_dense(&mut out, &format!("blocks.{i}.ffn.in"), h, f);
            push_dense(&mut out, &format!("blocks.{i}.ffn.out"), f, h);
            push_ln(&mut out, &format!("blocks.{i}.ffn_ln"), h);
        }
        push_dense(&mut out, "mlm.transform", h, h);
        push_ln(&mut out, "mlm.ln", h);
        out.push(("mlm.output_bias".to_string(), vec![self.vocab_size]));
        out
    }

    /// Number of scalars in the encoder plus MLM head.
    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

fn push_dense(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, fan_in: usize, fan_out: usize) {
    out.push((format!("{prefix}.weight"), vec![fan_in, fan_out]));
    out.push((format!("{prefix}.bias"), vec![fan_out]));
}

fn push_ln(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, n: usize) {
    out.push((format!("{prefix}.gamma"), vec![n]));
    out.push((format!("{prefix}.beta"), vec![n]));
}

/// Standard deviation of the truncated-normal initializer.
pub const INIT_STD: f64 = 0.02;

/// Normal(0, std²) restricted to two standard deviations.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

fn init_tensor<F: Float, R: Rng + ?Sized>(name: &str, shape: &[usize], rng: &mut R) -> Tensor<F> {
    if name.ends_with(".gamma") {
        Tensor::full(shape, F::one())
    } else if name.ends_with(".bias") || name.ends_with(".beta") || name.ends_with("output_bias") {
        Tensor::zeros(shape)
    } else {
        Tensor::from_fn(shape, |_| cast(truncated_normal(rng, INIT_STD)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Activations of one forward pass: the embedding output followed by each
/// block output, all of shape `(B, T, hidden)`.
#[derive(Clone, Debug)]
pub struct HiddenStates {
    pub layers: Vec<Var>,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl HiddenStates {
    pub fn last(&self) -> Var {
        *self.layers.last().unwrap()
    }
}

pub const SEQ_HEAD: &str = "seq_head";
pub const TOK_HEAD: &str = "tok_head";

#[derive(Clone, Debug)]
pub struct Encoder<F> {
    pub config: EncoderConfig,
    pub params: ParamStore<F>,
}

impl<F: Float> Encoder<F> {
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape) in config.parameter_shapes() {
            let t = init_tensor(&name, &shape, rng);
            params.add(name, t);
        }
        Ok(Self { config, params })
    }

    /// Attaches (or re-initializes) the `<cls>` pooler and classifier.
    pub fn init_sequence_head<R: Rng + ?Sized>(&mut self, n_classes: usize, rng: &mut R) {
        let h = self.config.hidden;
        let mut shapes = Vec::new();
        push_dense(&mut shapes, &format!("{SEQ_HEAD}.pooler"), h, h);
        push_dense(&mut shapes, &format!("{SEQ_HEAD}.classifier"), h, n_classes);
        self.set_head(shapes, rng);
    }

    /// Attaches (or re-initializes) the per-token classifier.
    pub fn init_token_head<R: Rng + ?Sized>(&mut self, n_labels: usize, rng: &mut R) {
        let mut shapes = Vec::new();
        push_dense(&mut shapes, &format!("{TOK_HEAD}.classifier"), self.config.hidden, n_labels);
        self.set_head(shapes, rng);
    }

    fn set_head<R: Rng + ?Sized>(&mut self, shapes: Vec<(String, Vec<usize>)>, rng: &mut R) {
        let mut fresh = ParamStore::new();
        let prefix = shapes[0].0.split('.').next().unwrap().to_string() + ".";
        for (name, t) in self.params.iter() {
            if !name.starts_with(&prefix) {
                fresh.add(name, t.clone());
            }
        }
        for (name, shape) in shapes {
            let t = init_tensor(&name, &shape, rng);
            fresh.add(name, t);
        }
        self.params = fresh;
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.params
            .get(&format!("{SEQ_HEAD}.classifier.bias"))
            .map(Tensor::numel)
    }

    pub fn num_token_labels(&self) -> Option<usize> {
        self.params
            .get(&format!("{TOK_HEAD}.classifier.bias"))
            .map(Tensor::numel)
    }

    pub fn cast<G: Float>(&self) -> Encoder<G> {
        Encoder {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Checks ids, segments and length against the configuration.
    pub fn validate_batch(&self, batch: &Batch) -> Result<(), ModelError> {
        let n = batch.batch_size * batch.seq_len;
        if batch.input_ids.len() != n || batch.attention_mask.len() != n || batch.segment_ids.len() != n {
            return Err(ModelError::Shape(format!(
                "batch arrays do not match ({}, {})",
                batch.batch_size, batch.seq_len
            )));
        }
        if batch.seq_len > self.config.max_positions {
            return Err(ModelError::SequenceTooLong {
                len: batch.seq_len,
                max_positions: self.config.max_positions,
            });
        }
        if let Some(&id) = batch.input_ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        if let Some(&id) = batch.segment_ids.iter().find(|&&s| s as usize >= self.config.segments) {
            return Err(ModelError::SegmentOutOfRange {
                id,
                segments: self.config.segments,
            });
        }
        Ok(())
    }

    /// Runs the encoder. `rng` drives dropout and is untouched in eval mode.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, F>,
        batch: &Batch,
        mode: Mode,
        rng: &mut R,
    ) -> Result<HiddenStates, ModelError> {
        self.validate_batch(batch)?;
        let cfg = &self.config;
        let (b, t, h) = (batch.batch_size, batch.seq_len, cfg.hidden);
        let p = if mode == Mode::Train { cfg.dropout } else { 0.0 };
        let eps = cfg.layer_norm_eps;

        let tok = tape.param_named("embeddings.token");
        let pos = tape.param_named("embeddings.position");
        let seg = tape.param_named("embeddings.segment");
        let positions: Vec<u32> = (0..b).flat_map(|_| 0..t as u32).collect();
        let x_tok = tape.embedding(tok, &batch.input_ids);
        let x_pos = tape.embedding(pos, &positions);
        let x_seg = tape.embedding(seg, &batch.segment_ids);
        let x = tape.add(x_tok, x_pos);
        let x = tape.add(x, x_seg);
        let x = self.ln(tape, x, "embeddings.ln", eps);
        let x = tape.dropout(x, p, rng);
        let mut x = tape.reshape(x, &[b, t, h]);
        let mut layers = vec![x];

        for i in 0..cfg.blocks {
            let q = self.dense(tape, x, &format!("blocks.{i}.attn.q"));
            let k = self.dense(tape, x, &format!("blocks.{i}.attn.k"));
            let v = self.dense(tape, x, &format!("blocks.{i}.attn.v"));
            let (q, k, v) = (
                tape.split_heads(q, cfg.heads),
                tape.split_heads(k, cfg.heads),
                tape.split_heads(v, cfg.heads),
            );
            let ctx = attention(tape, q, k, v, &batch.attention_mask, p, rng);
            let ctx = tape.merge_heads(ctx);
            let o = self.dense(tape, ctx, &format!("blocks.{i}.attn.o"));
            let o = tape.dropout(o, p, rng);
            let r = tape.add(x, o);
            let x1 = self.ln(tape, r, &format!("blocks.{i}.attn_ln"), eps);

            let f = self.dense(tape, x1, &format!("blocks.{i}.ffn.in"));
            let f = tape.gelu(f);
            let f = self.dense(tape, f, &format!("blocks.{i}.ffn.out"));
            let f = tape.dropout(f, p, rng);
            let r = tape.add(x1, f);
            x = self.ln(tape, r, &format!("blocks.{i}.ffn_ln"), eps);
            layers.push(x);
        }
        Ok(HiddenStates {
            layers,
            batch_size: b,
            seq_len: t,
        })
    }

    fn dense(&self, tape: &mut Tape<'_, F>, x: Var, prefix: &str) -> Var {
        let w = tape.param_named(&format!("{prefix}.weight"));
        let b = tape.param_named(&format!("{prefix}.bias"));
        tape.linear(x, w, b)
    }

    fn ln(&self, tape: &mut Tape<'_, F>, x: Var, prefix: &str, eps: f64) -> Var {
        let g = tape.param_named(&format!("{prefix}.gamma"));
        let b = tape.param_named(&format!("{prefix}.beta"));
        tape.layer_norm(x, g, b, eps)
    }

    /// MLM logits at the given flattened `(b·T + t)` positions of the final
    /// layer, shape `(positions.len(), vocab_size)`.
    pub fn mlm_logits_at(&self, tape: &mut Tape<'_, F>, states: &HiddenStates, positions: &[usize]) -> Var {
        let x = tape.gather_rows(states.last(), positions);
        let x = self.dense(tape, x, "mlm.transform");
        let x = tape.gelu(x);
        let x = self.ln(tape, x, "mlm.ln", self.config.layer_norm_eps);
        let emb = tape.param_named("embeddings.token");
        let logits = tape.matmul_t(x, emb);
        let bias = tape.param_named("mlm.output_bias");
        tape.add_bias(logits, bias)
    }

    /// MLM logits at every position, shape `(B, T, vocab_size)`.
    pub fn mlm_logits(&self, tape: &mut Tape<'_, F>, states: &HiddenStates) -> Var {
        let all: Vec<usize> = (0..states.batch_size * states.seq_len).collect();
        let l = self.mlm_logits_at(tape, states, &all);
        tape.reshape(l, &[states.batch_size, states.seq_len, self.config.vocab_size])
    }

    /// Summed MLM cross-entropy over supervised positions divided by
    /// `denominator` (the supervised count gives the mean).
    pub fn mlm_loss(
        &self,
        tape: &mut Tape<'_, F>,
        states: &HiddenStates,
        batch: &Batch,
        denominator: Option<usize>,
    ) -> Result<Var, ModelError> {
        let (positions, targets): (Vec<usize>, Vec<usize>) = batch
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != IGNORE)
            .map(|(i, &l)| (i, l as usize))
            .unzip();
        if positions.is_empty() {
            return Err(ModelError::NoSupervision);
        }
        let denom = denominator.unwrap_or(positions.len());
        let logits = self.mlm_logits_at(tape, states, &positions);
        let weights = vec![F::one(); positions.len()];
        Ok(tape.cross_entropy_with_denominator(logits, &targets, &weights, cast(denom as f64)))
    }

    /// Tanh-pooled `<cls>` state through the classifier, shape `(B, K)`.
    pub fn sequence_logits(&self, tape: &mut Tape<'_, F>, states: &HiddenStates) -> Result<Var, ModelError> {
        if self.num_classes().is_none() {
            return Err(ModelError::MissingHead(SEQ_HEAD));
        }
        let cls: Vec<usize> = (0..states.batch_size).map(|b| b * states.seq_len).collect();
        let x = tape.gather_rows(states.last(), &cls);
        let x = self.dense(tape, x, &format!("{SEQ_HEAD}.pooler"));
        let x = tape.tanh(x);
        Ok(self.dense(tape, x, &format!("{SEQ_HEAD}.classifier")))
    }

    /// Per-position classifier over the final layer, shape `(B, T, L)`.
    pub fn token_logits(&self, tape: &mut Tape<'_, F>, states: &HiddenStates) -> Result<Var, ModelError> {
        if self.num_token_labels().is_none() {
            return Err(ModelError::MissingHead(TOK_HEAD));
        }
        Ok(self.dense(tape, states.last(), &format!("{TOK_HEAD}.classifier")))
    }

    /// Writes `config.json`, `manifest.json` and one little-endian f32 file
    /// per parameter under `params/`.
    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        fs::create_dir_all(dir.join("params"))?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.config)?)?;
        let mut manifest = Vec::new();
        for (name, t) in self.params.iter() {
            let file = format!("params/{name}.f32");
            let mut bytes = Vec::with_capacity(t.numel() * 4);
            for &v in t.data() {
                bytes.extend_from_slice(&v.to_f32().unwrap().to_le_bytes());
            }
            fs::write(dir.join(&file), bytes)?;
            manifest.push(ManifestEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                file,
            });
        }
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let config: EncoderConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
        config.validate()?;
        let manifest: Vec<ManifestEntry> = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut params = ParamStore::new();
        for entry in manifest {
            let bytes = fs::read(dir.join(&entry.file))?;
            let n: usize = entry.shape.iter().product();
            if bytes.len() != n * 4 {
                return Err(ModelError::Checkpoint(format!(
                    "`{}` holds {} bytes, shape {:?} needs {}",
                    entry.file,
                    bytes.len(),
                    entry.shape,
                    n * 4
                )));
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| cast::<F>(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            params.add(entry.name, Tensor::new(entry.shape, data).unwrap());
        }
        for (name, shape) in config.parameter_shapes() {
            match params.get(&name) {
                None => return Err(ModelError::Checkpoint(format!("missing parameter `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(ModelError::Checkpoint(format!(
                        "`{name}` has shape {:?}, config implies {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(Self { config, params })
    }
}

impl Encoder<f64> {
    /// Adds N(0, std²) noise to every parameter. Moves the model away from
    /// the near-symmetric initialization so finite differences are well
    /// conditioned.
    pub fn perturb<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        for id in 0..self.params.len() {
            for v in self.params.tensor_mut(id).data_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += std * z;
            }
        }
    }
}

/// Outcome of comparing analytic and finite-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub entries_checked: usize,
    pub tensors_checked: usize,
}

/// Compares MLM-loss gradients with central differences (step 1e-5) in
/// eval mode. Checks `per_tensor` random entries of every parameter, or all
/// entries when `None`. Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
/// The floor keeps gradients that are exactly zero (such as key biases, which
/// cancel in the softmax) from turning finite-difference roundoff into a
/// large ratio.
pub fn mlm_gradient_check<R: Rng + ?Sized>(
    enc: &Encoder<f64>,
    batch: &Batch,
    per_tensor: Option<usize>,
    rng: &mut R,
) -> Result<GradCheckReport, ModelError> {
    let loss_at = |params: &ParamStore<f64>| -> Result<f64, ModelError> {
        let e = Encoder {
            config: enc.config.clone(),
            params: params.clone(),
        };
        let mut tape = Tape::new(&e.params);
        let st = e.forward(&mut tape, batch, Mode::Eval, &mut rand::rng())?;
        let l = e.mlm_loss(&mut tape, &st, batch, None)?;
        Ok(tape.value(l).data()[0])
    };
    let mut tape = Tape::new(&enc.params);
    let st = enc.forward(&mut tape, batch, Mode::Eval, &mut rand::rng())?;
    let l = enc.mlm_loss(&mut tape, &st, batch, None)?;
    let grads = tape.backward(l);
    let h = 1e-5;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        entries_checked: 0,
        tensors_checked: 0,
    };
    let mut params = enc.params.clone();
    for id in 0..params.len() {
        let n = params.tensor(id).numel();
        let entries: Vec<usize> = match per_tensor {
            Some(k) => (0..k.min(n)).map(|_| rng.random_range(0..n)).collect(),
            None => (0..n).collect(),
        };
        let zero = Tensor::zeros(params.tensor(id).shape());
        let g = grads.get(id).unwrap_or(&zero);
        for i in entries {
            let orig = params.tensor(id).data()[i];
            params.tensor_mut(id).data_mut()[i] = orig + h;
            let plus = loss_at(&params)?;
            params.tensor_mut(id).data_mut()[i] = orig - h;
            let minus = loss_at(&params)?;
            params.tensor_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = g.data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = format!("{}[{i}]: analytic {analytic:e}, numeric {numeric:e}", params.name(id));
            }
            report.entries_checked += 1;
        }
        report.tensors_checked += 1;
    }
    Ok(report)
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

fn attention<F: Float, R: Rng + ?Sized>(
    tape: &mut Tape<'_, F>,
    q: Var,
    k: Var,
    v: Var,
    key_mask: &[u8],
    dropout: f64,
    rng: &mut R,
) -> Var {
    let d = tape.shape(q)[3];
    let scores = tape.bmm(q, k, true);
    let scores = tape.scale(scores, cast(1.0 / (d as f64).sqrt()));
    let probs = tape.masked_softmax(scores, key_mask);
    let probs = tape.dropout(probs, dropout, rng);
    tape.bmm(probs, v, false)
}

/// `softmax(QKᵀ/√d + mask_bias)·V` over `(B, heads, T, d)` inputs, where keys
/// with `key_mask == 0` get no weight. A query whose keys are all masked
/// yields the zero vector.
pub fn scaled_attention<F: Float>(
    tape: &mut Tape<'_, F>,
    q: Var,
    k: Var,
    v: Var,
    key_mask: &[u8],
) -> Result<Var, ModelError> {
    let (sq, sk, sv) = (tape.shape(q), tape.shape(k), tape.shape(v));
    if sq.len() != 4 || sq != sk || sq != sv {
        return Err(ModelError::Shape(format!("attention inputs {sq:?}, {sk:?}, {sv:?}")));
    }
    if key_mask.len() != sq[0] * sq[2] {
        return Err(ModelError::Shape(format!(
            "key mask has {} entries, expected {}",
            key_mask.len(),
            sq[0] * sq[2]
        )));
    }
    Ok(attention(tape, q, k, v, key_mask, 0.0, &mut rand::rng()))
}
