//! Supervised fine-tuning for sequence and token classification: data
//! loading, splitting, class weights, training with early stopping, and
//! metrics.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamStore, Tape};
use crate::corpus::{preprocess_text, CleanText};
use crate::mlm::{Batch, MaskedExample, IGNORE};
use crate::model::{Encoder, Mode, ModelError};
use crate::optim::{adam_step, lr_at_step, AdamConfig, AdamState, OptimError, SchedulerConfig};
use crate::tensor::Float;
use crate::tokenizer::{TokenSequence, Vocabulary, CLS_ID, PAD_ID, SEP_ID};

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error("invalid fine-tuning config `{key}`: {message}")]
    InvalidConfig { key: &'static str, message: String },
    #[error("dataset is empty")]
    Empty,
    #[error("need at least 10 items to split, got {0}")]
    TooFewItems(usize),
    #[error("class {0} has no examples")]
    MissingClass(usize),
    #[error("label {label} is outside the {n_classes} configured classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("{predicted} predictions for {gold} gold labels")]
    LengthMismatch { predicted: usize, gold: usize },
    #[error("{path}:{line}: {message}")]
    Format { path: String, line: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSequence {
    pub text: CleanText,
    pub label: usize,
}

/// One sentence of `(word, label id)` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledTokens {
    pub tokens: Vec<(String, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub split: [f64; 3],
    pub seed: u64,
    pub batch_size: usize,
    pub class_weights: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self::sequence()
    }
}

impl FinetuneConfig {
    /// Learning rate 2e-5 for 3 epochs.
    pub fn sequence() -> Self {
        Self {
            lr: 2e-5,
            epochs: 3,
            patience: 5,
            split: [0.7, 0.1, 0.2],
            seed: 0,
            batch_size: 16,
            class_weights: true,
        }
    }

    /// Learning rate 5e-5 for 10 epochs.
    pub fn token() -> Self {
        Self {
            lr: 5e-5,
            epochs: 10,
            ..Self::sequence()
        }
    }

    pub fn validate(&self) -> Result<(), FinetuneError> {
        let bad = |key, message: String| Err(FinetuneError::InvalidConfig { key, message });
        if !(self.lr >= 0.0) {
            return bad("lr", format!("{} is negative", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.split.iter().any(|&r| !(0.0..=1.0).contains(&r)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("split", format!("{:?} must be fractions summing to 1", self.split));
        }
        Ok(())
    }
}

/// Reads a CSV with header `text,label`. Texts go through the corpus
/// normalization.
pub fn load_sequence_csv(path: &Path) -> Result<Vec<LabeledSequence>, FinetuneError> {
    #[derive(Deserialize)]
    struct Row {
        text: String,
        label: usize,
    }
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let row: Row = row?;
        out.push(LabeledSequence {
            text: preprocess_text(&row.text),
            label: row.label,
        });
    }
    Ok(out)
}

/// Token-classification sentences plus the label names, indexed by id.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDataset {
    pub sentences: Vec<LabeledTokens>,
    pub labels: Vec<String>,
}

impl TokenDataset {
    /// Builds a dataset from string-tagged sentences; label ids follow the
    /// sorted label names.
    pub fn from_tagged(sentences: &[Vec<(String, String)>]) -> Self {
        let names: BTreeMap<&str, ()> = sentences.iter().flatten().map(|(_, t)| (t.as_str(), ())).collect();
        let labels: Vec<String> = names.keys().map(|s| s.to_string()).collect();
        let sentences = sentences
            .iter()
            .map(|s| LabeledTokens {
                tokens: s
                    .iter()
                    .map(|(w, t)| (w.clone(), labels.iter().position(|l| l == t).unwrap()))
                    .collect(),
            })
            .collect();
        Self { sentences, labels }
    }
}

/// Parses CoNLL-style text: one `token<TAB>label` per line, blank lines
/// between sentences. The label set is whatever the data contain.
pub fn parse_conll<R: BufRead>(reader: R, source: &str) -> Result<TokenDataset, FinetuneError> {
    let mut sentences = Vec::new();
    let mut current = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !current.is_empty() {
                sentences.push(std::mem::take(&mut current));
            }
            continue;
        }
        let (word, tag) = line.split_once('\t').ok_or_else(|| FinetuneError::Format {
            path: source.to_string(),
            line: i + 1,
            message: "expected `token<TAB>label`".into(),
        })?;
        if word.is_empty() || tag.is_empty() {
            return Err(FinetuneError::Format {
                path: source.to_string(),
                line: i + 1,
                message: "empty token or label".into(),
            });
        }
        current.push((word.to_string(), tag.to_string()));
    }
    if !current.is_empty() {
        sentences.push(current);
    }
    Ok(TokenDataset::from_tagged(&sentences))
}

pub fn load_conll(path: &Path) -> Result<TokenDataset, FinetuneError> {
    let file = std::fs::File::open(path)?;
    parse_conll(std::io::BufReader::new(file), &path.display().to_string())
}

/// Seeded shuffle, then contiguous train/validation/test cuts. Validation
/// and test sizes are `floor(n·ratio)`; the remainder goes to training.
pub fn split_dataset<T: Clone>(
    data: &[T],
    ratios: [f64; 3],
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>), FinetuneError> {
    if data.is_empty() {
        return Err(FinetuneError::Empty);
    }
    if data.len() < 10 {
        return Err(FinetuneError::TooFewItems(data.len()));
    }
    if ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(FinetuneError::InvalidConfig {
            key: "split",
            message: format!("{ratios:?} must be fractions summing to 1"),
        });
    }
    let n = data.len();
    let floor = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
    let (n_val, n_test) = (floor(ratios[1]), floor(ratios[2]));
    let n_train = n - n_val - n_test;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |range: std::ops::Range<usize>| order[range].iter().map(|&i| data[i].clone()).collect::<Vec<T>>();
    Ok((take(0..n_train), take(n_train..n_train + n_val), take(n_train + n_val..n)))
}

/// `w_c = N / (K · n_c)`.
pub fn compute_class_weights(labels: &[usize], n_classes: usize) -> Result<Vec<f64>, FinetuneError> {
    if labels.is_empty() {
        return Err(FinetuneError::Empty);
    }
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        if l >= n_classes {
            return Err(FinetuneError::LabelOutOfRange { label: l, n_classes });
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(FinetuneError::MissingClass(c));
    }
    let n = labels.len() as f64;
    Ok(counts.iter().map(|&c| n / (n_classes as f64 * c as f64)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    /// Classes absent from the gold labels and never predicted; their F1 is
    /// reported as 0.
    pub degenerate_classes: Vec<usize>,
}

pub fn evaluate(predictions: &[usize], gold: &[usize], n_classes: usize) -> Result<Metrics, FinetuneError> {
    if predictions.len() != gold.len() {
        return Err(FinetuneError::LengthMismatch {
            predicted: predictions.len(),
            gold: gold.len(),
        });
    }
    if gold.is_empty() {
        return Err(FinetuneError::Empty);
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&p, &g) in predictions.iter().zip(gold) {
        for label in [p, g] {
            if label >= n_classes {
                return Err(FinetuneError::LabelOutOfRange { label, n_classes });
            }
        }
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class_f1: Vec<f64> = (0..n_classes).map(|c| ratio(2 * tp[c], 2 * tp[c] + fp[c] + fn_[c])).collect();
    let per_class_precision = (0..n_classes).map(|c| ratio(tp[c], tp[c] + fp[c])).collect();
    let per_class_recall = (0..n_classes).map(|c| ratio(tp[c], tp[c] + fn_[c])).collect();
    let degenerate_classes = (0..n_classes).filter(|&c| tp[c] + fp[c] + fn_[c] == 0).collect();
    Ok(Metrics {
        accuracy: ratio(tp.iter().sum(), gold.len()),
        macro_f1: per_class_f1.iter().sum::<f64>() / n_classes as f64,
        per_class_f1,
        per_class_precision,
        per_class_recall,
        degenerate_classes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch; `None` for the initial evaluation
    /// and for epochs without a supervised batch.
    pub train_loss: Option<f64>,
    pub val_accuracy: f64,
    pub val_macro_f1: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneResult {
    pub encoder: Encoder<f32>,
    pub test: Metrics,
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
    /// Epoch 0 is the model before any update.
    pub history: Vec<EpochRecord>,
}

/// Encodes and truncates to `max_len` tokens, keeping the final `<sep>`.
fn encode_sequence(vocab: &Vocabulary, text: &str, max_len: usize) -> Vec<u32> {
    let mut ids = vocab.encode(text, true).ids;
    if ids.len() > max_len {
        log::warn!("truncating a sequence of {} tokens to {max_len}", ids.len());
        ids.truncate(max_len - 1);
        ids.push(SEP_ID);
    }
    ids
}

/// Encodes with `<cls>`/`<sep>`, truncating to `max_len` tokens and keeping
/// the final `<sep>`.
pub fn encode_truncated(vocab: &Vocabulary, text: &str, max_len: usize) -> TokenSequence {
    TokenSequence::from_ids(encode_sequence(vocab, text, max_len))
}

/// Word-aligned encoding: the first sub-word of each word carries its label
/// and the remaining sub-words (and `<cls>`/`<sep>`) are [`IGNORE`].
pub fn encode_labeled_words(vocab: &Vocabulary, words: &[(String, usize)], max_len: usize) -> (Vec<u32>, Vec<i32>) {
    let mut ids = vec![CLS_ID];
    let mut labels = vec![IGNORE];
    for (i, (word, label)) in words.iter().enumerate() {
        let piece = if i == 0 { word.clone() } else { format!(" {word}") };
        let sub = vocab.encode(&piece, false).ids;
        for (j, id) in sub.into_iter().enumerate() {
            ids.push(id);
            labels.push(if j == 0 { *label as i32 } else { IGNORE });
        }
    }
    if ids.len() >= max_len {
        log::warn!("truncating a sentence of {} tokens to {max_len}", ids.len() + 1);
        ids.truncate(max_len - 1);
        labels.truncate(max_len - 1);
    }
    ids.push(SEP_ID);
    labels.push(IGNORE);
    (ids, labels)
}

/// Pads rows to the longest one, or to `min_len` if that is longer. Labels
/// default to [`IGNORE`].
pub(crate) fn pad_rows(rows: &[(Vec<u32>, Vec<i32>)], min_len: usize) -> Batch {
    let t = rows.iter().map(|r| r.0.len()).max().unwrap_or(2).max(min_len);
    let examples: Vec<MaskedExample> = rows
        .iter()
        .map(|(ids, labels)| {
            let mut input_ids = ids.clone();
            let mut l = labels.clone();
            let mut mask = vec![1u8; ids.len()];
            input_ids.resize(t, PAD_ID);
            l.resize(t, IGNORE);
            mask.resize(t, 0);
            MaskedExample {
                input_ids,
                labels: l,
                attention_mask: mask,
            }
        })
        .collect();
    Batch::from_examples(&examples).expect("non-empty batch")
}

/// A task the shared training loop can drive.
trait Task {
    /// Padded batch for the given items. Sequence tasks return the labels
    /// separately; token tasks put them in the batch.
    fn batch(&self, items: &[usize]) -> (Batch, Vec<usize>);
    fn loss<'p>(
        &self,
        enc: &'p Encoder<f32>,
        tape: &mut Tape<'p, f32>,
        batch: &Batch,
        labels: &[usize],
        weights: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<crate::autodiff::Var>, FinetuneError>;
    fn predict(&self, enc: &Encoder<f32>, batch: &Batch) -> Result<Vec<usize>, FinetuneError>;
    fn gold(&self, batch: &Batch, labels: &[usize]) -> Vec<usize>;
}

struct SequenceTask {
    rows: Vec<(Vec<u32>, Vec<i32>)>,
    labels: Vec<usize>,
}

impl Task for SequenceTask {
    fn batch(&self, items: &[usize]) -> (Batch, Vec<usize>) {
        let rows: Vec<_> = items.iter().map(|&i| self.rows[i].clone()).collect();
        (pad_rows(&rows, 0), items.iter().map(|&i| self.labels[i]).collect())
    }

    fn loss<'p>(
        &self,
        enc: &'p Encoder<f32>,
        tape: &mut Tape<'p, f32>,
        batch: &Batch,
        labels: &[usize],
        weights: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<crate::autodiff::Var>, FinetuneError> {
        let states = enc.forward(tape, batch, Mode::Train, rng)?;
        let logits = enc.sequence_logits(tape, &states)?;
        let w: Vec<f32> = labels.iter().map(|&l| weights[l] as f32).collect();
        Ok(Some(tape.cross_entropy(logits, labels, &w)))
    }

    fn predict(&self, enc: &Encoder<f32>, batch: &Batch) -> Result<Vec<usize>, FinetuneError> {
        let mut tape = Tape::new(&enc.params);
        let states = enc.forward(&mut tape, batch, Mode::Eval, &mut rand::rng())?;
        let logits = enc.sequence_logits(&mut tape, &states)?;
        let v = tape.value(logits);
        Ok((0..v.rows()).map(|r| argmax(v.row(r))).collect())
    }

    fn gold(&self, _batch: &Batch, labels: &[usize]) -> Vec<usize> {
        labels.to_vec()
    }
}

struct TokenTask {
    rows: Vec<(Vec<u32>, Vec<i32>)>,
}

impl Task for TokenTask {
    fn batch(&self, items: &[usize]) -> (Batch, Vec<usize>) {
        let rows: Vec<_> = items.iter().map(|&i| self.rows[i].clone()).collect();
        (pad_rows(&rows, 0), Vec::new())
    }

    fn loss<'p>(
        &self,
        enc: &'p Encoder<f32>,
        tape: &mut Tape<'p, f32>,
        batch: &Batch,
        _labels: &[usize],
        weights: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<crate::autodiff::Var>, FinetuneError> {
        let (positions, targets): (Vec<usize>, Vec<usize>) = batch
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != IGNORE)
            .map(|(i, &l)| (i, l as usize))
            .unzip();
        if positions.is_empty() {
            return Ok(None);
        }
        let states = enc.forward(tape, batch, Mode::Train, rng)?;
        let logits = enc.token_logits(tape, &states)?;
        let picked = tape.gather_rows(logits, &positions);
        let w: Vec<f32> = targets.iter().map(|&l| weights[l] as f32).collect();
        Ok(Some(tape.cross_entropy(picked, &targets, &w)))
    }

    fn predict(&self, enc: &Encoder<f32>, batch: &Batch) -> Result<Vec<usize>, FinetuneError> {
        let mut tape = Tape::new(&enc.params);
        let states = enc.forward(&mut tape, batch, Mode::Eval, &mut rand::rng())?;
        let logits = enc.token_logits(&mut tape, &states)?;
        let v = tape.value(logits);
        Ok((0..batch.labels.len())
            .filter(|&i| batch.labels[i] != IGNORE)
            .map(|i| argmax(v.row(i)))
            .collect())
    }

    fn gold(&self, batch: &Batch, _labels: &[usize]) -> Vec<usize> {
        batch.labels.iter().filter(|&&l| l != IGNORE).map(|&l| l as usize).collect()
    }
}

fn argmax<F: Float>(row: &[F]) -> usize {
    (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
}

fn predict_all(
    task: &dyn Task,
    enc: &Encoder<f32>,
    items: &[usize],
    batch_size: usize,
) -> Result<(Vec<usize>, Vec<usize>), FinetuneError> {
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    for chunk in items.chunks(batch_size.max(1)) {
        let (b, labels) = task.batch(chunk);
        pred.extend(task.predict(enc, &b)?);
        gold.extend(task.gold(&b, &labels));
    }
    Ok((pred, gold))
}

struct Splits<'a> {
    train: &'a [usize],
    val: &'a [usize],
    test: &'a [usize],
}

fn train_loop(
    task: &dyn Task,
    mut enc: Encoder<f32>,
    splits: &Splits,
    n_classes: usize,
    class_weights: Vec<f64>,
    cfg: &FinetuneConfig,
) -> Result<FinetuneResult, FinetuneError> {
    let steps_per_epoch = splits.train.len().div_ceil(cfg.batch_size) as u64;
    let schedule = SchedulerConfig::linear_decay(cfg.lr, steps_per_epoch * cfg.epochs as u64);
    let adam = AdamConfig::default();
    let mut state = AdamState::new(&enc.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf1e7_0000);
    let evaluate_on = |enc: &Encoder<f32>, items: &[usize]| -> Result<Metrics, FinetuneError> {
        let (p, g) = predict_all(task, enc, items, 64)?;
        evaluate(&p, &g, n_classes)
    };
    let initial = evaluate_on(&enc, splits.val)?;
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        val_accuracy: initial.accuracy,
        val_macro_f1: initial.macro_f1,
    }];
    let mut best: (f64, usize, ParamStore<f32>) = (initial.macro_f1, 0, enc.params.clone());
    let mut step = 0u64;
    let mut since_best = 0;
    for epoch in 1..=cfg.epochs {
        let mut order = splits.train.to_vec();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (b, labels) = task.batch(chunk);
            let lr = lr_at_step(step, &schedule);
            step += 1;
            let grads = {
                let mut tape = Tape::new(&enc.params);
                let Some(loss) = task.loss(&enc, &mut tape, &b, &labels, &class_weights, &mut rng)? else {
                    continue;
                };
                loss_sum += tape.value(loss).data()[0] as f64;
                loss_n += 1;
                tape.backward(loss)
            };
            adam_step(&mut enc.params, &grads, &mut state, &adam, lr)?;
        }
        let val = evaluate_on(&enc, splits.val)?;
        log::debug!("epoch {epoch}: val macro-F1 {:.4}", val.macro_f1);
        history.push(EpochRecord {
            epoch,
            train_loss: (loss_n > 0).then(|| loss_sum / loss_n as f64),
            val_accuracy: val.accuracy,
            val_macro_f1: val.macro_f1,
        });
        if val.macro_f1 > best.0 {
            best = (val.macro_f1, epoch, enc.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    let (best_val_macro_f1, best_epoch, params) = best;
    enc.params = params;
    let test = evaluate_on(&enc, splits.test)?;
    Ok(FinetuneResult {
        encoder: enc,
        test,
        best_epoch,
        best_val_macro_f1,
        history,
    })
}

fn index_splits(n: usize, ratios: [f64; 3], seed: u64) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>), FinetuneError> {
    let idx: Vec<usize> = (0..n).collect();
    split_dataset(&idx, ratios, seed)
}

/// Fine-tunes the backbone plus a fresh `<cls>` head initialized from
/// `head_seed`. The split uses `cfg.seed`, so runs that differ only in
/// `head_seed` see the same partition.
pub fn finetune_sequence(
    base: &Encoder<f32>,
    vocab: &Vocabulary,
    data: &[LabeledSequence],
    n_classes: usize,
    cfg: &FinetuneConfig,
    head_seed: u64,
) -> Result<FinetuneResult, FinetuneError> {
    cfg.validate()?;
    if let Some(d) = data.iter().find(|d| d.label >= n_classes) {
        return Err(FinetuneError::LabelOutOfRange {
            label: d.label,
            n_classes,
        });
    }
    let (train, val, test) = index_splits(data.len(), cfg.split, cfg.seed)?;
    let max_len = base.config.max_positions;
    let task = SequenceTask {
        rows: data
            .iter()
            .map(|d| {
                let ids = encode_sequence(vocab, d.text.as_str(), max_len);
                let n = ids.len();
                (ids, vec![IGNORE; n])
            })
            .collect(),
        labels: data.iter().map(|d| d.label).collect(),
    };
    let train_labels: Vec<usize> = train.iter().map(|&i| data[i].label).collect();
    let weights = if cfg.class_weights {
        compute_class_weights(&train_labels, n_classes)?
    } else {
        vec![1.0; n_classes]
    };
    let mut enc = base.clone();
    enc.init_sequence_head(n_classes, &mut ChaCha8Rng::seed_from_u64(head_seed));
    let splits = Splits {
        train: &train,
        val: &val,
        test: &test,
    };
    train_loop(&task, enc, &splits, n_classes, weights, cfg)
}

/// Token-level counterpart of [`finetune_sequence`]. Loss and metrics use
/// the first sub-word of every word.
pub fn finetune_token(
    base: &Encoder<f32>,
    vocab: &Vocabulary,
    data: &[LabeledTokens],
    n_labels: usize,
    cfg: &FinetuneConfig,
    head_seed: u64,
) -> Result<FinetuneResult, FinetuneError> {
    cfg.validate()?;
    if let Some(&(_, l)) = data.iter().flat_map(|s| &s.tokens).find(|(_, l)| *l >= n_labels) {
        return Err(FinetuneError::LabelOutOfRange {
            label: l,
            n_classes: n_labels,
        });
    }
    let (train, val, test) = index_splits(data.len(), cfg.split, cfg.seed)?;
    let max_len = base.config.max_positions;
    let task = TokenTask {
        rows: data
            .iter()
            .map(|s| encode_labeled_words(vocab, &s.tokens, max_len))
            .collect(),
    };
    let train_labels: Vec<usize> = train
        .iter()
        .flat_map(|&i| task.rows[i].1.iter().filter(|&&l| l != IGNORE).map(|&l| l as usize))
        .collect();
    let weights = if cfg.class_weights {
        compute_class_weights(&train_labels, n_labels)?
    } else {
        vec![1.0; n_labels]
    };
    let mut enc = base.clone();
    enc.init_token_head(n_labels, &mut ChaCha8Rng::seed_from_u64(head_seed));
    let splits = Splits {
        train: &train,
        val: &val,
        test: &test,
    };
    train_loop(&task, enc, &splits, n_labels, weights, cfg)
}

/// Mean and sample standard deviation over repeated runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub macro_f1_mean: f64,
    pub macro_f1_std: f64,
    pub runs: Vec<Metrics>,
}

impl RunSummary {
    pub fn from_runs(runs: Vec<Metrics>) -> Self {
        let acc: Vec<f64> = runs.iter().map(|m| m.accuracy).collect();
        let f1: Vec<f64> = runs.iter().map(|m| m.macro_f1).collect();
        let (accuracy_mean, accuracy_std) = mean_std(&acc);
        let (macro_f1_mean, macro_f1_std) = mean_std(&f1);
        Self {
            accuracy_mean,
            accuracy_std,
            macro_f1_mean,
            macro_f1_std,
            runs,
        }
    }

    /// `accuracy 0.8275 (0.011), macro-F1 0.7728 (0.01)`.
    pub fn describe(&self) -> String {
        format!(
            "accuracy {}, macro-F1 {}",
            format_mean_std(self.accuracy_mean, self.accuracy_std),
            format_mean_std(self.macro_f1_mean, self.macro_f1_std)
        )
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Mean to four decimals and standard deviation to two significant
/// figures, trailing zeros dropped: `0.8275 (0.011)`.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    let m = trim_zeros(format!("{mean:.4}"));
    let s = if std == 0.0 {
        "0".to_string()
    } else {
        let digits = (1 - std.abs().log10().floor() as i32).max(0) as usize;
        trim_zeros(format!("{std:.digits$}"))
    };
    format!("{m} ({s})")
}

/// Runs `n_runs` independent jobs in parallel (run `i` receives `i`) and
/// returns their results in run order.
pub fn run_parallel<T, F>(n_runs: usize, run: F) -> Result<Vec<T>, FinetuneError>
where
    T: Send,
    F: Fn(usize) -> Result<T, FinetuneError> + Sync,
{
    (0..n_runs).into_par_iter().map(&run).collect()
}

/// [`run_parallel`] over metric-producing jobs, summarized.
pub fn repeat_runs<F>(n_runs: usize, run: F) -> Result<RunSummary, FinetuneError>
where
    F: Fn(usize) -> Result<Metrics, FinetuneError> + Sync,
{
    Ok(RunSummary::from_runs(run_parallel(n_runs, run)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn split_sizes() {
        let data: Vec<usize> = (0..100).collect();
        let (a, b, c) = split_dataset(&data, [0.7, 0.1, 0.2], 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (70, 10, 20));
        let (a2, b2, c2) = split_dataset(&data, [0.7, 0.1, 0.2], 1).unwrap();
        assert_eq!((a, b, c), (a2, b2, c2));
        let ten: Vec<usize> = (0..10).collect();
        let (a, b, c) = split_dataset(&ten, [0.7, 0.1, 0.2], 0).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (7, 1, 2));
        let mut all: Vec<usize> = a.into_iter().chain(b).chain(c).collect();
        all.sort();
        assert_eq!(all, ten);
        assert!(matches!(split_dataset::<usize>(&[], [0.7, 0.1, 0.2], 0), Err(FinetuneError::Empty)));
        assert!(matches!(split_dataset(&[1, 2, 3], [0.7, 0.1, 0.2], 0), Err(FinetuneError::TooFewItems(3))));
    }

    #[test]
    fn class_weight_examples() {
        let w = compute_class_weights(&[0, 0, 1], 2).unwrap();
        assert_eq!(w, vec![0.75, 1.5]);
        assert_eq!(compute_class_weights(&[0, 1, 2, 0, 1, 2], 3).unwrap(), vec![1.0; 3]);
        let w = compute_class_weights(&[0, 1, 1, 1], 2).unwrap();
        assert_eq!(w[0], 2.0);
        assert!((w[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(compute_class_weights(&[0, 0], 2), Err(FinetuneError::MissingClass(1))));
    }

    #[test]
    fn metric_examples() {
        let m = evaluate(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap();
        assert_eq!((m.accuracy, m.macro_f1), (1.0, 1.0));
        let m = evaluate(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert!((m.per_class_f1[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.per_class_f1[1], 0.0);
        assert!((m.macro_f1 - 1.0 / 3.0).abs() < 1e-15);
        let m = evaluate(&[1, 0], &[0, 1], 2).unwrap();
        assert_eq!((m.accuracy, m.macro_f1), (0.0, 0.0));
        let m = evaluate(&[0, 1], &[0, 1], 3).unwrap();
        assert_eq!(m.degenerate_classes, vec![2]);
        assert!(matches!(evaluate(&[0], &[0, 1], 2), Err(FinetuneError::LengthMismatch { .. })));
    }

    proptest! {
        #[test]
        fn evaluate_is_permutation_invariant(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..40), seed in any::<u64>()) {
            let (p, g): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let a = evaluate(&p, &g, 3).unwrap();
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let (p2, g2): (Vec<usize>, Vec<usize>) = shuffled.into_iter().unzip();
            let b = evaluate(&p2, &g2, 3).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn metrics_are_fractions(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..40)) {
            let (p, g): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let m = evaluate(&p, &g, 4).unwrap();
            for v in std::iter::once(m.accuracy).chain(std::iter::once(m.macro_f1)).chain(m.per_class_f1) {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn mean_std_formatting() {
        assert_eq!(format_mean_std(0.8275, 0.011), "0.8275 (0.011)");
        assert_eq!(format_mean_std(0.741, 0.008), "0.741 (0.008)");
        assert_eq!(format_mean_std(0.7728, 0.0100), "0.7728 (0.01)");
        assert_eq!(format_mean_std(0.7431, 0.00834), "0.7431 (0.0083)");
        assert_eq!(format_mean_std(0.7139, 0.26), "0.7139 (0.26)");
        assert_eq!(format_mean_std(1.0, 0.0), "1 (0)");
    }

    #[test]
    fn conll_parsing() {
        let text = "ana\tPER\nvive\tO\nen\tO\nlima\tLOC\n\nhola\tO\n";
        let ds = parse_conll(text.as_bytes(), "mem").unwrap();
        assert_eq!(ds.labels, vec!["LOC", "O", "PER"]);
        assert_eq!(ds.sentences.len(), 2);
        assert_eq!(ds.sentences[0].tokens[0], ("ana".to_string(), 2));
        let bad = parse_conll("ana PER\n".as_bytes(), "mem").unwrap_err();
        assert!(matches!(bad, FinetuneError::Format { line: 1, .. }));
    }

    #[test]
    fn first_subword_labels() {
        let vocab = crate::tokenizer::train_bpe(["hola mundo", "hola"], 40, 1).unwrap();
        let words = vec![("hola".to_string(), 1), ("mundial".to_string(), 2)];
        let (ids, labels) = encode_labeled_words(&vocab, &words, 64);
        assert_eq!(ids[0], CLS_ID);
        assert_eq!(*ids.last().unwrap(), SEP_ID);
        assert_eq!(labels.iter().filter(|&&l| l != IGNORE).count(), 2);
        assert_eq!(labels[1], 1);
        let joined = vocab.encode("hola mundial", true);
        assert_eq!(ids, joined.ids);
        let first_of_second = 1 + vocab.encode("hola", false).ids.len();
        assert_eq!(labels[first_of_second], 2);
    }

    #[test]
    fn csv_loader() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "text,label\n\"hola @pepe, qué tal\",1\nadiós,0\n").unwrap();
        let d = load_sequence_csv(&p).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].text.as_str(), "hola <usr>, qué tal");
        assert_eq!(d[0].label, 1);
    }
}
