//! Sentence embeddings from an intermediate encoder layer and author
//! profiling on top of them.
//!
//! An embedding is the mean, over non-padding positions, of the output of
//! block `blocks − 1`: the state just before the final block. Authors are
//! reduced to one vector by element-wise mean or max over their tweets and
//! classified by a small tanh network.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamStore, Tape};
use crate::finetune::{encode_truncated, mean_std, pad_rows, split_dataset, FinetuneError};
use crate::mlm::IGNORE;
use crate::model::{Encoder, EncoderConfig, Mode, ModelError};
use crate::optim::{adam_step, AdamConfig, AdamState, OptimError};
use crate::tensor::{Float, Tensor};
use crate::tokenizer::{TokenSequence, Vocabulary};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("layer {layer} is outside the stack of {available} hidden states")]
    LayerOutOfRange { layer: usize, available: usize },
    #[error("author `{0}` has no tweets")]
    EmptyAuthor(String),
    #[error("nothing to aggregate")]
    EmptyAggregate,
    #[error("embeddings have inconsistent lengths ({expected} vs {found})")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("profiling needs both labels; found only {0:?}")]
    SingleClass(Vec<usize>),
    #[error("author `{0}` has no label")]
    Unlabeled(String),
    #[error("label {0} is not 0 or 1")]
    BadLabel(usize),
    #[error("invalid value for `{key}`: {message}")]
    InvalidConfig { key: &'static str, message: String },
    #[error("{path}:{line}: {message}")]
    Format { path: String, line: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Split(#[from] FinetuneError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    /// Set when the input text was empty and the vector is the embedding of
    /// `<cls> <sep>` alone.
    pub empty_input: bool,
}

/// Stack index used for sentence embeddings: the output of the penultimate
/// block, which for a one-block model is the embedding layer.
pub fn embedding_layer(config: &EncoderConfig) -> usize {
    config.blocks - 1
}

const EMBED_BATCH: usize = 32;

/// Mean-pooled layer `layer` for each row, with every row padded to at
/// least `min_len`.
fn pooled<F: Float>(enc: &Encoder<F>, rows: &[Vec<u32>], min_len: usize, layer: usize) -> Result<Vec<Vec<f64>>, EmbedError> {
    let available = enc.config.blocks + 1;
    if layer >= available {
        return Err(EmbedError::LayerOutOfRange { layer, available });
    }
    let labelled: Vec<(Vec<u32>, Vec<i32>)> = rows.iter().map(|r| (r.clone(), vec![IGNORE; r.len()])).collect();
    let batch = pad_rows(&labelled, min_len);
    let mut tape = Tape::new(&enc.params);
    let states = enc.forward(&mut tape, &batch, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
    let v = tape.value(states.layers[layer]);
    let (t, h) = (batch.seq_len, enc.config.hidden);
    Ok((0..batch.batch_size)
        .map(|b| {
            let mut acc = vec![0.0f64; h];
            let mut n = 0usize;
            for p in 0..t {
                if batch.attention_mask[b * t + p] == 1 {
                    for (a, x) in acc.iter_mut().zip(v.row(b * t + p)) {
                        *a += x.to_f64().unwrap();
                    }
                    n += 1;
                }
            }
            acc.iter().map(|a| a / n as f64).collect()
        })
        .collect())
}

/// Embeds already-encoded sequences in parallel batches. `layer` defaults to
/// [`embedding_layer`].
pub fn embed_sequences<F: Float>(
    enc: &Encoder<F>,
    seqs: &[TokenSequence],
    layer: Option<usize>,
) -> Result<Vec<Vec<f64>>, EmbedError> {
    let layer = layer.unwrap_or_else(|| embedding_layer(&enc.config));
    let chunks: Vec<Vec<Vec<f64>>> = seqs
        .par_chunks(EMBED_BATCH)
        .map(|chunk| {
            let rows: Vec<Vec<u32>> = chunk.iter().map(|s| s.ids.clone()).collect();
            pooled(enc, &rows, 0, layer)
        })
        .collect::<Result<_, _>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Embeds one id sequence padded to `pad_to` positions.
pub fn embed_ids_padded<F: Float>(
    enc: &Encoder<F>,
    ids: &[u32],
    pad_to: usize,
    layer: Option<usize>,
) -> Result<Vec<f64>, EmbedError> {
    let layer = layer.unwrap_or_else(|| embedding_layer(&enc.config));
    Ok(pooled(enc, &[ids.to_vec()], pad_to, layer)?.remove(0))
}

pub fn embed_texts<F: Float>(
    enc: &Encoder<F>,
    vocab: &Vocabulary,
    texts: &[&str],
    layer: Option<usize>,
) -> Result<Vec<EmbeddingVector>, EmbedError> {
    let max_len = enc.config.max_positions;
    let seqs: Vec<TokenSequence> = texts.iter().map(|t| encode_truncated(vocab, t, max_len)).collect();
    let values = embed_sequences(enc, &seqs, layer)?;
    Ok(values
        .into_iter()
        .zip(texts)
        .map(|(values, text)| {
            let empty_input = text.trim().is_empty();
            if empty_input {
                log::warn!("empty text embedded as <cls> <sep>");
            }
            EmbeddingVector { values, empty_input }
        })
        .collect())
}

pub fn embed_sequence<F: Float>(
    enc: &Encoder<F>,
    vocab: &Vocabulary,
    text: &str,
    layer: Option<usize>,
) -> Result<EmbeddingVector, EmbedError> {
    Ok(embed_texts(enc, vocab, &[text], layer)?.remove(0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

impl std::str::FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            other => Err(format!("unknown aggregation `{other}` (expected mean or max)")),
        }
    }
}

/// Element-wise mean or max over `vectors`.
pub fn aggregate(vectors: &[Vec<f64>], mode: Aggregation) -> Result<Vec<f64>, EmbedError> {
    let first = vectors.first().ok_or(EmbedError::EmptyAggregate)?;
    let d = first.len();
    if let Some(v) = vectors.iter().find(|v| v.len() != d) {
        return Err(EmbedError::DimensionMismatch {
            expected: d,
            found: v.len(),
        });
    }
    Ok(match mode {
        Aggregation::Mean => {
            let mut acc = vec![0.0; d];
            for v in vectors {
                for (a, x) in acc.iter_mut().zip(v) {
                    *a += x;
                }
            }
            acc.iter().map(|a| a / vectors.len() as f64).collect()
        }
        Aggregation::Max => (0..d)
            .map(|j| vectors.iter().map(|v| v[j]).fold(f64::NEG_INFINITY, f64::max))
            .collect(),
    })
}

/// Label 1 marks a spreader, 0 a non-spreader.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuthorProfile {
    pub author_id: String,
    pub tweet_embeddings: Vec<Vec<f64>>,
    pub label: Option<usize>,
}

pub fn aggregate_author(profile: &AuthorProfile, mode: Aggregation) -> Result<Vec<f64>, EmbedError> {
    if profile.tweet_embeddings.is_empty() {
        return Err(EmbedError::EmptyAuthor(profile.author_id.clone()));
    }
    aggregate(&profile.tweet_embeddings, mode)
}

/// One line of the author JSON-lines format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuthorRecord {
    pub author_id: String,
    #[serde(default)]
    pub label: Option<usize>,
    pub tweets: Vec<String>,
}

pub fn parse_authors<R: BufRead>(reader: R, source: &str) -> Result<Vec<AuthorRecord>, EmbedError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AuthorRecord = serde_json::from_str(&line).map_err(|e| EmbedError::Format {
            path: source.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.tweets.is_empty() {
            return Err(EmbedError::EmptyAuthor(rec.author_id));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_authors(path: &Path) -> Result<Vec<AuthorRecord>, EmbedError> {
    let file = std::fs::File::open(path)?;
    parse_authors(std::io::BufReader::new(file), &path.display().to_string())
}

/// Embeds every tweet of every author. Tweets go through the corpus
/// normalization first.
pub fn embed_authors<F: Float>(
    enc: &Encoder<F>,
    vocab: &Vocabulary,
    authors: &[AuthorRecord],
    layer: Option<usize>,
) -> Result<Vec<AuthorProfile>, EmbedError> {
    authors
        .iter()
        .map(|a| {
            let clean: Vec<_> = a.tweets.iter().map(|t| crate::corpus::preprocess_text(t)).collect();
            let texts: Vec<&str> = clean.iter().map(|c| c.as_str()).collect();
            let tweet_embeddings = embed_texts(enc, vocab, &texts, layer)?.into_iter().map(|e| e.values).collect();
            Ok(AuthorProfile {
                author_id: a.author_id.clone(),
                tweet_embeddings,
                label: a.label,
            })
        })
        .collect()
}

/// Writes `id,label,e0,…` rows. A missing label is an empty field.
pub fn write_embedding_csv(path: &Path, rows: &[(String, Option<String>, Vec<f64>)]) -> Result<(), EmbedError> {
    let dim = rows.first().map_or(0, |r| r.2.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..dim).map(|j| format!("e{j}")));
    w.write_record(&header)?;
    for (id, label, values) in rows {
        if values.len() != dim {
            return Err(EmbedError::DimensionMismatch {
                expected: dim,
                found: values.len(),
            });
        }
        let mut rec = vec![id.clone(), label.clone().unwrap_or_default()];
        rec.extend(values.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub type EmbeddingRow = (String, Option<String>, Vec<f64>);

pub fn read_embedding_csv(path: &Path) -> Result<Vec<EmbeddingRow>, EmbedError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |message: String| EmbedError::Format {
            path: path.display().to_string(),
            line: i + 2,
            message,
        };
        if rec.len() < 2 {
            return Err(bad("expected id,label,values…".into()));
        }
        let values = rec
            .iter()
            .skip(2)
            .map(|v| v.parse::<f64>().map_err(|e| bad(format!("`{v}`: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let label = Some(rec[1].to_string()).filter(|l| !l.is_empty());
        out.push((rec[0].to_string(), label, values));
    }
    Ok(out)
}

/// Optimization settings of the dense profiling head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub split: [f64; 3],
    pub runs: usize,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 60,
            lr: 1e-3,
            epochs: 100,
            patience: 10,
            batch_size: 32,
            split: [0.7, 0.1, 0.2],
            runs: 10,
            seed: 0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        let bad = |key, message: String| Err(EmbedError::InvalidConfig { key, message });
        if self.hidden == 0 {
            return bad("hidden", "must be at least 1".into());
        }
        if !(self.lr > 0.0) {
            return bad("lr", format!("{} must be positive", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.runs == 0 {
            return bad("runs", "must be at least 1".into());
        }
        if self.split.iter().any(|&r| !(0.0..=1.0).contains(&r)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("split", format!("{:?} must be fractions summing to 1", self.split));
        }
        Ok(())
    }
}

/// `input → hidden → hidden → 2` with tanh after both hidden layers.
#[derive(Clone, Debug)]
pub struct DenseHead {
    pub params: ParamStore<f64>,
}

const HEAD_LAYERS: [&str; 3] = ["l1", "l2", "out"];

impl DenseHead {
    /// Glorot-uniform weights and zero biases.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        for (name, (i, o)) in HEAD_LAYERS.iter().zip([(input, hidden), (hidden, hidden), (hidden, 2)]) {
            let a = (6.0 / (i + o) as f64).sqrt();
            params.add(
                format!("{name}.weight"),
                Tensor::from_fn(&[i, o], |_| rng.random_range(-a..a)),
            );
            params.add(format!("{name}.bias"), Tensor::zeros(&[o]));
        }
        Self { params }
    }

    /// Logits for the rows of `x`, shape `(n, 2)`.
    pub fn logits<'p>(&'p self, tape: &mut Tape<'p, f64>, x: &[Vec<f64>]) -> crate::autodiff::Var {
        let d = x[0].len();
        let input = Tensor::new(vec![x.len(), d], x.iter().flatten().copied().collect()).expect("rectangular input");
        let mut h = tape.constant(input);
        for (k, name) in HEAD_LAYERS.iter().enumerate() {
            let w = tape.param_named(&format!("{name}.weight"));
            let b = tape.param_named(&format!("{name}.bias"));
            h = tape.linear(h, w, b);
            if k + 1 < HEAD_LAYERS.len() {
                h = tape.tanh(h);
            }
        }
        h
    }

    pub fn predict(&self, x: &[Vec<f64>]) -> Vec<usize> {
        if x.is_empty() {
            return Vec::new();
        }
        let mut tape = Tape::new(&self.params);
        let l = self.logits(&mut tape, x);
        let v = tape.value(l);
        (0..v.rows()).map(|r| usize::from(v.row(r)[1] > v.row(r)[0])).collect()
    }
}

/// Test-set metrics with the spreader class (label 1) as positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
}

pub fn binary_metrics(pred: &[usize], gold: &[usize]) -> BinaryMetrics {
    let count = |f: &dyn Fn(usize, usize) -> bool| pred.iter().zip(gold).filter(|(&p, &g)| f(p, g)).count();
    let tp = count(&|p, g| p == 1 && g == 1);
    let fp = count(&|p, g| p == 1 && g == 0);
    let fn_ = count(&|p, g| p == 0 && g == 1);
    let correct = count(&|p, g| p == g);
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    BinaryMetrics {
        accuracy: ratio(correct, gold.len()),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub precision_mean: f64,
    pub precision_std: f64,
    pub recall_mean: f64,
    pub recall_std: f64,
    pub runs: Vec<BinaryMetrics>,
}

impl ProfileReport {
    fn from_runs(runs: Vec<BinaryMetrics>) -> Self {
        let col = |f: fn(&BinaryMetrics) -> f64| mean_std(&runs.iter().map(f).collect::<Vec<_>>());
        let (accuracy_mean, accuracy_std) = col(|m| m.accuracy);
        let (precision_mean, precision_std) = col(|m| m.precision);
        let (recall_mean, recall_std) = col(|m| m.recall);
        Self {
            accuracy_mean,
            accuracy_std,
            precision_mean,
            precision_std,
            recall_mean,
            recall_std,
            runs,
        }
    }
}

struct Split<'a> {
    x: Vec<&'a [f64]>,
    y: Vec<usize>,
}

impl<'a> Split<'a> {
    fn take(x: &'a [Vec<f64>], y: &[usize], idx: &[usize]) -> Self {
        Self {
            x: idx.iter().map(|&i| x[i].as_slice()).collect(),
            y: idx.iter().map(|&i| y[i]).collect(),
        }
    }

    fn rows(&self, idx: &[usize]) -> Vec<Vec<f64>> {
        idx.iter().map(|&i| self.x[i].to_vec()).collect()
    }

    fn all_rows(&self) -> Vec<Vec<f64>> {
        self.x.iter().map(|r| r.to_vec()).collect()
    }
}

/// Trains one head with early stopping on validation accuracy and returns it
/// with its best parameters restored, plus its test metrics.
fn train_head(train: &Split, val: &Split, test: &Split, cfg: &HeadConfig, seed: u64) -> Result<(DenseHead, BinaryMetrics), EmbedError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut head = DenseHead::init(train.x[0].len(), cfg.hidden, &mut rng);
    let adam = AdamConfig::default();
    let mut state = AdamState::new(&head.params);
    let val_rows = val.all_rows();
    let val_acc = |head: &DenseHead| binary_metrics(&head.predict(&val_rows), &val.y).accuracy;
    let mut best = (val_acc(&head), head.params.clone());
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.y.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let grads = {
                let mut tape = Tape::new(&head.params);
                let logits = head.logits(&mut tape, &train.rows(chunk));
                let targets: Vec<usize> = chunk.iter().map(|&i| train.y[i]).collect();
                let loss = tape.cross_entropy(logits, &targets, &vec![1.0; targets.len()]);
                tape.backward(loss)
            };
            adam_step(&mut head.params, &grads, &mut state, &adam, cfg.lr)?;
        }
        let acc = val_acc(&head);
        if acc > best.0 {
            best = (acc, head.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    head.params = best.1;
    let metrics = binary_metrics(&head.predict(&test.all_rows()), &test.y);
    Ok((head, metrics))
}

fn labels_of(authors: &[AuthorProfile]) -> Result<Vec<usize>, EmbedError> {
    let labels = authors
        .iter()
        .map(|a| match a.label {
            None => Err(EmbedError::Unlabeled(a.author_id.clone())),
            Some(l) if l > 1 => Err(EmbedError::BadLabel(l)),
            Some(l) => Ok(l),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut present: Vec<usize> = labels.clone();
    present.sort();
    present.dedup();
    if present.len() < 2 {
        return Err(EmbedError::SingleClass(present));
    }
    Ok(labels)
}

/// Keeps `n` of `idx`, alternating between classes so both stay present
/// while they last.
fn balanced_subset(idx: &[usize], labels: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for &i in idx {
        by_class[labels[i]].push(i);
    }
    for c in &mut by_class {
        c.shuffle(rng);
        c.reverse();
    }
    let mut out = Vec::with_capacity(n);
    let mut turn = 0;
    while out.len() < n {
        if let Some(i) = by_class[turn].pop().or_else(|| by_class[1 - turn].pop()) {
            out.push(i);
        }
        turn = 1 - turn;
    }
    out.sort();
    out
}

/// Runs `cfg.runs` head trainings. Run `r` splits and initializes with seed
/// `cfg.seed + r`; `train_users` optionally caps the training authors.
fn profile_runs(
    x: &[Vec<f64>],
    y: &[usize],
    cfg: &HeadConfig,
    train_users: Option<usize>,
) -> Result<(DenseHead, ProfileReport), EmbedError> {
    let results: Vec<(DenseHead, BinaryMetrics)> = (0..cfg.runs)
        .into_par_iter()
        .map(|r| {
            let seed = cfg.seed.wrapping_add(r as u64);
            let idx: Vec<usize> = (0..y.len()).collect();
            let (mut train, val, test) = split_dataset(&idx, cfg.split, seed)?;
            if let Some(n) = train_users {
                if n > train.len() {
                    return Err(EmbedError::InvalidConfig {
                        key: "users",
                        message: format!("{n} exceeds the {} training authors", train.len()),
                    });
                }
                train = balanced_subset(&train, y, n, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
            }
            let (train, val, test) = (Split::take(x, y, &train), Split::take(x, y, &val), Split::take(x, y, &test));
            train_head(&train, &val, &test, cfg, seed)
        })
        .collect::<Result<_, _>>()?;
    let mut runs = Vec::with_capacity(results.len());
    let mut first = None;
    for (head, m) in results {
        first.get_or_insert(head);
        runs.push(m);
    }
    Ok((first.expect("at least one run"), ProfileReport::from_runs(runs)))
}

/// Aggregates each author and trains the dense head over `cfg.runs` seeded
/// runs. Returns the head of the first run and the averaged metrics.
pub fn train_profile_head(
    authors: &[AuthorProfile],
    mode: Aggregation,
    cfg: &HeadConfig,
) -> Result<(DenseHead, ProfileReport), EmbedError> {
    cfg.validate()?;
    let y = labels_of(authors)?;
    let x = authors
        .iter()
        .map(|a| aggregate_author(a, mode))
        .collect::<Result<Vec<_>, _>>()?;
    profile_runs(&x, &y, cfg, None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub value: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
}

/// Accuracy as a function of tweets per author. For each count, every author
/// keeps a seeded subset of that many tweets in their original order.
pub fn ablate_tweets_per_author(
    authors: &[AuthorProfile],
    counts: &[usize],
    mode: Aggregation,
    cfg: &HeadConfig,
) -> Result<Vec<AblationPoint>, EmbedError> {
    let available = authors.iter().map(|a| a.tweet_embeddings.len()).min().unwrap_or(0);
    counts
        .iter()
        .map(|&c| {
            if c == 0 || c > available {
                return Err(EmbedError::InvalidConfig {
                    key: "counts",
                    message: format!("{c} is outside 1..={available}"),
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (c as u64).rotate_left(32));
            let reduced: Vec<AuthorProfile> = authors
                .iter()
                .map(|a| {
                    let mut keep: Vec<usize> = (0..a.tweet_embeddings.len()).collect();
                    keep.shuffle(&mut rng);
                    keep.truncate(c);
                    keep.sort();
                    AuthorProfile {
                        author_id: a.author_id.clone(),
                        tweet_embeddings: keep.iter().map(|&i| a.tweet_embeddings[i].clone()).collect(),
                        label: a.label,
                    }
                })
                .collect();
            let (_, report) = train_profile_head(&reduced, mode, cfg)?;
            Ok(AblationPoint {
                value: c,
                accuracy_mean: report.accuracy_mean,
                accuracy_std: report.accuracy_std,
            })
        })
        .collect()
}

/// Accuracy as a function of the number of training authors. Validation
/// and test authors are the same as in the full run; the training authors
/// are a class-balanced seeded subset.
pub fn ablate_num_users(
    authors: &[AuthorProfile],
    user_counts: &[usize],
    mode: Aggregation,
    cfg: &HeadConfig,
) -> Result<Vec<AblationPoint>, EmbedError> {
    cfg.validate()?;
    let y = labels_of(authors)?;
    let x = authors
        .iter()
        .map(|a| aggregate_author(a, mode))
        .collect::<Result<Vec<_>, _>>()?;
    user_counts
        .iter()
        .map(|&u| {
            if u < 2 {
                return Err(EmbedError::InvalidConfig {
                    key: "users",
                    message: format!("{u} authors cannot cover both classes"),
                });
            }
            let (_, report) = profile_runs(&x, &y, cfg, Some(u))?;
            Ok(AblationPoint {
                value: u,
                accuracy_mean: report.accuracy_mean,
                accuracy_std: report.accuracy_std,
            })
        })
        .collect()
}

/// Writes `{column},accuracy_mean,accuracy_std`.
pub fn write_ablation_csv(path: &Path, column: &str, points: &[AblationPoint]) -> Result<(), EmbedError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{column},accuracy_mean,accuracy_std")?;
    for p in points {
        writeln!(f, "{},{},{}", p.value, p.accuracy_mean, p.accuracy_std)?;
    }
    Ok(())
}
