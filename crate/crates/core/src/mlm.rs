//! Masked-language-modeling examples and fixed-length batches.
//!
//! Each non-special position is a masking candidate with probability
//! `candidate_rate`. A candidate becomes `<mask>`, a random non-special id, or
//! stays as is, with probabilities `mask_frac`, `random_frac`, `keep_frac`.
//! Only `<mask>` positions carry a label unless `supervise_all_candidates` is
//! set, which restores the original BERT objective.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::{is_special, TokenSequence, CLS_ID, MASK_ID, NUM_SPECIAL, PAD_ID, SEP_ID};

/// Label value for unsupervised positions.
pub const IGNORE: i32 = -100;

#[derive(Debug, Error)]
pub enum MlmError {
    #[error("sequence of {len} tokens exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("cannot build a batch from zero sequences")]
    EmptyBatch,
    #[error("invalid masking config `{key}`: {message}")]
    InvalidConfig { key: &'static str, message: String },
    #[error("vocabulary of size {0} has no non-special token to sample")]
    NoRegularTokens(usize),
    #[error("batch dump: {0}")]
    Dump(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingConfig {
    pub candidate_rate: f64,
    pub mask_frac: f64,
    pub random_frac: f64,
    pub keep_frac: f64,
    pub max_len: usize,
    pub seed: u64,
    pub supervise_all_candidates: bool,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            candidate_rate: 0.15,
            mask_frac: 0.80,
            random_frac: 0.10,
            keep_frac: 0.10,
            max_len: 256,
            seed: 0,
            supervise_all_candidates: false,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<(), MlmError> {
        let frac = |key, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(MlmError::InvalidConfig {
                    key,
                    message: format!("{v} is not in [0, 1]"),
                })
            }
        };
        frac("candidate_rate", self.candidate_rate)?;
        frac("mask_frac", self.mask_frac)?;
        frac("random_frac", self.random_frac)?;
        frac("keep_frac", self.keep_frac)?;
        let total = self.mask_frac + self.random_frac + self.keep_frac;
        if (total - 1.0).abs() > 1e-9 {
            return Err(MlmError::InvalidConfig {
                key: "mask_frac",
                message: format!("mask_frac + random_frac + keep_frac = {total}, expected 1"),
            });
        }
        if self.max_len < 2 {
            return Err(MlmError::InvalidConfig {
                key: "max_len",
                message: "must be at least 2".into(),
            });
        }
        Ok(())
    }
}

/// What happened to a masking candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskAction {
    Mask,
    Random,
    Keep,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedExample {
    pub input_ids: Vec<u32>,
    pub labels: Vec<i32>,
    pub attention_mask: Vec<u8>,
}

/// Masks one sequence and pads it to `cfg.max_len`.
pub fn build_masked_example<R: Rng + ?Sized>(
    tokens: &TokenSequence,
    cfg: &MaskingConfig,
    vocab_size: usize,
    rng: &mut R,
) -> Result<MaskedExample, MlmError> {
    build_masked_example_traced(tokens, cfg, vocab_size, rng).map(|(ex, _)| ex)
}

/// Like [`build_masked_example`], also returning the action taken at each
/// position (`None` for non-candidates and padding).
pub fn build_masked_example_traced<R: Rng + ?Sized>(
    tokens: &TokenSequence,
    cfg: &MaskingConfig,
    vocab_size: usize,
    rng: &mut R,
) -> Result<(MaskedExample, Vec<Option<MaskAction>>), MlmError> {
    let len = tokens.len();
    if len > cfg.max_len {
        return Err(MlmError::SequenceTooLong {
            len,
            max_len: cfg.max_len,
        });
    }
    if vocab_size <= NUM_SPECIAL {
        return Err(MlmError::NoRegularTokens(vocab_size));
    }
    let mut input_ids = Vec::with_capacity(cfg.max_len);
    let mut labels = Vec::with_capacity(cfg.max_len);
    let mut actions = Vec::with_capacity(cfg.max_len);
    for &id in &tokens.ids {
        if is_special(id) || rng.random::<f64>() >= cfg.candidate_rate {
            input_ids.push(id);
            labels.push(IGNORE);
            actions.push(None);
            continue;
        }
        let r: f64 = rng.random();
        let action = if r < cfg.mask_frac {
            MaskAction::Mask
        } else if r < cfg.mask_frac + cfg.random_frac {
            MaskAction::Random
        } else {
            MaskAction::Keep
        };
        let new_id = match action {
            MaskAction::Mask => MASK_ID,
            MaskAction::Random => rng.random_range(NUM_SPECIAL as u32..vocab_size as u32),
            MaskAction::Keep => id,
        };
        let supervised = action == MaskAction::Mask || cfg.supervise_all_candidates;
        input_ids.push(new_id);
        labels.push(if supervised { id as i32 } else { IGNORE });
        actions.push(Some(action));
    }
    let mut attention_mask = vec![1u8; len];
    input_ids.resize(cfg.max_len, PAD_ID);
    labels.resize(cfg.max_len, IGNORE);
    attention_mask.resize(cfg.max_len, 0);
    actions.resize(cfg.max_len, None);
    Ok((
        MaskedExample {
            input_ids,
            labels,
            attention_mask,
        },
        actions,
    ))
}

/// Row-major `(batch_size, seq_len)` arrays.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub input_ids: Vec<u32>,
    pub labels: Vec<i32>,
    pub attention_mask: Vec<u8>,
    pub segment_ids: Vec<u32>,
}

impl Batch {
    pub fn from_examples(examples: &[MaskedExample]) -> Result<Self, MlmError> {
        let first = examples.first().ok_or(MlmError::EmptyBatch)?;
        let seq_len = first.input_ids.len();
        let mut batch = Batch {
            batch_size: examples.len(),
            seq_len,
            input_ids: Vec::with_capacity(examples.len() * seq_len),
            labels: Vec::with_capacity(examples.len() * seq_len),
            attention_mask: Vec::with_capacity(examples.len() * seq_len),
            segment_ids: vec![0; examples.len() * seq_len],
        };
        for ex in examples {
            if ex.input_ids.len() != seq_len || ex.labels.len() != seq_len || ex.attention_mask.len() != seq_len {
                return Err(MlmError::Dump(format!(
                    "ragged rows: expected length {seq_len}, got {}",
                    ex.input_ids.len()
                )));
            }
            batch.input_ids.extend_from_slice(&ex.input_ids);
            batch.labels.extend_from_slice(&ex.labels);
            batch.attention_mask.extend_from_slice(&ex.attention_mask);
        }
        Ok(batch)
    }

    pub fn row_ids(&self, row: usize) -> &[u32] {
        &self.input_ids[row * self.seq_len..(row + 1) * self.seq_len]
    }

    pub fn row_labels(&self, row: usize) -> &[i32] {
        &self.labels[row * self.seq_len..(row + 1) * self.seq_len]
    }

    pub fn row_mask(&self, row: usize) -> &[u8] {
        &self.attention_mask[row * self.seq_len..(row + 1) * self.seq_len]
    }

    /// Number of supervised positions.
    pub fn num_supervised(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE).count()
    }

    /// Selects rows by index, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Batch {
        let t = self.seq_len;
        let pick = |v: &[u32]| rows.iter().flat_map(|&r| v[r * t..(r + 1) * t].iter().copied()).collect();
        Batch {
            batch_size: rows.len(),
            seq_len: t,
            input_ids: pick(&self.input_ids),
            labels: rows.iter().flat_map(|&r| self.labels[r * t..(r + 1) * t].iter().copied()).collect(),
            attention_mask: rows
                .iter()
                .flat_map(|&r| self.attention_mask[r * t..(r + 1) * t].iter().copied())
                .collect(),
            segment_ids: pick(&self.segment_ids),
        }
    }

    /// Writes flat little-endian int32 arrays plus a `batch.json` sidecar.
    pub fn write_dump(&self, dir: &Path) -> Result<(), MlmError> {
        fs::create_dir_all(dir)?;
        let arrays: [(&str, Vec<i32>); 4] = [
            ("input_ids", self.input_ids.iter().map(|&x| x as i32).collect()),
            ("labels", self.labels.clone()),
            ("attention_mask", self.attention_mask.iter().map(|&x| x as i32).collect()),
            ("segment_ids", self.segment_ids.iter().map(|&x| x as i32).collect()),
        ];
        let mut meta = serde_json::Map::new();
        for (name, values) in &arrays {
            let file = format!("{name}.i32");
            let mut f = fs::File::create(dir.join(&file))?;
            let mut bytes = Vec::with_capacity(values.len() * 4);
            for v in values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            f.write_all(&bytes)?;
            meta.insert(
                (*name).to_string(),
                serde_json::json!({"file": file, "dtype": "int32", "shape": [self.batch_size, self.seq_len]}),
            );
        }
        let sidecar = serde_json::json!({
            "batch_size": self.batch_size,
            "seq_len": self.seq_len,
            "ignore_label": IGNORE,
            "arrays": meta,
        });
        fs::write(dir.join("batch.json"), serde_json::to_string_pretty(&sidecar).unwrap())?;
        Ok(())
    }

    pub fn read_dump(dir: &Path) -> Result<Batch, MlmError> {
        let sidecar: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("batch.json"))?)
            .map_err(|e| MlmError::Dump(e.to_string()))?;
        let dim = |k: &str| {
            sidecar[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| MlmError::Dump(format!("missing `{k}`")))
        };
        let (b, t) = (dim("batch_size")?, dim("seq_len")?);
        let read = |name: &str| -> Result<Vec<i32>, MlmError> {
            let file = sidecar["arrays"][name]["file"]
                .as_str()
                .ok_or_else(|| MlmError::Dump(format!("missing array `{name}`")))?;
            let mut bytes = Vec::new();
            fs::File::open(dir.join(file))?.read_to_end(&mut bytes)?;
            if bytes.len() != b * t * 4 {
                return Err(MlmError::Dump(format!("`{file}` has {} bytes, expected {}", bytes.len(), b * t * 4)));
            }
            Ok(bytes
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        Ok(Batch {
            batch_size: b,
            seq_len: t,
            input_ids: read("input_ids")?.into_iter().map(|x| x as u32).collect(),
            labels: read("labels")?,
            attention_mask: read("attention_mask")?.into_iter().map(|x| x as u8).collect(),
            segment_ids: read("segment_ids")?.into_iter().map(|x| x as u32).collect(),
        })
    }
}

/// One masked example per tweet, padded to `cfg.max_len`. Tweets are never
/// packed together.
pub fn pad_and_batch<R: Rng + ?Sized>(
    seqs: &[TokenSequence],
    cfg: &MaskingConfig,
    vocab_size: usize,
    rng: &mut R,
) -> Result<Batch, MlmError> {
    if seqs.is_empty() {
        return Err(MlmError::EmptyBatch);
    }
    let examples = seqs
        .iter()
        .map(|s| build_masked_example(s, cfg, vocab_size, rng))
        .collect::<Result<Vec<_>, _>>()?;
    Batch::from_examples(&examples)
}

/// Independent random stream for the `index`-th example drawn under `seed`.
pub fn example_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Builds a batch where example `i` is masked with `example_rng(cfg.seed,
/// stream_ids[i])`, so the result does not depend on how examples are
/// grouped into batches.
pub fn batch_with_streams(
    seqs: &[&TokenSequence],
    stream_ids: &[u64],
    cfg: &MaskingConfig,
    vocab_size: usize,
) -> Result<Batch, MlmError> {
    if seqs.is_empty() {
        return Err(MlmError::EmptyBatch);
    }
    assert_eq!(seqs.len(), stream_ids.len());
    let examples = seqs
        .iter()
        .zip(stream_ids)
        .map(|(s, &i)| build_masked_example(s, cfg, vocab_size, &mut example_rng(cfg.seed, i)))
        .collect::<Result<Vec<_>, _>>()?;
    Batch::from_examples(&examples)
}

/// Checks the structural invariants of a masked batch: supervision only at
/// `<mask>` inputs (unless all candidates are supervised), padding never
/// attended or labeled, and exactly one `<cls>` and `<sep>` per row.
pub fn check_batch_invariants(batch: &Batch, supervise_all: bool) -> Result<(), String> {
    for row in 0..batch.batch_size {
        let ids = batch.row_ids(row);
        let labels = batch.row_labels(row);
        let mask = batch.row_mask(row);
        for i in 0..batch.seq_len {
            if labels[i] != IGNORE && !supervise_all && ids[i] != MASK_ID {
                return Err(format!("row {row} pos {i}: label without <mask>"));
            }
            if !supervise_all && ids[i] == MASK_ID && labels[i] == IGNORE {
                return Err(format!("row {row} pos {i}: <mask> without label"));
            }
            if mask[i] == 0 && (ids[i] != PAD_ID || labels[i] != IGNORE) {
                return Err(format!("row {row} pos {i}: padding position carries content"));
            }
        }
        let cls = ids.iter().filter(|&&x| x == CLS_ID).count();
        let sep = ids.iter().filter(|&&x| x == SEP_ID).count();
        if cls != 1 || sep != 1 {
            return Err(format!("row {row}: {cls} <cls> and {sep} <sep>"));
        }
    }
    Ok(())
}
