//! Byte-level BPE with reserved special tokens.
//!
//! Text is cut into chunks before merging. A chunk is a run of whitespace
//! followed by a run of non-whitespace, so a word carries the whitespace that
//! precedes it as its first symbols and decoding is a plain concatenation of
//! bytes. `<usr>` and `<url>` in the input are emitted as their own ids and
//! never take part in merges.
//!
//! Ids are laid out as: the seven special tokens, then every byte of the base
//! alphabet in ascending order, then one id per new merged token in training
//! order.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use thiserror::Error;

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const MASK_ID: u32 = 3;
pub const UNK_ID: u32 = 4;
pub const USR_ID: u32 = 5;
pub const URL_ID: u32 = 6;

pub const SPECIAL_TOKENS: [&str; 7] = ["<pad>", "<cls>", "<sep>", "<mask>", "<unk>", "<usr>", "<url>"];
pub const NUM_SPECIAL: usize = SPECIAL_TOKENS.len();

/// Special tokens recognized inside input text.
const INLINE_SPECIALS: [(&str, u32); 2] = [("<usr>", USR_ID), ("<url>", URL_ID)];

pub const DEFAULT_MIN_FREQUENCY: u64 = 2;

pub fn is_special(id: u32) -> bool {
    (id as usize) < NUM_SPECIAL
}

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("training corpus contains no text to learn from")]
    EmptyCorpus,
    #[error("target vocabulary {target} must exceed specials + base alphabet ({minimum})")]
    VocabTooSmall { target: usize, minimum: usize },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("{file}:{line}: {message}")]
    Format {
        file: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Token ids plus the byte range each one covers in the source text.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub offsets: Vec<(usize, usize)>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Builds a sequence from bare ids; offsets are zero-width.
    pub fn from_ids(ids: Vec<u32>) -> Self {
        let offsets = vec![(0, 0); ids.len()];
        Self { ids, offsets }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Token {
    Special(u32),
    Bytes(Vec<u8>),
}

/// Trained BPE vocabulary.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<Token>,
    byte_ids: [Option<u32>; 256],
    bytes_to_id: HashMap<Vec<u8>, u32>,
    merges: Vec<(u32, u32)>,
    merge_ranks: HashMap<(u32, u32), (usize, u32)>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.merges == other.merges
    }
}

impl Vocabulary {
    fn with_alphabet(alphabet: &[u8]) -> Self {
        let mut vocab = Self {
            tokens: (0..NUM_SPECIAL as u32).map(Token::Special).collect(),
            byte_ids: [None; 256],
            bytes_to_id: HashMap::new(),
            merges: Vec::new(),
            merge_ranks: HashMap::new(),
        };
        for &b in alphabet {
            let id = vocab.push_bytes(vec![b]);
            vocab.byte_ids[b as usize] = Some(id);
        }
        vocab
    }

    fn push_bytes(&mut self, bytes: Vec<u8>) -> u32 {
        if let Some(&id) = self.bytes_to_id.get(&bytes) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.bytes_to_id.insert(bytes.clone(), id);
        self.tokens.push(Token::Bytes(bytes));
        id
    }

    fn push_merge(&mut self, left: u32, right: u32) -> u32 {
        let mut bytes = self.token_bytes(left).to_vec();
        bytes.extend_from_slice(self.token_bytes(right));
        let id = self.push_bytes(bytes);
        self.merge_ranks.insert((left, right), (self.merges.len(), id));
        self.merges.push((left, right));
        id
    }

    /// Number of ids.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Merge rules in training order, as pairs of ids.
    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Merge rules in training order, as pairs of token byte strings.
    pub fn merge_bytes(&self) -> Vec<(Vec<u8>, Vec<u8>)> {
        self.merges
            .iter()
            .map(|&(l, r)| (self.token_bytes(l).to_vec(), self.token_bytes(r).to_vec()))
            .collect()
    }

    /// Bytes in the base alphabet.
    pub fn alphabet(&self) -> Vec<u8> {
        (0..=255u8).filter(|&b| self.byte_ids[b as usize].is_some()).collect()
    }

    /// Raw bytes of a non-special token, or the literal string of a special one.
    pub fn token_bytes(&self, id: u32) -> &[u8] {
        match &self.tokens[id as usize] {
            Token::Special(s) => SPECIAL_TOKENS[*s as usize].as_bytes(),
            Token::Bytes(b) => b,
        }
    }

    /// Printable form of a token, as written to `vocab.txt`.
    pub fn token_string(&self, id: u32) -> Result<String, TokenizerError> {
        match self.tokens.get(id as usize) {
            None => Err(TokenizerError::IdOutOfRange {
                id,
                size: self.len(),
            }),
            Some(Token::Special(s)) => Ok(SPECIAL_TOKENS[*s as usize].to_owned()),
            Some(Token::Bytes(b)) => Ok(bytes_to_printable(b)),
        }
    }

    /// Id of a non-special token given its raw bytes.
    pub fn id_of_bytes(&self, bytes: &[u8]) -> Option<u32> {
        self.bytes_to_id.get(bytes).copied()
    }

    /// A copy that keeps only the first `n` merges.
    pub fn truncated(&self, n: usize) -> Vocabulary {
        let mut v = Vocabulary::with_alphabet(&self.alphabet());
        for &(l, r) in self.merges.iter().take(n) {
            let l = v.id_of_bytes(self.token_bytes(l)).expect("merge operand precedes merge");
            let r = v.id_of_bytes(self.token_bytes(r)).expect("merge operand precedes merge");
            v.push_merge(l, r);
        }
        v
    }

    /// Encodes text; `add_cls_sep` wraps the result in `<cls>` … `<sep>`.
    pub fn encode(&self, text: &str, add_cls_sep: bool) -> TokenSequence {
        let mut seq = TokenSequence::default();
        if add_cls_sep {
            seq.ids.push(CLS_ID);
            seq.offsets.push((0, 0));
        }
        for piece in pre_tokenize(text) {
            match piece {
                Piece::Special { id, start, end } => {
                    seq.ids.push(id);
                    seq.offsets.push((start, end));
                }
                Piece::Chunk { start, end } => self.encode_chunk(text.as_bytes(), start, end, &mut seq),
            }
        }
        if add_cls_sep {
            seq.ids.push(SEP_ID);
            seq.offsets.push((text.len(), text.len()));
        }
        seq
    }

    fn encode_chunk(&self, text: &[u8], start: usize, end: usize, seq: &mut TokenSequence) {
        let mut syms: Vec<u32> = Vec::with_capacity(end - start);
        let mut spans: Vec<(usize, usize)> = Vec::with_capacity(end - start);
        for (i, &b) in text[start..end].iter().enumerate() {
            syms.push(self.byte_ids[b as usize].unwrap_or(UNK_ID));
            spans.push((start + i, start + i + 1));
        }
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.merge_ranks.get(&(w[0], w[1])).map(|&(rank, _)| (rank, (w[0], w[1]))))
                .min();
            let Some((_, pair)) = best else { break };
            let new_id = self.merge_ranks[&pair].1;
            let mut i = 0;
            let mut out_syms = Vec::with_capacity(syms.len());
            let mut out_spans = Vec::with_capacity(syms.len());
            while i < syms.len() {
                if i + 1 < syms.len() && (syms[i], syms[i + 1]) == pair {
                    out_syms.push(new_id);
                    out_spans.push((spans[i].0, spans[i + 1].1));
                    i += 2;
                } else {
                    out_syms.push(syms[i]);
                    out_spans.push(spans[i]);
                    i += 1;
                }
            }
            syms = out_syms;
            spans = out_spans;
        }
        seq.ids.extend(syms);
        seq.offsets.extend(spans);
    }

    /// Decodes ids back to text.
    ///
    /// Content tokens are concatenated byte-wise. `<pad>`, `<cls>` and `<sep>`
    /// are rendered as separate space-delimited words, or dropped when
    /// `strip` is set. Other special tokens render as their literal string.
    pub fn decode(&self, ids: &[u32], strip: bool) -> Result<String, TokenizerError> {
        let mut parts: Vec<String> = Vec::new();
        let mut buf: Vec<u8> = Vec::new();
        for &id in ids {
            if id as usize >= self.len() {
                return Err(TokenizerError::IdOutOfRange {
                    id,
                    size: self.len(),
                });
            }
            if matches!(id, PAD_ID | CLS_ID | SEP_ID) {
                if strip {
                    continue;
                }
                if !buf.is_empty() {
                    parts.push(String::from_utf8_lossy(&buf).into_owned());
                    buf.clear();
                }
                parts.push(SPECIAL_TOKENS[id as usize].to_owned());
            } else {
                buf.extend_from_slice(self.token_bytes(id));
            }
        }
        if !buf.is_empty() {
            parts.push(String::from_utf8_lossy(&buf).into_owned());
        }
        Ok(parts.join(" "))
    }

    /// Writes `vocab.txt` (one token per line, line number = id) and
    /// `merges.txt` (one `left right` pair per line, training order).
    pub fn save(&self, dir: &Path) -> Result<(), TokenizerError> {
        fs::create_dir_all(dir)?;
        let mut vocab = BufWriter::new(fs::File::create(dir.join("vocab.txt"))?);
        for id in 0..self.len() as u32 {
            writeln!(vocab, "{}", self.token_string(id)?)?;
        }
        vocab.flush()?;
        let mut merges = BufWriter::new(fs::File::create(dir.join("merges.txt"))?);
        for &(l, r) in &self.merges {
            writeln!(merges, "{} {}", self.token_string(l)?, self.token_string(r)?)?;
        }
        merges.flush()?;
        Ok(())
    }

    /// Loads a vocabulary written by [`Vocabulary::save`].
    pub fn load(dir: &Path) -> Result<Vocabulary, TokenizerError> {
        let vocab_file = dir.join("vocab.txt");
        let reader = BufReader::new(fs::File::open(&vocab_file)?);
        let fmt_err = |file: &Path, line: usize, message: String| TokenizerError::Format {
            file: file.display().to_string(),
            line,
            message,
        };

        let mut lines = Vec::new();
        for line in reader.lines() {
            lines.push(line?);
        }
        if lines.len() < NUM_SPECIAL {
            return Err(fmt_err(&vocab_file, lines.len(), "missing special tokens".into()));
        }
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if lines[i] != *special {
                return Err(fmt_err(&vocab_file, i + 1, format!("expected `{special}`, found `{}`", lines[i])));
            }
        }
        let mut alphabet = Vec::new();
        let mut merged_tokens = Vec::new();
        for (i, line) in lines.iter().enumerate().skip(NUM_SPECIAL) {
            let bytes = printable_to_bytes(line).ok_or_else(|| fmt_err(&vocab_file, i + 1, "unmappable character".into()))?;
            if bytes.len() == 1 && merged_tokens.is_empty() {
                alphabet.push(bytes[0]);
            } else if bytes.is_empty() {
                return Err(fmt_err(&vocab_file, i + 1, "empty token".into()));
            } else {
                merged_tokens.push(bytes);
            }
        }
        if alphabet.windows(2).any(|w| w[0] >= w[1]) {
            return Err(fmt_err(&vocab_file, NUM_SPECIAL + 1, "alphabet bytes not strictly ascending".into()));
        }

        let mut vocab = Vocabulary::with_alphabet(&alphabet);
        let merges_file = dir.join("merges.txt");
        let reader = BufReader::new(fs::File::open(&merges_file)?);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.is_empty() || line.starts_with("#version") {
                continue;
            }
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| fmt_err(&merges_file, i + 1, "expected `left right`".into()))?;
            let lookup = |s: &str| {
                printable_to_bytes(s)
                    .and_then(|b| vocab.id_of_bytes(&b))
                    .ok_or_else(|| fmt_err(&merges_file, i + 1, format!("unknown token `{s}`")))
            };
            let (l, r) = (lookup(l)?, lookup(r)?);
            vocab.push_merge(l, r);
        }
        if vocab.len() != lines.len() {
            return Err(fmt_err(
                &vocab_file,
                lines.len(),
                format!("merges rebuild {} tokens but vocab.txt lists {}", vocab.len(), lines.len()),
            ));
        }
        for (i, line) in lines.iter().enumerate().skip(NUM_SPECIAL) {
            if vocab.token_string(i as u32)? != *line {
                return Err(fmt_err(&vocab_file, i + 1, "token order disagrees with merges.txt".into()));
            }
        }
        Ok(vocab)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Piece {
    Special { id: u32, start: usize, end: usize },
    Chunk { start: usize, end: usize },
}

fn pre_tokenize(text: &str) -> Vec<Piece> {
    let mut pieces = Vec::new();
    let mut seg_start = 0;
    let mut i = 0;
    let bytes = text.as_bytes();
    while i < bytes.len() {
        let special = INLINE_SPECIALS
            .iter()
            .find(|(s, _)| bytes[i..].starts_with(s.as_bytes()));
        if let Some(&(s, id)) = special {
            chunk_segment(text, seg_start, i, &mut pieces);
            pieces.push(Piece::Special {
                id,
                start: i,
                end: i + s.len(),
            });
            i += s.len();
            seg_start = i;
        } else {
            i += 1;
        }
    }
    chunk_segment(text, seg_start, bytes.len(), &mut pieces);
    pieces
}

/// Splits `text[start..end]` into whitespace-prefixed words.
fn chunk_segment(text: &str, start: usize, end: usize, out: &mut Vec<Piece>) {
    if start == end {
        return;
    }
    let mut chunk_start = start;
    let mut prev_ws = true;
    for (off, c) in text[start..end].char_indices() {
        let ws = c.is_whitespace();
        if ws && !prev_ws {
            out.push(Piece::Chunk {
                start: chunk_start,
                end: start + off,
            });
            chunk_start = start + off;
        }
        prev_ws = ws;
    }
    out.push(Piece::Chunk {
        start: chunk_start,
        end,
    });
}

/// The byte strings BPE training sees for one text.
pub fn training_chunks(text: &str) -> Vec<&[u8]> {
    pre_tokenize(text)
        .into_iter()
        .filter_map(|p| match p {
            Piece::Chunk { start, end } => Some(&text.as_bytes()[start..end]),
            Piece::Special { .. } => None,
        })
        .collect()
}

/// BPE training parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeTrainer {
    pub target_vocab: usize,
    pub min_frequency: u64,
    /// Seed the base alphabet with all 256 bytes instead of only those seen.
    pub include_all_bytes: bool,
}

impl BpeTrainer {
    pub fn new(target_vocab: usize) -> Self {
        Self {
            target_vocab,
            min_frequency: DEFAULT_MIN_FREQUENCY,
            include_all_bytes: false,
        }
    }

    pub fn train<I, S>(&self, corpus: I) -> Result<Vocabulary, TokenizerError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut word_counts: HashMap<Vec<u8>, u64> = HashMap::new();
        for text in corpus {
            for chunk in training_chunks(text.as_ref()) {
                *word_counts.entry(chunk.to_vec()).or_default() += 1;
            }
        }
        if word_counts.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        let mut seen = [false; 256];
        if self.include_all_bytes {
            seen = [true; 256];
        }
        for w in word_counts.keys() {
            for &b in w {
                seen[b as usize] = true;
            }
        }
        let alphabet: Vec<u8> = (0..=255u8).filter(|&b| seen[b as usize]).collect();
        let minimum = NUM_SPECIAL + alphabet.len();
        if self.target_vocab <= minimum {
            return Err(TokenizerError::VocabTooSmall {
                target: self.target_vocab,
                minimum,
            });
        }

        let mut vocab = Vocabulary::with_alphabet(&alphabet);
        // Sorted so that training is independent of hash iteration order.
        let mut words: Vec<(Vec<u8>, u64)> = word_counts.into_iter().collect();
        words.sort_unstable();
        let mut words: Vec<(Vec<u32>, u64)> = words
            .into_iter()
            .map(|(w, c)| (w.iter().map(|&b| vocab.byte_ids[b as usize].unwrap()).collect(), c))
            .collect();

        let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
        let mut occurs: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
        for (idx, (syms, c)) in words.iter().enumerate() {
            for w in syms.windows(2) {
                let p = (w[0], w[1]);
                *counts.entry(p).or_default() += c;
                occurs.entry(p).or_default().insert(idx);
            }
        }
        let mut heap: BinaryHeap<Candidate> = counts
            .iter()
            .map(|(&pair, &count)| Candidate::new(&vocab, pair, count))
            .collect();

        while vocab.len() < self.target_vocab {
            let Some(top) = heap.pop() else { break };
            if counts.get(&top.pair).copied().unwrap_or(0) != top.count {
                continue;
            }
            if top.count < self.min_frequency.max(1) {
                break;
            }
            let pair = top.pair;
            let new_id = vocab.push_merge(pair.0, pair.1);

            let mut touched: Vec<usize> = occurs.remove(&pair).unwrap_or_default().into_iter().collect();
            touched.sort_unstable();
            let mut changed: HashSet<(u32, u32)> = HashSet::new();
            for idx in touched {
                let (syms, c) = &mut words[idx];
                let merged = apply_merge(syms, pair, new_id);
                if merged.len() == syms.len() {
                    continue;
                }
                for w in syms.windows(2) {
                    let p = (w[0], w[1]);
                    let e = counts.get_mut(&p).expect("pair counted");
                    *e -= *c;
                    changed.insert(p);
                }
                for w in merged.windows(2) {
                    let p = (w[0], w[1]);
                    *counts.entry(p).or_default() += *c;
                    occurs.entry(p).or_default().insert(idx);
                    changed.insert(p);
                }
                *syms = merged;
            }
            counts.remove(&pair);
            let mut changed: Vec<_> = changed.into_iter().collect();
            changed.sort_unstable();
            for p in changed {
                match counts.get(&p).copied() {
                    Some(0) => {
                        counts.remove(&p);
                    }
                    Some(count) => heap.push(Candidate::new(&vocab, p, count)),
                    None => {}
                }
            }
        }
        Ok(vocab)
    }
}

/// Trains with the given target size and minimum pair frequency.
pub fn train_bpe<I, S>(corpus: I, target_vocab: usize, min_frequency: u64) -> Result<Vocabulary, TokenizerError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    BpeTrainer {
        target_vocab,
        min_frequency,
        include_all_bytes: false,
    }
    .train(corpus)
}

/// Replaces non-overlapping occurrences of `pair`, scanning left to right.
fn apply_merge(syms: &[u32], pair: (u32, u32), new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && (syms[i], syms[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    out
}

/// Heap entry: highest count first, ties to the lexicographically smallest
/// `(left, right)` byte strings.
#[derive(Debug, PartialEq, Eq)]
struct Candidate {
    count: u64,
    left: Vec<u8>,
    right: Vec<u8>,
    pair: (u32, u32),
}

impl Candidate {
    fn new(vocab: &Vocabulary, pair: (u32, u32), count: u64) -> Self {
        Self {
            count,
            left: vocab.token_bytes(pair.0).to_vec(),
            right: vocab.token_bytes(pair.1).to_vec(),
            pair,
        }
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| (&other.left, &other.right).cmp(&(&self.left, &self.right)))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn byte_table() -> &'static ([char; 256], HashMap<char, u8>) {
    static TABLE: OnceLock<([char; 256], HashMap<char, u8>)> = OnceLock::new();
    TABLE.get_or_init(|| {
        // Printable bytes map to themselves; the rest are shifted past 255.
        let mut map = ['\0'; 256];
        let printable = |b: u8| (b'!'..=b'~').contains(&b) || (0xA1..=0xAC).contains(&b) || (0xAE..=0xFF).contains(&b);
        let mut next = 256u32;
        for b in 0..=255u8 {
            map[b as usize] = if printable(b) {
                char::from(b)
            } else {
                let c = char::from_u32(next).unwrap();
                next += 1;
                c
            };
        }
        let inverse = map.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        (map, inverse)
    })
}

/// Maps raw bytes to a whitespace-free printable string.
pub fn bytes_to_printable(bytes: &[u8]) -> String {
    let (map, _) = byte_table();
    bytes.iter().map(|&b| map[b as usize]).collect()
}

/// Inverse of [`bytes_to_printable`].
pub fn printable_to_bytes(s: &str) -> Option<Vec<u8>> {
    let (_, inverse) = byte_table();
    s.chars().map(|c| inverse.get(&c).copied()).collect()
}
