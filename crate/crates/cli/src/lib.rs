//! The `tweetlm` command line.
//!
//! Each subcommand runs one pipeline stage, reading its settings from an
//! optional JSON config (see [`config::RunConfig`]) with flags layered on
//! top. Every output directory receives a `run.json` recording the command,
//! seed and fully resolved config.
//!
//! Exit codes: 0 success, 1 usage error, 2 invalid configuration, 3 runtime
//! failure.

pub mod config;

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;
use tweetlm_core::corpus::{filter_corpus, preprocess_text, read_corpus};
use tweetlm_core::embed::{
    ablate_num_users, ablate_tweets_per_author, aggregate_author, embed_authors, embed_texts, load_authors,
    read_embedding_csv, train_profile_head, write_ablation_csv, write_embedding_csv, Aggregation, EmbedError,
};
use tweetlm_core::finetune::{
    encode_truncated, load_conll, load_sequence_csv, run_parallel, EpochRecord, FinetuneConfig, FinetuneError,
    FinetuneResult, RunSummary,
};
use tweetlm_core::mlm::MlmError;
use tweetlm_core::model::{Encoder, ModelError};
use tweetlm_core::optim::{pretrain, write_checkpoint, OptimError};
use tweetlm_core::project::{emit_scatter, pca_fit, pca_transform, PointKind, ScatterPoint};
use tweetlm_core::tokenizer::{train_bpe, TokenSequence, Vocabulary};

use crate::config::{write_run_json, ConfigError, RunConfig};

/// A required input was not given on the command line or in the config.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct UsageError(String);

#[derive(Debug, Parser)]
#[command(name = "tweetlm", version, about = "Pre-train, fine-tune and probe a tweet language model")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Global seed, applied to every seeded stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Corpus selection and normalization.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Byte-level BPE vocabulary.
    #[command(subcommand)]
    Tokenizer(TokenizerCmd),
    /// Masked-language-model pre-training.
    Pretrain(PretrainArgs),
    /// Supervised fine-tuning.
    #[command(subcommand)]
    Finetune(FinetuneCmd),
    /// Fixed-size embeddings from a checkpoint.
    Embed(EmbedArgs),
    /// Author profiling on aggregated embeddings.
    #[command(subcommand)]
    Profile(ProfileCmd),
    /// Two-dimensional projections of embeddings.
    #[command(subcommand)]
    Project(ProjectCmd),
}

#[derive(Debug, Subcommand)]
enum CorpusCmd {
    /// Keep tweets in one language that are not just a link, normalized.
    Filter {
        /// JSON-lines tweet dump.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output text file, one tweet per line.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        lang: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
enum TokenizerCmd {
    /// Learn a vocabulary from a filtered corpus.
    Train {
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Vocabulary directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        min_frequency: Option<u64>,
    },
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Vocabulary directory.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Directory for `loss.csv` and checkpoints.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optimizer steps; also the schedule length.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    micro_batch: Option<usize>,
    #[arg(long)]
    accum: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    /// Checkpoint directory holding both weights and vocabulary.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Independent runs with seeds `seed`, `seed + 1`, ...
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    no_class_weights: bool,
}

#[derive(Debug, Subcommand)]
enum FinetuneCmd {
    /// Sequence classification from a `text,label` CSV.
    Seq {
        #[command(flatten)]
        args: FinetuneArgs,
        /// Number of classes; defaults to the largest label plus one.
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Token classification from `token<TAB>label` lines.
    Tok {
        #[command(flatten)]
        args: FinetuneArgs,
    },
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Author JSON lines (`.jsonl`) or plain text, one tweet per line.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    /// Hidden-state layer; defaults to the second-to-last block.
    #[arg(long)]
    layer: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Mean,
    Max,
}

impl From<ModeArg> for Aggregation {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Mean => Aggregation::Mean,
            ModeArg::Max => Aggregation::Max,
        }
    }
}

#[derive(Debug, Args)]
struct ProfileCommon {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Author JSON lines with labels.
    #[arg(long)]
    authors: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "mean")]
    mode: ModeArg,
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum ProfileCmd {
    /// Train the dense head and report mean and std over runs.
    Train {
        #[command(flatten)]
        common: ProfileCommon,
    },
    /// Accuracy as tweets per author or training authors vary.
    Ablate {
        #[command(flatten)]
        common: ProfileCommon,
        /// Tweets-per-author values, comma separated.
        #[arg(long, value_delimiter = ',')]
        tweets: Vec<usize>,
        /// Training-author counts, comma separated.
        #[arg(long, value_delimiter = ',')]
        users: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Claim,
    Author,
    Tweet,
}

impl From<KindArg> for PointKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Claim => PointKind::Claim,
            KindArg::Author => PointKind::Author,
            KindArg::Tweet => PointKind::Tweet,
        }
    }
}

#[derive(Debug, Subcommand)]
enum ProjectCmd {
    /// Two-component PCA of an embedding CSV.
    Pca {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also plot each label's centroid as a cross.
        #[arg(long)]
        centers: bool,
        #[arg(long, value_enum, default_value = "tweet")]
        kind: KindArg,
    },
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let command: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli, &command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        let invalid = cause.is::<ConfigError>()
            || matches!(cause.downcast_ref(), Some(FinetuneError::InvalidConfig { .. }))
            || matches!(cause.downcast_ref(), Some(EmbedError::InvalidConfig { .. }))
            || matches!(cause.downcast_ref(), Some(OptimError::InvalidConfig { .. }))
            || matches!(cause.downcast_ref(), Some(MlmError::InvalidConfig { .. }))
            || matches!(cause.downcast_ref(), Some(ModelError::InvalidConfig { .. }));
        if invalid {
            return 2;
        }
    }
    3
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    match flag.or_else(|| fallback.clone()) {
        Some(p) => Ok(p),
        None => Err(UsageError(format!("{what} is required")).into()),
    }
}

/// Directory that receives `run.json` for a single-file output.
fn parent_dir(file: &Path) -> PathBuf {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn finish_config(mut cfg: RunConfig, seed: Option<u64>) -> Result<RunConfig> {
    let seed = seed.unwrap_or(cfg.seed);
    cfg.apply_seed(seed);
    cfg.validate()?;
    log::info!("seed {seed}");
    log::info!("config {}", serde_json::to_string(&cfg)?);
    Ok(cfg)
}

fn load_checkpoint(dir: &Path) -> Result<(Encoder<f32>, Vocabulary)> {
    let enc = Encoder::load(dir).with_context(|| format!("loading encoder from {}", dir.display()))?;
    let vocab = Vocabulary::load(dir).with_context(|| format!("loading vocabulary from {}", dir.display()))?;
    if vocab.len() != enc.config.vocab_size {
        bail!(
            "checkpoint {} pairs a {}-token vocabulary with a {}-token encoder",
            dir.display(),
            vocab.len(),
            enc.config.vocab_size
        );
    }
    Ok((enc, vocab))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn execute(cli: Cli, command: &[String]) -> Result<()> {
    let base = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Corpus(CorpusCmd::Filter { input, out, lang }) => {
            let mut cfg = base;
            if let Some(l) = lang {
                cfg.corpus.lang = l;
            }
            let cfg = finish_config(cfg, cli.seed)?;
            let out = required(out, &cfg.paths.corpus, "--out")?;
            corpus_filter(&cfg, &input, &out, command)
        }
        Command::Tokenizer(TokenizerCmd::Train {
            input,
            out,
            vocab_size,
            min_frequency,
        }) => {
            let mut cfg = base;
            if let Some(v) = vocab_size {
                cfg.tokenizer.vocab_size = v;
            }
            if let Some(m) = min_frequency {
                cfg.tokenizer.min_frequency = m;
            }
            let cfg = finish_config(cfg, cli.seed)?;
            let input = required(input, &cfg.paths.corpus, "--in")?;
            let out = required(out, &cfg.paths.vocab, "--out")?;
            tokenizer_train(&cfg, &input, &out, command)
        }
        Command::Pretrain(args) => {
            let mut cfg = base;
            if let Some(s) = args.steps {
                cfg.pretrain.total_steps = s;
                cfg.scheduler.total_steps = s;
            }
            if let Some(w) = args.warmup_steps {
                cfg.scheduler.warmup_steps = w;
            }
            if let Some(lr) = args.peak_lr {
                cfg.scheduler.peak_lr = lr;
            }
            if let Some(m) = args.micro_batch {
                cfg.pretrain.micro_batch = m;
            }
            if let Some(a) = args.accum {
                cfg.pretrain.accum = a;
            }
            if let Some(c) = args.checkpoint_every {
                cfg.pretrain.checkpoint_every = c;
            }
            let cfg = finish_config(cfg, cli.seed)?;
            let corpus = required(args.corpus, &cfg.paths.corpus, "--corpus")?;
            let vocab = required(args.vocab, &cfg.paths.vocab, "--vocab")?;
            let out = required(args.out, &cfg.paths.checkpoint, "--out")?;
            run_pretrain(&cfg, &corpus, &vocab, &out, command)
        }
        Command::Finetune(cmd) => {
            let (args, token, classes) = match cmd {
                FinetuneCmd::Seq { args, classes } => (args, false, classes),
                FinetuneCmd::Tok { args } => (args, true, None),
            };
            let mut cfg = base;
            let section = if token {
                &mut cfg.finetune.token.0
            } else {
                &mut cfg.finetune.sequence
            };
            if let Some(lr) = args.lr {
                section.lr = lr;
            }
            if let Some(e) = args.epochs {
                section.epochs = e;
            }
            if let Some(b) = args.batch_size {
                section.batch_size = b;
            }
            if args.no_class_weights {
                section.class_weights = false;
            }
            let cfg = finish_config(cfg, cli.seed)?;
            if args.runs == 0 {
                return Err(UsageError("--runs must be at least 1".into()).into());
            }
            let ckpt = required(args.ckpt, &cfg.paths.checkpoint, "--ckpt")?;
            let out = required(args.out, &cfg.paths.output, "--out")?;
            run_finetune(&cfg, token, classes, &ckpt, &args.data, &out, args.runs, command)
        }
        Command::Embed(args) => {
            let cfg = finish_config(base, cli.seed)?;
            let ckpt = required(args.ckpt, &cfg.paths.checkpoint, "--ckpt")?;
            run_embed(&cfg, &ckpt, &args.input, &args.out, args.layer, command)
        }
        Command::Profile(cmd) => {
            let (common, ablation) = match cmd {
                ProfileCmd::Train { common } => (common, None),
                ProfileCmd::Ablate { common, tweets, users } => (common, Some((tweets, users))),
            };
            let mut cfg = base;
            if let Some(r) = common.runs {
                cfg.head.runs = r;
            }
            let cfg = finish_config(cfg, cli.seed)?;
            let ckpt = required(common.ckpt, &cfg.paths.checkpoint, "--ckpt")?;
            let out = required(common.out, &cfg.paths.output, "--out")?;
            if let Some((t, u)) = &ablation {
                if t.is_empty() && u.is_empty() {
                    return Err(UsageError("ablate needs --tweets, --users or both".into()).into());
                }
            }
            run_profile(&cfg, &ckpt, &common.authors, &out, common.mode.into(), common.layer, ablation, command)
        }
        Command::Project(ProjectCmd::Pca {
            input,
            out,
            centers,
            kind,
        }) => {
            let cfg = finish_config(base, cli.seed)?;
            run_pca(&cfg, &input, &out, centers, kind.into(), command)
        }
    }
}

fn corpus_filter(cfg: &RunConfig, input: &Path, out: &Path, command: &[String]) -> Result<()> {
    let reader = BufReader::new(File::open(input).with_context(|| format!("opening {}", input.display()))?);
    let dir = parent_dir(out);
    std::fs::create_dir_all(&dir)?;
    let writer = BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?);
    let stats = filter_corpus(reader, writer, &cfg.corpus.lang, &cfg.corpus.fields)?;
    log::info!(
        "read {} tweets, kept {}, dropped {} in another language and {} link-only",
        stats.read,
        stats.kept,
        stats.wrong_lang,
        stats.url_only
    );
    write_run_json(&dir, command, cfg)?;
    Ok(())
}

fn read_corpus_file(path: &Path) -> Result<Vec<tweetlm_core::corpus::CleanText>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_corpus(BufReader::new(file))?)
}

fn tokenizer_train(cfg: &RunConfig, input: &Path, out: &Path, command: &[String]) -> Result<()> {
    let texts = read_corpus_file(input)?;
    log::info!("training a {}-token vocabulary on {} texts", cfg.tokenizer.vocab_size, texts.len());
    let vocab = train_bpe(
        texts.iter().map(|t| t.as_str()),
        cfg.tokenizer.vocab_size,
        cfg.tokenizer.min_frequency,
    )?;
    if vocab.len() < cfg.tokenizer.vocab_size {
        log::warn!(
            "stopped at {} tokens: no pair reached min_frequency {}",
            vocab.len(),
            cfg.tokenizer.min_frequency
        );
    }
    vocab.save(out)?;
    write_run_json(out, command, cfg)?;
    Ok(())
}

fn run_pretrain(cfg: &RunConfig, corpus: &Path, vocab_dir: &Path, out: &Path, command: &[String]) -> Result<()> {
    let vocab = Vocabulary::load(vocab_dir).with_context(|| format!("loading vocabulary from {}", vocab_dir.display()))?;
    let enc_cfg = cfg.encoder.resolve(vocab.len())?;
    let texts = read_corpus_file(corpus)?;
    let seqs: Vec<TokenSequence> = texts
        .iter()
        .map(|t| encode_truncated(&vocab, t.as_str(), cfg.masking.max_len))
        .collect();
    log::info!(
        "pre-training a {}-parameter encoder on {} sequences for {} steps",
        enc_cfg.parameter_count(),
        seqs.len(),
        cfg.pretrain.total_steps
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.pretrain.seed);
    let encoder = Encoder::init(enc_cfg, &mut rng)?;
    std::fs::create_dir_all(out)?;
    write_run_json(out, command, cfg)?;
    let outcome = pretrain(
        encoder,
        &seqs,
        Some(&vocab),
        &cfg.masking,
        &cfg.scheduler,
        &cfg.adam,
        &cfg.pretrain,
        Some(out),
    )?;
    for dir in &outcome.checkpoints {
        write_run_json(dir, command, cfg)?;
    }
    if let Some(last) = outcome.log.last() {
        log::info!("finished at step {} with loss {:.4}", last.step, last.loss);
    }
    Ok(())
}

#[derive(Serialize)]
struct RunDetail {
    run: usize,
    seed: u64,
    best_epoch: usize,
    best_val_macro_f1: f64,
    history: Vec<EpochRecord>,
}

#[derive(Serialize)]
struct FinetuneReport {
    summary: RunSummary,
    runs: Vec<RunDetail>,
}

#[allow(clippy::too_many_arguments)]
fn run_finetune(
    cfg: &RunConfig,
    token: bool,
    classes: Option<usize>,
    ckpt: &Path,
    data: &Path,
    out: &Path,
    runs: usize,
    command: &[String],
) -> Result<()> {
    let (base, vocab) = load_checkpoint(ckpt)?;
    let ft: &FinetuneConfig = if token { &cfg.finetune.token.0 } else { &cfg.finetune.sequence };
    let seeded = |r: usize| FinetuneConfig {
        seed: ft.seed.wrapping_add(r as u64),
        ..ft.clone()
    };
    let head_seed = |c: &FinetuneConfig| c.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x4845_4144;
    let mut label_names = None;
    let results: Vec<FinetuneResult> = if token {
        let dataset = load_conll(data)?;
        log::info!("{} sentences, labels {:?}", dataset.sentences.len(), dataset.labels);
        let n = dataset.labels.len();
        let results = run_parallel(runs, |r| {
            let c = seeded(r);
            tweetlm_core::finetune::finetune_token(&base, &vocab, &dataset.sentences, n, &c, head_seed(&c))
        })?;
        label_names = Some(dataset.labels);
        results
    } else {
        let rows = load_sequence_csv(data)?;
        let k = match classes {
            Some(k) => k,
            None => rows.iter().map(|r| r.label + 1).max().unwrap_or(0),
        };
        log::info!("{} examples, {k} classes", rows.len());
        run_parallel(runs, |r| {
            let c = seeded(r);
            tweetlm_core::finetune::finetune_sequence(&base, &vocab, &rows, k, &c, head_seed(&c))
        })?
    };
    let details = results
        .iter()
        .enumerate()
        .map(|(r, res)| RunDetail {
            run: r,
            seed: seeded(r).seed,
            best_epoch: res.best_epoch,
            best_val_macro_f1: res.best_val_macro_f1,
            history: res.history.clone(),
        })
        .collect();
    let summary = RunSummary::from_runs(results.iter().map(|r| r.test.clone()).collect());
    log::info!("test {}", summary.describe());
    std::fs::create_dir_all(out)?;
    write_json(&out.join("metrics.json"), &FinetuneReport { summary: summary.clone(), runs: details })?;
    std::fs::write(out.join("summary.txt"), format!("{}\n", summary.describe()))?;
    if let Some(names) = label_names {
        write_json(&out.join("labels.json"), &names)?;
    }
    write_checkpoint(&results[0].encoder, Some(&vocab), &out.join("model"))?;
    write_run_json(&out.join("model"), command, cfg)?;
    write_run_json(out, command, cfg)?;
    Ok(())
}

fn run_embed(cfg: &RunConfig, ckpt: &Path, input: &Path, out: &Path, layer: Option<usize>, command: &[String]) -> Result<()> {
    let (enc, vocab) = load_checkpoint(ckpt)?;
    let rows: Vec<(String, Option<String>, Vec<f64>)> = if input.extension().is_some_and(|e| e == "jsonl") {
        let authors = load_authors(input)?;
        let profiles = embed_authors(&enc, &vocab, &authors, layer)?;
        profiles
            .into_iter()
            .flat_map(|p| {
                let label = p.label.map(|l| l.to_string());
                let id = p.author_id;
                p.tweet_embeddings
                    .into_iter()
                    .enumerate()
                    .map(move |(i, v)| (format!("{id}/{i}"), label.clone(), v))
            })
            .collect()
    } else {
        let file = File::open(input).with_context(|| format!("opening {}", input.display()))?;
        let lines = BufReader::new(file).lines().collect::<std::io::Result<Vec<_>>>()?;
        let clean: Vec<_> = lines.iter().map(|l| preprocess_text(l)).collect();
        let texts: Vec<&str> = clean.iter().map(|c| c.as_str()).collect();
        embed_texts(&enc, &vocab, &texts, layer)?
            .into_iter()
            .enumerate()
            .map(|(i, e)| ((i + 1).to_string(), None, e.values))
            .collect()
    };
    log::info!("embedded {} texts", rows.len());
    let dir = parent_dir(out);
    std::fs::create_dir_all(&dir)?;
    write_embedding_csv(out, &rows)?;
    write_run_json(&dir, command, cfg)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_profile(
    cfg: &RunConfig,
    ckpt: &Path,
    authors_path: &Path,
    out: &Path,
    mode: Aggregation,
    layer: Option<usize>,
    ablation: Option<(Vec<usize>, Vec<usize>)>,
    command: &[String],
) -> Result<()> {
    let (enc, vocab) = load_checkpoint(ckpt)?;
    let authors = load_authors(authors_path)?;
    log::info!("embedding the tweets of {} authors", authors.len());
    let profiles = embed_authors(&enc, &vocab, &authors, layer)?;
    std::fs::create_dir_all(out)?;
    match ablation {
        None => {
            let (_, report) = train_profile_head(&profiles, mode, &cfg.head)?;
            log::info!(
                "accuracy {:.4} ({:.4}), precision {:.4}, recall {:.4}",
                report.accuracy_mean,
                report.accuracy_std,
                report.precision_mean,
                report.recall_mean
            );
            let rows = profiles
                .iter()
                .map(|p| Ok((p.author_id.clone(), p.label.map(|l| l.to_string()), aggregate_author(p, mode)?)))
                .collect::<Result<Vec<_>, EmbedError>>()?;
            write_embedding_csv(&out.join("author_embeddings.csv"), &rows)?;
            write_json(&out.join("metrics.json"), &report)?;
        }
        Some((tweets, users)) => {
            if !tweets.is_empty() {
                let points = ablate_tweets_per_author(&profiles, &tweets, mode, &cfg.head)?;
                write_ablation_csv(&out.join("tweets_per_author.csv"), "tweets", &points)?;
            }
            if !users.is_empty() {
                let points = ablate_num_users(&profiles, &users, mode, &cfg.head)?;
                write_ablation_csv(&out.join("num_users.csv"), "users", &points)?;
            }
        }
    }
    write_run_json(out, command, cfg)?;
    Ok(())
}

fn run_pca(cfg: &RunConfig, input: &Path, out: &Path, centers: bool, kind: PointKind, command: &[String]) -> Result<()> {
    let rows = read_embedding_csv(input)?;
    let x: Vec<Vec<f64>> = rows.iter().map(|r| r.2.clone()).collect();
    let model = pca_fit(&x, 2)?;
    let ratio = model.explained_variance_ratio();
    log::info!("explained variance ratio {:.4}, {:.4}", ratio[0], ratio[1]);
    let projected = pca_transform(&model, &x)?;
    let mut points: Vec<ScatterPoint> = rows
        .iter()
        .zip(&projected)
        .map(|(r, p)| ScatterPoint {
            x: p[0],
            y: p[1],
            label: r.1.clone().unwrap_or_default(),
            kind,
        })
        .collect();
    if centers {
        let mut groups: std::collections::BTreeMap<&str, Vec<&[f64]>> = Default::default();
        for r in &rows {
            if let Some(l) = &r.1 {
                groups.entry(l.as_str()).or_default().push(&r.2);
            }
        }
        for (label, members) in groups {
            let dim = members[0].len();
            let n = members.len() as f64;
            let centroid: Vec<f64> = (0..dim).map(|j| members.iter().map(|m| m[j]).sum::<f64>() / n).collect();
            let p = pca_transform(&model, &[centroid])?.remove(0);
            points.push(ScatterPoint {
                x: p[0],
                y: p[1],
                label: label.to_string(),
                kind: PointKind::HoaxCenter,
            });
        }
    }
    std::fs::create_dir_all(out)?;
    emit_scatter(&points, &out.join("projection.csv"), &out.join("projection.svg"))?;
    write_json(&out.join("pca.json"), &model)?;
    write_run_json(out, command, cfg)?;
    Ok(())
}
