//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails. Set `ACCEPTANCE_ONLY=4,7` to run a
//! subset.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tweetlm_core::autodiff::{ParamStore, Tape};
use tweetlm_core::corpus::preprocess_text;
use tweetlm_core::embed::{
    ablate_num_users, ablate_tweets_per_author, aggregate, embed_ids_padded, embedding_layer, train_profile_head,
    write_ablation_csv, Aggregation, AuthorProfile, HeadConfig,
};
use tweetlm_core::finetune::{
    finetune_sequence, finetune_token, repeat_runs, FinetuneConfig, LabeledSequence, TokenDataset,
};
use tweetlm_core::mlm::{batch_with_streams, build_masked_example_traced, example_rng, MaskAction, MaskingConfig, IGNORE};
use tweetlm_core::model::{mlm_gradient_check, Encoder, EncoderConfig, Mode};
use tweetlm_core::optim::{
    adam_step, lr_at_step, mlm_top1_accuracy, pretrain, step_gradients, AdamConfig, AdamState, PretrainConfig,
    SchedulerConfig,
};
use tweetlm_core::project::pca_fit;
use tweetlm_core::reference::{reference_value, REFERENCE_VALUES};
use tweetlm_core::synthetic::{keyword_sequences, keyword_token_sentences, template_tweets, two_gaussian_authors};
use tweetlm_core::tensor::Tensor;
use tweetlm_core::tokenizer::{is_special, train_bpe, BpeTrainer, TokenSequence, CLS_ID, MASK_ID, NUM_SPECIAL, SEP_ID};

struct Outcome {
    pass: bool,
    detail: String,
}

fn criterion_1() -> Outcome {
    let tweets = template_tweets(12_000, 1);
    let vocab = train_bpe(tweets.iter().map(|t| t.as_str()), 500, 2).expect("bpe");
    let cfg = MaskingConfig::default();
    let (mut eligible, mut candidates) = (0usize, 0usize);
    let mut actions = [0usize; 3];
    for (i, t) in tweets.iter().enumerate() {
        let seq = vocab.encode(t.as_str(), true);
        let (_, trace) = build_masked_example_traced(&seq, &cfg, vocab.len(), &mut example_rng(1, i as u64)).unwrap();
        for (id, a) in seq.ids.iter().zip(&trace) {
            if is_special(*id) {
                assert!(a.is_none(), "special token selected");
                continue;
            }
            eligible += 1;
            if let Some(a) = a {
                candidates += 1;
                actions[match a {
                    MaskAction::Mask => 0,
                    MaskAction::Random => 1,
                    MaskAction::Keep => 2,
                }] += 1;
            }
        }
    }
    let rate = candidates as f64 / eligible as f64;
    let split: Vec<f64> = actions.iter().map(|&a| a as f64 / candidates as f64).collect();
    let pass = eligible >= 100_000
        && (rate - 0.15).abs() <= 0.005
        && split.iter().zip([0.8, 0.1, 0.1]).all(|(s, e)| (s - e).abs() <= 0.01);
    Outcome {
        pass,
        detail: format!(
            "{eligible} positions, candidate rate {rate:.4}, mask/random/keep {:.4}/{:.4}/{:.4}",
            split[0], split[1], split[2]
        ),
    }
}

fn criterion_2() -> Outcome {
    let tweets = template_tweets(10_000, 2);
    let vocab = train_bpe(tweets.iter().map(|t| t.as_str()), 500, 2).expect("bpe");
    let seqs: Vec<TokenSequence> = tweets.iter().map(|t| vocab.encode(t.as_str(), true)).collect();
    let cfg = MaskingConfig {
        seed: 2,
        ..MaskingConfig::default()
    };
    let (mut labels, mut masks, mut violations) = (0usize, 0usize, 0usize);
    for (c, chunk) in seqs.chunks(500).enumerate() {
        let refs: Vec<&TokenSequence> = chunk.iter().collect();
        let ids: Vec<u64> = (0..chunk.len() as u64).map(|j| c as u64 * 500 + j).collect();
        let b = batch_with_streams(&refs, &ids, &cfg, vocab.len()).unwrap();
        for (&id, &label) in b.input_ids.iter().zip(&b.labels) {
            labels += usize::from(label != IGNORE);
            masks += usize::from(id == MASK_ID);
            violations += usize::from((label != IGNORE) != (id == MASK_ID));
        }
    }
    Outcome {
        pass: violations == 0 && labels > 0,
        detail: format!("{labels} supervised positions, {masks} <mask> inputs, {violations} mismatches"),
    }
}

fn criterion_3() -> Outcome {
    let mut cfg = EncoderConfig::toy(64, 16, 2, 2, 12);
    cfg.dropout = 0.0;
    let mut enc = Encoder::<f64>::init(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    // Moves the weights away from the tiny initial scale so every gradient
    // entry is large against finite-difference roundoff.
    enc.perturb(0.3, &mut ChaCha8Rng::seed_from_u64(30));
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let seqs: Vec<TokenSequence> = [12usize, 9]
        .iter()
        .map(|&len| {
            let mut ids = vec![CLS_ID];
            ids.extend((0..len - 2).map(|_| rng.random_range(NUM_SPECIAL as u32..64)));
            ids.push(SEP_ID);
            TokenSequence::from_ids(ids)
        })
        .collect();
    let masking = MaskingConfig {
        candidate_rate: 0.4,
        max_len: 12,
        seed: 3,
        ..MaskingConfig::default()
    };
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let batch = batch_with_streams(&refs, &[0, 1], &masking, 64).unwrap();
    let report = mlm_gradient_check(&enc, &batch, None, &mut rng).unwrap();
    Outcome {
        pass: report.max_rel_error < 1e-4 && report.tensors_checked == enc.params.len(),
        detail: format!(
            "{} entries in {} tensors, {} supervised, max relative error {:.2e} at {}",
            report.entries_checked,
            report.tensors_checked,
            batch.num_supervised(),
            report.max_rel_error,
            report.worst
        ),
    }
}
fn criterion_4() -> Outcome {
    let tweets = template_tweets(2000, 4);
    let vocab = train_bpe(tweets.iter().map(|t| t.as_str()), 500, 2).expect("bpe");
    let seqs: Vec<TokenSequence> = tweets.iter().map(|t| vocab.encode(t.as_str(), true)).collect();
    let max_len = seqs.iter().map(TokenSequence::len).max().unwrap();
    let cfg = EncoderConfig::toy(vocab.len(), 64, 2, 4, max_len);
    let enc = Encoder::<f32>::init(cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let masking = MaskingConfig {
        max_len,
        seed: 4,
        ..MaskingConfig::default()
    };
    let steps = 2000;
    let sched = SchedulerConfig {
        peak_lr: 1e-3,
        warmup_steps: 200,
        total_steps: steps,
        min_lr: 0.0,
    };
    let pcfg = PretrainConfig {
        micro_batch: 32,
        accum: 1,
        total_steps: steps,
        checkpoint_every: 1000,
        seed: 4,
    };
    let out = pretrain(enc, &seqs, Some(&vocab), &masking, &sched, &AdamConfig::default(), &pcfg, None).unwrap();
    let mean = |xs: &[tweetlm_core::optim::StepLog]| xs.iter().map(|l| l.loss).sum::<f64>() / xs.len() as f64;
    let first = mean(&out.log[..100]);
    let last = mean(&out.log[out.log.len() - 100..]);
    let drop = 1.0 - last / first;
    let eval_masking = MaskingConfig { seed: 4444, ..masking };
    let refs: Vec<&TokenSequence> = seqs.iter().take(512).collect();
    let batches: Vec<_> = refs
        .chunks(64)
        .enumerate()
        .map(|(i, c)| {
            let ids: Vec<u64> = (0..c.len() as u64).map(|j| 1_000_000 + i as u64 * 64 + j).collect();
            batch_with_streams(c, &ids, &eval_masking, vocab.len()).unwrap()
        })
        .collect();
    let top1 = mlm_top1_accuracy(&out.encoder, &batches).unwrap();
    let chance = 1.0 / vocab.len() as f64;
    Outcome {
        pass: drop >= 0.30 && top1 >= 10.0 * chance,
        detail: format!(
            "vocab {}, first-100 loss {first:.3}, last-100 loss {last:.3} (drop {:.1}%), top-1 {top1:.3} vs chance {chance:.4}",
            vocab.len(),
            drop * 100.0
        ),
    }
}


fn criterion_5() -> Outcome {
    let cfg = SchedulerConfig::pretraining();
    let steps = [0u64, 5_000, 10_000, 505_000, 1_000_000];
    let expected = [0.0, 5e-5, 1e-4, 5e-5, 0.0];
    let got: Vec<f64> = steps.iter().map(|&s| lr_at_step(s, &cfg)).collect();
    Outcome {
        pass: got.iter().zip(expected).all(|(g, e)| *g == e),
        detail: format!("{got:?}"),
    }
}

/// Independent Adam on `f(x) = (x − 3)²`.
fn textbook_adam(x0: f64, lr: f64, steps: usize) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let (mut x, mut m, mut v) = (x0, 0.0f64, 0.0f64);
    (1..=steps as i32)
        .map(|t| {
            let g = 2.0 * (x - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            x
        })
        .collect()
}

fn criterion_6() -> Outcome {
    let oracle = textbook_adam(-1.0, 0.05, 200);
    let mut params = ParamStore::new();
    params.add("x", Tensor::new(vec![1, 1], vec![-1.0f64]).unwrap());
    let mut state = AdamState::new(&params);
    let mut worst = 0.0f64;
    for expected in &oracle {
        let grads = {
            let mut tape = Tape::new(&params);
            let x = tape.param(0);
            let c = tape.constant(Tensor::new(vec![1, 1], vec![-3.0]).unwrap());
            let d = tape.add(x, c);
            let sq = tape.matmul(d, d);
            tape.backward(sq)
        };
        adam_step(&mut params, &grads, &mut state, &AdamConfig::default(), 0.05).unwrap();
        worst = worst.max((params.tensor(0).data()[0] - expected).abs());
    }
    Outcome {
        pass: worst < 1e-12,
        detail: format!("200 steps, max deviation {worst:.1e}, final x {:.6}", params.tensor(0).data()[0]),
    }
}

fn criterion_7() -> Outcome {
    let mut cfg = EncoderConfig::toy(64, 16, 2, 2, 16);
    cfg.dropout = 0.0;
    let enc = Encoder::<f64>::init(cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let seqs: Vec<TokenSequence> = (0..8)
        .map(|i| {
            let mut ids = vec![CLS_ID];
            ids.extend((0..4 + i).map(|_| rng.random_range(NUM_SPECIAL as u32..64)));
            ids.push(SEP_ID);
            TokenSequence::from_ids(ids)
        })
        .collect();
    let masking = MaskingConfig {
        candidate_rate: 0.3,
        max_len: 16,
        seed: 7,
        ..MaskingConfig::default()
    };
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let ids: Vec<u64> = (0..8).collect();
    let full = batch_with_streams(&refs, &ids, &masking, 64).unwrap();
    let grads_for = |accum: usize| {
        let per = 8 / accum;
        let micro: Vec<_> = (0..accum)
            .map(|k| full.select_rows(&(k * per..(k + 1) * per).collect::<Vec<_>>()))
            .collect();
        let counts: Vec<usize> = micro.iter().map(|b| b.num_supervised()).collect();
        let (_, g) = step_gradients(&enc, &micro, Mode::Eval, &vec![0; accum]).unwrap();
        (g, counts)
    };
    let (reference, _) = grads_for(1);
    let ids: Vec<usize> = (0..enc.params.len()).filter(|&id| reference.get(id).is_some()).collect();
    let scale = ids
        .iter()
        .flat_map(|&id| reference.get(id).unwrap().data())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    // Entries such as key biases are analytically zero; the floor keeps their
    // roundoff from being read as a relative error.
    let floor = 1e-9 * scale;
    let (mut worst, mut at) = (0.0f64, String::new());
    let mut splits = Vec::new();
    for accum in [2, 4] {
        let (g, counts) = grads_for(accum);
        splits.push(format!("{accum}:{counts:?}"));
        for &id in &ids {
            let (a, b) = (reference.get(id).unwrap(), g.get(id).expect("same parameters"));
            for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
                let rel = (x - y).abs() / x.abs().max(y.abs()).max(floor);
                if rel > worst {
                    worst = rel;
                    at = format!("{}[{i}] accum {accum}", enc.params.name(id));
                }
            }
        }
    }
    Outcome {
        pass: worst < 1e-6,
        detail: format!(
            "supervised counts per micro-batch {}, max relative difference {worst:.1e} at {at}",
            splits.join(" ")
        ),
    }
}

fn oracle_chunks(text: &str) -> Vec<Vec<u8>> {
    let mut out: Vec<Vec<u8>> = Vec::new();
    let mut cur = String::new();
    let mut prev_ws = true;
    for c in text.chars() {
        if c.is_whitespace() && !prev_ws {
            out.push(std::mem::take(&mut cur).into_bytes());
        }
        cur.push(c);
        prev_ws = c.is_whitespace();
    }
    if !cur.is_empty() {
        out.push(cur.into_bytes());
    }
    out
}

/// Naive BPE: every round recounts all adjacent pairs of every chunk
/// occurrence and merges the most frequent, smallest by bytes on ties.
fn oracle_merges(corpus: &[String], target: usize, min_freq: u64) -> Vec<(Vec<u8>, Vec<u8>)> {
    let mut words: Vec<Vec<Vec<u8>>> = corpus
        .iter()
        .flat_map(|t| oracle_chunks(t))
        .map(|w| w.into_iter().map(|b| vec![b]).collect())
        .collect();
    let mut alphabet: Vec<u8> = words.iter().flatten().map(|s| s[0]).collect();
    alphabet.sort();
    alphabet.dedup();
    let mut merges = Vec::new();
    while NUM_SPECIAL + alphabet.len() + merges.len() < target {
        let mut counts: HashMap<(Vec<u8>, Vec<u8>), u64> = HashMap::new();
        for w in &words {
            for p in w.windows(2) {
                *counts.entry((p[0].clone(), p[1].clone())).or_default() += 1;
            }
        }
        let Some(best) = counts
            .iter()
            .filter(|(_, &c)| c >= min_freq)
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(p, _)| p.clone())
        else {
            break;
        };
        for w in &mut words {
            let mut out = Vec::new();
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && w[i] == best.0 && w[i + 1] == best.1 {
                    out.push([best.0.clone(), best.1.clone()].concat());
                    i += 2;
                } else {
                    out.push(w[i].clone());
                    i += 1;
                }
            }
            *w = out;
        }
        merges.push(best);
    }
    merges
}

fn random_tweet(rng: &mut ChaCha8Rng) -> String {
    const PIECES: &[&str] = &[
        "hola", "qué", "tal", "ñandú", "😀", "🇪🇸", "@pepe", "https://t.co/x1", "#finde", "¡ya!", "a", "  ", "\t", "100%", "è",
        "漢字", "RT", "…", "<3", "x_y",
    ];
    let n = rng.random_range(1..15);
    let mut s = String::new();
    for _ in 0..n {
        s.push_str(PIECES.choose(rng).unwrap());
        if rng.random_bool(0.7) {
            s.push(' ');
        }
    }
    s
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let alphabet: Vec<char> = "abcab ñ😀".chars().collect();
    let mut mismatched = 0;
    let mut total_merges = 0;
    for k in 0..20 {
        let len = rng.random_range(20..=100);
        let text: String = (0..len).map(|_| *alphabet.choose(&mut rng).unwrap()).collect();
        let lines: Vec<String> = text.split('\n').map(str::to_string).collect();
        let (target, min_freq) = if k % 2 == 0 { (200, 2) } else { (NUM_SPECIAL + 20, 1) };
        let vocab = train_bpe(&lines, target, min_freq).expect("bpe");
        let want = oracle_merges(&lines, target, min_freq);
        total_merges += want.len();
        mismatched += usize::from(vocab.merge_bytes() != want);
    }
    let corpus = template_tweets(500, 8);
    let vocab = BpeTrainer {
        target_vocab: 600,
        min_frequency: 2,
        include_all_bytes: true,
    }
    .train(corpus.iter().map(|t| t.as_str()))
    .expect("bpe");
    let mut round_trip_failures = 0;
    for _ in 0..1000 {
        let clean = preprocess_text(&random_tweet(&mut rng));
        let ids = vocab.encode(clean.as_str(), true).ids;
        round_trip_failures += usize::from(vocab.decode(&ids, true).unwrap() != clean.as_str());
    }
    Outcome {
        pass: mismatched == 0 && round_trip_failures == 0,
        detail: format!(
            "20 corpora ({total_merges} merges), {mismatched} merge mismatches, {round_trip_failures}/1000 round-trip failures"
        ),
    }
}

fn criterion_9() -> Outcome {
    let runs = 10;
    let seq_data = keyword_sequences(8000, 9);
    let vocab = train_bpe(seq_data.iter().map(|d| d.0.as_str()), 200, 2).expect("bpe");
    let seq: Vec<LabeledSequence> = seq_data
        .iter()
        .map(|(t, l)| LabeledSequence {
            text: preprocess_text(t),
            label: *l,
        })
        .collect();
    let enc = Encoder::<f32>::init(EncoderConfig::toy(vocab.len(), 64, 2, 4, 32), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let seq_summary = repeat_runs(runs, |r| {
        let cfg = FinetuneConfig {
            seed: r as u64,
            ..FinetuneConfig::sequence()
        };
        Ok(finetune_sequence(&enc, &vocab, &seq, 2, &cfg, 100 + r as u64)?.test)
    })
    .unwrap();

    let tok = TokenDataset::from_tagged(&keyword_token_sentences(2000, 9));
    let texts: Vec<String> = tok
        .sentences
        .iter()
        .map(|s| s.tokens.iter().map(|t| t.0.as_str()).collect::<Vec<_>>().join(" "))
        .collect();
    let tok_vocab = train_bpe(&texts, 200, 2).expect("bpe");
    let tok_enc =
        Encoder::<f32>::init(EncoderConfig::toy(tok_vocab.len(), 64, 2, 4, 32), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let tok_summary = repeat_runs(runs, |r| {
        let cfg = FinetuneConfig {
            seed: r as u64,
            ..FinetuneConfig::token()
        };
        Ok(finetune_token(&tok_enc, &tok_vocab, &tok.sentences, tok.labels.len(), &cfg, 100 + r as u64)?.test)
    })
    .unwrap();
    let min = |s: &tweetlm_core::finetune::RunSummary| s.runs.iter().map(|m| m.accuracy).fold(1.0f64, f64::min);
    Outcome {
        pass: seq_summary.accuracy_mean >= 0.95 && tok_summary.accuracy_mean >= 0.95,
        detail: format!(
            "sequence {} (min {:.4}); token {} (min {:.4})",
            seq_summary.describe(),
            min(&seq_summary),
            tok_summary.describe(),
            min(&tok_summary)
        ),
    }
}

fn criterion_10() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    let mut worst = 0.0f64;
    for blocks in 1..=3 {
        let cfg = EncoderConfig::toy(64, 32, blocks, 4, 40);
        let layer_ok = embedding_layer(&cfg) == blocks - 1;
        pass &= layer_ok;
        let enc = Encoder::<f32>::init(cfg, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let ids = [CLS_ID, 10, 20, 30, 40, 50, SEP_ID];
        let base = embed_ids_padded(&enc, &ids, ids.len(), None).unwrap();
        for pad_to in [8, 16, 40] {
            let padded = embed_ids_padded(&enc, &ids, pad_to, None).unwrap();
            for (a, b) in base.iter().zip(&padded) {
                worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1e-6));
            }
        }
        notes.push(format!("{blocks} block(s) -> layer {}", embedding_layer(&enc.config)));
    }
    pass &= worst <= 1e-5;
    let v = vec![vec![1.0, 3.0], vec![3.0, 1.0]];
    let identities = aggregate(&v, Aggregation::Mean).unwrap() == vec![2.0, 2.0]
        && aggregate(&v, Aggregation::Max).unwrap() == vec![3.0, 3.0]
        && aggregate(&v[..1], Aggregation::Mean).unwrap() == v[0]
        && aggregate(&v[..1], Aggregation::Max).unwrap() == v[0];
    pass &= identities;
    Outcome {
        pass,
        detail: format!(
            "padding max relative difference {worst:.1e}; {}; aggregation identities {}",
            notes.join(", "),
            if identities { "exact" } else { "violated" }
        ),
    }
}

fn criterion_11() -> Outcome {
    // Class 0 tweets are N(0, 1) per dimension and class 1 tweets N(0.5, 0.8²).
    // Author means differ by 0.5 against a standard error of about 0.1, while
    // the expected per-dimension maximum of 100 draws is about 2.51 for both.
    let authors: Vec<AuthorProfile> = two_gaussian_authors(300, 100, 16, 11)
        .into_iter()
        .enumerate()
        .map(|(i, (t, l))| AuthorProfile {
            author_id: format!("author{i}"),
            tweet_embeddings: t,
            label: Some(l),
        })
        .collect();
    let cfg = HeadConfig::default();
    let (_, mean) = train_profile_head(&authors, Aggregation::Mean, &cfg).unwrap();
    let (_, max) = train_profile_head(&authors, Aggregation::Max, &cfg).unwrap();
    let tweets = ablate_tweets_per_author(&authors, &[1, 5, 20, 100], Aggregation::Mean, &cfg).unwrap();
    let users = ablate_num_users(&authors, &[4, 10, 30, 100, 210], Aggregation::Mean, &cfg).unwrap();
    let dir = std::env::temp_dir().join(format!("tweetlm-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    write_ablation_csv(&dir.join("tweets_per_author.csv"), "tweets", &tweets).unwrap();
    write_ablation_csv(&dir.join("num_users.csv"), "users", &users).unwrap();
    let emitted = std::fs::read_to_string(dir.join("num_users.csv")).unwrap().lines().count() == users.len() + 1;
    std::fs::remove_dir_all(&dir).ok();
    let noise = |a: &tweetlm_core::embed::AblationPoint, b: &tweetlm_core::embed::AblationPoint| {
        2.0 * (a.accuracy_std.powi(2) + b.accuracy_std.powi(2)).sqrt() / (cfg.runs as f64).sqrt()
    };
    let (u0, u1) = (&users[0], users.last().unwrap());
    let (t0, t1) = (&tweets[0], tweets.last().unwrap());
    let users_trend = u1.accuracy_mean + noise(u0, u1) >= u0.accuracy_mean;
    let tweets_trend = t1.accuracy_mean + noise(t0, t1) >= t0.accuracy_mean;
    let fmt = |pts: &[tweetlm_core::embed::AblationPoint]| {
        pts.iter().map(|p| format!("{}:{:.3}", p.value, p.accuracy_mean)).collect::<Vec<_>>().join(" ")
    };
    Outcome {
        pass: mean.accuracy_mean >= 0.95 && mean.accuracy_mean >= max.accuracy_mean && emitted && users_trend && tweets_trend,
        detail: format!(
            "mean {:.3} (p {:.3}, r {:.3}), max {:.3}; tweets {}; users {}",
            mean.accuracy_mean,
            mean.precision_mean,
            mean.recall_mean,
            max.accuracy_mean,
            fmt(&tweets),
            fmt(&users)
        ),
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix; returns
/// eigenvalues and eigenvectors as columns, in no particular order.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

fn criterion_12() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut worst_vec, mut worst_val, mut invariant_failures) = (0.0f64, 0.0f64, 0);
    for _ in 0..20 {
        let (n, d) = (rng.random_range(5..40), rng.random_range(2..9));
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let model = pca_fit(&x, 2).unwrap();
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let cov: Vec<Vec<f64>> = (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| x.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / (n as f64 - 1.0))
                    .collect()
            })
            .collect();
        let (vals, vecs) = jacobi_eigen(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
        for (c, &j) in order.iter().take(2).enumerate() {
            let oracle: Vec<f64> = vecs.iter().map(|row| row[j]).collect();
            let comp = &model.components[c];
            let same: f64 = comp.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let flipped: f64 = comp.iter().zip(&oracle).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max);
            worst_vec = worst_vec.max(same.min(flipped));
            worst_val = worst_val.max((model.explained_variance[c] - vals[j]).abs());
        }
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let (c0, c1) = (&model.components[0], &model.components[1]);
        let ok = (dot(c0, c0) - 1.0).abs() < 1e-8
            && (dot(c1, c1) - 1.0).abs() < 1e-8
            && dot(c0, c1).abs() < 1e-8
            && model.explained_variance[0] >= model.explained_variance[1];
        invariant_failures += usize::from(!ok);
    }
    Outcome {
        pass: worst_vec < 1e-8 && invariant_failures == 0,
        detail: format!(
            "20 fits, max component difference {worst_vec:.1e}, max eigenvalue difference {worst_val:.1e}, {invariant_failures} invariant failures"
        ),
    }
}

fn criterion_13() -> Outcome {
    let expected = [
        ("hate_speech.accuracy", 0.8275),
        ("profiling.mean.accuracy", 0.8190),
        ("profiling.max.accuracy", 0.7530),
        ("profiling.single_tweet.accuracy", 0.74),
    ];
    let recorded = expected
        .iter()
        .all(|&(k, v)| reference_value(k).is_some_and(|r| r.value == v && !r.citation.is_empty()));
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).unwrap_or_default();
    let documented = ["0.8275", "81.90%", "74%"].iter().all(|s| readme.contains(s));
    Outcome {
        pass: recorded && documented && REFERENCE_VALUES.iter().all(|r| !r.citation.is_empty()),
        detail: format!(
            "{} cited values in the reference module, README {}",
            REFERENCE_VALUES.len(),
            if documented { "lists the headline targets" } else { "is missing headline targets" }
        ),
    }
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: Vec<(usize, &str, fn() -> Outcome)> = vec![
        (1, "masking statistics", criterion_1),
        (2, "supervision exclusivity", criterion_2),
        (3, "gradient check", criterion_3),
        (4, "toy pre-training", criterion_4),
        (5, "scheduler exactness", criterion_5),
        (6, "Adam oracle", criterion_6),
        (7, "gradient accumulation equivalence", criterion_7),
        (8, "BPE oracle", criterion_8),
        (9, "fine-tuning on separable fixtures", criterion_9),
        (10, "embedding contracts", criterion_10),
        (11, "profiling fixture", criterion_11),
        (12, "PCA oracle", criterion_12),
        (13, "reference-value documentation", criterion_13),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let out = f();
        let secs = start.elapsed().as_secs_f64();
        let status = if out.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} [{status}] {name}: {} ({secs:.1}s)", out.detail);
        failed += usize::from(!out.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
