//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line to
//! stderr (bypassing the test harness's capture) before asserting.
//!
//! Run with `cargo test -p gappy-cli --test acceptance`.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use gappy::corpus::{build_vocab, decode_bigo, encode_spans, AdjacencySet, MweSpan, Tag};
use gappy::evaluation::{brute_force_oracle, discontinuous_scores, mwe_based_prf, token_based_prf};
use gappy::layers::{BiLstmLayer, GcnLayer, HighwayBlock, MultiHeadAttention};
use gappy::models::{random_heads, ModelConfig, ModelKind, TaggerModel};
use gappy::tensor::{Graph, Mode, ParamStore, Rng};
use gappy::training::{make_synthetic_corpus, mean_loss, predict_spans, prepare, train, SyntheticOptions, TrainConfig};

fn report(label: &str, passed: bool, detail: &str) {
    let verdict = if passed { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "{verdict} {label}: {detail}");
}

fn gappy() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gappy"));
    cmd.env_remove("GAPPY_SEED").env("RUST_LOG", "warn");
    cmd
}

fn spans(list: &[&[usize]]) -> Vec<MweSpan> {
    list.iter()
        .enumerate()
        .map(|(i, p)| MweSpan::new(i as u32 + 1, p.to_vec()))
        .collect()
}

fn positions(spans: &[MweSpan]) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = spans.iter().map(|s| s.positions.clone()).collect();
    out.sort();
    out
}

#[test]
fn gradient_fidelity() {
    let started = Instant::now();
    let out = gappy().args(["gradcheck", "--full", "--seed", "1"]).output().unwrap();
    let seconds = started.elapsed().as_secs_f64();
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let max_err = json["max_rel_error"].as_f64().unwrap();
    let groups = json["params"].as_array().unwrap().len();
    let passed = out.status.code() == Some(0) && max_err <= 1e-3 && seconds < 60.0;
    report(
        "gradient fidelity",
        passed,
        &format!("{groups} parameter tensors, max relative error {max_err:.2e}, {seconds:.1}s"),
    );
    assert!(passed);
}

/// Spans whose surface ranges are pairwise disjoint; each keeps both ends
/// of its range and a random subset of the interior.
fn random_span_set(rng: &mut Rng) -> (usize, Vec<MweSpan>) {
    let len = rng.range(1, 16);
    let mut out = Vec::new();
    let mut pos = 1 + rng.below(3);
    while pos <= len {
        let last = (pos + rng.below(6)).min(len);
        let mut p = vec![pos];
        p.extend((pos + 1..last).filter(|_| rng.bernoulli(0.4)));
        if last > pos {
            p.push(last);
        }
        out.push(MweSpan::new(out.len() as u32 + 1, p));
        pos = last + 1 + rng.below(3);
    }
    (len, out)
}

#[test]
fn codec_round_trip() {
    let mut rng = Rng::new(2);
    let mut failures = 0;
    let mut discontinuous = 0;
    for _ in 0..1000 {
        let (len, set) = random_span_set(&mut rng);
        discontinuous += set.iter().filter(|s| s.is_discontinuous()).count();
        if positions(&decode_bigo(&encode_spans(&set, len))) != positions(&set) {
            failures += 1;
        }
    }
    // "make important decisions": verb and noun form the expression
    let example = encode_spans(&spans(&[&[1, 3]]), 3);
    let example_ok = example == vec![Tag::B, Tag::G, Tag::I];
    let passed = failures == 0 && example_ok;
    report(
        "codec round trip",
        passed,
        &format!("{failures}/1000 mismatches ({discontinuous} discontinuous spans), example tags {example:?}"),
    );
    assert!(passed);
}

fn random_instance(rng: &mut Rng) -> (Vec<Vec<MweSpan>>, Vec<Vec<MweSpan>>) {
    let sentences = rng.range(1, 3);
    let (mut gold, mut pred) = (Vec::new(), Vec::new());
    for _ in 0..sentences {
        let make = |rng: &mut Rng| -> Vec<MweSpan> {
            (0..rng.below(4))
                .map(|i| {
                    let mut p: Vec<usize> = (0..rng.range(1, 3)).map(|_| rng.range(1, 5)).collect();
                    p.sort_unstable();
                    p.dedup();
                    MweSpan::new(i as u32 + 1, p)
                })
                .collect()
        };
        let g = make(rng);
        let mut p: Vec<MweSpan> = g.iter().filter(|_| rng.bernoulli(0.6)).cloned().collect();
        p.extend(make(rng).into_iter().take(2));
        gold.push(g);
        pred.push(p);
    }
    (gold, pred)
}

#[test]
fn metric_oracle_equivalence() {
    let mut rng = Rng::new(3);
    let mut mismatches = 0;
    let mut matched = 0;
    for _ in 0..100 {
        let (gold, pred) = random_instance(&mut rng);
        let fast = mwe_based_prf(&gold, &pred).unwrap();
        let slow = brute_force_oracle(&gold, &pred).unwrap();
        matched += fast.tp;
        if (fast.tp, fast.pred_count, fast.gold_count) != (slow.tp, slow.pred_count, slow.gold_count) {
            mismatches += 1;
        }
    }
    let gold = vec![spans(&[&[1, 2], &[4, 6]])];
    let pred = vec![spans(&[&[1, 2], &[4, 5]])];
    let m = mwe_based_prf(&gold, &pred).unwrap();
    let t = token_based_prf(&gold, &pred).unwrap();
    let fixtures_ok = (m.precision, m.recall) == (0.5, 0.5) && (t.precision, t.recall) == (0.75, 0.75);
    let passed = mismatches == 0 && fixtures_ok;
    report(
        "metric oracle equivalence",
        passed,
        &format!(
            "{mismatches}/100 count mismatches ({matched} matches in total); fixtures MWE P/R {}/{}, token P/R {}/{}",
            m.precision, m.recall, t.precision, t.recall
        ),
    );
    assert!(passed);
}

#[test]
fn learnability_of_discontinuity() {
    let started = Instant::now();
    let corpus = make_synthetic_corpus(1, 40, &SyntheticOptions::uniform_gaps(&[0, 1, 2, 3])).unwrap();
    let vocab = build_vocab(&corpus, 1);
    let data = prepare(&corpus, &vocab, true).unwrap();
    let model = TaggerModel::new(ModelConfig {
        vocab_size: vocab.len(),
        seed: 1,
        ..ModelConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        max_epochs: 200,
        patience: 200,
        seed: 1,
        target_dev_f: Some(0.95),
        ..TrainConfig::default()
    };
    let out = train(model, &data, &data, &cfg).unwrap();
    let (mwe, _) = gappy::training::evaluate(&out.model, &data).unwrap();
    let seconds = started.elapsed().as_secs_f64();
    let passed = mwe.f1 >= 0.95 && out.log.records.len() <= 200 && seconds < 300.0;
    report(
        "learnability of discontinuity",
        passed,
        &format!(
            "training-set MWE F {:.3} after {} epochs, {seconds:.1}s",
            mwe.f1,
            out.log.records.len()
        ),
    );
    assert!(passed);
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

#[test]
fn relative_ordering_on_gaps() {
    let kinds = [ModelKind::Baseline, ModelKind::GcnBased, ModelKind::HCombined];
    let mut scores = vec![Vec::new(); kinds.len()];
    let (mut long_gaps, mut dev_total) = (0, 0);
    for seed in 1..=5u64 {
        let all_gaps = SyntheticOptions::uniform_gaps(&[0, 1, 2, 3, 4, 5]);
        let train_corpus = make_synthetic_corpus(100 + seed, 400, &all_gaps).unwrap();
        let val_corpus = make_synthetic_corpus(300 + seed, 60, &all_gaps).unwrap();
        let dev_opts = SyntheticOptions {
            gap_weights: vec![0.2, 0.2, 0.2, 0.2, 0.1, 0.1],
            decoy_rate: 0.25,
        };
        let dev_corpus = make_synthetic_corpus(200 + seed, 60, &dev_opts).unwrap();
        let dev_spans: Vec<MweSpan> = dev_corpus.spans().into_iter().flatten().collect();
        long_gaps += dev_spans.iter().filter(|s| s.gap_size() >= 2).count();
        dev_total += dev_spans.len();

        let vocab = build_vocab(&train_corpus, 1);
        let train_data = prepare(&train_corpus, &vocab, true).unwrap();
        let val_data = prepare(&val_corpus, &vocab, true).unwrap();
        let dev_data = prepare(&dev_corpus, &vocab, true).unwrap();
        let gold: Vec<Vec<MweSpan>> = dev_data.iter().map(|ex| ex.spans.clone()).collect();
        for (k, &kind) in kinds.iter().enumerate() {
            let model = TaggerModel::new(ModelConfig {
                kind,
                vocab_size: vocab.len(),
                embed_dim: 16,
                gcn_dim: 16,
                filters_a: 16,
                filters_b: 16,
                heads: 4,
                lstm_dim: 16,
                seed,
                ..ModelConfig::default()
            })
            .unwrap();
            let cfg = TrainConfig {
                learning_rate: 3e-3,
                max_epochs: 40,
                seed,
                ..TrainConfig::default()
            };
            let out = train(model, &train_data, &val_data, &cfg).unwrap();
            let pred = predict_spans(&out.model, &dev_data).unwrap();
            scores[k].push(discontinuous_scores(&gold, &pred).unwrap().f1);
        }
    }
    let medians: Vec<f64> = scores.iter().map(|s| median(s.clone())).collect();
    let passed = medians[1] > medians[0] && medians[2] > medians[0];
    let per_seed: Vec<String> = kinds
        .iter()
        .zip(&scores)
        .map(|(k, s)| format!("{k} {:?}", s.iter().map(|f| (f * 1000.0).round() / 1000.0).collect::<Vec<_>>()))
        .collect();
    report(
        "relative ordering on gaps",
        passed,
        &format!(
            "median discontinuous F Baseline {:.3}, GcnBased {:.3}, HCombined {:.3} ({:.0}% of dev MWEs have gap >= 2; {})",
            medians[0],
            medians[1],
            medians[2],
            100.0 * long_gaps as f64 / dev_total as f64,
            per_seed.join("; ")
        ),
    );
    assert!(passed);
}

#[test]
fn equivariance_and_limits() {
    let mut rng = Rng::new(6);

    // graph convolution commutes with reordering the tokens
    let mut gcn_dev: f64 = 0.0;
    for _ in 0..20 {
        let s = rng.range(2, 9);
        let mut store = ParamStore::new();
        let layer = GcnLayer::new(&mut store, &mut rng, "gcn", 4, 5);
        let adj = AdjacencySet::from_heads(&random_heads(&mut rng, s)).unwrap();
        let mut perm: Vec<usize> = (0..s).collect();
        rng.shuffle(&mut perm);
        let x: Vec<f64> = (0..s * 4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let xp: Vec<f64> = perm.iter().flat_map(|&p| x[p * 4..(p + 1) * 4].to_vec()).collect();
        let mut g = Graph::new();
        let xv = g.constant(s, 4, x).unwrap();
        let y = layer.forward(&mut g, &store, xv, &adj).unwrap();
        let xpv = g.constant(s, 4, xp).unwrap();
        let yp = layer.forward(&mut g, &store, xpv, &adj.permuted(&perm)).unwrap();
        for (k, &p) in perm.iter().enumerate() {
            for c in 0..5 {
                gcn_dev = gcn_dev.max((g.value(yp)[k * 5 + c] - g.value(y)[p * 5 + c]).abs());
            }
        }
    }

    // attention weights over admitted keys sum to one in every row
    let mut row_dev: f64 = 0.0;
    for _ in 0..20 {
        let s = rng.range(1, 9);
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut store, &mut rng, "attn", 8, 4);
        let mut mask: Vec<bool> = (0..s).map(|_| rng.bernoulli(0.7)).collect();
        mask[rng.below(s)] = true;
        let mut g = Graph::new();
        let x = g.constant(s, 8, (0..s * 8).map(|_| rng.uniform(-20.0, 20.0)).collect()).unwrap();
        let (_, weights) = attn.forward_with_weights(&mut g, &store, x, &mask).unwrap();
        for w in weights {
            for row in g.value(w).chunks(s) {
                row_dev = row_dev.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }

    // a saturated negative transform bias turns the highway into the identity
    let mut carry_dev: f64 = 0.0;
    for _ in 0..10 {
        let s = rng.range(1, 9);
        let mut store = ParamStore::new();
        let block = HighwayBlock::new(&mut store, &mut rng, "highway", 6, 3, -1e9);
        let values: Vec<f64> = (0..s * 6).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let mut g = Graph::new();
        let x = g.constant(s, 6, values.clone()).unwrap();
        let y = block.forward(&mut g, &store, x).unwrap();
        for (a, b) in g.value(y).iter().zip(&values) {
            carry_dev = carry_dev.max((a - b).abs());
        }
    }

    // padded positions of the BiLSTM output are exactly zero
    let mut pad_max: f64 = 0.0;
    let mut pads = 0;
    for _ in 0..10 {
        let s = rng.range(2, 9);
        let mut store = ParamStore::new();
        let lstm = BiLstmLayer::new(&mut store, &mut rng, "lstm", 5, 4);
        let mut mask: Vec<bool> = (0..s).map(|_| rng.bernoulli(0.6)).collect();
        mask[0] = true;
        *mask.last_mut().unwrap() = false;
        let mut g = Graph::new();
        let x = g.constant(s, 5, (0..s * 5).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap();
        let y = lstm.forward(&mut g, &store, x, &mask).unwrap();
        for (row, &m) in g.value(y).chunks(8).zip(&mask) {
            if !m {
                pads += 1;
                pad_max = row.iter().fold(pad_max, |acc, v| acc.max(v.abs()));
            }
        }
    }

    let passed = gcn_dev < 1e-12 && row_dev <= 1e-9 && carry_dev < 1e-12 && pad_max == 0.0 && pads > 0;
    report(
        "equivariance and limits",
        passed,
        &format!(
            "GCN permutation deviation {gcn_dev:.1e}, attention row-sum deviation {row_dev:.1e}, \
             highway carry deviation {carry_dev:.1e}, max |BiLSTM output| at {pads} pads {pad_max:.1e}"
        ),
    );
    assert!(passed);
}

fn train_once(dir: &Path, run: &str) -> (Vec<u8>, Vec<u8>) {
    let ckpt = dir.join(format!("{run}.json"));
    let log = dir.join(format!("{run}.csv"));
    let out = gappy()
        .current_dir(dir)
        .args(["train", "--seed", "7", "--paths.train", "train.cupt", "--paths.dev", "dev.cupt"])
        .args(["--train.max_epochs", "4", "--model.lstm_dim", "20"])
        .arg("--paths.checkpoint")
        .arg(&ckpt)
        .arg("--paths.log")
        .arg(&log)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (std::fs::read(ckpt).unwrap(), std::fs::read(log).unwrap())
}

#[test]
fn determinism() {
    let dir = tempfile::tempdir().unwrap();
    for (name, seed, n) in [("train.cupt", "11", "24"), ("dev.cupt", "12", "12")] {
        let status = gappy()
            .current_dir(dir.path())
            .args(["synth", "--output", name, "--seed", seed, "--sentences", n])
            .output()
            .unwrap()
            .status;
        assert!(status.success());
    }
    let (ckpt_a, log_a) = train_once(dir.path(), "a");
    let (ckpt_b, log_b) = train_once(dir.path(), "b");
    let passed = ckpt_a == ckpt_b && log_a == log_b;
    report(
        "determinism",
        passed,
        &format!(
            "checkpoints {} bytes ({}), logs {} bytes ({})",
            ckpt_a.len(),
            if ckpt_a == ckpt_b { "identical" } else { "differ" },
            log_a.len(),
            if log_a == log_b { "identical" } else { "differ" }
        ),
    );
    assert!(passed);
}

#[test]
fn initial_loss_sanity() {
    let corpus = make_synthetic_corpus(8, 60, &SyntheticOptions::default()).unwrap();
    let vocab = build_vocab(&corpus, 1);
    let mut data = prepare(&corpus, &vocab, true).unwrap();
    // balanced random tags: each of the four tags equally likely per token
    let mut rng = Rng::new(9);
    for ex in &mut data {
        ex.tags = ex.tags.iter().map(|_| Tag::from_index(rng.below(4)).unwrap()).collect();
    }
    let mut losses = Vec::new();
    for seed in 1..=3 {
        let model = TaggerModel::new(ModelConfig {
            vocab_size: vocab.len(),
            seed,
            ..ModelConfig::default()
        })
        .unwrap();
        losses.push(mean_loss(&model, &data, Mode::Train).unwrap());
    }
    let ln4 = 4f64.ln();
    let passed = losses.iter().all(|l| (l - ln4).abs() <= 0.2);
    report(
        "initial loss sanity",
        passed,
        &format!("untrained HCombined losses {losses:.4?} against ln 4 = {ln4:.4}"),
    );
    assert!(passed);
}
