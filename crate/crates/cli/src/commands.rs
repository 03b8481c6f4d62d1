use std::path::Path;

use gappy::corpus::{build_adjacency, build_vocab, decode_bigo, parse_cupt, Corpus, MweSpan};
use gappy::evaluation::{discontinuous_scores, gap_report, mwe_based_prf, token_based_prf};
use gappy::io::write_atomic;
use gappy::models::{component_grad_check, TaggerModel, CHECK_TARGETS};
use gappy::tensor::GradCheckOptions;
use gappy::training::{make_synthetic_corpus, predict_spans, prepare, train, SyntheticOptions};
use gappy::{Error, Result};
use serde_json::{json, Value};

use crate::config::RunConfig;

/// Result of a command that ran to completion: JSON for stdout, and
/// whether the check it performed (if any) passed.
pub struct Outcome {
    pub report: Value,
    pub passed: bool,
}

impl From<Value> for Outcome {
    fn from(report: Value) -> Self {
        Outcome { report, passed: true }
    }
}

fn read_corpus(path: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let corpus = parse_cupt(&text)?;
    for w in &corpus.warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(corpus)
}

fn scores_json(gold: &[Vec<MweSpan>], pred: &[Vec<MweSpan>]) -> Result<Value> {
    Ok(json!({
        "mwe_based": mwe_based_prf(gold, pred)?,
        "token_based": token_based_prf(gold, pred)?,
        "discontinuous": discontinuous_scores(gold, pred)?,
    }))
}

pub fn train_cmd(cfg: RunConfig) -> Result<Outcome> {
    let bad = cfg.invalid_fields_for_training();
    if !bad.is_empty() {
        return Err(Error::Config { fields: bad });
    }
    let paths = &cfg.paths;
    let train_path = paths.train.as_deref().expect("validated");
    let checkpoint = paths.checkpoint.as_deref().expect("validated");

    let train_corpus = read_corpus(train_path)?;
    let vocab = build_vocab(&train_corpus, cfg.vocab_min_count);
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = vocab.len();
    let mut model = TaggerModel::new(model_cfg)?;
    if let Some(p) = cfg.model.pretrained.as_deref() {
        let found = model.load_pretrained(&vocab, p)?;
        log::info!("{found} of {} vocabulary entries found in {}", vocab.len(), p.display());
    }
    let with_adj = model.needs_adjacency();
    let train_data = prepare(&train_corpus, &vocab, with_adj)?;
    let dev_data = match &paths.dev {
        Some(p) => prepare(&read_corpus(p)?, &vocab, with_adj)?,
        None => Vec::new(),
    };
    log::info!(
        "{} model, {} parameters, {} train / {} dev sentences, vocabulary {}",
        model.kind(),
        model.store.trainable_count(),
        train_data.len(),
        dev_data.len(),
        vocab.len()
    );

    let outcome = train(model, &train_data, &dev_data, &cfg.train)?;
    outcome.model.save_checkpoint(&vocab, checkpoint)?;
    if let Some(log_path) = &paths.log {
        write_atomic(log_path, outcome.log.to_csv().as_bytes())?;
    }

    let mut report = json!({
        "best_epoch": outcome.best_epoch,
        "epochs": outcome.log.records.len(),
        "checkpoint": checkpoint,
    });
    let mut score = |name: &str, data: &[gappy::training::Example]| -> Result<()> {
        let pred = predict_spans(&outcome.model, data)?;
        let gold: Vec<Vec<MweSpan>> = data.iter().map(|ex| ex.spans.clone()).collect();
        report[name] = scores_json(&gold, &pred)?;
        Ok(())
    };
    if !dev_data.is_empty() {
        score("dev", &dev_data)?;
    }
    if let Some(p) = &paths.test {
        let test_data = prepare(&read_corpus(p)?, &vocab, with_adj)?;
        score("test", &test_data)?;
    }
    Ok(report.into())
}

pub fn tag_cmd(checkpoint: &Path, input: &Path, output: &Path) -> Result<Outcome> {
    let (model, vocab) = TaggerModel::load_checkpoint(checkpoint)?;
    let corpus = read_corpus(input)?;
    let mut tagged = Corpus::default();
    let mut span_count = 0;
    for sentence in &corpus.sentences {
        let tokens = vocab.encode(sentence);
        let adj = if model.needs_adjacency() {
            Some(build_adjacency(sentence)?)
        } else {
            None
        };
        let spans = decode_bigo(&model.predict_tags(&tokens, adj.as_ref())?);
        span_count += spans.len();
        tagged.sentences.push(sentence.with_spans(&spans));
    }
    write_atomic(output, tagged.to_cupt().as_bytes())?;
    Ok(json!({
        "sentences": tagged.len(),
        "spans": span_count,
        "output": output,
    })
    .into())
}

pub fn eval_cmd(gold: &Path, system: &Path, gap_buckets: Option<usize>, gap_csv: Option<&Path>) -> Result<Outcome> {
    let gold = read_corpus(gold)?;
    let system = read_corpus(system)?;
    if gold.len() != system.len() {
        return Err(Error::Data(format!(
            "gold has {} sentences, system output has {}",
            gold.len(),
            system.len()
        )));
    }
    for (i, (g, s)) in gold.sentences.iter().zip(&system.sentences).enumerate() {
        if g.len() != s.len() {
            return Err(Error::Structure {
                sentence: if g.source_id.is_empty() {
                    format!("#{}", i + 1)
                } else {
                    g.source_id.clone()
                },
                message: format!("{} gold tokens but {} system tokens", g.len(), s.len()),
            });
        }
    }
    let (gold, pred) = (gold.spans(), system.spans());
    let mut report = scores_json(&gold, &pred)?;
    if let Some(n) = gap_buckets.or(gap_csv.map(|_| 3)) {
        let gaps = gap_report(&gold, &pred, n)?;
        if let Some(path) = gap_csv {
            write_atomic(path, gaps.to_csv().as_bytes())?;
        }
        report["gap_report"] = serde_json::to_value(&gaps).expect("plain data");
    }
    Ok(report.into())
}

pub fn gradcheck_cmd(target: &str, seed: u64, corrupt: bool) -> Result<Outcome> {
    if !CHECK_TARGETS.contains(&target) {
        return Err(Error::Config {
            fields: vec![format!("layer `{target}` (expected one of {})", CHECK_TARGETS.join(", "))],
        });
    }
    let opts = GradCheckOptions {
        corrupt_factor: corrupt.then_some(1.5),
        ..Default::default()
    };
    let report = component_grad_check(target, seed, opts)?;
    for p in &report.params {
        log::info!("{:<28} {:>6} entries  max rel error {:.3e}", p.name, p.entries, p.max_rel_error);
    }
    let params: Vec<Value> = report
        .params
        .iter()
        .map(|p| json!({"name": p.name, "entries": p.entries, "max_rel_error": p.max_rel_error}))
        .collect();
    Ok(Outcome {
        report: json!({
            "target": target,
            "seed": seed,
            "tol": report.tol,
            "max_rel_error": report.max_rel_error,
            "passed": report.passed,
            "params": params,
        }),
        passed: report.passed,
    })
}

pub fn synth_cmd(output: &Path, sentences: usize, seed: u64, opts: &SyntheticOptions) -> Result<Outcome> {
    let corpus = make_synthetic_corpus(seed, sentences, opts)?;
    write_atomic(output, corpus.to_cupt().as_bytes())?;
    let spans: Vec<MweSpan> = corpus.spans().into_iter().flatten().collect();
    let discontinuous = spans.iter().filter(|s| s.is_discontinuous()).count();
    Ok(json!({
        "sentences": corpus.len(),
        "spans": spans.len(),
        "discontinuous": discontinuous,
        "output": output,
    })
    .into())
}
