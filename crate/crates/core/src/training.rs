//! Optimisation, early stopping and the synthetic corpus generator.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{build_adjacency, encode_bigo, AdjacencySet, Corpus, MweSpan, Sentence, Tag, Token, Vocab};
use crate::error::{Error, Result};
use crate::evaluation::{mwe_based_prf, token_based_prf, Scores};
use crate::layers::{update_running_stats, NORM_MOMENTUM};
use crate::models::TaggerModel;
use crate::tensor::{Graph, Mode, ParamStore, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Sentences whose gradients are averaged into one optimiser step.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a dev improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Rescale the step gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
    /// When false the `seconds` column is written as 0 so logs of repeated
    /// runs compare equal.
    pub record_wall_time: bool,
    /// Stop as soon as the dev MWE-based F reaches this value.
    pub target_dev_f: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 8,
            max_epochs: 300,
            patience: 10,
            seed: 0,
            shuffle: true,
            clip_norm: None,
            record_wall_time: false,
            target_dev_f: None,
        }
    }
}

impl TrainConfig {
    pub fn invalid_fields(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bad.push("learning_rate");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            bad.push("beta1");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            bad.push("beta2");
        }
        if !(self.epsilon > 0.0) {
            bad.push("epsilon");
        }
        if self.batch_size == 0 {
            bad.push("batch_size");
        }
        if self.max_epochs == 0 {
            bad.push("max_epochs");
        }
        if self.patience == 0 {
            bad.push("patience");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            bad.push("clip_norm");
        }
        bad.into_iter().map(String::from).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fields = self.invalid_fields();
        if fields.is_empty() {
            Ok(())
        } else {
            Err(Error::Config { fields })
        }
    }
}

/// First and second moments per parameter, plus the step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: u64,
}

/// One bias-corrected Adam update of every trainable parameter, after
/// which all gradients are zeroed.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &TrainConfig) {
    if state.m.len() != store.len() {
        state.m = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (k, p) in store.iter_mut().enumerate() {
        if p.trainable {
            let (m, v) = (&mut state.m[k], &mut state.v[k]);
            for (i, (w, &g)) in p.value.values_mut().iter_mut().zip(&p.grad).enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
        p.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// A sentence prepared for the model.
#[derive(Debug, Clone)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub adjacency: Option<AdjacencySet>,
    pub tags: Vec<Tag>,
    /// Gold spans as annotated (before overlap resolution).
    pub spans: Vec<MweSpan>,
}

/// Encode every sentence; the adjacency is built (and the tree checked)
/// only when `with_adjacency` is set.
pub fn prepare(corpus: &Corpus, vocab: &Vocab, with_adjacency: bool) -> Result<Vec<Example>> {
    corpus
        .sentences
        .iter()
        .map(|s| {
            Ok(Example {
                tokens: vocab.encode(s),
                adjacency: if with_adjacency {
                    Some(build_adjacency(s)?)
                } else {
                    None
                },
                tags: encode_bigo(s),
                spans: s.spans.clone(),
            })
        })
        .collect()
}

/// Predicted spans for each example.
pub fn predict_spans(model: &TaggerModel, data: &[Example]) -> Result<Vec<Vec<MweSpan>>> {
    data.iter()
        .map(|ex| {
            let tags = model.predict_tags(&ex.tokens, ex.adjacency.as_ref())?;
            Ok(crate::corpus::decode_bigo(&tags))
        })
        .collect()
}

/// MWE-based and token-based scores of the model on `data`.
pub fn evaluate(model: &TaggerModel, data: &[Example]) -> Result<(Scores, Scores)> {
    let pred = predict_spans(model, data)?;
    let gold: Vec<Vec<MweSpan>> = data.iter().map(|ex| ex.spans.clone()).collect();
    Ok((mwe_based_prf(&gold, &pred)?, token_based_prf(&gold, &pred)?))
}

/// Mean per-sentence loss without updating anything.
pub fn mean_loss(model: &TaggerModel, data: &[Example], mode: Mode) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ex in data {
        let mut g = Graph::new();
        let loss = model.loss(&mut g, &ex.tokens, ex.adjacency.as_ref(), &ex.tags, mode)?;
        total += g.scalar(loss);
    }
    Ok(total / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's sentences.
    pub loss: f64,
    pub dev_token_f: f64,
    pub dev_mwe_f: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,dev_token_f,dev_mwe_f,seconds\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.loss, r.dev_token_f, r.dev_mwe_f, r.seconds);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the selected epoch.
    pub model: TaggerModel,
    pub log: TrainLog,
    pub best_epoch: usize,
}

/// Adam over shuffled mini-batches of sentences; each step minimises the
/// mean sentence loss of its batch. After every epoch the dev
/// set is tagged and the model with the highest MWE-based F is kept;
/// training stops after `patience` epochs without improvement. With an
/// empty dev set the last epoch is returned.
pub fn train(mut model: TaggerModel, train_data: &[Example], dev_data: &[Example], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut adam = AdamState::default();
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, TaggerModel)> = None;
    let mut stale = 0;
    let started = Instant::now();
    model.store.zero_grad();
    for epoch in 1..=cfg.max_epochs {
        if cfg.shuffle {
            rng.shuffle(&mut order);
        }
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let inputs: Vec<(&[usize], Option<&AdjacencySet>, &[Tag])> = batch
                .iter()
                .map(|&i| {
                    let ex = &train_data[i];
                    (ex.tokens.as_slice(), ex.adjacency.as_ref(), ex.tags.as_slice())
                })
                .collect();
            let mut g = Graph::new();
            let (loss, each) = model.batch_loss(&mut g, &inputs, Mode::Train)?;
            total += each.iter().sum::<f64>();
            g.backward(loss)?;
            g.accumulate_into(&mut model.store);
            let stats = g.norm_stats().to_vec();
            if let Some(limit) = cfg.clip_norm {
                let norm = model.store.grad_norm();
                if norm > limit {
                    model.store.scale_grads(limit / norm);
                }
            }
            adam_step(&mut model.store, &mut adam, cfg);
            update_running_stats(&mut model.store, &stats, NORM_MOMENTUM);
        }
        let loss = total / train_data.len() as f64;
        let (dev_mwe, dev_token) = if dev_data.is_empty() {
            (Scores::default(), Scores::default())
        } else {
            evaluate(&model, dev_data)?
        };
        let seconds = if cfg.record_wall_time {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        };
        log.records.push(EpochRecord {
            epoch,
            loss,
            dev_token_f: dev_token.f1,
            dev_mwe_f: dev_mwe.f1,
            seconds,
        });
        log::info!(
            "epoch {epoch}: loss {loss:.4}, dev token F {:.4}, dev MWE F {:.4}",
            dev_token.f1,
            dev_mwe.f1
        );
        if dev_data.is_empty() {
            best = Some((0.0, epoch, model.clone()));
            continue;
        }
        if best.as_ref().is_none_or(|(f, _, _)| dev_mwe.f1 > *f) {
            best = Some((dev_mwe.f1, epoch, model.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        if cfg.target_dev_f.is_some_and(|t| dev_mwe.f1 >= t) {
            break;
        }
        if stale >= cfg.patience {
            log::info!("no dev improvement for {stale} epochs, stopping");
            break;
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { model, log, best_epoch })
}

/// Word classes of the synthetic language: 6 verbs, 6 particles and 18
/// fillers.
pub const SYNTH_VERBS: [&str; 6] = ["take", "make", "put", "give", "turn", "set"];
pub const SYNTH_PARTICLES: [&str; 6] = ["off", "up", "on", "out", "down", "in"];
pub const SYNTH_FILLERS: [&str; 18] = [
    "the", "a", "blue", "big", "old", "red", "one", "of", "masks", "box", "lid", "car", "idea", "dog", "plan", "cup",
    "note", "rope",
];
pub const SYNTH_MAX_GAP: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticOptions {
    /// Relative frequency of each gap size 0..=5 among planted expressions.
    pub gap_weights: Vec<f64>,
    /// Share of sentences whose verb and particle are not an expression.
    pub decoy_rate: f64,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        SyntheticOptions::uniform_gaps(&[0, 1, 2, 3])
    }
}

impl SyntheticOptions {
    pub fn uniform_gaps(gaps: &[usize]) -> Self {
        let mut gap_weights = vec![0.0; SYNTH_MAX_GAP + 1];
        for &g in gaps {
            gap_weights[g] = 1.0;
        }
        SyntheticOptions {
            gap_weights,
            decoy_rate: 0.25,
        }
    }

    pub fn invalid_fields(&self) -> Vec<String> {
        let mut bad = Vec::new();
        let w = &self.gap_weights;
        if w.len() != SYNTH_MAX_GAP + 1 || w.iter().any(|&x| !(x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            bad.push("gap_weights".to_string());
        }
        if !(0.0..=1.0).contains(&self.decoy_rate) {
            bad.push("decoy_rate".to_string());
        }
        bad
    }
}

/// Gap sizes for `n` expressions in exact proportion to `weights`
/// (largest-remainder rounding), in shuffled order.
fn allocate_gaps(rng: &mut Rng, weights: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut by_remainder: Vec<usize> = (0..weights.len()).collect();
    by_remainder.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.partial_cmp(&ra).expect("finite").then(a.cmp(&b))
    });
    let missing = n - counts.iter().sum::<usize>();
    for &g in by_remainder.iter().take(missing) {
        counts[g] += 1;
    }
    let mut gaps: Vec<usize> = counts.iter().enumerate().flat_map(|(g, &c)| std::iter::repeat_n(g, c)).collect();
    rng.shuffle(&mut gaps);
    gaps
}

/// Sentences of 5 to 12 tokens, each holding one verb and one later
/// particle separated by a sampled gap of fillers. In a planted sentence
/// the particle depends on the verb and the pair is a gold expression. In
/// a decoy sentence the surface is drawn the same way but the particle
/// depends on the token before the verb, and nothing is annotated. Every
/// other token depends on its left neighbour; token 1 is the root.
pub fn make_synthetic_corpus(seed: u64, n_sentences: usize, opts: &SyntheticOptions) -> Result<Corpus> {
    let bad = opts.invalid_fields();
    if !bad.is_empty() {
        return Err(Error::Config { fields: bad });
    }
    let mut rng = Rng::new(seed);
    let decoy: Vec<bool> = (0..n_sentences).map(|_| rng.bernoulli(opts.decoy_rate)).collect();
    let planted = decoy.iter().filter(|&&d| !d).count();
    let mut planted_gaps = allocate_gaps(&mut rng, &opts.gap_weights, planted).into_iter();
    let mut sentences = Vec::with_capacity(n_sentences);
    for (k, &is_decoy) in decoy.iter().enumerate() {
        let gap = if is_decoy {
            rng.weighted(&opts.gap_weights)
        } else {
            planted_gaps.next().expect("one gap per planted sentence")
        };
        let len = rng.range((gap + 3).max(5), 12);
        let verb = rng.range(2, len - gap - 1);
        let particle = verb + gap + 1;
        let tokens = (1..=len)
            .map(|id| {
                let (form, upos) = if id == verb {
                    (SYNTH_VERBS[rng.below(SYNTH_VERBS.len())], "VERB")
                } else if id == particle {
                    (SYNTH_PARTICLES[rng.below(SYNTH_PARTICLES.len())], "ADP")
                } else {
                    (SYNTH_FILLERS[rng.below(SYNTH_FILLERS.len())], "NOUN")
                };
                let (head, deprel) = match id {
                    1 => (0, "root"),
                    p if p == particle && is_decoy => (verb - 1, "obl"),
                    p if p == particle => (verb, "compound:prt"),
                    _ => (id - 1, "dep"),
                };
                Token {
                    id,
                    form: form.to_string(),
                    lemma: form.to_string(),
                    upos: upos.to_string(),
                    xpos: "_".to_string(),
                    feats: "_".to_string(),
                    head,
                    deprel: deprel.to_string(),
                    deps: "_".to_string(),
                    misc: "_".to_string(),
                    mwe_col: "*".to_string(),
                }
            })
            .collect();
        let mut spans = Vec::new();
        if !is_decoy {
            let mut span = MweSpan::new(1, vec![verb, particle]);
            span.category = Some("VPC.full".to_string());
            spans.push(span);
        }
        let id = format!("synth-{seed}-{}", k + 1);
        let mut sentence = Sentence::from_tokens(id.clone(), tokens, Vec::new()).with_spans(&spans);
        sentence.add_metadata("source_sent_id", &id);
        sentences.push(sentence);
    }
    Ok(Corpus {
        sentences,
        warnings: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, parse_cupt, Tag};
    use crate::models::{ModelConfig, ModelKind};

    fn small_config(kind: ModelKind, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            kind,
            vocab_size,
            embed_dim: 8,
            gcn_dim: 8,
            filters_a: 4,
            filters_b: 4,
            heads: 2,
            highway_depth: 1,
            transform_bias: -1.0,
            lstm_dim: 8,
            seed,
            pretrained: None,
        }
    }

    #[test]
    fn adam_first_step_moves_by_the_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("theta", crate::tensor::Tensor::zeros(&[1, 1]));
        store.get_mut(id).grad[0] = 1.0;
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut state = AdamState::default();
        adam_step(&mut store, &mut state, &cfg);
        // m_hat = 1, v_hat = 1, so the step is 0.1 / (1 + 1e-8)
        let theta = store.get(id).value.values()[0];
        assert!((theta + 0.1).abs() < 1e-8, "{theta}");
        assert_eq!(store.get(id).grad[0], 0.0);

        // zero gradient: m decays but stays positive, so compare to a fresh
        // parameter instead
        let mut flat = ParamStore::new();
        let w = flat.add("w", crate::tensor::Tensor::full(&[2, 2], 0.5));
        adam_step(&mut flat, &mut AdamState::default(), &cfg);
        assert_eq!(flat.get(w).value.values(), &[0.5; 4]);
    }

    #[test]
    fn adam_skips_buffers() {
        let mut store = ParamStore::new();
        let b = store.add_buffer("running", crate::tensor::Tensor::zeros(&[1, 1]));
        store.get_mut(b).grad[0] = 1.0;
        adam_step(&mut store, &mut AdamState::default(), &TrainConfig::default());
        assert_eq!(store.get(b).value.values(), &[0.0]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            learning_rate: 0.0,
            patience: 0,
            ..TrainConfig::default()
        };
        match bad.validate() {
            Err(Error::Config { fields }) => assert_eq!(fields, vec!["learning_rate", "patience"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn synthetic_gap_zero_has_no_g_tags() {
        let opts = SyntheticOptions::uniform_gaps(&[0]);
        let corpus = make_synthetic_corpus(4, 30, &opts).unwrap();
        assert_eq!(corpus.len(), 30);
        for s in &corpus.sentences {
            assert!(encode_bigo(s).iter().all(|&t| t != Tag::G));
            assert!((5..=12).contains(&s.len()));
            s.check_tree().unwrap();
        }
    }

    #[test]
    fn synthetic_gap_two_has_two_g_tags_per_expression() {
        let opts = SyntheticOptions::uniform_gaps(&[2]);
        let corpus = make_synthetic_corpus(5, 40, &opts).unwrap();
        let mut planted = 0;
        for s in &corpus.sentences {
            let gs = encode_bigo(s).iter().filter(|&&t| t == Tag::G).count();
            assert_eq!(gs, 2 * s.spans.len());
            planted += s.spans.len();
            for span in &s.spans {
                let heads = s.heads();
                assert_eq!(heads[span.positions[1] - 1], span.positions[0]);
            }
        }
        assert!(planted > 20);
    }

    #[test]
    fn synthetic_is_seed_repeatable_and_round_trips_as_cupt() {
        let opts = SyntheticOptions::default();
        let a = make_synthetic_corpus(9, 20, &opts).unwrap();
        let b = make_synthetic_corpus(9, 20, &opts).unwrap();
        assert_eq!(a.to_cupt(), b.to_cupt());
        assert_ne!(a.to_cupt(), make_synthetic_corpus(10, 20, &opts).unwrap().to_cupt());
        let parsed = parse_cupt(&a.to_cupt()).unwrap();
        assert_eq!(parsed.spans(), a.spans());
        assert_eq!(parsed.sentences[3].source_id, "synth-9-4");
        let vocab = build_vocab(&a, 1);
        assert!(vocab.len() <= 32);
    }

    #[test]
    fn synthetic_gap_proportions_are_exact() {
        let opts = SyntheticOptions {
            gap_weights: vec![0.2, 0.2, 0.2, 0.2, 0.1, 0.1],
            decoy_rate: 0.0,
        };
        let corpus = make_synthetic_corpus(2, 50, &opts).unwrap();
        let gaps: Vec<usize> = corpus.spans().iter().flatten().map(|s| s.gap_size()).collect();
        assert_eq!(gaps.len(), 50);
        assert_eq!(gaps.iter().filter(|&&g| g >= 2).count(), 30);
        assert_eq!(gaps.iter().filter(|&&g| g == 5).count(), 5);
    }

    #[test]
    fn decoys_share_the_surface_but_not_the_tree() {
        let opts = SyntheticOptions {
            decoy_rate: 1.0,
            ..SyntheticOptions::default()
        };
        let corpus = make_synthetic_corpus(1, 20, &opts).unwrap();
        for s in &corpus.sentences {
            assert!(s.spans.is_empty());
            let verb = s.tokens.iter().position(|t| SYNTH_VERBS.contains(&t.form.as_str())).unwrap() + 1;
            let particle = s.tokens.iter().position(|t| SYNTH_PARTICLES.contains(&t.form.as_str())).unwrap() + 1;
            assert!(particle > verb);
            assert_eq!(s.tokens[particle - 1].head, verb - 1);
        }
    }

    fn data(seed: u64, n: usize, kind: ModelKind) -> (Vec<Example>, Vocab) {
        let corpus = make_synthetic_corpus(seed, n, &SyntheticOptions::default()).unwrap();
        let vocab = build_vocab(&corpus, 1);
        (prepare(&corpus, &vocab, kind.uses_gcn()).unwrap(), vocab)
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let model = TaggerModel::new(small_config(ModelKind::Baseline, 4, 0)).unwrap();
        assert!(matches!(train(model, &[], &[], &TrainConfig::default()), Err(Error::Data(_))));
    }

    #[test]
    fn patience_one_stops_after_two_epochs_without_improvement() {
        let (train_data, vocab) = data(3, 6, ModelKind::Baseline);
        // dev has no gold expressions, so its MWE-based F is always 0
        let dev: Vec<Example> = train_data
            .iter()
            .map(|ex| Example {
                spans: Vec::new(),
                ..ex.clone()
            })
            .collect();
        let model = TaggerModel::new(small_config(ModelKind::Baseline, vocab.len(), 0)).unwrap();
        let cfg = TrainConfig {
            patience: 1,
            max_epochs: 20,
            ..TrainConfig::default()
        };
        let out = train(model, &train_data, &dev, &cfg).unwrap();
        assert_eq!(out.log.records.len(), 2);
        assert_eq!(out.best_epoch, 1);
    }

    #[test]
    fn empty_dev_returns_the_last_epoch() {
        let (train_data, vocab) = data(3, 6, ModelKind::GcnBased);
        let model = TaggerModel::new(small_config(ModelKind::GcnBased, vocab.len(), 0)).unwrap();
        let cfg = TrainConfig {
            max_epochs: 3,
            ..TrainConfig::default()
        };
        let out = train(model, &train_data, &[], &cfg).unwrap();
        assert_eq!(out.log.records.len(), 3);
        assert_eq!(out.best_epoch, 3);
        assert!(out.log.records.windows(2).all(|w| w[0].epoch < w[1].epoch));
    }

    #[test]
    fn initial_loss_is_near_uniform() {
        // random tags: any fixed predictor near uniform scores about ln 4
        let (mut train_data, vocab) = data(7, 30, ModelKind::HCombined);
        let mut rng = Rng::new(8);
        for ex in &mut train_data {
            ex.tags = ex.tags.iter().map(|_| Tag::from_index(rng.below(4)).unwrap()).collect();
        }
        let model = TaggerModel::new(ModelConfig {
            vocab_size: vocab.len(),
            seed: 1,
            ..ModelConfig::default()
        })
        .unwrap();
        let loss = mean_loss(&model, &train_data, Mode::Train).unwrap();
        assert!((loss - 4f64.ln()).abs() < 0.2, "{loss}");
    }

    #[test]
    fn selected_model_reproduces_logged_dev_f() {
        let (train_data, vocab) = data(11, 24, ModelKind::HCombined);
        let (dev_data, _) = {
            let corpus = make_synthetic_corpus(12, 12, &SyntheticOptions::default()).unwrap();
            (prepare(&corpus, &vocab, true).unwrap(), ())
        };
        let model = TaggerModel::new(small_config(ModelKind::HCombined, vocab.len(), 2)).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.01,
            max_epochs: 12,
            patience: 4,
            record_wall_time: false,
            ..TrainConfig::default()
        };
        let out = train(model, &train_data, &dev_data, &cfg).unwrap();
        let best = out.log.records.iter().map(|r| r.dev_mwe_f).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.log.records[out.best_epoch - 1].dev_mwe_f, best);

        let json = out.model.checkpoint_json(&vocab);
        let (reloaded, _) = TaggerModel::from_checkpoint_json(&json).unwrap();
        let (mwe, _) = evaluate(&reloaded, &dev_data).unwrap();
        assert_eq!(mwe.f1, best);
        assert!(out.log.to_csv().starts_with("epoch,loss,dev_token_f,dev_mwe_f,seconds\n1,"));
        assert!(out.log.records.iter().all(|r| r.seconds == 0.0));
    }

    #[test]
    fn training_halves_the_loss() {
        let (train_data, vocab) = data(13, 16, ModelKind::HCombined);
        let model = TaggerModel::new(small_config(ModelKind::HCombined, vocab.len(), 3)).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.01,
            max_epochs: 30,
            ..TrainConfig::default()
        };
        let out = train(model, &train_data, &[], &cfg).unwrap();
        let first = out.log.records[0].loss;
        let last = out.log.records.last().unwrap().loss;
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn repeated_runs_are_bitwise_identical() {
        let (train_data, vocab) = data(14, 10, ModelKind::HCombined);
        let run = || {
            let model = TaggerModel::new(small_config(ModelKind::HCombined, vocab.len(), 4)).unwrap();
            let cfg = TrainConfig {
                max_epochs: 3,
                record_wall_time: false,
                ..TrainConfig::default()
            };
            let out = train(model, &train_data, &train_data, &cfg).unwrap();
            (out.model.checkpoint_json(&vocab), out.log.to_csv())
        };
        assert_eq!(run(), run());
    }
}
