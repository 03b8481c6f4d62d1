//! The four tagger architectures and their checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{AdjacencySet, Tag, Vocab};
use crate::error::{Error, Result};
use crate::layers::{BiLstmLayer, CnnFrontEnd, GcnLayer, HighwayBlock, MultiHeadAttention};
use crate::tensor::{
    grad_check, GradCheckOptions, GradCheckReport, Graph, Mode, ParamId, ParamStore, Rng, StoredTensor, Tensor, Var,
};

pub const NUM_TAGS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    /// CNN front-end and BiLSTM.
    Baseline,
    /// GCN and BiLSTM.
    GcnBased,
    /// CNN front-end, self-attention and BiLSTM.
    AttBased,
    /// GCN in parallel with CNN + attention, joined by a highway block.
    HCombined,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Baseline, ModelKind::GcnBased, ModelKind::AttBased, ModelKind::HCombined];

    pub fn uses_gcn(self) -> bool {
        matches!(self, ModelKind::GcnBased | ModelKind::HCombined)
    }

    pub fn uses_cnn(self) -> bool {
        !matches!(self, ModelKind::GcnBased)
    }

    pub fn uses_attention(self) -> bool {
        matches!(self, ModelKind::AttBased | ModelKind::HCombined)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ModelKind::Baseline => "Baseline",
            ModelKind::GcnBased => "GcnBased",
            ModelKind::AttBased => "AttBased",
            ModelKind::HCombined => "HCombined",
        };
        f.write_str(name)
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        match key.as_str() {
            "baseline" => Ok(ModelKind::Baseline),
            "gcnbased" | "gcn" => Ok(ModelKind::GcnBased),
            "attbased" | "att" => Ok(ModelKind::AttBased),
            "hcombined" | "combined" => Ok(ModelKind::HCombined),
            _ => Err(format!("unknown model kind `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Including the padding and unknown entries.
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub gcn_dim: usize,
    /// Filters of the two-layer width-3 channel.
    pub filters_a: usize,
    /// Filters of the width-2 channel.
    pub filters_b: usize,
    pub heads: usize,
    pub highway_depth: usize,
    pub transform_bias: f64,
    pub lstm_dim: usize,
    pub seed: u64,
    /// Text file of `form v_1 ... v_d` lines copied into the embedding table.
    pub pretrained: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::HCombined,
            vocab_size: 2,
            embed_dim: 50,
            gcn_dim: 50,
            filters_a: 64,
            filters_b: 64,
            heads: 4,
            highway_depth: 2,
            transform_bias: -1.0,
            lstm_dim: 50,
            seed: 0,
            pretrained: None,
        }
    }
}

impl ModelConfig {
    /// Width of the CNN front-end output, which is also the attention width.
    pub fn cnn_width(&self) -> usize {
        self.filters_a + self.filters_b
    }

    /// Width of the features handed to the BiLSTM.
    pub fn feature_width(&self) -> usize {
        match self.kind {
            ModelKind::Baseline | ModelKind::AttBased => self.cnn_width(),
            ModelKind::GcnBased => self.gcn_dim,
            ModelKind::HCombined => self.gcn_dim + self.cnn_width(),
        }
    }

    /// Names of every field that makes the configuration unusable.
    pub fn invalid_fields(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if self.vocab_size < 2 {
            bad.push("vocab_size");
        }
        if self.embed_dim == 0 {
            bad.push("embed_dim");
        }
        if self.lstm_dim == 0 {
            bad.push("lstm_dim");
        }
        if self.kind.uses_gcn() && self.gcn_dim == 0 {
            bad.push("gcn_dim");
        }
        if self.kind.uses_cnn() {
            if self.filters_a == 0 {
                bad.push("filters_a");
            }
            if self.filters_b == 0 {
                bad.push("filters_b");
            }
        }
        if self.kind.uses_attention() && (self.heads == 0 || self.cnn_width() % self.heads != 0) {
            bad.push("heads");
        }
        if self.kind == ModelKind::HCombined && !self.transform_bias.is_finite() {
            bad.push("transform_bias");
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

    /// Closed-form number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let (v, u) = (self.embed_dim, self.lstm_dim);
        let n = self.cnn_width();
        let mut total = self.vocab_size * v;
        if self.kind.uses_gcn() {
            total += GcnLayer::param_count(v, self.gcn_dim);
        }
        if self.kind.uses_cnn() {
            total += CnnFrontEnd::param_count(v, self.filters_a, self.filters_b);
        }
        if self.kind.uses_attention() {
            total += MultiHeadAttention::param_count(n);
        }
        if self.kind == ModelKind::HCombined {
            total += HighwayBlock::param_count(self.feature_width(), self.highway_depth);
        }
        total + BiLstmLayer::param_count(self.feature_width(), u) + 2 * u * NUM_TAGS + NUM_TAGS
    }
}

#[derive(Debug, Clone)]
pub struct TaggerModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    embedding: ParamId,
    gcn: Option<GcnLayer>,
    cnn: Option<CnnFrontEnd>,
    attention: Option<MultiHeadAttention>,
    highway: Option<HighwayBlock>,
    lstm: BiLstmLayer,
    out_w: ParamId,
    out_b: ParamId,
}

impl TaggerModel {
    /// Parameters are drawn from a generator seeded with `config.seed`, in a
    /// fixed order. The pretrained file, if any, is not read here.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let mut store = ParamStore::new();
        let v = config.embed_dim;
        let embedding = store.add("embedding", Tensor::glorot(&[config.vocab_size, v], 1, v, &mut rng));
        let kind = config.kind;
        let gcn = kind
            .uses_gcn()
            .then(|| GcnLayer::new(&mut store, &mut rng, "gcn", v, config.gcn_dim));
        let cnn = kind
            .uses_cnn()
            .then(|| CnnFrontEnd::new(&mut store, &mut rng, "cnn", v, config.filters_a, config.filters_b));
        let attention = kind
            .uses_attention()
            .then(|| MultiHeadAttention::new(&mut store, &mut rng, "attn", config.cnn_width(), config.heads));
        let highway = (kind == ModelKind::HCombined).then(|| {
            HighwayBlock::new(
                &mut store,
                &mut rng,
                "highway",
                config.feature_width(),
                config.highway_depth,
                config.transform_bias,
            )
        });
        let u = config.lstm_dim;
        let lstm = BiLstmLayer::new(&mut store, &mut rng, "lstm", config.feature_width(), u);
        let out_w = store.add("output.w", Tensor::glorot(&[2 * u, NUM_TAGS], 2 * u, NUM_TAGS, &mut rng));
        let out_b = store.add("output.bias", Tensor::zeros(&[1, NUM_TAGS]));
        Ok(TaggerModel {
            config,
            store,
            embedding,
            gcn,
            cnn,
            attention,
            highway,
            lstm,
            out_w,
            out_b,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn needs_adjacency(&self) -> bool {
        self.gcn.is_some()
    }

    /// Copy vectors for known forms from a whitespace-separated text file.
    /// A leading `count dim` header line is skipped. Returns how many rows
    /// were filled.
    pub fn load_pretrained(&mut self, vocab: &Vocab, path: &Path) -> Result<usize> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let dim = self.config.embed_dim;
        let table = self.store.get_mut(self.embedding).value.values_mut();
        let mut filled = 0;
        for (n, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(form) = parts.next() else { continue };
            let values: Vec<&str> = parts.collect();
            if n == 0 && values.len() == 1 {
                continue;
            }
            if values.len() != dim {
                return Err(Error::Data(format!(
                    "{}:{}: expected {dim} values, found {}",
                    path.display(),
                    n + 1,
                    values.len()
                )));
            }
            let Some(row) = vocab.get(form) else { continue };
            for (slot, raw) in table[row * dim..(row + 1) * dim].iter_mut().zip(values) {
                *slot = raw
                    .parse()
                    .map_err(|_| Error::Data(format!("{}:{}: bad number `{raw}`", path.display(), n + 1)))?;
            }
            filled += 1;
        }
        Ok(filled)
    }

    /// Branch output right before the BiLSTM, `s x feature_width`.
    pub fn encode_features(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        adj: Option<&AdjacencySet>,
        mask: &[bool],
        mode: Mode,
    ) -> Result<Var> {
        Ok(self.features_batch(g, &[(tokens, adj, mask)], mode)?.remove(0))
    }

    /// Features of several sentences built on one graph. Only the CNN
    /// normalisation couples them: in training mode its statistics cover
    /// every valid token of the batch.
    fn features_batch(
        &self,
        g: &mut Graph,
        batch: &[(&[usize], Option<&AdjacencySet>, &[bool])],
        mode: Mode,
    ) -> Result<Vec<Var>> {
        let mut embedded = Vec::with_capacity(batch.len());
        let table = g.param(&self.store, self.embedding);
        for &(tokens, _, mask) in batch {
            let s = tokens.len();
            if mask.len() != s {
                return Err(Error::dim("model mask", &[s], &[mask.len()]));
            }
            if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
                return Err(Error::Data(format!(
                    "token index {bad} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            embedded.push(g.gather_rows(table, tokens)?);
        }
        let graph_branch = match &self.gcn {
            Some(gcn) => {
                let mut out = Vec::with_capacity(batch.len());
                for (&x, &(_, adj, _)) in embedded.iter().zip(batch) {
                    let adj = adj.ok_or_else(|| {
                        Error::Data(format!("{} model needs the dependency adjacency", self.config.kind))
                    })?;
                    out.push(gcn.forward(g, &self.store, x, adj)?);
                }
                Some(out)
            }
            None => None,
        };
        let seq_branch = match &self.cnn {
            Some(cnn) => {
                let masks: Vec<&[bool]> = batch.iter().map(|b| b.2).collect();
                let conv = cnn.forward_batch(g, &self.store, &embedded, &masks, mode)?;
                Some(match &self.attention {
                    Some(att) => conv
                        .into_iter()
                        .zip(&masks)
                        .map(|(c, m)| att.forward(g, &self.store, c, m))
                        .collect::<Result<Vec<_>>>()?,
                    None => conv,
                })
            }
            None => None,
        };
        match (graph_branch, seq_branch) {
            (Some(a), Some(b)) => a
                .into_iter()
                .zip(b)
                .map(|(a, b)| {
                    let joined = g.concat_cols(&[a, b])?;
                    match &self.highway {
                        Some(hw) => hw.forward(g, &self.store, joined),
                        None => Ok(joined),
                    }
                })
                .collect(),
            (Some(a), None) => Ok(a),
            (None, Some(b)) => Ok(b),
            (None, None) => unreachable!("every kind has at least one branch"),
        }
    }

    fn head(&self, g: &mut Graph, features: Var, mask: &[bool]) -> Result<Var> {
        let h = self.lstm.forward(g, &self.store, features, mask)?;
        let w = g.param(&self.store, self.out_w);
        let b = g.param(&self.store, self.out_b);
        let logits = g.matmul(h, w)?;
        g.add(logits, b)
    }

    /// Per-token logits over `B, I, G, O`, `s x 4`.
    pub fn forward(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        adj: Option<&AdjacencySet>,
        mask: &[bool],
        mode: Mode,
    ) -> Result<Var> {
        let features = self.encode_features(g, tokens, adj, mask, mode)?;
        self.head(g, features, mask)
    }

    /// Logits for each sentence of a batch (no padding).
    pub fn forward_batch(&self, g: &mut Graph, batch: &[(&[usize], Option<&AdjacencySet>)], mode: Mode) -> Result<Vec<Var>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let masks: Vec<Vec<bool>> = batch.iter().map(|b| vec![true; b.0.len()]).collect();
        let inputs: Vec<(&[usize], Option<&AdjacencySet>, &[bool])> =
            batch.iter().zip(&masks).map(|(&(t, a), m)| (t, a, m.as_slice())).collect();
        let features = self.features_batch(g, &inputs, mode)?;
        features
            .into_iter()
            .zip(&masks)
            .map(|(f, m)| self.head(g, f, m))
            .collect()
    }

    /// Masked mean cross-entropy of one sentence.
    pub fn loss(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        adj: Option<&AdjacencySet>,
        gold: &[Tag],
        mode: Mode,
    ) -> Result<Var> {
        let (loss, _) = self.batch_loss(g, &[(tokens, adj, gold)], mode)?;
        Ok(loss)
    }

    /// Mean over sentences of each sentence's mean token cross-entropy,
    /// together with the per-sentence values.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        batch: &[(&[usize], Option<&AdjacencySet>, &[Tag])],
        mode: Mode,
    ) -> Result<(Var, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let inputs: Vec<(&[usize], Option<&AdjacencySet>)> = batch.iter().map(|b| (b.0, b.1)).collect();
        let logits = self.forward_batch(g, &inputs, mode)?;
        let mut losses = Vec::with_capacity(batch.len());
        let mut each = Vec::with_capacity(batch.len());
        for (&y, &(tokens, _, gold)) in logits.iter().zip(batch) {
            if gold.len() != tokens.len() {
                return Err(Error::dim("gold tags", &[tokens.len()], &[gold.len()]));
            }
            let gold: Vec<usize> = gold.iter().map(|t| t.index()).collect();
            let l = g.cross_entropy_masked(y, &gold, &vec![true; tokens.len()])?;
            each.push(g.scalar(l));
            losses.push(l);
        }
        let stacked = g.concat_rows(&losses)?;
        Ok((g.mean(stacked), each))
    }

    /// Inference-mode argmax tags.
    pub fn predict_tags(&self, tokens: &[usize], adj: Option<&AdjacencySet>) -> Result<Vec<Tag>> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let mask = vec![true; tokens.len()];
        let logits = self.forward(&mut g, tokens, adj, &mask, Mode::Infer)?;
        Ok(argmax_tags(g.value(logits)))
    }

    pub fn save_checkpoint(&self, vocab: &Vocab, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.checkpoint_json(vocab).as_bytes())
    }

    pub fn checkpoint_json(&self, vocab: &Vocab) -> String {
        let file = CheckpointFile {
            header: CheckpointHeader {
                config: self.config.clone(),
                vocab: vocab.clone(),
            },
            parameters: self.store.to_map(),
        };
        serde_json::to_string(&file).expect("checkpoint serialises")
    }

    pub fn from_checkpoint_json(text: &str) -> Result<(TaggerModel, Vocab)> {
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let CheckpointHeader { config, vocab } = file.header;
        if vocab.len() != config.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} entries but the config expects {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let mut model = TaggerModel::new(config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        model.store.load_map(&file.parameters)?;
        Ok((model, vocab))
    }

    pub fn load_checkpoint(path: &Path) -> Result<(TaggerModel, Vocab)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_checkpoint_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    vocab: Vocab,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    header: CheckpointHeader,
    parameters: BTreeMap<String, StoredTensor>,
}

/// Row-wise argmax over `s x 4` logits; ties go to the earlier tag.
pub fn argmax_tags(logits: &[f64]) -> Vec<Tag> {
    logits
        .chunks(NUM_TAGS)
        .map(|row| {
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            Tag::from_index(best).expect("four classes")
        })
        .collect()
}

/// A small HCombined configuration for finite-difference checks.
pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        kind: ModelKind::HCombined,
        vocab_size: 6,
        embed_dim: 4,
        gcn_dim: 3,
        filters_a: 3,
        filters_b: 3,
        heads: 2,
        highway_depth: 2,
        transform_bias: -1.0,
        lstm_dim: 3,
        seed,
        pretrained: None,
    }
}

/// Names accepted by [`component_grad_check`].
pub const CHECK_TARGETS: [&str; 6] = ["gcn", "attention", "highway", "lstm", "cnn", "full"];

/// Finite-difference check of one layer (on random small shapes) or of the
/// whole HCombined model on a random 4-token sentence.
pub fn component_grad_check(target: &str, seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let s = 4;
    let input = |store: &mut ParamStore, rng: &mut Rng, cols: usize| {
        let values = (0..s * cols).map(|_| rng.uniform(-1.0, 1.0)).collect();
        store.add("input", Tensor::new(vec![s, cols], values).expect("shape"))
    };
    let heads = random_heads(&mut rng, s);
    let adj = AdjacencySet::from_heads(&heads).map_err(Error::Data)?;
    let weights: Vec<f64> = (0..s * 8).map(|_| rng.uniform(-1.0, 1.0)).collect();
    // weighted sum of the output so every entry contributes a distinct gradient
    let project = move |g: &mut Graph, y: Var| -> Result<Var> {
        let (r, c) = g.shape(y);
        let w = g.constant(r, c, weights[..r * c].to_vec())?;
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    };
    let mask = vec![true; s];
    match target {
        "gcn" => {
            let layer = GcnLayer::new(&mut store, &mut rng, "gcn", 3, 4);
            let x = input(&mut store, &mut rng, 3);
            let b: Vec<f64> = (0..4).map(|_| rng.uniform(-0.5, 0.5)).collect();
            store.get_mut(layer.bias).value.values_mut().copy_from_slice(&b);
            grad_check(&mut store, &[], opts, |g, st| {
                let x = g.param(st, x);
                let y = layer.forward(g, st, x, &adj)?;
                project(g, y)
            })
        }
        "attention" => {
            let layer = MultiHeadAttention::new(&mut store, &mut rng, "attn", 4, 2);
            let x = input(&mut store, &mut rng, 4);
            grad_check(&mut store, &[], opts, |g, st| {
                let x = g.param(st, x);
                let y = layer.forward(g, st, x, &mask)?;
                project(g, y)
            })
        }
        "highway" => {
            let layer = HighwayBlock::new(&mut store, &mut rng, "highway", 4, 2, -1.0);
            let x = input(&mut store, &mut rng, 4);
            grad_check(&mut store, &[], opts, |g, st| {
                let x = g.param(st, x);
                let y = layer.forward(g, st, x)?;
                project(g, y)
            })
        }
        "lstm" => {
            let layer = BiLstmLayer::new(&mut store, &mut rng, "lstm", 3, 3);
            let x = input(&mut store, &mut rng, 3);
            grad_check(&mut store, &[], opts, |g, st| {
                let x = g.param(st, x);
                let y = layer.forward(g, st, x, &mask)?;
                project(g, y)
            })
        }
        "cnn" => {
            let layer = CnnFrontEnd::new(&mut store, &mut rng, "cnn", 3, 2, 2);
            let x = input(&mut store, &mut rng, 3);
            grad_check(&mut store, &[], opts, |g, st| {
                let x = g.param(st, x);
                let y = layer.forward(g, st, x, &mask, Mode::Train)?;
                project(g, y)
            })
        }
        "full" => {
            let mut model = TaggerModel::new(tiny_config(rng.next_u64()))?;
            let tokens: Vec<usize> = (0..s).map(|_| rng.range(2, 5)).collect();
            let gold: Vec<Tag> = (0..s).map(|_| Tag::from_index(rng.below(NUM_TAGS)).expect("tag")).collect();
            let mut store = std::mem::take(&mut model.store);
            let report = grad_check(&mut store, &[], opts, |g, st| {
                let view = TaggerModel {
                    store: st.clone(),
                    ..model.clone()
                };
                view.loss(g, &tokens, Some(&adj), &gold, Mode::Train)
            });
            model.store = store;
            report
        }
        other => Err(Error::Config {
            fields: vec![format!("layer `{other}` (expected one of {})", CHECK_TARGETS.join(", "))],
        }),
    }
}

/// Heads of a random dependency tree over `n` tokens (token 1 is the root
/// after shuffling positions).
pub fn random_heads(rng: &mut Rng, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (1..=n).collect();
    rng.shuffle(&mut order);
    let mut heads = vec![0; n];
    for k in 1..n {
        heads[order[k] - 1] = order[rng.below(k)];
    }
    heads
}
