use std::path::{Path, PathBuf};

use gappy::models::ModelConfig;
use gappy::training::TrainConfig;
use gappy::Error;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SEED_ENV: &str = "GAPPY_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Per-epoch training log (CSV).
    pub log: Option<PathBuf>,
}

/// Everything a training run needs. `model.vocab_size` is ignored: it is
/// taken from the vocabulary built over the training corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds both parameter initialisation and shuffling unless the
    /// sections set their own.
    pub seed: Option<u64>,
    pub vocab_min_count: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            vocab_min_count: 1,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            paths: Paths::default(),
        }
    }
}

/// Split `--key value` / `--key=value` pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, Error> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(key) = arg.strip_prefix("--") else {
            return Err(config_error(format!("unexpected argument `{arg}`")));
        };
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
        } else {
            let value = it
                .next()
                .ok_or_else(|| config_error(format!("missing value for --{key}")))?;
            out.push((key.to_string(), value.clone()));
        }
    }
    Ok(out)
}

/// Scalars are read as JSON when possible (`3`, `true`, `null`, `"x"`),
/// anything else as a plain string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str::<Value>(raw)
        .ok()
        .filter(|v| !v.is_object() && !v.is_array())
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), Error> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(config_error(format!("bad key `{key}`")));
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| config_error(format!("`{}` is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

fn config_error(field: String) -> Error {
    Error::Config { fields: vec![field] }
}

/// Load the JSON file (if any), apply dotted-key overrides, then resolve
/// the seed: an explicit `seed` wins, then `GAPPY_SEED`, then 0.
pub fn load(path: Option<&Path>, overrides: &[(String, String)], env_seed: Option<&str>) -> Result<RunConfig, Error> {
    let mut root = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| config_error(format!("config file {}: {e}", p.display())))?;
            serde_json::from_str::<Value>(&text)
                .map_err(|e| config_error(format!("config file {}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    if !root.is_object() {
        return Err(config_error("config root must be a JSON object".into()));
    }
    for (key, raw) in overrides {
        set_path(&mut root, key, parse_value(raw))?;
    }
    let explicit = |section: &str| root.get(section).and_then(|s| s.get("seed")).is_some();
    let (model_seed_set, train_seed_set) = (explicit("model"), explicit("train"));
    let mut cfg: RunConfig = serde_json::from_value(root).map_err(|e| config_error(e.to_string()))?;
    let seed = match (cfg.seed, env_seed) {
        (Some(s), _) => s,
        (None, Some(raw)) => raw
            .trim()
            .parse()
            .map_err(|_| config_error(format!("{SEED_ENV}=`{raw}` is not an unsigned integer")))?,
        (None, None) => 0,
    };
    cfg.seed = Some(seed);
    if !model_seed_set {
        cfg.model.seed = seed;
    }
    if !train_seed_set {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

impl RunConfig {
    /// Problems that make a training run impossible, as field names.
    pub fn invalid_fields_for_training(&self) -> Vec<String> {
        let mut bad = Vec::new();
        match &self.paths.train {
            None => bad.push("paths.train (missing)".to_string()),
            Some(p) if !p.is_file() => bad.push(format!("paths.train ({} not found)", p.display())),
            Some(_) => {}
        }
        for (name, p) in [("paths.dev", &self.paths.dev), ("paths.test", &self.paths.test)] {
            if let Some(p) = p {
                if !p.is_file() {
                    bad.push(format!("{name} ({} not found)", p.display()));
                }
            }
        }
        if self.paths.checkpoint.is_none() {
            bad.push("paths.checkpoint (missing)".to_string());
        }
        if self.vocab_min_count == 0 {
            bad.push("vocab_min_count".to_string());
        }
        // vocab_size is filled in later, so only the other model fields count
        let model = ModelConfig {
            vocab_size: self.model.vocab_size.max(2),
            ..self.model.clone()
        };
        bad.extend(model.invalid_fields().into_iter().map(|f| format!("model.{f}")));
        bad.extend(self.train.invalid_fields().into_iter().map(|f| format!("train.{f}")));
        bad
    }
}
