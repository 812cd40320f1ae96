//! Run configuration: defaults, then a TOML file, then flag overrides.
//!
//! Resolution works on a JSON tree so every key an operator writes is
//! checked against the defaults and errors carry the dotted key path.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::beam::GenerationParams;
use crate::composer::SelectionConfig;
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::text::SynthConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Directory every command reads from and writes to by default.
    pub out: PathBuf,
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub encoder: Option<PathBuf>,
    pub decoder: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            out: PathBuf::from("run"),
            train: None,
            valid: None,
            test: None,
            vocab: None,
            encoder: None,
            decoder: None,
        }
    }
}

impl Paths {
    fn pick(&self, set: &Option<PathBuf>, file: &str) -> PathBuf {
        set.clone().unwrap_or_else(|| self.out.join(file))
    }

    pub fn train(&self) -> PathBuf {
        self.pick(&self.train, "train.jsonl")
    }

    pub fn valid(&self) -> PathBuf {
        self.pick(&self.valid, "valid.jsonl")
    }

    pub fn test(&self) -> PathBuf {
        self.pick(&self.test, "test.jsonl")
    }

    pub fn vocab(&self) -> PathBuf {
        self.pick(&self.vocab, "vocab.txt")
    }

    pub fn encoder(&self) -> PathBuf {
        self.pick(&self.encoder, "encoder.ckpt")
    }

    pub fn decoder(&self) -> PathBuf {
        self.pick(&self.decoder, "decoder.ckpt")
    }
}

/// Corpus split sizes beyond `synth.n_dialogues` (the training split).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub valid_dialogues: usize,
    pub test_dialogues: usize,
    pub min_freq: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            valid_dialogues: 100,
            test_dialogues: 100,
            min_freq: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub corpus: CorpusConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub selection: SelectionConfig,
    pub train_encoder: TrainConfig,
    pub train_decoder: TrainConfig,
    pub generation: GenerationParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            paths: Paths::default(),
            synth: SynthConfig::default(),
            corpus: CorpusConfig::default(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            selection: SelectionConfig::default(),
            train_encoder: TrainConfig::encoder(),
            train_decoder: TrainConfig::decoder(),
            generation: GenerationParams::default(),
        }
    }
}

/// Seeds that follow the top-level `seed` unless set explicitly.
const DERIVED_SEEDS: [&str; 3] = ["train_encoder.seed", "train_decoder.seed", "generation.seed"];

impl RunConfig {
    /// Defaults < `file` < `overrides` (dotted key, value).
    pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig> {
        let text = match file {
            Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::resolve_str(text.as_deref(), overrides)
    }

    pub fn resolve_str(file: Option<&str>, overrides: &[(String, Value)]) -> Result<RunConfig> {
        let mut tree = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        let mut explicit: Vec<String> = Vec::new();
        if let Some(text) = file {
            let parsed: toml::Table = toml::from_str(text).map_err(|e| Error::config("<file>", e.to_string()))?;
            let parsed = serde_json::to_value(parsed).map_err(|e| Error::config("<file>", e.to_string()))?;
            merge(&mut tree, &parsed, "", &mut explicit)?;
        }
        for (key, v) in overrides {
            let mut nested = v.clone();
            for part in key.rsplit('.') {
                nested = Value::Object([(part.to_string(), nested)].into_iter().collect());
            }
            merge(&mut tree, &nested, "", &mut explicit)?;
        }
        let seed = tree["seed"].clone();
        for key in DERIVED_SEEDS {
            if !explicit.iter().any(|k| k == key) {
                let (section, field) = key.split_once('.').expect("dotted");
                tree[section][field] = seed.clone();
            }
        }
        let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| Error::config("<config>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks everything not tied to a vocabulary.
    pub fn validate(&self) -> Result<()> {
        self.selection.validate()?;
        self.generation.validate()?;
        self.train_encoder.validate("train_encoder")?;
        self.train_decoder.validate("train_decoder")?;
        let mut enc = self.encoder.clone();
        enc.vocab_size = enc.vocab_size.max(1);
        enc.validate()?;
        let mut dec = self.decoder.clone();
        dec.vocab_size = dec.vocab_size.max(1);
        dec.validate()?;
        if self.synth.min_turns < 5 {
            return Err(Error::config("synth.min_turns", "must be at least 5"));
        }
        if self.synth.max_turns < self.synth.min_turns {
            return Err(Error::config("synth.max_turns", "must be ≥ min_turns"));
        }
        if self.corpus.min_freq == 0 {
            return Err(Error::config("corpus.min_freq", "must be at least 1"));
        }
        Ok(())
    }

    /// Sorted-key JSON echo for checkpoints, logs and reports.
    pub fn echo(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(n) if n.is_f64() => "a number",
        Value::Number(_) => "an integer",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "a table",
    }
}

/// Overlays `src` on `dst`, refusing unknown keys and type changes.
fn merge(dst: &mut Value, src: &Value, prefix: &str, explicit: &mut Vec<String>) -> Result<()> {
    let Value::Object(src) = src else {
        return Err(Error::config(prefix, "expected a table"));
    };
    for (k, v) in src {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        let Some(slot) = dst.get_mut(k) else {
            return Err(Error::config(path, "unknown key"));
        };
        match (&*slot, v) {
            (Value::Object(_), Value::Object(_)) => merge(slot, v, &path, explicit)?,
            (Value::Object(_), other) => {
                return Err(Error::config(path, format!("expected a table, found {}", kind(other))));
            }
            // optional paths
            (Value::Null, Value::String(_)) => *slot = v.clone(),
            (Value::String(_), Value::String(_)) | (Value::Bool(_), Value::Bool(_)) => *slot = v.clone(),
            (Value::Number(a), Value::Number(b)) => {
                let ok = if a.is_f64() { true } else { b.is_u64() };
                if !ok {
                    return Err(Error::config(path, format!("expected a non-negative integer, found {b}")));
                }
                *slot = v.clone();
            }
            (want, got) => {
                return Err(Error::config(
                    path,
                    format!("expected {}, found {}", kind(want), kind(got)),
                ));
            }
        }
        explicit.push(path);
    }
    Ok(())
}

/// Parses a flag value into JSON: integer, float, bool, else string.
pub fn flag_value(raw: &str) -> Value {
    if let Ok(u) = raw.parse::<u64>() {
        return Value::from(u);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return Value::from(f);
    }
    match raw {
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        _ => Value::String(raw.to_string()),
    }
}
