//! Run configuration: a TOML key-value file layered over a profile's
//! defaults, with `section.key=value` overrides applied last.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::corpus::{DEFAULT_MAX_LEN, DEFAULT_MIN_RESPONSE_LEN};
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::retrieval::RetrievalConfig;
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Published model sizes and optimizer settings.
    Paper,
    /// Same settings with smaller layers.
    Desk,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Config(format!(
                "unknown profile {other:?} (expected \"paper\" or \"desk\")"
            ))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub lowercase: bool,
    /// Pairs whose response has fewer tokens are dropped.
    pub min_response_len: usize,
    /// Utterances are truncated to this many tokens.
    pub max_len: usize,
    /// Maximum vocabulary size including reserved tokens.
    pub vocab_size: usize,
    /// Messages held out for validation and test.
    pub n_valid: usize,
    pub n_test: usize,
    /// Seed of the train/valid/test split; the run seed when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub hidden: usize,
    pub attention_dim: usize,
    pub mlp_hidden: usize,
    pub beam: usize,
    pub max_decode_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub retrieval: RetrievalConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let paper = RunConfig {
            profile,
            seed: 1,
            corpus: CorpusConfig {
                lowercase: true,
                min_response_len: DEFAULT_MIN_RESPONSE_LEN,
                max_len: DEFAULT_MAX_LEN,
                vocab_size: 30_000,
                n_valid: 1_000,
                n_test: 1_000,
                split_seed: None,
            },
            retrieval: RetrievalConfig::default(),
            model: ModelConfig {
                embedding_dim: 300,
                hidden: 500,
                attention_dim: 500,
                mlp_hidden: 500,
                beam: 5,
                max_decode_len: DEFAULT_MAX_LEN,
            },
            train: TrainConfig::default(),
        };
        match profile {
            Profile::Paper => paper,
            Profile::Desk => RunConfig {
                model: ModelConfig {
                    embedding_dim: 64,
                    hidden: 64,
                    attention_dim: 64,
                    mlp_hidden: 64,
                    ..paper.model
                },
                ..paper
            },
        }
    }

    /// Layers `text` (TOML) and then `overrides` (`a.b=value`) over the
    /// defaults of the selected profile. `profile` wins over the file's own
    /// `profile` key.
    pub fn parse(text: &str, profile: Option<&str>, overrides: &[String]) -> Result<Self> {
        let file: Table = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        let chosen = match (profile, file.get("profile")) {
            (Some(p), _) => p.parse::<Profile>()?,
            (None, Some(Value::String(p))) => p.parse::<Profile>()?,
            (None, Some(other)) => {
                return Err(Error::Config(format!("profile must be a string, got {other}")))
            }
            (None, None) => Profile::Desk,
        };
        let mut tree = Value::try_from(RunConfig::for_profile(chosen))
            .map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut tree, Value::Table(file), "")?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        if let Some(t) = tree.as_table_mut() {
            t.insert("profile".into(), Value::String(chosen.to_string()));
        }
        let cfg: RunConfig = tree.try_into().map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, profile: Option<&str>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) if !p.exists() => return Err(Error::MissingInput(p.to_path_buf())),
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::parse(&text, profile, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        let m = &self.model;
        let positive = [
            ("corpus.max_len", c.max_len),
            ("model.embedding_dim", m.embedding_dim),
            ("model.hidden", m.hidden),
            ("model.attention_dim", m.attention_dim),
            ("model.mlp_hidden", m.mlp_hidden),
            ("model.beam", m.beam),
            ("model.max_decode_len", m.max_decode_len),
            ("retrieval.k", self.retrieval.k),
            ("retrieval.n", self.retrieval.n),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.retrieval.lambda) {
            return Err(Error::Config("retrieval.lambda must lie in [0, 1]".into()));
        }
        self.train.validate()?;
        if self.profile == Profile::Paper {
            let reference = RunConfig::for_profile(Profile::Paper);
            let pins: [(&str, f64, f64); 10] = [
                ("corpus.vocab_size", c.vocab_size as f64, reference.corpus.vocab_size as f64),
                ("model.embedding_dim", m.embedding_dim as f64, 300.0),
                ("model.hidden", m.hidden as f64, 500.0),
                ("train.batch_size", self.train.batch_size as f64, 64.0),
                ("train.lr", self.train.lr, 1e-4),
                ("train.adv_lr", self.train.adv_lr.unwrap_or(self.train.lr), 1e-4),
                ("model.beam", m.beam as f64, 5.0),
                ("retrieval.k", self.retrieval.k as f64, 10.0),
                ("retrieval.n", self.retrieval.n as f64, 2.0),
                ("train.g_steps/d_steps", (self.train.g_steps * 100 + self.train.d_steps) as f64, 1020.0),
            ];
            for (name, got, want) in pins {
                if got != want {
                    return Err(Error::Config(format!(
                        "profile \"paper\" pins {name}; use profile \"desk\" to change it"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn generator_config(&self, vocab_size: usize) -> GeneratorConfig {
        GeneratorConfig {
            vocab_size,
            embedding_dim: self.model.embedding_dim,
            hidden: self.model.hidden,
            attention_dim: self.model.attention_dim,
            n_candidates: self.retrieval.n,
            beam: self.model.beam,
            max_decode_len: self.model.max_decode_len,
        }
    }

    pub fn discriminator_config(&self, vocab_size: usize, use_candidates: bool) -> DiscriminatorConfig {
        DiscriminatorConfig {
            vocab_size,
            embedding_dim: self.model.embedding_dim,
            hidden: self.model.hidden,
            mlp_hidden: self.model.mlp_hidden,
            n_candidates: self.retrieval.n,
            use_candidates,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

fn merge(base: &mut Value, over: Value, path: &str) -> Result<()> {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                let sub = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &sub)?,
                    None if is_optional(&sub) => {
                        b.insert(k, v);
                    }
                    None => return Err(Error::Config(format!("unknown config key {sub}"))),
                }
            }
            Ok(())
        }
        (Value::Table(_), other) => Err(Error::Config(format!(
            "{path} is a section, got {}",
            other.type_str()
        ))),
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Keys that may be absent from the serialized defaults.
fn is_optional(path: &str) -> bool {
    matches!(
        path,
        "train.target_perplexity" | "train.adv_lr" | "corpus.split_seed"
    )
}

/// Applies `a.b.c=value`. The value is read as a TOML literal, falling back
/// to a bare string.
pub fn apply_override(tree: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let mut nested = value;
    for part in key.split('.').rev() {
        if part.is_empty() {
            return Err(Error::Config(format!("bad override key {key:?}")));
        }
        let mut t = Table::new();
        t.insert(part.to_string(), nested);
        nested = Value::Table(t);
    }
    merge(tree, nested, "")
}
