//! TOML run configuration and ablation overrides.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::BenchmarkSpec;
use crate::discriminator::Discriminator;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::inference::{InferenceOptions, UnionVariant, UnseenFallback};
use crate::pretrain::PretrainConfig;
use crate::prompt::BlockMode;
use crate::prototype::{Granularity, PrototypeKind};
use crate::trainer::TrainConfig;
use crate::util::{hash_json, rng_stream, Provenance};

/// The configuration shipped as `configs/default.toml`.
pub const DEFAULT_CONFIG: &str = include_str!("../../../configs/default.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: PathBuf,
    pub pools: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self::under(Path::new("out"))
    }
}

impl Paths {
    pub fn under(root: &Path) -> Self {
        Self {
            data: root.join("data"),
            pools: root.join("pools"),
            reports: root.join("reports"),
        }
    }

    pub fn encoder(&self) -> PathBuf {
        self.pools.join("encoder.bin")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.pools.join("stages")
    }
}

/// Task order: `"alphabetical"`, `"random"`, or an explicit list of domain
/// names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskOrder {
    Named(String),
    Custom(Vec<String>),
}

impl Default for TaskOrder {
    fn default() -> Self {
        Self::Named("alphabetical".into())
    }
}

impl TaskOrder {
    /// Domain indices into `names`.
    pub fn resolve(&self, names: &[String], seed: u64) -> Result<Vec<usize>> {
        let mut idx: Vec<usize> = (0..names.len()).collect();
        match self {
            Self::Named(s) if s == "alphabetical" => idx.sort_by(|&a, &b| names[a].cmp(&names[b])),
            Self::Named(s) if s == "random" => idx.shuffle(&mut rng_stream(seed, "task-order")),
            Self::Named(s) => {
                return Err(Error::Config(format!(
                    "order: unknown value {s:?} (alphabetical, random, or a list of domain names)"
                )))
            }
            Self::Custom(list) => {
                idx = list
                    .iter()
                    .map(|n| {
                        names
                            .iter()
                            .position(|x| x.eq_ignore_ascii_case(n))
                            .ok_or_else(|| Error::Config(format!("order: unknown domain {n:?}")))
                    })
                    .collect::<Result<_>>()?;
                for (i, d) in idx.iter().enumerate() {
                    if idx[..i].contains(d) {
                        return Err(Error::Config(format!("order: domain {:?} listed twice", names[*d])));
                    }
                }
                if idx.is_empty() {
                    return Err(Error::Config("order: empty task list".into()));
                }
            }
        }
        Ok(idx)
    }
}

/// Ablation switches. Unset entries keep the values of the other sections.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct Ablation {
    /// Sets both the discriminator and the prompt prototype type.
    pub prototype_type: Option<PrototypeKind>,
    pub discriminator_prototype: Option<PrototypeKind>,
    pub prompt_prototype: Option<PrototypeKind>,
    pub prototype_granularity: Option<Granularity>,
    pub replace_depth: Option<usize>,
    pub prompt_length: Option<usize>,
    pub block_mode: Option<BlockMode>,
    pub union_baseline: Option<UnionVariant>,
    pub unseen_fallback: Option<UnseenFallback>,
}

fn parse_value<T: FromStr<Err = Error>>(key: &str, value: &str) -> Result<Option<T>> {
    value
        .parse()
        .map(Some)
        .map_err(|e: Error| Error::Config(format!("ablation {key}: {e}")))
}

impl Ablation {
    /// Applies one `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("ablation {assignment:?} is not key=value")))?;
        let (key, value) = (key.trim(), value.trim());
        let count = |v: &str| {
            v.parse::<usize>()
                .map(Some)
                .map_err(|_| Error::Config(format!("ablation {key}: {v:?} is not a non-negative integer")))
        };
        match key {
            "prototype-type" => self.prototype_type = parse_value(key, value)?,
            "discriminator-prototype" => self.discriminator_prototype = parse_value(key, value)?,
            "prompt-prototype" => self.prompt_prototype = parse_value(key, value)?,
            "prototype-granularity" => self.prototype_granularity = parse_value(key, value)?,
            "replace-depth" => self.replace_depth = count(value)?,
            "prompt-length" => self.prompt_length = count(value)?,
            "block-mode" => self.block_mode = parse_value(key, value)?,
            "union-baseline" => self.union_baseline = parse_value(key, value)?,
            "unseen-fallback" => self.unseen_fallback = parse_value(key, value)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown ablation key {key:?} (prototype-type, discriminator-prototype, prompt-prototype, \
                     prototype-granularity, replace-depth, prompt-length, block-mode, union-baseline, unseen-fallback)"
                )))
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds encoder initialization, pretraining, prompt training and random
    /// task orders. Data generation uses `benchmark.seed`.
    pub seed: u64,
    pub order: TaskOrder,
    pub paths: Paths,
    pub benchmark: BenchmarkSpec,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub inference: InferenceOptions,
    pub ablation: Ablation,
}


impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        toml::from_str::<Self>(text)
            .map_err(|e| Error::Config(format!("{origin}: {e}")))
            .and_then(|c| c.resolved())
    }

    pub fn shipped_default() -> Result<Self> {
        Self::parse(DEFAULT_CONFIG, "default")
    }

    /// `"default"` selects the shipped config, anything else is a file path.
    pub fn load(source: &str) -> Result<Self> {
        if source == "default" {
            return Self::shipped_default();
        }
        let path = Path::new(source);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, source)
    }

    pub fn with_ablations<S: AsRef<str>>(mut self, assignments: &[S]) -> Result<Self> {
        for a in assignments {
            self.ablation.set(a.as_ref())?;
        }
        self.resolved()
    }

    /// Folds the ablation table and the run seed into the section configs and
    /// validates the result.
    pub fn resolved(mut self) -> Result<Self> {
        let a = self.ablation.clone();
        if let Some(k) = a.prototype_type {
            self.inference.discriminator.kind = k;
            self.train.prototype_kind = k;
        }
        if let Some(k) = a.discriminator_prototype {
            self.inference.discriminator.kind = k;
        }
        if let Some(k) = a.prompt_prototype {
            self.train.prototype_kind = k;
        }
        if let Some(g) = a.prototype_granularity {
            self.inference.discriminator.granularity = g;
            self.train.granularity = g;
        }
        if let Some(h) = a.replace_depth {
            self.encoder.replace_depth = h;
        }
        if let Some(l) = a.prompt_length {
            self.encoder.prompt_len = l;
        }
        if let Some(m) = a.block_mode {
            self.train.mode = m;
        }
        if let Some(u) = a.union_baseline {
            self.inference.union = u;
        }
        if let Some(u) = a.unseen_fallback {
            self.inference.unseen = u;
        }
        self.pretrain.seed = self.seed;
        self.train.seed = self.seed;
        let tag = |section: &str, e: Error| match e {
            Error::Contract(m) | Error::Config(m) => Error::Config(format!("[{section}] {m}")),
            e => e,
        };
        self.benchmark.validate().map_err(|e| tag("benchmark", e))?;
        self.encoder.validate().map_err(|e| tag("encoder", e))?;
        self.train.validate().map_err(|e| tag("train", e))?;
        self.pretrain.validate().map_err(|e| tag("pretrain", e))?;
        Ok(self)
    }

    /// Hash over everything that affects results; output paths excluded.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.paths = Paths::under(Path::new(""));
        hash_json(&c)
    }

    pub fn provenance(&self) -> Result<Provenance> {
        Ok(Provenance {
            config_hash: self.hash()?,
            seed: self.seed,
        })
    }

    pub fn discriminator(&self) -> Discriminator {
        self.inference.discriminator
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }
}
