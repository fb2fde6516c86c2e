use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dialogem::corpus::SynthConfig;
use dialogem::em::{EmConfig, InitStrategy, TrainConfig};
use dialogem::eval::DecodeConfig;
use dialogem::model::{AdamConfig, ModelConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::UsageError;

/// Everything a command needs, merged from the config file and flags.
/// One `seed` drives synthesis, splitting, initialization and training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub em: EmSection,
    pub finetune: FinetuneSection,
    pub decode: DecodeSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory holding train.jsonl, valid.jsonl and test.jsonl.
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_dialogues: usize,
    pub min_turns: usize,
    pub max_turns: usize,
    pub min_speakers: usize,
    pub max_speakers: usize,
    pub vocab_size: usize,
    pub keyword_pool_size: usize,
    pub min_body_len: usize,
    pub max_body_len: usize,
    pub copy_strength: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        SynthSection {
            n_dialogues: 2500,
            min_turns: d.turns_range.0,
            max_turns: d.turns_range.1,
            min_speakers: d.n_speakers_range.0,
            max_speakers: d.n_speakers_range.1,
            vocab_size: d.vocab_size,
            keyword_pool_size: d.keyword_pool_size,
            min_body_len: d.body_len_range.0,
            max_body_len: d.body_len_range.1,
            copy_strength: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub split: [f64; 3],
    pub min_turns: usize,
    pub vocab_min_freq: usize,
    pub vocab_max_size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            split: [0.8, 0.1, 0.1],
            min_turns: 4,
            vocab_min_freq: 1,
            vocab_max_size: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub init_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            max_len: 72,
            init_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmSection {
    pub iterations: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub max_context_len: usize,
    pub alpha_target_accuracy: f64,
    pub alpha_grid_step: f64,
    pub alpha_floor: f64,
    pub init_strategy: InitStrategy,
    pub report_top_fraction: f64,
    pub record_timing: bool,
}

impl Default for EmSection {
    fn default() -> Self {
        let em = EmConfig::default();
        let t = TrainConfig::default();
        EmSection {
            iterations: em.n_iterations,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.adam.lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            clip_norm: t.clip_norm,
            max_context_len: t.max_context_len,
            alpha_target_accuracy: em.alpha_target_accuracy,
            alpha_grid_step: em.alpha_grid_step,
            alpha_floor: em.alpha_floor,
            init_strategy: em.init_strategy,
            report_top_fraction: em.report_top_fraction,
            record_timing: true,
        }
    }
}

/// Fine-tuning reuses the EM optimizer settings apart from these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection { epochs: 8, lr: 3e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub max_len: usize,
    pub beam: usize,
    /// Decode at most this many instances per split; 0 means all.
    pub limit: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        let d = DecodeConfig::default();
        DecodeSection {
            max_len: d.max_len,
            beam: d.beam,
            limit: 0,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            paths: Paths::default(),
            synth: SynthSection::default(),
            data: DataSection::default(),
            model: ModelSection::default(),
            em: EmSection::default(),
            finetune: FinetuneSection::default(),
            decode: DecodeSection::default(),
        }
    }
}

impl RunConfig {
    /// Reads the config file (if any), then applies `key=value` overrides
    /// on top of it before filling in defaults.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))
                    .map_err(|e| UsageError(format!("{e:#}")))?;
                text.parse::<Table>()
                    .map_err(|e| UsageError(format!("config {}: {e}", path.display())))?
            }
            None => Table::new(),
        };
        for item in overrides {
            set_key(&mut table, item)?;
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e| UsageError(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn synth_config(&self) -> SynthConfig {
        let s = &self.synth;
        SynthConfig {
            n_dialogues: s.n_dialogues,
            turns_range: (s.min_turns, s.max_turns),
            n_speakers_range: (s.min_speakers, s.max_speakers),
            vocab_size: s.vocab_size,
            keyword_pool_size: s.keyword_pool_size,
            body_len_range: (s.min_body_len, s.max_body_len),
            copy_strength: s.copy_strength,
            seed: self.seed,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            vocab_size,
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            max_len: m.max_len,
            init_scale: m.init_scale as f32,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let e = &self.em;
        TrainConfig {
            epochs: e.epochs,
            batch_size: e.batch_size,
            adam: AdamConfig {
                lr: e.lr,
                beta1: e.beta1,
                beta2: e.beta2,
                eps: e.adam_eps,
            },
            clip_norm: e.clip_norm,
            max_context_len: e.max_context_len,
            suppress_addressee: false,
            seed: self.seed,
        }
    }

    pub fn finetune_config(&self, suppress_addressee: bool) -> TrainConfig {
        TrainConfig {
            epochs: self.finetune.epochs,
            adam: AdamConfig {
                lr: self.finetune.lr,
                ..self.train_config().adam
            },
            suppress_addressee,
            ..self.train_config()
        }
    }

    pub fn decode_config(&self, suppress_addressee: bool) -> DecodeConfig {
        DecodeConfig {
            max_len: self.decode.max_len,
            beam: self.decode.beam,
            max_context_len: self.em.max_context_len,
            suppress_addressee,
            limit: (self.decode.limit > 0).then_some(self.decode.limit),
        }
    }

    pub fn em_config(&self) -> EmConfig {
        let e = &self.em;
        EmConfig {
            n_iterations: e.iterations,
            train: self.train_config(),
            alpha_target_accuracy: e.alpha_target_accuracy,
            alpha_grid_step: e.alpha_grid_step,
            alpha_floor: e.alpha_floor,
            init_strategy: e.init_strategy,
            report_top_fraction: e.report_top_fraction,
            decode: self.decode_config(false),
            seed: self.seed,
            record_timing: e.record_timing,
        }
    }

    /// Settings that must agree between an interrupted run and its resume.
    pub fn resume_key(&self) -> RunConfig {
        let mut c = self.clone();
        c.em.iterations = 0;
        c.em.record_timing = false;
        c.paths = Paths::default();
        c
    }
}

pub fn require<'a>(value: &'a Option<PathBuf>, what: &str, flag: &str) -> Result<&'a PathBuf> {
    value
        .as_ref()
        .ok_or_else(|| UsageError(format!("no {what} given (use {flag} or paths in the config)")).into())
}

fn set_key(table: &mut Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| UsageError(format!("override `{item}` is not KEY=VALUE")))?;
    let value = format!("v = {}", raw.trim())
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.trim().to_owned()));
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty());
    let Some(last) = last else {
        return Err(UsageError(format!("override `{item}` has an empty key")).into());
    };
    let mut node = table;
    for part in parts {
        node = node
            .entry(part)
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| UsageError(format!("override `{item}`: `{part}` is not a section")))?;
    }
    node.insert(last.to_owned(), value);
    Ok(())
}
