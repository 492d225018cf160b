//! Layered run settings: command-line flags over a TOML file over defaults.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use concept_insert::checkpoint::LossTerms;
use concept_insert::evaluation::DEFAULT_JUDGE_THRESHOLD;
use concept_insert::inference::DEFAULT_STEPS;
use concept_insert::trainer::StageConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::UsageError;

pub const ECHO_FILE: &str = "config.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSettings {
    pub iterations: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub gamma: Option<f64>,
    pub eta: Option<f64>,
    pub terms: Option<LossTerms>,
    pub rank: Option<usize>,
}

impl StageSettings {
    fn defaults(cfg: &StageConfig) -> Self {
        Self {
            iterations: Some(cfg.iterations),
            learning_rate: Some(cfg.learning_rate),
            batch_size: Some(cfg.batch_size),
            gamma: Some(cfg.weights.gamma),
            eta: Some(cfg.weights.eta),
            terms: Some(cfg.terms),
            rank: Some(cfg.lora.rank),
        }
    }

    /// Applies these settings on top of `base`.
    pub fn apply(&self, mut base: StageConfig, seed: u64) -> StageConfig {
        base.seed = seed;
        if let Some(v) = self.iterations {
            base.iterations = v;
        }
        if let Some(v) = self.learning_rate {
            base.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            base.batch_size = v;
        }
        if let Some(v) = self.gamma {
            base.weights.gamma = v;
        }
        if let Some(v) = self.eta {
            base.weights.eta = v;
        }
        if let Some(v) = self.terms {
            base.terms = v;
        }
        if let Some(v) = self.rank {
            base.lora.rank = v;
        }
        base
    }
}

/// Every setting any command reads. Unset fields are `None`; the output
/// directory is not part of it so that reruns into different directories
/// echo identical files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub command: Option<String>,
    pub backbone: Option<String>,
    pub seed: Option<u64>,
    pub image: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub segment: Option<bool>,
    pub class_word: Option<String>,
    pub concept_id: Option<String>,
    pub checkpoints: Option<Vec<PathBuf>>,
    pub prompt: Option<String>,
    pub samples: Option<usize>,
    pub steps: Option<usize>,
    pub strict_backbone: Option<bool>,
    pub run: Option<PathBuf>,
    pub metrics: Option<String>,
    pub mock: Option<bool>,
    pub prompt_list: Option<PathBuf>,
    pub verdicts: Option<PathBuf>,
    pub judge_threshold: Option<f64>,
    pub label: Option<String>,
    pub samples_per_prompt: Option<usize>,
    pub stage1: StageSettings,
    pub stage2: StageSettings,
}

fn overlay(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if v.is_object() => overlay(slot, v),
                    Some(slot) if !v.is_null() => *slot = v,
                    Some(_) => {}
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) if !t.is_null() => *b = t,
        _ => {}
    }
}

fn strip_nulls(v: Value) -> Option<Value> {
    match v {
        Value::Null => None,
        Value::Object(m) => {
            let m: serde_json::Map<String, Value> =
                m.into_iter().filter_map(|(k, v)| strip_nulls(v).map(|v| (k, v))).collect();
            (!m.is_empty()).then_some(Value::Object(m))
        }
        other => Some(other),
    }
}

impl Settings {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| UsageError(format!("config file {}: {e}", path.display())).into())
    }

    /// Field-by-field: set values in `self` win over `lower`.
    pub fn over(self, lower: Settings) -> Settings {
        let mut base = serde_json::to_value(lower).expect("settings serialize");
        overlay(&mut base, serde_json::to_value(self).expect("settings serialize"));
        serde_json::from_value(base).expect("settings round-trip")
    }

    /// Fills every setting `command` reads that is still unset.
    pub fn with_defaults(self, command: &str) -> Settings {
        let s1 = StageConfig::stage1();
        let s2 = StageConfig::stage2();
        let mut d = Settings {
            command: Some(command.to_string()),
            seed: Some(0),
            ..Settings::default()
        };
        match command {
            "invert" => {
                d.backbone = Some(concept_insert::backbone::toy::TOY_ID.into());
                d.segment = Some(false);
                d.stage1 = StageSettings::defaults(&s1);
            }
            "finetune" => d.stage2 = StageSettings::defaults(&s2),
            "generate" | "compose" => {
                d.samples = Some(1);
                d.steps = Some(DEFAULT_STEPS);
                d.strict_backbone = Some(false);
                d.segment = Some(false);
            }
            "evaluate" => {
                d.metrics = Some("all".into());
                d.mock = Some(false);
                d.judge_threshold = Some(DEFAULT_JUDGE_THRESHOLD);
                d.label = Some("run".into());
            }
            "ablate" => {
                d.backbone = Some(concept_insert::backbone::toy::TOY_ID.into());
                d.mock = Some(false);
                d.steps = Some(DEFAULT_STEPS);
                d.samples_per_prompt = Some(2);
                d.judge_threshold = Some(DEFAULT_JUDGE_THRESHOLD);
                d.stage1 = StageSettings::defaults(&s1);
                d.stage2 = StageSettings::defaults(&s2);
            }
            _ => {}
        }
        let mut out = Settings {
            command: None,
            ..self
        }
        .over(d);
        out.command = Some(command.to_string());
        out
    }

    /// TOML text of the set fields.
    pub fn to_toml(&self) -> Result<String> {
        let v = strip_nulls(serde_json::to_value(self)?).unwrap_or(Value::Object(Default::default()));
        Ok(toml::to_string(&v)?)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

/// Reads a required setting or fails with a usage error naming its flag.
pub fn need<T: Clone>(v: &Option<T>, flag: &str) -> Result<T> {
    v.clone().ok_or_else(|| UsageError(format!("missing required `{flag}`")).into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file: Settings = toml::from_str("seed = 3\nclass_word = \"dog\"\n[stage1]\ngamma = 0.5\niterations = 7\n").unwrap();
        let flags = Settings {
            seed: Some(9),
            stage1: StageSettings {
                gamma: Some(2.0),
                ..Default::default()
            },
            ..Default::default()
        };
        let s = flags.over(file).with_defaults("invert");
        assert_eq!(s.seed, Some(9));
        assert_eq!(s.class_word.as_deref(), Some("dog"));
        assert_eq!(s.stage1.gamma, Some(2.0));
        assert_eq!(s.stage1.iterations, Some(7));
        assert_eq!(s.stage1.batch_size, Some(16));
    }

    #[test]
    fn echo_round_trips() {
        let s = Settings {
            image: Some("a.png".into()),
            ..Default::default()
        }
        .with_defaults("invert");
        let text = s.to_toml().unwrap();
        let back: Settings = toml::from_str(&text).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<Settings>("colour = 1").is_err());
    }
}
