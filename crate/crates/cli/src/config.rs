//! Experiment configuration: one TOML file drives synthesis, base
//! training, every repair technique, and evaluation. Unknown keys are
//! rejected so typos fail loudly instead of silently using defaults.

use irepair_core::data::ToyTaskSpec;
use irepair_core::error::{Error, Result};
use irepair_core::model::{Activation, ModelConfig};
use irepair_core::pretrain::PretrainConfig;
use irepair_core::repair::{RepairConfig, SliceMode};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: ToyTaskSpec,
    pub model: ModelSettings,
    pub base_train: BaseTrainSettings,
    pub normal: NormalSettings,
    pub eval: EvalSettings,
    pub scorer: ScorerSettings,
    pub techniques: TechniqueTable,
}

/// Model dimensions; vocabulary and special ids come from the task's
/// tokenizer.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSettings {
    pub context_length: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_ffn: usize,
    #[serde(default)]
    pub activation: Activation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseTrainSettings {
    pub iterations: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub window: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalSettings {
    pub count: usize,
    pub nucleus_p: f32,
    pub temperature: f32,
    pub threshold: f64,
    pub max_new_tokens: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub segment_length: usize,
    /// Validation-split prompts used as challenge prompts.
    pub challenge_prompts: usize,
    pub max_new_tokens: usize,
    pub nucleus_p: f32,
    pub temperature: f32,
    pub samples_per_prompt: usize,
    /// Tail fraction of the clean corpus held out for perplexity.
    pub holdout_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerSettings {
    pub kind: ScorerKind,
    /// Endpoint URL for the remote scorer.
    #[serde(default)]
    pub endpoint: String,
    /// Environment variable holding the remote API key.
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    /// Minimum milliseconds between remote calls.
    #[serde(default)]
    pub min_interval_ms: u64,
}

fn default_api_key_env() -> String {
    "IREPAIR_SCORER_API_KEY".to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Lexicon,
    Remote,
}

/// Per-technique hyperparameters; slice mode, KL flag, and the default
/// alpha come from the technique itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TechniqueSettings {
    pub learning_rate: f64,
    pub max_iterations: usize,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_val_batches")]
    pub validation_batches: usize,
    #[serde(default = "default_val_batch_size")]
    pub validation_batch_size: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_val_interval")]
    pub validation_interval: usize,
    /// Bad examples sampled when pre-selecting the fixed block.
    #[serde(default = "default_fixed_sample")]
    pub fixed_sample_size: usize,
    #[serde(default)]
    pub mask_prompt: bool,
}

fn default_warmup() -> usize { 150 }
fn default_batch() -> usize { 4 }
fn default_val_batches() -> usize { 8 }
fn default_val_batch_size() -> usize { 8 }
fn default_patience() -> usize { 30 }
fn default_val_interval() -> usize { 10 }
fn default_fixed_sample() -> usize { 256 }

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TechniqueTable {
    pub dapt: TechniqueSettings,
    #[serde(rename = "dapt-kl")]
    pub dapt_kl: TechniqueSettings,
    pub irepair: TechniqueSettings,
    #[serde(rename = "irepair-kl")]
    pub irepair_kl: TechniqueSettings,
    #[serde(rename = "irepair-min")]
    pub irepair_min: TechniqueSettings,
    #[serde(rename = "irepair-fixed")]
    pub irepair_fixed: TechniqueSettings,
}

/// The six repair techniques (vanilla is the unrepaired base model).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Technique {
    Dapt,
    DaptKl,
    IRepair,
    IRepairKl,
    IRepairMin,
    IRepairFixed,
}

pub const TECHNIQUE_NAMES: [&str; 6] = [
    "dapt",
    "dapt-kl",
    "irepair",
    "irepair-kl",
    "irepair-min",
    "irepair-fixed",
];

impl Technique {
    pub fn parse(name: &str) -> Result<Technique> {
        match name {
            "dapt" => Ok(Technique::Dapt),
            "dapt-kl" => Ok(Technique::DaptKl),
            "irepair" => Ok(Technique::IRepair),
            "irepair-kl" => Ok(Technique::IRepairKl),
            "irepair-min" => Ok(Technique::IRepairMin),
            "irepair-fixed" => Ok(Technique::IRepairFixed),
            other => Err(Error::Usage(format!(
                "unknown technique {other:?}; valid names: {}",
                TECHNIQUE_NAMES.join(", ")
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Technique::Dapt => "dapt",
            Technique::DaptKl => "dapt-kl",
            Technique::IRepair => "irepair",
            Technique::IRepairKl => "irepair-kl",
            Technique::IRepairMin => "irepair-min",
            Technique::IRepairFixed => "irepair-fixed",
        }
    }

    pub fn all() -> [Technique; 6] {
        [
            Technique::Dapt,
            Technique::DaptKl,
            Technique::IRepair,
            Technique::IRepairKl,
            Technique::IRepairMin,
            Technique::IRepairFixed,
        ]
    }

    pub fn kl_enabled(&self) -> bool {
        matches!(self, Technique::DaptKl | Technique::IRepairKl)
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model_config()?.validate()?;
        if self.task.max_sequence_tokens() > self.model.context_length {
            return Err(Error::Config(format!(
                "task can emit sequences of {} tokens but the context holds {}",
                self.task.max_sequence_tokens(),
                self.model.context_length
            )));
        }
        if !(0.0..0.9).contains(&self.eval.holdout_fraction) {
            return Err(Error::Config("eval.holdout_fraction must lie in [0, 0.9)".into()));
        }
        if self.eval.challenge_prompts == 0 {
            return Err(Error::Config("eval.challenge_prompts must be positive".into()));
        }
        if self.scorer.kind == ScorerKind::Remote && self.scorer.endpoint.is_empty() {
            return Err(Error::Config("remote scorer requires scorer.endpoint".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let tok = self.task.tokenizer()?;
        Ok(ModelConfig {
            vocab_size: tok.vocab_size(),
            context_length: self.model.context_length,
            d_model: self.model.d_model,
            n_heads: self.model.n_heads,
            n_blocks: self.model.n_blocks,
            d_ffn: self.model.d_ffn,
            pad_id: tok.pad_id(),
            bos_id: tok.bos_id(),
            activation: self.model.activation,
        })
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            iterations: self.base_train.iterations,
            learning_rate: self.base_train.learning_rate,
            warmup_steps: self.base_train.warmup_steps,
            batch_size: self.base_train.batch_size,
            window: self.base_train.window,
            rmsprop_decay: 0.9,
            rmsprop_eps: 1e-8,
            seed: self.seed,
        }
    }

    pub fn technique_settings(&self, t: Technique) -> &TechniqueSettings {
        match t {
            Technique::Dapt => &self.techniques.dapt,
            Technique::DaptKl => &self.techniques.dapt_kl,
            Technique::IRepair => &self.techniques.irepair,
            Technique::IRepairKl => &self.techniques.irepair_kl,
            Technique::IRepairMin => &self.techniques.irepair_min,
            Technique::IRepairFixed => &self.techniques.irepair_fixed,
        }
    }

    /// Repair config for a technique; the fixed ablation's block index is
    /// resolved by the caller via fixed_slice.
    pub fn repair_config(&self, t: Technique, fixed_block: Option<usize>) -> Result<RepairConfig> {
        let s = self.technique_settings(t);
        let mut cfg = match t {
            Technique::Dapt => RepairConfig::dapt(self.seed),
            Technique::DaptKl => RepairConfig::dapt_kl(self.seed),
            Technique::IRepair => RepairConfig::irepair(self.seed),
            Technique::IRepairKl => RepairConfig::irepair_kl(self.seed),
            Technique::IRepairMin => RepairConfig::irepair_min(self.seed),
            Technique::IRepairFixed => {
                let block = fixed_block.ok_or_else(|| {
                    Error::Usage("irepair-fixed needs a pre-selected block".into())
                })?;
                RepairConfig::irepair_fixed(block, self.seed)
            }
        };
        cfg.learning_rate = s.learning_rate;
        cfg.max_iterations = s.max_iterations;
        if let Some(alpha) = s.alpha {
            cfg.alpha = alpha;
        }
        cfg.warmup_steps = s.warmup_steps;
        cfg.batch_size = s.batch_size;
        cfg.validation_batches = s.validation_batches;
        cfg.validation_batch_size = s.validation_batch_size;
        cfg.patience = s.patience;
        cfg.validation_interval = s.validation_interval;
        cfg.mask_prompt = s.mask_prompt;
        Ok(cfg)
    }

    /// The tuned desk-scale defaults; also what `print-config` emits.
    pub fn default_toy() -> ExperimentConfig {
        let technique = |lr: f64, iters: usize| TechniqueSettings {
            learning_rate: lr,
            max_iterations: iters,
            alpha: None,
            warmup_steps: default_warmup(),
            batch_size: default_batch(),
            validation_batches: default_val_batches(),
            validation_batch_size: default_val_batch_size(),
            patience: default_patience(),
            validation_interval: default_val_interval(),
            fixed_sample_size: default_fixed_sample(),
            mask_prompt: false,
        };
        ExperimentConfig {
            seed: 42,
            task: ToyTaskSpec::default(),
            model: ModelSettings {
                context_length: 64,
                d_model: 32,
                n_heads: 4,
                n_blocks: 4,
                d_ffn: 128,
                activation: Activation::Gelu,
            },
            base_train: BaseTrainSettings {
                iterations: 3000,
                learning_rate: 2e-3,
                warmup_steps: 100,
                batch_size: 8,
                window: 64,
            },
            normal: NormalSettings {
                count: 64,
                nucleus_p: 0.9,
                temperature: 1.0,
                threshold: 0.5,
                max_new_tokens: 48,
            },
            eval: EvalSettings {
                segment_length: 64,
                challenge_prompts: 32,
                max_new_tokens: 40,
                nucleus_p: 0.9,
                temperature: 1.0,
                samples_per_prompt: 1,
                holdout_fraction: 0.1,
            },
            scorer: ScorerSettings {
                kind: ScorerKind::Lexicon,
                endpoint: String::new(),
                api_key_env: default_api_key_env(),
                min_interval_ms: 0,
            },
            techniques: TechniqueTable {
                dapt: technique(2e-4, 1200),
                dapt_kl: technique(4e-4, 1200),
                irepair: technique(2e-3, 1200),
                irepair_kl: technique(3e-3, 1200),
                irepair_min: technique(2e-3, 1200),
                irepair_fixed: technique(2e-3, 1200),
            },
        }
    }
}

/// Slice-mode label for run summaries.
pub fn slice_mode_name(mode: SliceMode) -> String {
    match mode {
        SliceMode::DynamicMax => "dynamic_max".into(),
        SliceMode::DynamicMin => "dynamic_min".into(),
        SliceMode::Fixed(b) => format!("fixed({b})"),
        SliceMode::AllParams => "all_params".into(),
    }
}
