//! TOML run configurations. Every file carries a `version` key; unknown
//! keys are rejected. Scalar flags override file values, which override
//! defaults (flag > file > default).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use vl_core::encoder::VLConfig;
use vl_data::synthetic::ShapeWorldConfig;
use vl_train::groups::LrTable;
use vl_train::optim::OptimHyper;
use vl_train::runs::{ProxyOptions, RunOptions};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub version: u32,
    #[serde(default)]
    pub model: Option<VLConfig>,
    pub data: DataSection,
    #[serde(default)]
    pub task: TaskSection,
    #[serde(default)]
    pub optimization: OptSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Main manifest: pretraining corpus or finetuning task data.
    pub manifest: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    /// Caption corpus for the unimodal text proxy.
    pub captions: Option<PathBuf>,
    /// Label corpus for the unimodal image proxy.
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    /// Pretraining masking scheme: cc | imagenet | ccil.
    pub scheme: Option<String>,
    /// Finetuning task name (also selects default learning rates when it
    /// matches a known task).
    pub name: Option<String>,
    /// Keep only the top-n labels per record (ccil corpora).
    pub max_labels: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptSection {
    pub steps: Option<usize>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub seed: Option<u64>,
    pub warmup_fraction: Option<f64>,
    pub eval_every: Option<usize>,
    pub max_val_examples: Option<usize>,
    pub itm_mismatch_p: Option<f64>,
    pub mlm_on_mismatch: Option<bool>,
    pub patience: Option<usize>,
    pub clip_norm: Option<f64>,
    pub weight_decay: Option<f64>,
    pub lr_pretrained: Option<f64>,
    pub lr_fresh: Option<f64>,
    pub lr_encoders: Option<f64>,
    pub lr_cross_modal: Option<f64>,
    pub lr_head: Option<f64>,
    /// Steps for each unimodal proxy phase.
    pub proxy_steps: Option<usize>,
    pub proxy_lr: Option<f64>,
}

impl Default for OptSection {
    fn default() -> Self {
        OptSection {
            steps: None,
            epochs: None,
            batch: None,
            seed: None,
            warmup_fraction: None,
            eval_every: None,
            max_val_examples: None,
            itm_mismatch_p: None,
            mlm_on_mismatch: None,
            patience: None,
            clip_norm: None,
            weight_decay: None,
            lr_pretrained: None,
            lr_fresh: None,
            lr_encoders: None,
            lr_cross_modal: None,
            lr_head: None,
            proxy_steps: None,
            proxy_lr: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

pub fn load_run_config(path: &Path) -> Result<RunConfigFile, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("read {}: {e}", path.display())))?;
    let cfg: RunConfigFile = toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if cfg.version != CONFIG_VERSION {
        return Err(CliError::Config(format!(
            "{}: config version {} unsupported (expected {CONFIG_VERSION})",
            path.display(),
            cfg.version
        )));
    }
    Ok(cfg)
}

impl RunConfigFile {
    pub fn model_config(&self) -> VLConfig {
        self.model.clone().unwrap_or_default()
    }

    /// Assembles the engine options for a pretraining run.
    pub fn pretrain_options(&self) -> RunOptions {
        let o = &self.optimization;
        let defaults = RunOptions::default();
        let lr_table = LrTable::Pretrain {
            pretrained: o.lr_pretrained.unwrap_or(1e-4),
            fresh: o.lr_fresh.unwrap_or(5e-4),
        };
        RunOptions {
            lr_table,
            hyper: self.hyper(),
            warmup_fraction: o.warmup_fraction.unwrap_or(defaults.warmup_fraction),
            batch_size: o.batch.unwrap_or(defaults.batch_size),
            seed: o.seed.unwrap_or(0),
            eval_every: o.eval_every.unwrap_or(defaults.eval_every),
            max_val_examples: o.max_val_examples.unwrap_or(defaults.max_val_examples),
            itm_mismatch_p: o.itm_mismatch_p.unwrap_or(defaults.itm_mismatch_p),
            mlm_on_mismatch: o.mlm_on_mismatch.unwrap_or(defaults.mlm_on_mismatch),
            patience: o.patience,
            stop_after_steps: None,
        }
    }

    /// Engine options for a finetuning run; rates fall back to the known
    /// task defaults when only a task name is given.
    pub fn finetune_options(&self, after_bimodal: bool) -> Result<RunOptions, CliError> {
        let o = &self.optimization;
        let task = self.task.name.as_deref().unwrap_or("task");
        let table_default = if after_bimodal {
            vl_train::groups::finetune_defaults_after(task)
        } else {
            vl_train::groups::finetune_defaults_before(task)
        };
        let (mut enc, mut cross, mut head) = match table_default {
            Some(LrTable::Finetune { encoders, cross_modal, head }) => (encoders, cross_modal, head),
            _ => (1e-5, 1e-4, 1e-4),
        };
        if let Some(v) = o.lr_encoders {
            enc = v;
        }
        if let Some(v) = o.lr_cross_modal {
            cross = v;
        }
        if let Some(v) = o.lr_head {
            head = v;
        }
        let defaults = RunOptions::default();
        Ok(RunOptions {
            lr_table: LrTable::Finetune { encoders: enc, cross_modal: cross, head },
            hyper: self.hyper(),
            warmup_fraction: o.warmup_fraction.unwrap_or(defaults.warmup_fraction),
            batch_size: o.batch.unwrap_or(defaults.batch_size),
            seed: o.seed.unwrap_or(0),
            eval_every: o.eval_every.unwrap_or(defaults.eval_every),
            max_val_examples: o.max_val_examples.unwrap_or(defaults.max_val_examples),
            itm_mismatch_p: 0.0,
            mlm_on_mismatch: true,
            patience: o.patience,
            stop_after_steps: None,
        })
    }

    pub fn proxy_options(&self) -> ProxyOptions {
        let o = &self.optimization;
        let d = ProxyOptions::default();
        ProxyOptions {
            steps: o.proxy_steps.unwrap_or(d.steps),
            batch_size: o.batch.unwrap_or(d.batch_size),
            peak_lr: o.proxy_lr.unwrap_or(d.peak_lr),
            warmup_fraction: o.warmup_fraction.unwrap_or(d.warmup_fraction),
            hyper: self.hyper(),
            seed: o.seed.unwrap_or(0),
        }
    }

    fn hyper(&self) -> OptimHyper {
        let o = &self.optimization;
        let d = OptimHyper::default();
        OptimHyper {
            weight_decay: o.weight_decay.unwrap_or(d.weight_decay),
            clip_norm: match o.clip_norm {
                Some(c) if c <= 0.0 => None,
                Some(c) => Some(c),
                None => d.clip_norm,
            },
            ..d
        }
    }
}

/// Shape-world generation config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfigFile {
    pub version: u32,
    #[serde(default)]
    pub shapeworld: ShapeWorldConfig,
}

pub fn load_generate_config(path: &Path) -> Result<GenerateConfigFile, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("read {}: {e}", path.display())))?;
    let cfg: GenerateConfigFile = toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if cfg.version != CONFIG_VERSION {
        return Err(CliError::Config(format!(
            "{}: config version {} unsupported (expected {CONFIG_VERSION})",
            path.display(),
            cfg.version
        )));
    }
    Ok(cfg)
}

/// Resolves an output directory: an explicit flag wins, then the config
/// value, then `VL_OUT_ROOT` joined with a default name.
pub fn resolve_out_dir(
    flag: Option<PathBuf>,
    config: Option<PathBuf>,
    default_name: &str,
) -> Option<PathBuf> {
    flag.or(config).or_else(|| {
        std::env::var_os("VL_OUT_ROOT").map(|root| PathBuf::from(root).join(default_name))
    })
}
