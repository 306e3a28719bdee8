use std::path::Path;

use anyhow::{Context, Result};
use clap::Args;
use jumpsae::TrainConfig;

/// Flags mirroring [`TrainConfig`]; any flag given wins over the file.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigOverrides {
    #[arg(long)]
    pub dict_size: Option<usize>,
    #[arg(long)]
    pub input_dim: Option<usize>,
    #[arg(long)]
    pub l0_target: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub adam_beta1: Option<f64>,
    #[arg(long)]
    pub adam_beta2: Option<f64>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
    #[arg(long)]
    pub epsilon_bandwidth: Option<f64>,
    #[arg(long)]
    pub lr_warmup_steps: Option<u64>,
    #[arg(long)]
    pub sparsity_warmup_steps: Option<u64>,
    #[arg(long)]
    pub clip_max_norm: Option<f64>,
    #[arg(long)]
    pub total_tokens: Option<u64>,
    #[arg(long)]
    pub batch_tokens: Option<usize>,
    #[arg(long)]
    pub eval_interval: Option<u64>,
    #[arg(long)]
    pub kernel: Option<String>,
    #[arg(long)]
    pub buffer_capacity: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<u64>,
    #[arg(long)]
    pub theta_init: Option<f64>,
    #[arg(long)]
    pub theta_floor: Option<f64>,
}

macro_rules! apply {
    ($cfg:ident, $ov:ident, $($field:ident),*) => {
        $(if let Some(v) = $ov.$field.clone() { $cfg.$field = v; })*
    };
}

impl ConfigOverrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        let ov = self;
        apply!(
            cfg, ov, dict_size, input_dim, l0_target, lambda, lr, adam_beta1, adam_beta2, adam_eps,
            epsilon_bandwidth, lr_warmup_steps, sparsity_warmup_steps, clip_max_norm, total_tokens,
            batch_tokens, eval_interval, kernel, buffer_capacity, max_epochs, theta_init, theta_floor
        );
    }
}

pub fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("invalid config {}", p.display()))
        }
    }
}

/// File (or defaults), then flags, then the top-level seed.
pub fn resolve(path: Option<&Path>, overrides: &ConfigOverrides, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = load_config(path)?;
    overrides.apply(&mut cfg);
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}
