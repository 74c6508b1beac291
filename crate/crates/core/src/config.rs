//! Flat run configuration: one key-value document covering the model,
//! schedule, training hyperparameters, seeds and sampling defaults.
//!
//! Precedence is CLI flag > config file > built-in default; unknown keys in
//! a config file are rejected. The built-in defaults are the full-scale
//! settings (3000/800/1000 iterations, batch 4/2/1, guidance scale 9.0,
//! 50 DDIM steps, LoRA rank 32, adapter hidden dim = half the input width);
//! toy runs override the iteration counts and model size.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterMode;
use crate::diffusion::{NoiseSchedule, ScheduleKind};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, TrainRunConfig};
use crate::unet::UNetConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // Model.
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub num_blocks: usize,
    pub attn_heads: usize,
    pub text_dim: usize,
    pub latent_channels: usize,
    pub frames: usize,
    pub latent_h: usize,
    pub latent_w: usize,
    pub ffn_mult: usize,
    pub time_dim: usize,

    // Frozen encoders.
    pub text_tokens: usize,
    pub cond_dim: usize,

    // Diffusion schedule.
    pub schedule_steps: usize,
    pub schedule_kind: String,

    // Sampling.
    pub ddim_steps: usize,
    pub cfg_scale: f64,
    pub fps: usize,

    // Subject learning, step one (textual identity).
    pub stage1_lr: f64,
    pub stage1_iterations: usize,
    pub stage1_batch: usize,

    // Subject learning, step two (identity adapter).
    pub stage2_lr: f64,
    pub stage2_iterations: usize,
    pub stage2_batch: usize,

    // Motion learning.
    pub motion_lr: f64,
    pub motion_iterations: usize,
    pub motion_batch_multi: usize,
    pub motion_batch_single: usize,

    // Optimizer.
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,

    // LoRA baseline.
    pub lora_rank: usize,

    // Adapter composition modes per sublayer family.
    pub cross_attention_mode: String,
    pub self_attention_mode: String,
    pub feed_forward_mode: String,

    // Prompts.
    pub pseudo_word: String,
    pub prompt_template: String,

    // Appearance guidance handling.
    pub strict_guidance: bool,

    // Base pretraining (toy fixture; the full-scale backbone is assumed).
    pub pretrain_lr: f64,
    pub pretrain_iterations: usize,
    pub pretrain_batch: usize,
    pub pretrain_cond_dropout: f64,

    // Weight-change analysis fine-tunes.
    pub analysis_lr: f64,
    pub analysis_iterations: usize,
    pub analysis_batch: usize,

    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            base_channels: 32,
            channel_multipliers: vec![1, 2],
            num_blocks: 1,
            attn_heads: 4,
            text_dim: 32,
            latent_channels: 4,
            frames: 8,
            latent_h: 8,
            latent_w: 8,
            ffn_mult: 2,
            time_dim: 128,
            text_tokens: 8,
            cond_dim: 32,
            schedule_steps: 1000,
            schedule_kind: "cosine".to_string(),
            ddim_steps: 50,
            cfg_scale: 9.0,
            fps: 8,
            stage1_lr: 1e-4,
            stage1_iterations: 3000,
            stage1_batch: 4,
            stage2_lr: 1e-5,
            stage2_iterations: 800,
            stage2_batch: 4,
            motion_lr: 1e-5,
            motion_iterations: 1000,
            motion_batch_multi: 2,
            motion_batch_single: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            lora_rank: 32,
            cross_attention_mode: "parallel".to_string(),
            self_attention_mode: "parallel".to_string(),
            feed_forward_mode: "parallel".to_string(),
            pseudo_word: "s*".to_string(),
            prompt_template: "a photo of a s* {class}".to_string(),
            strict_guidance: true,
            pretrain_lr: 2e-3,
            pretrain_iterations: 400,
            pretrain_batch: 2,
            pretrain_cond_dropout: 0.1,
            analysis_lr: 1e-3,
            analysis_iterations: 150,
            analysis_batch: 4,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_value(v.clone())
            .map_err(|e| Error::Config(format!("invalid config snapshot: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.unet_config().validate()?;
        self.schedule_kind.parse::<ScheduleKind>()?;
        self.cross_attention_mode.parse::<AdapterMode>()?;
        self.self_attention_mode.parse::<AdapterMode>()?;
        self.feed_forward_mode.parse::<AdapterMode>()?;
        if self.schedule_steps < 2 {
            return Err(Error::Config("schedule_steps must be at least 2".into()));
        }
        if self.ddim_steps == 0 || self.ddim_steps > self.schedule_steps {
            return Err(Error::Config(format!(
                "ddim_steps must be in 1..={}",
                self.schedule_steps
            )));
        }
        if !self.prompt_template.contains("{class}") && !self.prompt_template.contains(&self.pseudo_word)
        {
            return Err(Error::Config(
                "prompt_template must mention the pseudo word or a {class} slot".into(),
            ));
        }
        Ok(())
    }

    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            base_channels: self.base_channels,
            channel_multipliers: self.channel_multipliers.clone(),
            num_blocks: self.num_blocks,
            attn_heads: self.attn_heads,
            text_dim: self.text_dim,
            latent_channels: self.latent_channels,
            frames: self.frames,
            latent_h: self.latent_h,
            latent_w: self.latent_w,
            ffn_mult: self.ffn_mult,
            time_dim: self.time_dim,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            text_dim: self.text_dim,
            text_tokens: self.text_tokens,
            cond_dim: self.cond_dim,
            seed: self.seed,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::make(self.schedule_steps, self.schedule_kind.parse()?)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn stage1_run(&self, seed: u64) -> TrainRunConfig {
        TrainRunConfig {
            learning_rate: self.stage1_lr,
            iterations: self.stage1_iterations,
            batch_size: self.stage1_batch,
            seed,
            adam: self.adam(),
        }
    }

    pub fn stage2_run(&self, seed: u64) -> TrainRunConfig {
        TrainRunConfig {
            learning_rate: self.stage2_lr,
            iterations: self.stage2_iterations,
            batch_size: self.stage2_batch,
            seed,
            adam: self.adam(),
        }
    }

    pub fn motion_run(&self, seed: u64, single_video: bool) -> TrainRunConfig {
        TrainRunConfig {
            learning_rate: self.motion_lr,
            iterations: self.motion_iterations,
            batch_size: if single_video { self.motion_batch_single } else { self.motion_batch_multi },
            seed,
            adam: self.adam(),
        }
    }

    pub fn modes(&self) -> (AdapterMode, AdapterMode, AdapterMode) {
        (
            self.cross_attention_mode.parse().expect("validated"),
            self.self_attention_mode.parse().expect("validated"),
            self.feed_forward_mode.parse().expect("validated"),
        )
    }

    /// Render the subject prompt template with the class word substituted.
    pub fn subject_prompt(&self, class_word: &str) -> String {
        self.prompt_template.replace("{class}", class_word)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_full_scale() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.stage1_lr, 1e-4);
        assert_eq!(cfg.stage1_iterations, 3000);
        assert_eq!(cfg.stage1_batch, 4);
        assert_eq!(cfg.stage2_lr, 1e-5);
        assert_eq!(cfg.stage2_iterations, 800);
        assert_eq!(cfg.motion_lr, 1e-5);
        assert_eq!(cfg.motion_iterations, 1000);
        assert_eq!(cfg.motion_batch_multi, 2);
        assert_eq!(cfg.motion_batch_single, 1);
        assert_eq!(cfg.cfg_scale, 9.0);
        assert_eq!(cfg.ddim_steps, 50);
        assert_eq!(cfg.lora_rank, 32);
        assert_eq!(cfg.adam_beta1, 0.9);
        assert_eq!(cfg.adam_beta2, 0.999);
        assert_eq!(cfg.adam_eps, 1e-8);
        assert_eq!(cfg.weight_decay, 0.0);
        assert_eq!(cfg.fps, 8);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml_str("definitely_not_a_key = 3");
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn partial_config_takes_defaults() {
        let cfg = RunConfig::from_toml_str("stage1_iterations = 500\nseed = 9").unwrap();
        assert_eq!(cfg.stage1_iterations, 500);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.stage2_iterations, 800);
    }

    #[test]
    fn bad_values_rejected() {
        assert!(RunConfig::from_toml_str("schedule_kind = \"triangle\"").is_err());
        assert!(RunConfig::from_toml_str("ddim_steps = 0").is_err());
        assert!(RunConfig::from_toml_str("attn_heads = 7").is_err());
    }
}
