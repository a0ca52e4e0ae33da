//! Flat `key = value` run configuration. Every knob has a default; parsing a
//! file overrides individual keys, and the full resolved set can be echoed
//! back for reproducibility.

use std::fmt;
use std::path::Path;

use crate::dataset::ShapesConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Result, SdgError};
use crate::pipeline::DiffusionConfig;
use crate::sampler::SamplerKind;
use crate::train::TrainConfig;
use crate::unet::UnetConfig;
use crate::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    /// Empty = bundled default vocabulary.
    pub vocab: String,

    pub steps: usize,
    pub guidance_scale: Real,
    pub sampler: String,
    pub record_steps: usize,

    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub encoder_seed: u64,

    pub base_channels: usize,
    pub head_dim: usize,
    pub time_dim: usize,
    pub unet_seed: u64,

    pub dataset_size: usize,
    pub two_object_prob: f64,
    pub dataset_seed: u64,

    pub train_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub ema_decay: f64,
    pub cond_dropout: f64,
    pub train_seed: u64,

    pub bench_prompts: usize,
    pub bench_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: "out".into(),
            vocab: String::new(),
            steps: 50,
            guidance_scale: 7.5,
            sampler: "plms".into(),
            record_steps: 5,
            embed_dim: 16,
            num_layers: 1,
            num_heads: 2,
            ff_dim: 32,
            encoder_seed: 1,
            base_channels: 16,
            head_dim: 8,
            time_dim: 16,
            unet_seed: 2,
            dataset_size: 512,
            two_object_prob: 0.75,
            dataset_seed: 3,
            train_steps: 9000,
            batch: 4,
            lr: 2e-3,
            ema_decay: 0.995,
            cond_dropout: 0.1,
            train_seed: 4,
            bench_prompts: 50,
            bench_seeds: 3,
        }
    }
}

macro_rules! keys {
    ($($field:ident),* $(,)?) => {
        fn set_key(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
            match key {
                $(stringify!($field) => {
                    cfg.$field = value.parse().map_err(|_| {
                        SdgError::Config(format!("bad value '{value}' for key '{key}'"))
                    })?;
                })*
                _ => return Err(SdgError::Config(format!("unknown config key '{key}'"))),
            }
            Ok(())
        }

        impl fmt::Display for RunConfig {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(writeln!(f, "{} = {}", stringify!($field), self.$field)?;)*
                Ok(())
            }
        }
    };
}

keys!(
    seed, out_dir, vocab, steps, guidance_scale, sampler, record_steps, embed_dim, num_layers,
    num_heads, ff_dim, encoder_seed, base_channels, head_dim, time_dim, unet_seed, dataset_size,
    two_object_prob, dataset_seed, train_steps, batch, lr, ema_decay, cond_dropout, train_seed,
    bench_prompts, bench_seeds,
);

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(SdgError::Config(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    lineno + 1
                )));
            };
            set_key(&mut cfg, key.trim(), value.trim())?;
        }
        cfg.sampler_kind()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn sampler_kind(&self) -> Result<SamplerKind> {
        match self.sampler.as_str() {
            "plms" => Ok(SamplerKind::Plms),
            "ddpm" => Ok(SamplerKind::Ddpm),
            other => Err(SdgError::Config(format!("unknown sampler '{other}'"))),
        }
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            ff_dim: self.ff_dim,
            seed: self.encoder_seed,
        }
    }

    pub fn unet_config(&self) -> UnetConfig {
        UnetConfig {
            latent_channels: 4,
            base_channels: self.base_channels,
            context_dim: self.embed_dim,
            head_dim: self.head_dim,
            time_dim: self.time_dim,
            seed: self.unet_seed,
        }
    }

    pub fn diffusion_config(&self) -> Result<DiffusionConfig> {
        Ok(DiffusionConfig {
            steps: self.steps,
            sampler: self.sampler_kind()?,
            guidance_scale: self.guidance_scale,
            record_steps: self.record_steps,
            ..DiffusionConfig::default()
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train_steps,
            batch: self.batch,
            lr: self.lr,
            ema_decay: self.ema_decay,
            cond_dropout: self.cond_dropout,
            seed: self.train_seed,
            ..TrainConfig::default()
        }
    }

    pub fn shapes_config(&self) -> ShapesConfig {
        ShapesConfig {
            dataset_size: self.dataset_size,
            two_object_prob: self.two_object_prob,
            seed: self.dataset_seed,
            ..ShapesConfig::default()
        }
    }
}
