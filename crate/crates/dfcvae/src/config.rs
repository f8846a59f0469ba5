//! Flat key-value run configuration (`section.key = value`), merged from an
//! optional file plus command-line overrides. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::core_model::{ModelConfig, OutputActivation};
use crate::data_pipeline::CropMode;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossMode};
use crate::trainer::TrainConfig;

const KNOWN_KEYS: &[&str] = &[
    "model.latent_dim",
    "model.image_side",
    "model.encoder_channels",
    "model.decoder_channels",
    "model.leaky_slope",
    "model.output_activation",
    "loss.alpha",
    "loss.beta",
    "loss.mode",
    "loss.taps",
    "train.epochs",
    "train.batch_size",
    "train.lr0",
    "train.lr_decay",
    "train.adam_beta1",
    "train.adam_beta2",
    "train.adam_eps",
    "train.seed",
    "train.checkpoint_every",
    "train.log_every",
    "data.image_dir",
    "data.attr_path",
    "data.landmark_path",
    "data.partition_path",
    "data.crop",
    "data.n_test",
    "data.out_side",
    "loss_network.weights",
    "loss_network.taps",
    "loss_network.mean",
    "loss_network.channel_order",
    "loss_network.input_scale",
];

/// Fully resolved configuration for a run.
#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::config(format!("unknown config key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::config(format!("bad value `{v}` for `{key}`"))),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let d = ModelConfig::default();
        let cfg = ModelConfig {
            latent_dim: self.parsed("model.latent_dim", d.latent_dim)?,
            image_side: self.parsed("model.image_side", d.image_side)?,
            encoder_channels: self.channel_list("model.encoder_channels", &d.encoder_channels)?,
            decoder_channels: self.channel_list("model.decoder_channels", &d.decoder_channels)?,
            leaky_slope: self.parsed("model.leaky_slope", d.leaky_slope)?,
            output_activation: match self.get("model.output_activation").unwrap_or("sigmoid") {
                "sigmoid" => OutputActivation::Sigmoid,
                "none" => OutputActivation::None,
                other => {
                    return Err(Error::config(format!("bad output_activation `{other}`")))
                }
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn channel_list(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.values.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::config(format!("bad channel list for `{key}`")))
                })
                .collect(),
        }
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        let d = LossConfig::default();
        let mode = match self.get("loss.mode").unwrap_or("dfc") {
            "dfc" => LossMode::Dfc,
            "pixel" => LossMode::Pixel,
            other => return Err(Error::config(format!("bad loss mode `{other}`"))),
        };
        let taps_key = self
            .get("loss.taps")
            .or_else(|| self.get("loss_network.taps"));
        let tap_tags = match taps_key {
            None => d.tap_tags,
            Some(v) => v.split(',').map(|s| s.trim().to_string()).collect(),
        };
        let cfg = LossConfig {
            alpha: self.parsed("loss.alpha", d.alpha)?,
            beta: self.parsed("loss.beta", d.beta)?,
            mode,
            tap_tags: if mode == LossMode::Pixel { Vec::new() } else { tap_tags },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            epochs: self.parsed("train.epochs", d.epochs)?,
            batch_size: self.parsed("train.batch_size", d.batch_size)?,
            lr0: self.parsed("train.lr0", d.lr0)?,
            lr_decay: self.parsed("train.lr_decay", d.lr_decay)?,
            adam_beta1: self.parsed("train.adam_beta1", d.adam_beta1)?,
            adam_beta2: self.parsed("train.adam_beta2", d.adam_beta2)?,
            adam_eps: self.parsed("train.adam_eps", d.adam_eps)?,
            loss: self.loss_config()?,
            seed: self.parsed("train.seed", d.seed)?,
            checkpoint_every: self.parsed("train.checkpoint_every", d.checkpoint_every)?,
            log_every: self.parsed("train.log_every", d.log_every)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn crop_mode(&self) -> Result<CropMode> {
        match self.get("data.crop").unwrap_or("center_148") {
            "center_148" => Ok(CropMode::Center148),
            "landmark_box" => Ok(CropMode::LandmarkBox),
            other => Err(Error::config(format!("bad crop mode `{other}`"))),
        }
    }

    pub fn n_test(&self) -> Result<usize> {
        self.parsed("data.n_test", 20_000)
    }

    pub fn out_side(&self) -> Result<usize> {
        self.parsed("data.out_side", 64)
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn unknown_key_is_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.set("model.bogus", "1").unwrap_err();
        assert!(err.to_string().contains("model.bogus"));
    }

    #[test]
    fn file_values_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "# comment").unwrap();
        writeln!(f, "model.latent_dim = 32").unwrap();
        writeln!(f, "train.epochs = 2").unwrap();
        writeln!(f, "loss.mode = pixel").unwrap();
        drop(f);
        let mut cfg = RunConfig::from_file(&path).unwrap();
        cfg.set("model.latent_dim", "16").unwrap(); // flag override
        assert_eq!(cfg.model_config().unwrap().latent_dim, 16);
        assert_eq!(cfg.train_config().unwrap().epochs, 2);
        assert_eq!(cfg.loss_config().unwrap().mode, LossMode::Pixel);
    }

    #[test]
    fn defaults_reproduce_reference_settings() {
        let cfg = RunConfig::default();
        let t = cfg.train_config().unwrap();
        assert_eq!(t.epochs, 5);
        assert_eq!(t.batch_size, 64);
        assert_eq!(t.lr0, 5e-4);
        assert_eq!(t.lr_decay, 0.5);
        let l = cfg.loss_config().unwrap();
        assert_eq!(l.alpha, 1.0);
        assert_eq!(l.beta, 0.5);
        let m = cfg.model_config().unwrap();
        assert_eq!(m.latent_dim, 100);
        assert_eq!(m.image_side, 64);
    }
}
