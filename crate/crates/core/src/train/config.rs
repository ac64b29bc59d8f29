use std::fmt::Write;

use crate::data::RainParams;
use crate::error::{Error, Result};
use crate::kv;
use crate::model::GraNetConfig;

/// Optimizer, schedule and loop settings (`train.*` keys).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Non-improving epochs tolerated before the learning rate is cut.
    pub patience: u32,
    pub lr_factor: f64,
    pub min_lr: f64,
    /// Validation PSNR must beat the best by more than this (dB) to count as
    /// an improvement, for both the schedule and the stop rule.
    pub min_delta: f64,
    /// Non-improving epochs at the floor learning rate before stopping.
    pub stop_patience: u32,
    pub max_epochs: u32,
    /// Hard cap on optimizer steps; 0 means unlimited.
    pub max_steps: u64,
    /// Stop as soon as validation PSNR reaches this value; 0 disables it.
    pub target_psnr: f64,
    pub flip_prob: f64,
    /// Images are downscaled so their long side is at most this.
    pub max_side: usize,
    /// Start the mask and refinement output convolutions at zero, so the
    /// untrained network is the identity.
    pub zero_init_heads: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            patience: 3,
            lr_factor: 0.9,
            min_lr: 1e-4,
            min_delta: 0.0,
            stop_patience: 5,
            max_epochs: 200,
            max_steps: 0,
            target_psnr: 0.0,
            flip_prob: 0.5,
            max_side: 512,
            zero_init_heads: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.min_lr > 0.0 && self.min_lr <= self.lr) {
            return bad("train.lr and train.min_lr must be positive with min_lr <= lr");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("train.beta1/beta2 must lie in [0, 1) and train.eps must be positive");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad("train.lr_factor must lie in (0, 1)");
        }
        if !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            return bad("train.min_delta must be a finite value >= 0");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("train.flip_prob must lie in [0, 1]");
        }
        if self.max_side < 8 {
            return bad("train.max_side must be at least 8");
        }
        Ok(())
    }

    fn set(&mut self, name: &str, e: &kv::Entry) -> Result<()> {
        match name {
            "lr" => self.lr = kv::value(e)?,
            "beta1" => self.beta1 = kv::value(e)?,
            "beta2" => self.beta2 = kv::value(e)?,
            "eps" => self.eps = kv::value(e)?,
            "patience" => self.patience = kv::value(e)?,
            "lr_factor" => self.lr_factor = kv::value(e)?,
            "min_lr" => self.min_lr = kv::value(e)?,
            "min_delta" => self.min_delta = kv::value(e)?,
            "stop_patience" => self.stop_patience = kv::value(e)?,
            "max_epochs" => self.max_epochs = kv::value(e)?,
            "max_steps" => self.max_steps = kv::value(e)?,
            "target_psnr" => self.target_psnr = kv::value(e)?,
            "flip_prob" => self.flip_prob = kv::value(e)?,
            "max_side" => self.max_side = kv::value(e)?,
            "zero_init_heads" => self.zero_init_heads = kv::value(e)?,
            "seed" => self.seed = kv::value(e)?,
            _ => return Err(kv::unknown(e)),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("patience", self.patience.to_string()),
            ("lr_factor", self.lr_factor.to_string()),
            ("min_lr", self.min_lr.to_string()),
            ("min_delta", self.min_delta.to_string()),
            ("stop_patience", self.stop_patience.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("target_psnr", self.target_psnr.to_string()),
            ("flip_prob", self.flip_prob.to_string()),
            ("max_side", self.max_side.to_string()),
            ("zero_init_heads", self.zero_init_heads.to_string()),
            ("seed", self.seed.to_string()),
        ] {
            writeln!(s, "train.{k} = {v}").unwrap();
        }
        s
    }
}

/// Everything a config file can set: `model.*`, `train.*` and `rain.*`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: GraNetConfig,
    pub train: TrainConfig,
    pub rain: RainParams,
}

impl RunConfig {
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut run = RunConfig::default();
        for e in kv::parse(text)? {
            if let Some(name) = e.key.strip_prefix("model.") {
                run.model.set(name, &e)?;
            } else if let Some(name) = e.key.strip_prefix("train.") {
                run.train.set(name, &e)?;
            } else if let Some(name) = e.key.strip_prefix("rain.") {
                run.rain.set(name, &e)?;
            } else {
                return Err(kv::unknown(&e));
            }
        }
        run.validate()?;
        Ok(run)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.rain.validate()
    }

    pub fn to_kv(&self) -> String {
        format!("{}{}{}", self.model.to_kv(), self.train.to_kv(), self.rain.to_kv())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let run = RunConfig::default();
        assert_eq!(RunConfig::from_kv(&run.to_kv()).unwrap(), run);
    }

    #[test]
    fn mixed_sections_parse() {
        let run = RunConfig::from_kv("model.fine_channels = 32\ntrain.patience = 10\n# c\nrain.seed = 4\n").unwrap();
        assert_eq!(run.model.fine_channels, 32);
        assert_eq!(run.train.patience, 10);
        assert_eq!(run.rain.seed, 4);
    }

    #[test]
    fn unknown_keys_name_the_key_and_line() {
        let err = RunConfig::from_kv("train.lr = 1e-3\ntrain.momentum = 0.9\n").unwrap_err();
        assert!(matches!(&err, Error::UnknownKey { key, line: 2 } if key == "train.momentum"), "{err}");
        assert!(err.is_usage());
        assert!(RunConfig::from_kv("optimizer = adam").is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(RunConfig::from_kv("train.min_lr = 1").unwrap_err().is_usage());
        assert!(RunConfig::from_kv("train.lr = fast").unwrap_err().is_usage());
    }
}
