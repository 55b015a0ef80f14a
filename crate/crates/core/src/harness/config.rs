//! Run configuration, read from TOML.
//!
//! ```toml
//! seed = 0
//! dtype = "f32"            # or "f64"
//!
//! [model]
//! stage_widths = [16, 32, 64, 128]
//! mism_stages = [2, 3, 4]
//! [model.mism]
//! use_vssb = true
//! [model.mism.vss]
//! d_state = 16
//!
//! [loss]
//! fr_weight = 5.0
//!
//! [data]
//! synthetic_count = 4      # ignored when `dir` is set
//! extent = 32
//!
//! [train]
//! steps = 300
//! patch = [32, 32, 32]
//! [train.optimizer]
//! lr = 1e-4
//! ```
//!
//! Every section and key is optional; unknown keys are rejected.

use super::optim::AdamWConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::network::NetworkConfig;
use crate::tensor::DType;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory of saved volumes; when absent, synthetic volumes are generated from the run seed.
    pub dir: Option<PathBuf>,
    pub synthetic_count: usize,
    pub extent: usize,
    pub difficulty: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            synthetic_count: 4,
            extent: 32,
            difficulty: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub patch: [usize; 3],
    /// Probability of centring a patch on foreground.
    pub fg_bias: f64,
    pub optimizer: AdamWConfig,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            batch_size: 2,
            patch: [32; 3],
            fg_bias: 0.5,
            optimizer: AdamWConfig::default(),
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dtype: DType,
    pub model: NetworkConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dtype: DType::F32,
            model: NetworkConfig::reference(),
            loss: LossConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| match e {
            Error::Config { field, reason } => Error::config(format!("model.{field}"), reason),
            other => other,
        })?;
        self.loss.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        let m = self.model.size_multiple();
        if t.patch.iter().any(|&p| p == 0 || p % m != 0) {
            return Err(Error::config("train.patch", format!("extents must be positive multiples of {m}")));
        }
        if !(0.0..=1.0).contains(&t.fg_bias) {
            return Err(Error::config("train.fg_bias", "must lie in [0, 1]"));
        }
        let o = &t.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::config("train.optimizer.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("train.optimizer.beta1", "betas must lie in [0, 1)"));
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return Err(Error::config("train.optimizer.eps", "eps must be positive and weight_decay non-negative"));
        }
        if self.data.dir.is_none() {
            if self.data.synthetic_count == 0 {
                return Err(Error::config("data.synthetic_count", "must be at least 1"));
            }
            if t.patch.iter().any(|&p| p > self.data.extent) {
                return Err(Error::config("data.extent", "smaller than the training patch"));
            }
            if !self.data.extent.is_multiple_of(m) {
                return Err(Error::config("data.extent", format!("must be a multiple of {m}")));
            }
        }
        Ok(())
    }
}

/// Values taken from `HCMA_SEED` and `HCMA_THREADS`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EnvOverrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

impl EnvOverrides {
    pub fn from_env() -> Result<Self> {
        Self::parse(std::env::var("HCMA_SEED").ok().as_deref(), std::env::var("HCMA_THREADS").ok().as_deref())
    }

    pub fn parse(seed: Option<&str>, threads: Option<&str>) -> Result<Self> {
        let seed = seed
            .map(|s| s.trim().parse::<u64>().map_err(|_| Error::config("HCMA_SEED", format!("`{s}` is not an unsigned integer"))))
            .transpose()?;
        let threads = threads
            .map(|s| match s.trim().parse::<usize>() {
                Ok(n) if n > 0 => Ok(n),
                _ => Err(Error::config("HCMA_THREADS", format!("`{s}` is not a positive integer"))),
            })
            .transpose()?;
        Ok(EnvOverrides { seed, threads })
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn roundtrips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("[train]\nstepz = 3\n").unwrap_err();
        assert!(err.to_string().contains("stepz"), "{err}");
    }

    #[test]
    fn invalid_fields_are_named() {
        let cfg = RunConfig::from_toml("[model]\nstage_widths = [16, 6, 64, 128]\n").unwrap();
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "model.stage_widths[1]"),
            other => panic!("{other:?}"),
        }
        let cfg = RunConfig::from_toml("[train]\npatch = [30, 32, 32]\n").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "train.patch"));
    }

    #[test]
    fn environment_overrides() {
        let env = EnvOverrides::parse(Some("42"), Some("4")).unwrap();
        let mut cfg = RunConfig::default();
        env.apply(&mut cfg);
        assert_eq!((cfg.seed, env.threads), (42, Some(4)));
        assert!(EnvOverrides::parse(Some("x"), None).is_err());
        assert!(EnvOverrides::parse(None, Some("0")).is_err());
    }
}
