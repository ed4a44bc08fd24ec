//! Run configuration: a flat JSON object. Missing keys take defaults,
//! unknown or repeated keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::AdaptConfig;
use crate::diversity::{DiversityMetric, DEFAULT_PAIRS};
use crate::encoder::PretrainConfig;
use crate::error::{Error, Result};
use crate::meta::{check_gamma, MetaConfig};
use crate::optim::OptimizerKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauName {
    /// Use the threshold stored next to the encoder by `calibrate`.
    Calibrate,
    /// Never split: one prompt for the whole dataset.
    Inf,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TauSetting {
    Value(f64),
    Named(TauName),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Set from the command line, never from the file.
    #[serde(skip)]
    pub seed: u64,

    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,

    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch_size: usize,
    pub feature_dim: usize,
    pub head_dim: usize,
    pub hflip: bool,

    pub epochs: usize,
    pub optimizer: OptimizerName,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub probe_size: usize,
    pub tau: TauSetting,
    pub tau_scale: f64,
    pub max_clusters: Option<usize>,
    pub init_std: f64,
    /// Force one prompt (the single-prompt baseline).
    pub single_prompt: bool,
    /// Logit count of the head; defaults to the dataset's class count.
    pub head_classes: Option<usize>,
    pub noise_count: usize,
    /// Seed of the noise images that pick active channels; shared by
    /// meta-training and adaptation, independent of the run seed.
    pub noise_seed: u64,

    pub eta: f64,
    pub gamma: f64,
    pub inner_steps: usize,
    pub meta_epochs: usize,
    pub meta_batch_size: usize,
    pub meta_adam: bool,

    pub pairs: usize,
    pub diversity_metric: DiversityMetric,
}

pub const DEFAULT_TAU_SCALE: f64 = 1.25;

impl Default for RunConfig {
    fn default() -> Self {
        let adapt = AdaptConfig::default();
        let meta = MetaConfig::default();
        let pre = PretrainConfig::default();
        RunConfig {
            seed: 0,
            train_fraction: 0.6,
            val_fraction: 0.2,
            test_fraction: 0.2,
            pretrain_epochs: pre.epochs,
            pretrain_lr: pre.lr,
            pretrain_batch_size: pre.batch_size,
            feature_dim: pre.feature_dim,
            head_dim: pre.head_dim,
            hflip: pre.hflip,
            epochs: adapt.epochs,
            optimizer: OptimizerName::Adam,
            lr: adapt.lr,
            weight_decay: adapt.weight_decay,
            warmup_epochs: adapt.warmup_epochs,
            batch_size: adapt.batch_size,
            probe_size: adapt.probe_size,
            tau: TauSetting::Named(TauName::Calibrate),
            tau_scale: DEFAULT_TAU_SCALE,
            max_clusters: None,
            init_std: adapt.init_std,
            single_prompt: false,
            head_classes: None,
            noise_count: meta.noise_count,
            noise_seed: meta.noise_seed,
            eta: meta.eta,
            gamma: meta.gamma,
            inner_steps: meta.inner_steps,
            meta_epochs: meta.meta_epochs,
            meta_batch_size: meta.group_batch,
            meta_adam: meta.use_adam,
            pairs: DEFAULT_PAIRS,
            diversity_metric: DiversityMetric::EncoderFeature,
        }
    }
}

impl RunConfig {
    /// Parse and validate. Blank input yields the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Ok(Self::default());
        }
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config {
            line: e.line(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        check_gamma(self.gamma)?;
        let f = [self.train_fraction, self.val_fraction, self.test_fraction];
        if f.iter().any(|v| !(*v >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Constraint(format!("split fractions {f:?} must be ≥ 0 and sum to 1")));
        }
        if let TauSetting::Value(t) = self.tau {
            if !(t > 0.0) {
                return Err(Error::Constraint(format!("tau must be > 0, got {t}")));
            }
        }
        if !(self.tau_scale > 0.0 && self.tau_scale.is_finite()) {
            return Err(Error::Constraint(format!("tau_scale must be positive, got {}", self.tau_scale)));
        }
        if self.pairs == 0 {
            return Err(Error::Constraint("pairs must be ≥ 1".into()));
        }
        if self.noise_count < 2 {
            return Err(Error::Constraint(format!("noise_count must be ≥ 2, got {}", self.noise_count)));
        }
        if self.pretrain_epochs == 0 || !(self.pretrain_lr > 0.0) || self.pretrain_batch_size == 0 {
            return Err(Error::Constraint("pretraining needs epochs ≥ 1, lr > 0 and batch ≥ 1".into()));
        }
        self.adapt_config(None).validate()?;
        self.meta_config(None).validate()
    }

    pub fn fractions(&self) -> (f64, f64, f64) {
        (self.train_fraction, self.val_fraction, self.test_fraction)
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerName::Adam => OptimizerKind::adam(),
            OptimizerName::Sgd => OptimizerKind::sgd_momentum(),
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            lr: self.pretrain_lr,
            batch_size: self.pretrain_batch_size,
            seed: self.seed,
            feature_dim: self.feature_dim,
            head_dim: self.head_dim,
            hflip: self.hflip,
        }
    }

    /// Adaptation settings with the threshold already resolved.
    pub fn adapt_config(&self, tau: Option<f64>) -> AdaptConfig {
        AdaptConfig {
            epochs: self.epochs,
            optimizer: self.optimizer_kind(),
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_epochs: self.warmup_epochs,
            batch_size: self.batch_size,
            probe_size: self.probe_size,
            tau: if self.single_prompt { None } else { tau },
            max_clusters: self.max_clusters,
            init_std: self.init_std,
            seed: self.seed,
        }
    }

    pub fn meta_config(&self, tau: Option<f64>) -> MetaConfig {
        MetaConfig {
            eta: self.eta,
            gamma: self.gamma,
            inner_steps: self.inner_steps,
            meta_epochs: self.meta_epochs,
            group_batch: self.meta_batch_size,
            use_adam: self.meta_adam,
            tau,
            max_clusters: self.max_clusters,
            probe_size: self.probe_size,
            noise_count: self.noise_count,
            noise_seed: self.noise_seed,
            seed: self.seed,
        }
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_means_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c.eta, 0.5);
        assert_eq!(c.gamma, 0.5);
        assert_eq!(c.inner_steps, 4);
        assert_eq!(c.probe_size, 1000);
        assert_eq!(c.warmup_epochs, 10);
        assert_eq!(c.pairs, 10_000);
        assert_eq!(RunConfig::parse("{}").unwrap(), c);
    }

    #[test]
    fn gamma_outside_unit_interval() {
        assert!(matches!(RunConfig::parse(r#"{"gamma": 1.5}"#), Err(Error::Constraint(_))));
        assert!(matches!(RunConfig::parse(r#"{"gamma": 0}"#), Err(Error::Constraint(_))));
    }

    #[test]
    fn duplicate_and_unknown_keys() {
        let dup = "{\n  \"eta\": 0.1,\n  \"eta\": 0.2\n}";
        match RunConfig::parse(dup) {
            Err(Error::Config { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("duplicate"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(RunConfig::parse(r#"{"etta": 0.1}"#), Err(Error::Config { .. })));
    }

    #[test]
    fn syntax_error_reports_line() {
        match RunConfig::parse("{\n\"lr\": 0.1,\n\"epochs\": ,\n}") {
            Err(Error::Config { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tau_forms() {
        assert_eq!(RunConfig::parse(r#"{"tau": 3.5}"#).unwrap().tau, TauSetting::Value(3.5));
        assert_eq!(RunConfig::parse(r#"{"tau": "inf"}"#).unwrap().tau, TauSetting::Named(TauName::Inf));
        assert!(RunConfig::parse(r#"{"tau": "sometimes"}"#).is_err());
        assert!(RunConfig::parse(r#"{"tau": -1}"#).is_err());
    }

    #[test]
    fn single_prompt_drops_threshold() {
        let c = RunConfig::parse(r#"{"single_prompt": true}"#).unwrap();
        assert_eq!(c.adapt_config(Some(2.0)).tau, None);
    }
}
