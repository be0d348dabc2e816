//! Engine configuration. Loadable from a TOML file; every field has a default
//! so sweeps only override what they vary.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};

/// Which training operator runs at the end of each batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainerKind {
    Sage,
    Gcn,
    /// Fixed-cost stand-in used for pipeline benchmarking.
    Synthetic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub seed: u64,

    // Sampling / model shape.
    pub fanouts: Vec<usize>,
    pub batch_size: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub train_fraction: f64,
    pub learning_rate: f32,

    // Cache tiers (bytes of feature payload).
    pub fast_tier_bytes: u64,
    pub slow_tier_feature_bytes: u64,
    /// Optional hard budget for the slow tier; must hold the topology plus
    /// `slow_tier_feature_bytes` when set.
    pub slow_tier_total_bytes: Option<u64>,

    // Device model.
    pub queue_depth: usize,
    pub device_latency_us: u64,
    pub device_parallelism: usize,

    // IO stack worker pools.
    pub submitter_workers: usize,
    pub completion_workers: usize,
    pub commands_per_worker: usize,

    // Pipeline.
    pub pipeline_depth: usize,
    pub pipeline_threads: usize,

    // Ablation modes.
    pub pipeline_enabled: bool,
    pub cache_enabled: bool,
    pub sync_io: bool,

    // Trainer.
    pub trainer: TrainerKind,
    pub synthetic_train_us: u64,

    pub epochs: usize,

    // Invariant audits (cross-checked every epoch when enabled).
    pub audit_commands: bool,
    pub audit_features: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            seed: 42,
            fanouts: vec![25, 10],
            batch_size: 8000,
            hidden_dim: 256,
            num_classes: 16,
            train_fraction: 0.01,
            learning_rate: 0.05,
            fast_tier_bytes: 64 << 20,
            slow_tier_feature_bytes: 256 << 20,
            slow_tier_total_bytes: None,
            queue_depth: 1024,
            device_latency_us: 1000,
            device_parallelism: 32,
            submitter_workers: 8,
            completion_workers: 2,
            commands_per_worker: 32,
            pipeline_depth: 2,
            pipeline_threads: 6,
            pipeline_enabled: true,
            cache_enabled: true,
            sync_io: false,
            trainer: TrainerKind::Sage,
            synthetic_train_us: 20_000,
            epochs: 1,
            audit_commands: false,
            audit_features: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fanouts.is_empty() {
            return Err(EngineError::Config("fanouts must be non-empty".into()));
        }
        if self.fanouts.iter().any(|&f| f == 0) {
            return Err(EngineError::Config("fanouts must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(EngineError::Config("batch_size must be positive".into()));
        }
        if !self.queue_depth.is_power_of_two() {
            return Err(EngineError::Config(format!(
                "queue_depth must be a power of two, got {}",
                self.queue_depth
            )));
        }
        if self.pipeline_depth == 0 {
            return Err(EngineError::Config("pipeline_depth must be >= 1".into()));
        }
        if self.submitter_workers == 0 || self.completion_workers == 0 {
            return Err(EngineError::Config("worker pools must be non-empty".into()));
        }
        if self.commands_per_worker == 0 {
            return Err(EngineError::Config("commands_per_worker must be >= 1".into()));
        }
        if self.device_parallelism == 0 || self.device_latency_us == 0 {
            return Err(EngineError::Config("device model parameters must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) || self.train_fraction == 0.0 {
            return Err(EngineError::Config("train_fraction must be in (0, 1]".into()));
        }
        if self.pipeline_threads == 0 {
            return Err(EngineError::Config("pipeline_threads must be >= 1".into()));
        }
        Ok(())
    }

    pub fn device_latency(&self) -> Duration {
        Duration::from_micros(self.device_latency_us)
    }

    pub fn hops(&self) -> usize {
        self.fanouts.len()
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EngineError::io(path, e))?;
        let cfg: EngineConfig =
            toml::from_str(&text).map_err(|e| EngineError::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        EngineConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_fields() {
        let mut cfg = EngineConfig::default();
        cfg.fanouts = vec![];
        assert!(cfg.validate().is_err());

        let mut cfg = EngineConfig::default();
        cfg.queue_depth = 1000;
        assert!(cfg.validate().is_err());

        let mut cfg = EngineConfig::default();
        cfg.pipeline_depth = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = EngineConfig::default();
        let text = cfg.to_toml();
        let back: EngineConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.fanouts, cfg.fanouts);
        assert_eq!(back.batch_size, cfg.batch_size);
        assert_eq!(back.trainer, cfg.trainer);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg: EngineConfig = toml::from_str("batch_size = 128\nfanouts = [5, 3]\n").unwrap();
        assert_eq!(cfg.batch_size, 128);
        assert_eq!(cfg.fanouts, vec![5, 3]);
        assert_eq!(cfg.queue_depth, EngineConfig::default().queue_depth);
    }
}
