//! Pipeline configuration: a flat `key = value` TOML file plus overrides.
//!
//! ```toml
//! window_s = 600
//! stride_s = 300
//! tau = 2
//! alpha = 0.01
//! seed = 42
//! metrics = "run/metrics.jsonl"
//! ```
//!
//! Every key is optional. Overrides use the same keys (`tau=1`) and are
//! parsed with TOML value syntax, falling back to a bare string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::{ConfigFingerprint, ThresholdRule, TrainConfig, VaeConfig};
use crate::error::{Error, Result};
use crate::telemetry::{FeatureMode, NormScope, WindowSpec, DEFAULT_SCRAPE_INTERVAL};
use crate::Timestamp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub window_s: Timestamp,
    pub stride_s: Timestamp,
    pub tau: usize,
    pub alpha: f64,
    pub scrape_interval: Timestamp,
    /// Impact pre-period length; `10 * window_s` when unset.
    pub pre_len_s: Option<Timestamp>,
    /// How far before the alert installs are collected; `max(6W, 1h)` when unset.
    pub install_lookback_s: Option<Timestamp>,
    pub graph_lookback_s: Timestamp,
    /// Stride used to cut training windows; the scrape interval when unset.
    pub train_stride_s: Option<Timestamp>,
    pub n_draws: usize,
    pub seed: u64,

    pub norm_scope: NormScope,
    pub feature_mode: FeatureMode,
    pub percentile: f64,
    pub threshold_rule: ThresholdRule,
    pub min_train_windows: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,

    pub metrics: Option<PathBuf>,
    pub spans: Option<PathBuf>,
    pub installs: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            window_s: 600,
            stride_s: 300,
            tau: 2,
            alpha: crate::impact::DEFAULT_ALPHA,
            scrape_interval: DEFAULT_SCRAPE_INTERVAL,
            pre_len_s: None,
            install_lookback_s: None,
            graph_lookback_s: 1800,
            train_stride_s: None,
            n_draws: crate::impact::DEFAULT_DRAWS,
            seed: 0,
            norm_scope: NormScope::default(),
            feature_mode: FeatureMode::default(),
            percentile: train.percentile,
            threshold_rule: train.threshold_rule,
            min_train_windows: train.min_train_windows,
            hidden: train.vae.hidden,
            latent_dim: train.vae.latent_dim,
            beta: train.vae.beta,
            epochs: train.vae.epochs,
            batch_size: train.vae.batch_size,
            learning_rate: train.vae.learning_rate,
            momentum: train.vae.momentum,
            metrics: None,
            spans: None,
            installs: None,
            truth: None,
            model: None,
            out: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Apply `key=value` overrides in order, then validate.
    pub fn with_overrides<S: AsRef<str>>(self, overrides: &[S]) -> Result<Self> {
        let mut table = toml::Table::try_from(&self).map_err(|e| Error::Config(e.to_string()))?;
        for ov in overrides {
            let ov = ov.as_ref();
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
            let (key, raw) = (key.trim(), raw.trim());
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            table.insert(key.to_string(), value);
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scrape_interval <= 0 {
            return Err(Error::Config("scrape_interval must be positive".into()));
        }
        self.window().validate(self.scrape_interval)?;
        self.train_window().validate(self.scrape_interval)?;
        if self.tau < 1 {
            return Err(Error::Config("tau must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return Err(Error::Config(format!("percentile {} outside (0, 100]", self.percentile)));
        }
        if self.n_draws == 0 {
            return Err(Error::Config("n_draws must be positive".into()));
        }
        Ok(())
    }

    pub fn window(&self) -> WindowSpec {
        WindowSpec::new(self.window_s, self.stride_s)
    }

    pub fn train_window(&self) -> WindowSpec {
        WindowSpec::new(self.window_s, self.train_stride_s.unwrap_or(self.scrape_interval))
    }

    pub fn fingerprint(&self) -> ConfigFingerprint {
        ConfigFingerprint {
            window: self.window(),
            mode: self.feature_mode,
            scrape_interval: self.scrape_interval,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            vae: VaeConfig {
                hidden: self.hidden,
                latent_dim: self.latent_dim,
                beta: self.beta,
                epochs: self.epochs,
                batch_size: self.batch_size,
                learning_rate: self.learning_rate,
                momentum: self.momentum,
            },
            percentile: self.percentile,
            threshold_rule: self.threshold_rule,
            min_train_windows: self.min_train_windows,
        }
    }

    pub fn pre_len(&self) -> Timestamp {
        self.pre_len_s.unwrap_or(10 * self.window_s)
    }

    pub fn install_lookback(&self) -> Timestamp {
        self.install_lookback_s.unwrap_or((6 * self.window_s).max(3600))
    }

    /// Path for `key`, or an error naming the missing key.
    pub fn path(&self, key: &str) -> Result<&Path> {
        let p = match key {
            "metrics" => &self.metrics,
            "spans" => &self.spans,
            "installs" => &self.installs,
            "truth" => &self.truth,
            "model" => &self.model,
            "out" => &self.out,
            _ => return Err(Error::Config(format!("unknown path key `{key}`"))),
        };
        p.as_deref()
            .ok_or_else(|| Error::Config(format!("no `{key}` path configured")))
    }
}
