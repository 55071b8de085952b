//! Reconstruction-based window detector and the consecutive-window trigger.
//!
//! One VAE is trained over the healthy feature vectors of every pod (the pod
//! is identified by the one-hot part of each vector). Each pod gets its own
//! threshold from the training reconstruction errors, see [`ThresholdRule`].

mod trigger;
pub mod vae;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::telemetry::{FeatureMode, FeatureVector, NormStats, PodIndex, WindowSpec};
use crate::Timestamp;

pub use trigger::{alert_positions, thresholded_flags, AnomalyAlert, TriggerState};
pub use vae::{Vae, VaeConfig};

/// Settings captured at training time that every scored window must share.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigFingerprint {
    pub window: WindowSpec,
    pub mode: FeatureMode,
    pub scrape_interval: Timestamp,
}

impl std::fmt::Display for ConfigFingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{:?},scrape={}s", self.window, self.mode, self.scrape_interval)
    }
}

/// How per-pod thresholds are derived from training errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// The percentile of the pod's own training errors.
    PerPod,
    /// The pod's median training error times the percentile of every pod's
    /// errors divided by its own median. Each pod keeps its own scale while
    /// the tail, which a few hours of windows per pod pin down poorly, is
    /// estimated from all pods together.
    #[default]
    PooledTail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub vae: VaeConfig,
    /// Percentile of training errors used for the thresholds.
    pub percentile: f64,
    #[serde(default)]
    pub threshold_rule: ThresholdRule,
    pub min_train_windows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            vae: VaeConfig::default(),
            percentile: 99.5,
            threshold_rule: ThresholdRule::default(),
            min_train_windows: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub fingerprint: ConfigFingerprint,
    pub pods: PodIndex,
    pub norm_stats: NormStats,
    pub vae: Vae,
    pub thresholds: BTreeMap<String, f64>,
    pub percentile: f64,
    /// Mean reconstruction error over the whole training set.
    pub train_error_mean: f64,
}

impl DetectorModel {
    /// Train on healthy feature vectors grouped by pod.
    pub fn train(
        healthy: &BTreeMap<String, Vec<FeatureVector>>,
        norm_stats: NormStats,
        fingerprint: ConfigFingerprint,
        cfg: &TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut dim = None;
        for (pod, feats) in healthy {
            if feats.len() < cfg.min_train_windows {
                return Err(Error::TooFewWindows {
                    pod: pod.clone(),
                    have: feats.len(),
                    need: cfg.min_train_windows,
                });
            }
            for f in feats {
                let expected = *dim.get_or_insert(f.dim());
                if f.dim() != expected {
                    return Err(Error::DimensionMismatch {
                        expected,
                        actual: f.dim(),
                    });
                }
            }
        }
        if dim.is_none() {
            return Err(Error::Empty("healthy training features"));
        }

        // Fixed pod-then-time order so the seed alone determines the model.
        let data: Vec<Vec<f64>> = healthy.values().flatten().map(FeatureVector::to_vec).collect();
        let (vae, _) = Vae::fit(&data, &cfg.vae, seed)?;

        let errors: BTreeMap<&String, Vec<f64>> = healthy
            .iter()
            .map(|(pod, feats)| (pod, feats.iter().map(|f| vae.reconstruction_error(&f.to_vec())).collect()))
            .collect();
        let train_error_mean = errors.values().flatten().sum::<f64>() / data.len() as f64;
        let thresholds = thresholds_for(&errors, cfg.percentile, cfg.threshold_rule)?;
        let min_threshold = thresholds.values().copied().fold(f64::INFINITY, f64::min);
        if train_error_mean >= min_threshold {
            warn!(train_error_mean, min_threshold, "mean training error is not below every pod threshold");
        }

        Ok(Self {
            fingerprint,
            pods: PodIndex::new(healthy.keys().cloned()),
            norm_stats,
            vae,
            thresholds,
            percentile: cfg.percentile,
            train_error_mean,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.vae.input_dim()
    }

    pub fn check_fingerprint(&self, requested: &ConfigFingerprint) -> Result<()> {
        if &self.fingerprint != requested {
            return Err(Error::FingerprintMismatch {
                model: self.fingerprint.to_string(),
                request: requested.to_string(),
            });
        }
        Ok(())
    }

    /// Mean squared reconstruction error through the latent posterior mean.
    pub fn score(&self, feature: &FeatureVector) -> Result<f64> {
        if feature.dim() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: feature.dim(),
            });
        }
        Ok(self.vae.reconstruction_error(&feature.to_vec()))
    }

    pub fn score_batch(&self, features: &[FeatureVector], exec: ExecMode) -> Result<Vec<f64>> {
        exec.map(features, |f| self.score(f)).into_iter().collect()
    }

    pub fn threshold(&self, pod: &str) -> Result<f64> {
        self.thresholds
            .get(pod)
            .copied()
            .ok_or_else(|| Error::UnknownPod(pod.to_string()))
    }

    /// `score > threshold[pod]`, strictly.
    pub fn detect(&self, feature: &FeatureVector, pod: &str) -> Result<bool> {
        let threshold = self.threshold(pod)?;
        Ok(exceeds(self.score(feature)?, threshold))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn thresholds_for(
    errors: &BTreeMap<&String, Vec<f64>>,
    percentile: f64,
    rule: ThresholdRule,
) -> Result<BTreeMap<String, f64>> {
    match rule {
        ThresholdRule::PerPod => errors
            .iter()
            .map(|(pod, e)| Ok(((*pod).clone(), compute_threshold(e, percentile)?)))
            .collect(),
        ThresholdRule::PooledTail => {
            let mut scales = BTreeMap::new();
            let mut pooled = Vec::new();
            for (pod, e) in errors {
                let median = compute_threshold(e, 50.0)?;
                // An all-zero pod reconstructs perfectly; keep its ratios finite.
                let scale = if median > 0.0 { median } else { 1.0 };
                pooled.extend(e.iter().map(|v| v / scale));
                scales.insert((*pod).clone(), (median, scale));
            }
            let q = compute_threshold(&pooled, percentile)?;
            Ok(scales
                .into_iter()
                .map(|(pod, (median, scale))| (pod, if median > 0.0 { q * scale } else { 0.0 }))
                .collect())
        }
    }
}

pub fn exceeds(score: f64, threshold: f64) -> bool {
    score > threshold
}

/// Percentile of `errors` by linear interpolation between order statistics
/// (rank `p/100 * (n-1)`).
pub fn compute_threshold(errors: &[f64], percentile: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Empty("training errors"));
    }
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::Config(format!("percentile {percentile} outside (0, 100]")));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = percentile / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::MetricNorm;

    #[test]
    fn threshold_examples() {
        assert_eq!(compute_threshold(&[1.0, 2.0, 3.0, 4.0, 5.0], 100.0).unwrap(), 5.0);
        for p in [0.5, 50.0, 99.5, 100.0] {
            assert_eq!(compute_threshold(&[0.25; 9], p).unwrap(), 0.25);
        }
        // rank = 0.995 * 99 = 98.505 -> 98 + 0.505 * (99 - 98)
        let errors: Vec<f64> = (0..100).map(f64::from).collect();
        assert!((compute_threshold(&errors, 99.5).unwrap() - 98.505).abs() < 1e-12);
        assert!(matches!(compute_threshold(&[], 99.5), Err(Error::Empty(_))));
    }

    #[test]
    fn boundary_is_strict() {
        assert!(!exceeds(0.5, 0.5));
        assert!(exceeds(0.5 + 1e-12, 0.5));
        assert!(!exceeds(0.0, 1e-9));
    }

    fn fv(pod: usize, n_pods: usize, stats: Vec<f64>) -> FeatureVector {
        let mut onehot = vec![0.0; n_pods];
        onehot[pod] = 1.0;
        FeatureVector { pod_onehot: onehot, stats }
    }

    fn toy_training(n: usize) -> BTreeMap<String, Vec<FeatureVector>> {
        let mut out = BTreeMap::new();
        out.insert("a".to_string(), (0..n).map(|_| fv(0, 2, vec![0.0; 4])).collect());
        out.insert(
            "b".to_string(),
            (0..n)
                .map(|k| {
                    let t = k as f64 * 0.3;
                    fv(1, 2, vec![t.sin(), 0.5 * t.cos(), -1.0 + 0.1 * t.sin(), 1.0])
                })
                .collect(),
        );
        out
    }

    fn toy_fingerprint() -> ConfigFingerprint {
        ConfigFingerprint {
            window: WindowSpec::new(600, 300),
            mode: FeatureMode::Summary,
            scrape_interval: 30,
        }
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            vae: VaeConfig {
                epochs: 40,
                ..VaeConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn norm() -> NormStats {
        NormStats::from_metrics([("m".to_string(), MetricNorm { mean: 0.0, std: 1.0 })].into())
    }

    #[test]
    fn training_is_deterministic_and_zero_pod_is_learned() {
        let data = toy_training(60);
        let a = DetectorModel::train(&data, norm(), toy_fingerprint(), &small_cfg(), 11).unwrap();
        let b = DetectorModel::train(&data, norm(), toy_fingerprint(), &small_cfg(), 11).unwrap();
        for (pod, t) in &a.thresholds {
            assert_eq!(t.to_bits(), b.thresholds[pod].to_bits());
        }
        assert!(a.thresholds["a"] >= 0.0);
        let zero_err = a.score(&data["a"][0]).unwrap();
        assert!(zero_err < 0.05, "zero-vector pod error {zero_err}");
    }

    #[test]
    fn too_few_windows_names_pod() {
        let data = toy_training(10);
        match DetectorModel::train(&data, norm(), toy_fingerprint(), &small_cfg(), 1) {
            Err(Error::TooFewWindows { pod, have: 10, need: 50 }) => assert_eq!(pod, "a"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn scoring_rules() {
        let data = toy_training(60);
        let model = DetectorModel::train(&data, norm(), toy_fingerprint(), &small_cfg(), 5).unwrap();
        let f = &data["b"][3];
        let s1 = model.score(f).unwrap();
        assert!(s1 >= 0.0);
        assert_eq!(s1.to_bits(), model.score(f).unwrap().to_bits());
        assert!(matches!(
            model.score(&fv(0, 2, vec![0.0; 3])),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(model.detect(f, "zzz"), Err(Error::UnknownPod(_))));

        let restored = DetectorModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(restored, model);
        for feats in data.values() {
            for f in feats {
                assert_eq!(model.score(f).unwrap().to_bits(), restored.score(f).unwrap().to_bits());
            }
        }
        let batch = model.score_batch(&data["b"], ExecMode::Parallel).unwrap();
        let serial = model.score_batch(&data["b"], ExecMode::Sequential).unwrap();
        assert_eq!(batch, serial);
    }

    #[test]
    fn fingerprint_mismatch_is_rejected() {
        let data = toy_training(60);
        let model = DetectorModel::train(&data, norm(), toy_fingerprint(), &small_cfg(), 5).unwrap();
        let mut other = toy_fingerprint();
        other.window = WindowSpec::new(300, 60);
        assert!(matches!(
            model.check_fingerprint(&other),
            Err(Error::FingerprintMismatch { .. })
        ));
        model.check_fingerprint(&toy_fingerprint()).unwrap();
    }

    #[test]
    fn pooled_tail_scales_with_each_pod_median() {
        let base: Vec<f64> = (1..=200).map(|i| i as f64).collect();
        let (a, b) = ("a".to_string(), "b".to_string());
        let errors: BTreeMap<&String, Vec<f64>> =
            [(&a, base.clone()), (&b, base.iter().map(|v| v * 10.0).collect())].into();
        let pooled = thresholds_for(&errors, 99.5, ThresholdRule::PooledTail).unwrap();
        let own = thresholds_for(&errors, 99.5, ThresholdRule::PerPod).unwrap();
        assert!((pooled["b"] / pooled["a"] - 10.0).abs() < 1e-9);
        assert!((pooled["a"] - own["a"]).abs() < 1e-9);
        assert_eq!(own["b"], compute_threshold(&errors[&b], 99.5).unwrap());
    }
}
