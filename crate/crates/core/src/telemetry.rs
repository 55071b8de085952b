//! Per-pod metric storage, sliding windows and feature vectors.
//!
//! Samples arrive as line-delimited JSON records (`pod`, `metric`, `ts`,
//! `value`) on a fixed scrape grid. A [`MetricStore`] keeps one time-ordered
//! series per (pod, metric); [`make_windows`] cuts a pod's series into
//! `(W, S)` windows and [`featurize`] turns a window into the vector the
//! detector scores.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::Timestamp;

pub const DEFAULT_SCRAPE_INTERVAL: Timestamp = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub pod: String,
    pub metric: String,
    pub ts: Timestamp,
    pub value: f64,
}

impl MetricSample {
    pub fn new(pod: impl Into<String>, metric: impl Into<String>, ts: Timestamp, value: f64) -> Self {
        Self {
            pod: pod.into(),
            metric: metric.into(),
            ts,
            value,
        }
    }
}

/// Time-ordered samples of one metric on one pod. Missing scrapes are simply
/// absent keys; nothing is interpolated.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricSeries {
    pub pod: String,
    pub metric: String,
    samples: BTreeMap<Timestamp, f64>,
}

impl MetricSeries {
    pub fn new(pod: impl Into<String>, metric: impl Into<String>) -> Self {
        Self {
            pod: pod.into(),
            metric: metric.into(),
            samples: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, ts: Timestamp) -> Option<f64> {
        self.samples.get(&ts).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Timestamp, f64)> + '_ {
        self.samples.iter().map(|(t, v)| (*t, *v))
    }

    /// Samples with `t0 <= ts <= t1`.
    pub fn range(&self, t0: Timestamp, t1: Timestamp) -> impl Iterator<Item = (Timestamp, f64)> + '_ {
        self.samples.range(t0..=t1).map(|(t, v)| (*t, *v))
    }

    /// The values at `start, start+step, ...` (`count` of them), or `None` if
    /// any scrape in that grid is missing.
    pub fn grid_values(&self, start: Timestamp, step: Timestamp, count: usize) -> Option<Vec<f64>> {
        (0..count as Timestamp)
            .map(|k| self.get(start + k * step))
            .collect()
    }

    fn insert(&mut self, ts: Timestamp, value: f64) -> Option<f64> {
        self.samples.insert(ts, value)
    }
}

#[derive(Debug, Default)]
pub struct IngestReport {
    pub accepted: usize,
    pub overwritten: usize,
    pub rejected: Vec<Error>,
}

/// One series per (pod, metric). Single writer; wrap in a lock to share with
/// concurrent readers.
#[derive(Debug, Clone)]
pub struct MetricStore {
    scrape_interval: Timestamp,
    series: BTreeMap<(String, String), MetricSeries>,
}

impl Default for MetricStore {
    fn default() -> Self {
        Self::new(DEFAULT_SCRAPE_INTERVAL)
    }
}

impl MetricStore {
    pub fn new(scrape_interval: Timestamp) -> Self {
        assert!(scrape_interval > 0, "scrape interval must be positive");
        Self {
            scrape_interval,
            series: BTreeMap::new(),
        }
    }

    pub fn scrape_interval(&self) -> Timestamp {
        self.scrape_interval
    }

    fn validate(&self, s: &MetricSample) -> Result<()> {
        let reject = |reason: &str| Error::InvalidSample {
            pod: s.pod.clone(),
            metric: s.metric.clone(),
            ts: s.ts,
            reason: reason.to_string(),
        };
        if !s.value.is_finite() {
            return Err(reject("non-finite value"));
        }
        if s.ts.rem_euclid(self.scrape_interval) != 0 {
            return Err(reject("timestamp off the scrape grid"));
        }
        Ok(())
    }

    /// Insert samples. Invalid records are rejected individually and leave
    /// the store untouched; a repeated (pod, metric, ts) keeps the last value.
    pub fn ingest<I>(&mut self, records: I) -> IngestReport
    where
        I: IntoIterator<Item = MetricSample>,
    {
        let mut report = IngestReport::default();
        for s in records {
            if let Err(e) = self.validate(&s) {
                report.rejected.push(e);
                continue;
            }
            let series = self
                .series
                .entry((s.pod.clone(), s.metric.clone()))
                .or_insert_with(|| MetricSeries::new(&s.pod, &s.metric));
            if series.insert(s.ts, s.value).is_some() {
                warn!(pod = %s.pod, metric = %s.metric, ts = s.ts, "duplicate sample, keeping last value");
                report.overwritten += 1;
            }
            report.accepted += 1;
        }
        report
    }

    pub fn series(&self, pod: &str, metric: &str) -> Option<&MetricSeries> {
        self.series.get(&(pod.to_string(), metric.to_string()))
    }

    pub fn pods(&self) -> Vec<String> {
        let mut pods: Vec<String> = self.series.keys().map(|(p, _)| p.clone()).collect();
        pods.dedup();
        pods
    }

    pub fn metrics(&self) -> Vec<String> {
        let mut metrics: Vec<String> = self.series.keys().map(|(_, m)| m.clone()).collect();
        metrics.sort();
        metrics.dedup();
        metrics
    }

    pub fn metrics_for(&self, pod: &str) -> Vec<String> {
        self.series
            .keys()
            .filter(|(p, _)| p == pod)
            .map(|(_, m)| m.clone())
            .collect()
    }

    /// Earliest and latest timestamp across all series.
    pub fn time_span(&self) -> Option<(Timestamp, Timestamp)> {
        let first = self.series.values().filter_map(|s| s.samples.keys().next()).min()?;
        let last = self.series.values().filter_map(|s| s.samples.keys().next_back()).max()?;
        Some((*first, *last))
    }

    pub fn len(&self) -> usize {
        self.series.values().map(MetricSeries::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Read line-delimited sample records. Blank lines are skipped.
pub fn read_samples<R: BufRead>(reader: R) -> Result<Vec<MetricSample>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: MetricSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_samples<W: Write>(mut w: W, samples: &[MetricSample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Window duration `W` and stride `S`, both in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WindowSpec {
    pub duration_s: Timestamp,
    pub stride_s: Timestamp,
}

impl WindowSpec {
    pub const fn new(duration_s: Timestamp, stride_s: Timestamp) -> Self {
        Self { duration_s, stride_s }
    }

    pub fn validate(&self, scrape_interval: Timestamp) -> Result<()> {
        for (name, v) in [("window duration", self.duration_s), ("window stride", self.stride_s)] {
            if v <= 0 || v % scrape_interval != 0 {
                return Err(Error::Config(format!(
                    "{name} {v}s is not a positive multiple of the {scrape_interval}s scrape interval"
                )));
            }
        }
        Ok(())
    }

    /// Number of window starts in `[t0, t1)`.
    pub fn count(&self, t0: Timestamp, t1: Timestamp) -> usize {
        let span = t1 - t0;
        if span < self.duration_s {
            0
        } else {
            ((span - self.duration_s) / self.stride_s + 1) as usize
        }
    }

    pub fn samples_per_window(&self, scrape_interval: Timestamp) -> usize {
        (self.duration_s / scrape_interval) as usize
    }
}

impl std::fmt::Display for WindowSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "W={}s,S={}s", self.duration_s, self.stride_s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub pod: String,
    pub start: Timestamp,
    pub duration_s: Timestamp,
    pub stride_s: Timestamp,
    pub samples_by_metric: BTreeMap<String, Vec<f64>>,
}

impl Window {
    pub fn end(&self) -> Timestamp {
        self.start + self.duration_s
    }
}

#[derive(Debug, Clone, Default)]
pub struct WindowBatch {
    pub windows: Vec<Window>,
    /// Window starts skipped because some scrape inside them was missing.
    pub dropped: Vec<Timestamp>,
}

/// Cut one pod's series into windows starting at `t0, t0+S, ...` with
/// `start + W <= t1`.
pub fn make_windows(
    store: &MetricStore,
    pod: &str,
    spec: WindowSpec,
    t0: Timestamp,
    t1: Timestamp,
) -> Result<WindowBatch> {
    let scrape = store.scrape_interval();
    spec.validate(scrape)?;
    let metrics = store.metrics_for(pod);
    if metrics.is_empty() {
        return Err(Error::UnknownPod(pod.to_string()));
    }
    let n = spec.samples_per_window(scrape);
    let mut batch = WindowBatch::default();
    for k in 0..spec.count(t0, t1) {
        let start = t0 + k as Timestamp * spec.stride_s;
        let mut samples_by_metric = BTreeMap::new();
        let mut complete = true;
        for m in &metrics {
            match store.series(pod, m).and_then(|s| s.grid_values(start, scrape, n)) {
                Some(v) => {
                    samples_by_metric.insert(m.clone(), v);
                }
                None => {
                    complete = false;
                    break;
                }
            }
        }
        if complete {
            batch.windows.push(Window {
                pod: pod.to_string(),
                start,
                duration_s: spec.duration_s,
                stride_s: spec.stride_s,
                samples_by_metric,
            });
        } else {
            batch.dropped.push(start);
        }
    }
    if !batch.dropped.is_empty() {
        warn!(pod, dropped = batch.dropped.len(), "windows dropped for missing samples");
    }
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricNorm {
    pub mean: f64,
    pub std: f64,
}

impl MetricNorm {
    pub fn fit(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }

    /// z-score with the constant-metric guard (`std == 0` divides by 1).
    pub fn z(&self, v: f64) -> f64 {
        let d = if self.std > 0.0 { self.std } else { 1.0 };
        (v - self.mean) / d
    }
}

/// Where normalization statistics are pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// One (mean, std) per metric, pooled over every training pod.
    Global,
    /// One (mean, std) per (pod, metric).
    #[default]
    PerPod,
}

/// Training-set normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub scope: NormScope,
    pub metrics: BTreeMap<String, MetricNorm>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_pod: BTreeMap<String, BTreeMap<String, MetricNorm>>,
}

impl NormStats {
    pub fn from_metrics(metrics: BTreeMap<String, MetricNorm>) -> Self {
        Self {
            scope: NormScope::Global,
            metrics,
            per_pod: BTreeMap::new(),
        }
    }

    /// Fit on the raw samples of `pods` with `t0 <= ts < t1`.
    pub fn fit(store: &MetricStore, pods: &[String], t0: Timestamp, t1: Timestamp, scope: NormScope) -> Self {
        let mut pooled: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut per_pod = BTreeMap::new();
        for pod in pods {
            let mut mine = BTreeMap::new();
            for m in store.metrics_for(pod) {
                let values: Vec<f64> = store
                    .series(pod, &m)
                    .map(|s| s.range(t0, t1 - 1).map(|(_, v)| v).collect())
                    .unwrap_or_default();
                if scope == NormScope::PerPod {
                    mine.insert(m.clone(), MetricNorm::fit(&values));
                }
                pooled.entry(m).or_default().extend(values);
            }
            if scope == NormScope::PerPod {
                per_pod.insert(pod.clone(), mine);
            }
        }
        Self {
            scope,
            metrics: pooled.into_iter().map(|(m, v)| (m, MetricNorm::fit(&v))).collect(),
            per_pod,
        }
    }

    pub fn get(&self, pod: &str, metric: &str) -> Option<&MetricNorm> {
        match self.scope {
            NormScope::Global => self.metrics.get(metric),
            NormScope::PerPod => self.per_pod.get(pod).and_then(|m| m.get(metric)),
        }
    }

    pub fn metric_names(&self) -> impl Iterator<Item = &String> {
        self.metrics.keys()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Per-metric (mean, std, min, max) of the z-scored window.
    #[default]
    Summary,
    /// Every z-scored sample of every metric, in metric then time order.
    RawFlatten,
}

impl FeatureMode {
    pub fn dim(self, n_pods: usize, n_metrics: usize, samples_per_window: usize) -> usize {
        match self {
            FeatureMode::Summary => n_pods + 4 * n_metrics,
            FeatureMode::RawFlatten => n_pods + samples_per_window * n_metrics,
        }
    }
}

/// Dense index of the pods known at training time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PodIndex(BTreeMap<String, usize>);

impl PodIndex {
    pub fn new<I, S>(pods: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut names: Vec<String> = pods.into_iter().map(Into::into).collect();
        names.sort();
        names.dedup();
        Self(names.into_iter().enumerate().map(|(i, p)| (p, i)).collect())
    }

    pub fn get(&self, pod: &str) -> Option<usize> {
        self.0.get(pod).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn pods(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub pod_onehot: Vec<f64>,
    pub stats: Vec<f64>,
}

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.pod_onehot.len() + self.stats.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.pod_onehot);
        v.extend_from_slice(&self.stats);
        v
    }
}

pub fn featurize(window: &Window, norm: &NormStats, pods: &PodIndex, mode: FeatureMode) -> Result<FeatureVector> {
    let idx = pods
        .get(&window.pod)
        .ok_or_else(|| Error::UnknownPod(window.pod.clone()))?;
    for m in window.samples_by_metric.keys() {
        if norm.get(&window.pod, m).is_none() {
            return Err(Error::UnknownMetric(m.clone()));
        }
    }
    let mut pod_onehot = vec![0.0; pods.len()];
    pod_onehot[idx] = 1.0;

    let mut stats = Vec::new();
    for m in norm.metric_names() {
        let values = window.samples_by_metric.get(m).ok_or_else(|| {
            Error::Config(format!("window for pod `{}` lacks metric `{m}`", window.pod))
        })?;
        let stat = norm
            .get(&window.pod, m)
            .ok_or_else(|| Error::UnknownMetric(m.clone()))?;
        let z: Vec<f64> = values.iter().map(|&v| stat.z(v)).collect();
        match mode {
            FeatureMode::Summary => {
                let (mean, std) = mean_std(&z);
                let min = z.iter().copied().fold(f64::INFINITY, f64::min);
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                stats.extend_from_slice(&[mean, std, min, max]);
            }
            FeatureMode::RawFlatten => stats.extend_from_slice(&z),
        }
    }
    Ok(FeatureVector { pod_onehot, stats })
}

/// Mean and population standard deviation. Empty input gives (0, 0).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
