//! End-to-end flow: train on healthy telemetry, stream windows through the
//! detector and trigger, and on the first alert attribute it to an install.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufReader;

use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::config::PipelineConfig;
use crate::detector::{exceeds, AnomalyAlert, DetectorModel, TriggerState};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::graph::{build_graph, read_spans, Span};
use crate::impact::{estimate_impact, select_root_cause, ImpactQuery, ImpactResult, MIN_PERIOD_SAMPLES};
use crate::sbom::{InstallEvent, SbomStore};
use crate::simulator::service_of;
use crate::telemetry::{
    featurize, make_windows, read_samples, FeatureMode, FeatureVector, MetricStore, NormStats, PodIndex, WindowSpec,
};
use crate::Timestamp;

/// Parsed input files.
#[derive(Debug)]
pub struct Inputs {
    pub store: MetricStore,
    pub spans: Vec<Span>,
    pub installs: SbomStore,
}

impl Inputs {
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let mut store = MetricStore::new(cfg.scrape_interval);
        let report = store.ingest(read_samples(BufReader::new(File::open(cfg.path("metrics")?)?))?);
        if !report.rejected.is_empty() {
            warn!(rejected = report.rejected.len(), "metric samples rejected");
        }
        let spans = read_spans(BufReader::new(File::open(cfg.path("spans")?)?))?;
        let installs = SbomStore::from_lines(&std::fs::read_to_string(cfg.path("installs")?)?)?;
        Ok(Self { store, spans, installs })
    }
}

fn pod_features(
    store: &MetricStore,
    norm: &NormStats,
    pods: &PodIndex,
    pod: &str,
    spec: WindowSpec,
    mode: FeatureMode,
    t0: Timestamp,
    t1: Timestamp,
) -> Result<Vec<(Timestamp, FeatureVector)>> {
    make_windows(store, pod, spec, t0, t1)?
        .windows
        .iter()
        .map(|w| Ok((w.start, featurize(w, norm, pods, mode)?)))
        .collect()
}

/// Fit normalization and the detector on `[t0, t1)` of a healthy store.
/// Training windows are cut at `train_window()`, by default one per scrape,
/// so each pod's threshold percentile is estimated from every window
/// position rather than only the detection stride's.
pub fn train_detector(
    store: &MetricStore,
    t0: Timestamp,
    t1: Timestamp,
    cfg: &PipelineConfig,
    exec: ExecMode,
) -> Result<DetectorModel> {
    if store.scrape_interval() != cfg.scrape_interval {
        return Err(Error::Config(format!(
            "store scrape interval {}s differs from configured {}s",
            store.scrape_interval(),
            cfg.scrape_interval
        )));
    }
    let pods = store.pods();
    if pods.is_empty() {
        return Err(Error::Empty("training telemetry"));
    }
    let norm = NormStats::fit(store, &pods, t0, t1, cfg.norm_scope);
    let index = PodIndex::new(pods.iter().cloned());
    let spec = cfg.train_window();
    let feats = exec.map(&pods, |p| pod_features(store, &norm, &index, p, spec, cfg.feature_mode, t0, t1));
    let mut healthy = BTreeMap::new();
    for (pod, f) in pods.iter().zip(feats) {
        healthy.insert(pod.clone(), f?.into_iter().map(|(_, v)| v).collect());
    }
    let model = DetectorModel::train(&healthy, norm, cfg.fingerprint(), &cfg.train_config(), cfg.seed)?;
    info!(pods = pods.len(), train_error_mean = model.train_error_mean, "detector trained");
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredWindow {
    pub start: Timestamp,
    pub score: f64,
    pub threshold: f64,
}

impl ScoredWindow {
    pub fn anomalous(&self) -> bool {
        exceeds(self.score, self.threshold)
    }
}

/// Score every complete window of every model pod in `[t0, t1]`.
pub fn score_store(
    model: &DetectorModel,
    store: &MetricStore,
    t0: Timestamp,
    t1: Timestamp,
    cfg: &PipelineConfig,
    exec: ExecMode,
) -> Result<BTreeMap<String, Vec<ScoredWindow>>> {
    let requested = crate::detector::ConfigFingerprint {
        scrape_interval: store.scrape_interval(),
        ..cfg.fingerprint()
    };
    model.check_fingerprint(&requested)?;
    for pod in store.pods() {
        if model.pods.get(&pod).is_none() {
            return Err(Error::UnknownPod(pod));
        }
    }
    let pods: Vec<String> = model.pods.pods().cloned().collect();
    let per_pod = exec.map(&pods, |pod| -> Result<Vec<ScoredWindow>> {
        let threshold = model.threshold(pod)?;
        let feats = pod_features(store, &model.norm_stats, &model.pods, pod, cfg.window(), cfg.feature_mode, t0, t1)?;
        let vecs: Vec<FeatureVector> = feats.iter().map(|f| f.1.clone()).collect();
        let scores = model.score_batch(&vecs, ExecMode::Sequential)?;
        Ok(feats
            .iter()
            .zip(scores)
            .map(|((start, _), score)| ScoredWindow { start: *start, score, threshold })
            .collect())
    });
    pods.into_iter().zip(per_pod).map(|(p, s)| Ok((p, s?))).collect()
}

/// Window flags after tau-thresholding, keyed by (pod, window start).
pub fn window_flags(scored: &BTreeMap<String, Vec<ScoredWindow>>, tau: usize) -> BTreeMap<(String, Timestamp), bool> {
    let mut out = BTreeMap::new();
    for (pod, windows) in scored {
        let raw: Vec<bool> = windows.iter().map(ScoredWindow::anomalous).collect();
        for (w, flag) in windows.iter().zip(crate::detector::thresholded_flags(&raw, tau)) {
            out.insert((pod.clone(), w.start), flag);
        }
    }
    out
}

/// Replay the scored windows in time order through the trigger and return
/// every alert. Pods alerting in the same step are ordered by score/threshold
/// of their last window, highest first.
pub fn alerts(scored: &BTreeMap<String, Vec<ScoredWindow>>, tau: usize, window_s: Timestamp) -> Vec<AnomalyAlert> {
    let mut state = TriggerState::new(scored.keys().cloned(), tau, window_s);
    let mut by_start: BTreeMap<Timestamp, Vec<(&String, &ScoredWindow)>> = BTreeMap::new();
    for (pod, windows) in scored {
        for w in windows {
            by_start.entry(w.start).or_default().push((pod, w));
        }
    }
    let mut out = Vec::new();
    for step in by_start.values() {
        let mut fired: Vec<(f64, AnomalyAlert)> = Vec::new();
        for (pod, w) in step {
            if let Some(alert) = state.update(pod, w.anomalous(), w.start) {
                fired.push((w.score / w.threshold, alert));
            }
        }
        fired.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.pod.cmp(&b.1.pod)));
        out.extend(fired.into_iter().map(|f| f.1));
    }
    out
}

pub fn first_alert(scored: &BTreeMap<String, Vec<ScoredWindow>>, tau: usize, window_s: Timestamp) -> Option<AnomalyAlert> {
    alerts(scored, tau, window_s).into_iter().next()
}

/// The alerting pod's metric that moved furthest from its training mean,
/// in training standard deviations, over the alert's windows.
pub fn target_metric(model: &DetectorModel, store: &MetricStore, alert: &AnomalyAlert) -> Result<String> {
    let t0 = alert.window_trace.first().copied().unwrap_or(alert.fired_at);
    let mut best: Option<(f64, String)> = None;
    for metric in store.metrics_for(&alert.pod) {
        let Some(norm) = model.norm_stats.get(&alert.pod, &metric) else { continue };
        let Some(series) = store.series(&alert.pod, &metric) else { continue };
        let vals: Vec<f64> = series.range(t0, alert.fired_at - 1).map(|p| p.1).collect();
        if vals.is_empty() {
            continue;
        }
        let shift = (vals.iter().sum::<f64>() / vals.len() as f64 - norm.mean).abs() / norm.std.max(f64::MIN_POSITIVE);
        if best.as_ref().is_none_or(|(b, _)| shift > *b) {
            best = Some((shift, metric));
        }
    }
    best.map(|b| b.1).ok_or_else(|| Error::UnknownPod(alert.pod.clone()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Healthy,
    Diagnosed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstallSummary {
    pub service: String,
    pub delta: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub ts: Timestamp,
    pub installs: Vec<InstallSummary>,
    pub pre_len_s: Timestamp,
    pub avg_effect: Option<f64>,
    pub p_value: Option<f64>,
    /// Post-period means of the 95% band of the counterfactual.
    pub interval_mean: Option<(f64, f64)>,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chosen {
    pub ts: Timestamp,
    pub installs: Vec<InstallSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub status: Status,
    /// Earlier alerts for which no installation was significant.
    #[serde(default)]
    pub unattributed_alerts: Vec<AnomalyAlert>,
    pub alert: Option<AnomalyAlert>,
    pub target_metric: Option<String>,
    pub critical_path: Vec<String>,
    pub candidates: Vec<Candidate>,
    pub chosen: Option<Chosen>,
}

impl Diagnosis {
    pub fn healthy() -> Self {
        Self {
            status: Status::Healthy,
            unattributed_alerts: Vec::new(),
            alert: None,
            target_metric: None,
            critical_path: Vec::new(),
            candidates: Vec::new(),
            chosen: None,
        }
    }

    pub fn chosen_ts(&self) -> Option<Timestamp> {
        self.chosen.as_ref().map(|c| c.ts)
    }

    /// Most recent candidate install, the baseline a human might blame.
    pub fn naive_ts(&self) -> Option<Timestamp> {
        self.candidates.iter().map(|c| c.ts).max()
    }

    pub fn candidate_services(&self) -> BTreeSet<String> {
        self.candidates
            .iter()
            .flat_map(|c| c.installs.iter().map(|i| i.service.clone()))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl std::fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let Some(alert) = &self.alert else {
            return writeln!(f, "healthy: no alert raised");
        };
        for a in &self.unattributed_alerts {
            writeln!(f, "earlier alert without causal installation: pod {} at t={}", a.pod, a.fired_at)?;
        }
        writeln!(
            f,
            "alert: pod {} at t={} (windows {:?})",
            alert.pod, alert.fired_at, alert.window_trace
        )?;
        if let Some(m) = &self.target_metric {
            writeln!(f, "target metric: {m}")?;
        }
        writeln!(f, "critical path: {}", self.critical_path.join(", "))?;
        writeln!(f, "candidates:")?;
        if self.candidates.is_empty() {
            writeln!(f, "  (none in lookback)")?;
        }
        for c in &self.candidates {
            let services: Vec<&str> = c.installs.iter().map(|i| i.service.as_str()).collect();
            match (c.avg_effect, c.p_value, &c.skipped) {
                (Some(e), Some(p), _) => {
                    let (lo, hi) = c.interval_mean.unwrap_or((f64::NAN, f64::NAN));
                    writeln!(
                        f,
                        "  t={:<8} {:<40} effect={e:+.3} p={p:.4} cf95=[{lo:.4}, {hi:.4}]",
                        c.ts,
                        services.join(",")
                    )?
                }
                (_, _, Some(reason)) => writeln!(f, "  t={:<8} {:<40} skipped: {reason}", c.ts, services.join(","))?,
                _ => writeln!(f, "  t={:<8} {}", c.ts, services.join(","))?,
            }
        }
        match &self.chosen {
            Some(c) => {
                for i in &c.installs {
                    writeln!(f, "root cause: t={} {} [{}]", c.ts, i.service, i.delta.join(" "))?;
                }
                Ok(())
            }
            None => writeln!(f, "root cause: no causal installation found"),
        }
    }
}

/// Candidate collection and impact ranking for one alert.
pub fn diagnose(
    alert: &AnomalyAlert,
    model: &DetectorModel,
    cfg: &PipelineConfig,
    inputs: &Inputs,
    exec: ExecMode,
) -> Result<Diagnosis> {
    let t_star = alert.fired_at;
    let recent: Vec<Span> = inputs
        .spans
        .iter()
        .filter(|s| s.start >= t_star - cfg.graph_lookback_s && s.start <= t_star)
        .cloned()
        .collect();
    let graph = build_graph(&recent)?.graph;
    let service = service_of(&alert.pod).to_string();
    let critical = if graph.contains(&service) {
        graph.critical_path(&service)?
    } else {
        warn!(service, "alerting service absent from recent traces; critical path is the service alone");
        BTreeSet::from([service.clone()])
    };

    let metric = target_metric(model, &inputs.store, alert)?;
    let target = inputs
        .store
        .series(&alert.pod, &metric)
        .ok_or_else(|| Error::UnknownMetric(metric.clone()))?;
    let controls: Vec<_> = inputs
        .store
        .pods()
        .into_iter()
        .filter(|p| !critical.contains(service_of(p)))
        .filter_map(|p| inputs.store.series(&p, &metric))
        .collect();

    let events = inputs
        .installs
        .query_window(&critical, t_star - cfg.install_lookback(), t_star);
    let mut by_ts: BTreeMap<Timestamp, Vec<&InstallEvent>> = BTreeMap::new();
    for e in &events {
        by_ts.entry(e.ts).or_default().push(e);
    }
    let stamps: Vec<Timestamp> = by_ts.keys().copied().collect();
    let min_pre = MIN_PERIOD_SAMPLES as Timestamp * cfg.scrape_interval;
    let pre_lens: Vec<Timestamp> = stamps
        .iter()
        .enumerate()
        .map(|(i, &ts)| {
            let gap = if i == 0 { Timestamp::MAX } else { ts - stamps[i - 1] };
            gap.min(cfg.pre_len()).max(min_pre.min(cfg.pre_len()))
        })
        .collect();

    let jobs: Vec<(Timestamp, Timestamp)> = stamps.iter().copied().zip(pre_lens).collect();
    let results: Vec<Result<ImpactResult>> = exec.map(&jobs, |&(ts, pre_len_s)| {
        let query = ImpactQuery {
            target,
            controls: controls.clone(),
            intervention_ts: ts,
            pre_len_s,
            post_end_ts: t_star,
        };
        estimate_impact(&query, cfg.n_draws, cfg.seed)
    });

    let mut candidates = Vec::new();
    let mut scored = Vec::new();
    for ((ts, pre_len_s), res) in jobs.into_iter().zip(results) {
        let installs = summarize(&by_ts[&ts]);
        let mut c = Candidate {
            ts,
            installs,
            pre_len_s,
            avg_effect: None,
            p_value: None,
            interval_mean: None,
            skipped: None,
        };
        match res {
            Ok(r) => {
                let n = r.credible_interval.len().max(1) as f64;
                let lo = r.credible_interval.iter().map(|b| b.0).sum::<f64>() / n;
                let hi = r.credible_interval.iter().map(|b| b.1).sum::<f64>() / n;
                c.avg_effect = Some(r.avg_effect);
                c.p_value = Some(r.p_value);
                c.interval_mean = Some((lo, hi));
                scored.push((ts, r));
            }
            Err(e @ (Error::InvalidQuery(_) | Error::DegeneratePrePeriod(_))) => {
                warn!(ts, error = %e, "candidate not testable");
                c.skipped = Some(e.to_string());
            }
            Err(e) => return Err(e),
        }
        candidates.push(c);
    }

    let chosen = select_root_cause(&scored, cfg.alpha).map(|ts| Chosen {
        ts,
        installs: summarize(&by_ts[&ts]),
    });
    Ok(Diagnosis {
        status: Status::Diagnosed,
        unattributed_alerts: Vec::new(),
        alert: Some(alert.clone()),
        target_metric: Some(metric),
        critical_path: critical.into_iter().collect(),
        candidates,
        chosen,
    })
}

fn summarize(events: &[&InstallEvent]) -> Vec<InstallSummary> {
    events
        .iter()
        .map(|e| InstallSummary {
            service: e.service.clone(),
            delta: e.delta.to_specs(),
        })
        .collect()
}

/// Detect over the whole metric store and diagnose alerts in order. The
/// report is for the first alert attributed to an installation; alerts
/// before it are listed as unattributed. When no alert is attributed the
/// report is the first alert's.
pub fn run_pipeline(model: &DetectorModel, cfg: &PipelineConfig, inputs: &Inputs, exec: ExecMode) -> Result<Diagnosis> {
    let Some((t0, t1)) = inputs.store.time_span() else {
        return Err(Error::Empty("metric input"));
    };
    let scored = score_store(model, &inputs.store, t0, t1 + inputs.store.scrape_interval(), cfg, exec)?;
    let mut first = None;
    let mut unattributed = Vec::new();
    for alert in alerts(&scored, cfg.tau, cfg.window_s) {
        let mut d = diagnose(&alert, model, cfg, inputs, exec)?;
        if d.chosen.is_some() {
            d.unattributed_alerts = unattributed;
            return Ok(d);
        }
        info!(pod = %alert.pod, at = alert.fired_at, "alert without causal installation");
        unattributed.push(alert);
        first.get_or_insert(d);
    }
    Ok(first.unwrap_or_else(Diagnosis::healthy))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sw(start: Timestamp, score: f64) -> ScoredWindow {
        ScoredWindow { start, score, threshold: 1.0 }
    }

    #[test]
    fn first_alert_ranks_simultaneous_pods() {
        let mut scored = BTreeMap::new();
        scored.insert("a-0".to_string(), vec![sw(0, 2.0), sw(300, 2.0), sw(600, 9.0)]);
        scored.insert("b-0".to_string(), vec![sw(0, 0.5), sw(300, 3.0), sw(600, 3.0)]);
        scored.insert("c-0".to_string(), vec![sw(0, 0.5), sw(300, 5.0), sw(600, 0.5)]);
        let a = first_alert(&scored, 2, 600).unwrap();
        assert_eq!((a.pod.as_str(), a.fired_at), ("a-0", 900));
        let a = first_alert(&scored, 3, 600).unwrap();
        assert_eq!(a.pod, "a-0");
        assert!(first_alert(&scored, 4, 600).is_none());

        scored.insert("a-0".to_string(), vec![sw(0, 0.5), sw(300, 2.0), sw(600, 2.0)]);
        let a = first_alert(&scored, 2, 600).unwrap();
        assert_eq!((a.pod.as_str(), a.fired_at), ("b-0", 1200));
    }

    #[test]
    fn flags_use_strict_threshold() {
        let mut scored = BTreeMap::new();
        scored.insert("a-0".to_string(), vec![sw(0, 1.0), sw(300, 1.5), sw(600, 1.5), sw(900, 1.5)]);
        let f = window_flags(&scored, 2);
        assert_eq!(
            f.values().copied().collect::<Vec<_>>(),
            vec![false, true, true, true]
        );
    }

    #[test]
    fn healthy_report_text() {
        let d = Diagnosis::healthy();
        assert_eq!(d.to_string(), "healthy: no alert raised\n");
        assert!(d.to_json().unwrap().contains("\"healthy\""));
    }
}
