//! Detection metrics, the W/S/T grid search, and the desk-scale experiments:
//! injected-anomaly detection runs, multi-install attribution trials, and the
//! critical-path filtering scenario.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::pipeline::{run_pipeline, score_store, window_flags, Diagnosis, Inputs};
use crate::rng;
use crate::sbom::SbomStore;
use crate::simulator::{self, AnomalyKind, InjectionSpec, InstallSpec, Scenario, SimConfig, SimOutput};
use crate::telemetry::{MetricStore, WindowSpec};
use crate::Timestamp;

pub type WindowKey = (String, Timestamp);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn metrics(&self) -> DetectionMetrics {
        DetectionMetrics::from_confusion(*self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

impl ClassScores {
    fn new(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            support: tp + fn_,
        }
    }
}

/// Headline scores are macro averages over the classes that occur in either
/// the labels or the predictions; the `weighted_*` fields weight each class
/// by its label support.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub anomalous: ClassScores,
    pub healthy: ClassScores,
    pub confusion: Confusion,
}

impl DetectionMetrics {
    pub fn from_confusion(c: Confusion) -> Self {
        let anomalous = ClassScores::new(c.tp, c.fp, c.fn_);
        let healthy = ClassScores::new(c.tn, c.fn_, c.fp);
        let present: Vec<&ClassScores> = [(&anomalous, c.tp + c.fp + c.fn_), (&healthy, c.tn + c.fp + c.fn_)]
            .into_iter()
            .filter(|(_, n)| *n > 0)
            .map(|(s, _)| s)
            .collect();
        let macro_avg = |f: fn(&ClassScores) -> f64| {
            if present.is_empty() {
                0.0
            } else {
                present.iter().map(|s| f(s)).sum::<f64>() / present.len() as f64
            }
        };
        let total = c.total();
        let weighted = |f: fn(&ClassScores) -> f64| {
            if total == 0 {
                0.0
            } else {
                (f(&anomalous) * anomalous.support as f64 + f(&healthy) * healthy.support as f64) / total as f64
            }
        };
        Self {
            f1: macro_avg(|s| s.f1),
            precision: macro_avg(|s| s.precision),
            recall: macro_avg(|s| s.recall),
            accuracy: if total == 0 { 0.0 } else { (c.tp + c.tn) as f64 / total as f64 },
            weighted_f1: weighted(|s| s.f1),
            weighted_precision: weighted(|s| s.precision),
            weighted_recall: weighted(|s| s.recall),
            anomalous,
            healthy,
            confusion: c,
        }
    }
}

/// Compare predicted window flags against labels over the same index set.
pub fn confusion(predicted: &BTreeMap<WindowKey, bool>, truth: &BTreeMap<WindowKey, bool>) -> Result<Confusion> {
    if predicted.len() != truth.len() || predicted.keys().ne(truth.keys()) {
        let missing: Vec<String> = truth
            .keys()
            .filter(|k| !predicted.contains_key(*k))
            .chain(predicted.keys().filter(|k| !truth.contains_key(*k)))
            .take(5)
            .map(|(p, t)| format!("{p}@{t}"))
            .collect();
        return Err(Error::IndexMismatch(format!(
            "{} predicted vs {} labeled windows; e.g. {}",
            predicted.len(),
            truth.len(),
            missing.join(", ")
        )));
    }
    let mut c = Confusion::default();
    for (k, &actual) in truth {
        c.add(predicted[k], actual);
    }
    Ok(c)
}

pub fn evaluate(predicted: &BTreeMap<WindowKey, bool>, truth: &BTreeMap<WindowKey, bool>) -> Result<DetectionMetrics> {
    Ok(confusion(predicted, truth)?.metrics())
}

pub fn store_of(out: &SimOutput) -> MetricStore {
    let mut store = MetricStore::new(out.config().scrape_interval);
    store.ingest(out.samples.iter().cloned());
    store
}

pub fn inputs_of(out: &SimOutput) -> Result<Inputs> {
    let mut installs = SbomStore::in_memory();
    installs.record(&out.installs)?;
    Ok(Inputs {
        store: store_of(out),
        spans: out.spans.clone(),
        installs,
    })
}

/// Simulation settings shared by every experiment: the same deployment
/// (`profile_seed`) with a run-specific noise seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub pipeline: PipelineConfig,
    pub profile_seed: u64,
    pub train_hours: i64,
    pub holdout_hours: i64,
    pub injections_per_kind: usize,
    pub run_s: Timestamp,
    pub injection_s: Timestamp,
    pub magnitude_range: (f64, f64),
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            profile_seed: 7,
            train_hours: 18,
            holdout_hours: 24,
            injections_per_kind: 10,
            run_s: 3600,
            injection_s: 900,
            magnitude_range: (0.2, 1.0),
        }
    }
}

impl ExperimentConfig {
    pub fn sim(&self, seed: u64, start_ts: Timestamp, duration_s: Timestamp) -> SimConfig {
        SimConfig {
            start_ts,
            duration_s,
            seed,
            profile_seed: self.profile_seed,
            scrape_interval: self.pipeline.scrape_interval,
            label_window: self.pipeline.window(),
            ..SimConfig::default()
        }
    }

    pub fn healthy_run(&self, seed: u64, hours: i64) -> Result<SimOutput> {
        simulator::run(&self.sim(seed, 0, hours * 3600), &Scenario::default())
    }

    fn magnitude(&self, r: &mut impl Rng) -> f64 {
        let (lo, hi) = self.magnitude_range;
        r.random_range(lo..=hi)
    }
}

/// Train a detector on a healthy run of `train_hours`.
pub fn train_on_healthy(exp: &ExperimentConfig, cfg: &PipelineConfig, exec: ExecMode) -> Result<DetectorModel> {
    let out = exp.healthy_run(rng::derive_seed(cfg.seed, 0x7a1), exp.train_hours)?;
    crate::pipeline::train_detector(&store_of(&out), 0, exp.train_hours * 3600, cfg, exec)
}

/// Raw per-pod false-positive window rates on a healthy hold-out run.
pub fn holdout_fp_rates(
    model: &DetectorModel,
    out: &SimOutput,
    cfg: &PipelineConfig,
    exec: ExecMode,
) -> Result<BTreeMap<String, f64>> {
    let c = out.config();
    let scored = score_store(model, &store_of(out), c.start_ts, c.end_ts(), cfg, exec)?;
    Ok(scored
        .into_iter()
        .map(|(pod, w)| {
            let fp = w.iter().filter(|w| w.anomalous()).count();
            (pod, fp as f64 / w.len().max(1) as f64)
        })
        .collect())
}

/// One simulated hour with a single injection at a random pod, magnitude
/// and start.
pub fn detection_scenarios(exp: &ExperimentConfig, kind: AnomalyKind, n: usize, seed: u64) -> Vec<(SimConfig, Scenario)> {
    let pods = simulator::Topology::social_network().pods();
    let scrape = exp.pipeline.scrape_interval;
    (0..n)
        .map(|i| {
            let run_seed = rng::derive_seed(seed, rng::name_salt(kind.as_str()) ^ i as u64);
            let mut r = rng::stream(run_seed, 0xd17);
            let start_ts = r.random_range(0..24) * 3600;
            let slack = (exp.run_s - exp.injection_s) / scrape;
            let lo = slack / 4;
            let hi = (3 * slack / 4).max(lo + 1);
            let inj_start = start_ts + r.random_range(lo..hi) * scrape;
            let injection = InjectionSpec {
                kind,
                pod: pods.choose(&mut r).expect("pods").clone(),
                start_ts: inj_start,
                end_ts: inj_start + exp.injection_s,
                magnitude: exp.magnitude(&mut r),
            };
            (
                exp.sim(run_seed, start_ts, exp.run_s),
                Scenario {
                    injections: vec![injection],
                    installs: vec![],
                },
            )
        })
        .collect()
}

/// Confusion matrices at each tau over a scenario set.
pub fn detection_confusion(
    model: &DetectorModel,
    cfg: &PipelineConfig,
    runs: &[SimOutput],
    taus: &[usize],
    exec: ExecMode,
) -> Result<BTreeMap<usize, Confusion>> {
    let spec = cfg.window();
    let per_run = exec.map(runs, |out| -> Result<Vec<Confusion>> {
        let c = out.config();
        let scored = score_store(model, &store_of(out), c.start_ts, c.end_ts(), cfg, ExecMode::Sequential)?;
        let labels = out.truth.labels(&out.pods, spec, c.scrape_interval, c.start_ts, c.end_ts());
        taus.iter().map(|&tau| confusion(&window_flags(&scored, tau), &labels)).collect()
    });
    let mut total: BTreeMap<usize, Confusion> = taus.iter().map(|&t| (t, Confusion::default())).collect();
    for run in per_run {
        for (tau, c) in taus.iter().zip(run?) {
            total.get_mut(tau).expect("tau").merge(&c);
        }
    }
    Ok(total)
}

pub fn simulate_all(scenarios: &[(SimConfig, Scenario)], exec: ExecMode) -> Result<Vec<SimOutput>> {
    exec.map(scenarios, |(c, s)| simulator::run(c, s)).into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub kind: AnomalyKind,
    pub window: WindowSpec,
    pub tau: usize,
    pub metrics: DetectionMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridBest {
    pub kind: AnomalyKind,
    pub window: WindowSpec,
    pub before: DetectionMetrics,
    pub after: DetectionMetrics,
}

pub const GRID_WINDOWS: [Timestamp; 3] = [600, 450, 300];
pub const GRID_STRIDES: [Timestamp; 3] = [300, 60, 30];

/// Per kind: highest F1 at tau=2, ties broken by F1 at tau=1, then by
/// position in `windows`.
pub fn select_best(cells: &[GridCell], kinds: &[AnomalyKind], windows: &[WindowSpec]) -> Result<Vec<GridBest>> {
    let lookup: BTreeMap<(AnomalyKind, WindowSpec, usize), &DetectionMetrics> =
        cells.iter().map(|c| ((c.kind, c.window, c.tau), &c.metrics)).collect();
    let mut missing = Vec::new();
    for &k in kinds {
        for &w in windows {
            for tau in [1, 2] {
                if !lookup.contains_key(&(k, w, tau)) {
                    missing.push(format!("{k}/{w}/T={tau}"));
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingCells(missing));
    }
    Ok(kinds
        .iter()
        .map(|&kind| {
            let mut best: Option<GridBest> = None;
            for &w in windows {
                let (before, after) = (*lookup[&(kind, w, 1)], *lookup[&(kind, w, 2)]);
                let better = best
                    .as_ref()
                    .is_none_or(|b| (after.f1, before.f1) > (b.after.f1, b.before.f1));
                if better {
                    best = Some(GridBest { kind, window: w, before, after });
                }
            }
            best.expect("windows nonempty")
        })
        .collect())
}

/// Evaluate every (W, S) pair, one detector per pair, on shared scenario runs.
pub fn grid_search(
    exp: &ExperimentConfig,
    kinds: &[AnomalyKind],
    windows: &[WindowSpec],
    exec: ExecMode,
) -> Result<Vec<GridCell>> {
    let seed = exp.pipeline.seed;
    let mut runs = BTreeMap::new();
    for &k in kinds {
        let scenarios = detection_scenarios(exp, k, exp.injections_per_kind, seed);
        runs.insert(k, simulate_all(&scenarios, exec)?);
    }
    let train = exp.healthy_run(rng::derive_seed(seed, 0x7a1), exp.train_hours)?;
    let train_store = store_of(&train);
    let per_window = exec.map(windows, |&w| -> Result<Vec<GridCell>> {
        let cfg = PipelineConfig {
            window_s: w.duration_s,
            stride_s: w.stride_s,
            ..exp.pipeline.clone()
        };
        cfg.validate()?;
        let model = crate::pipeline::train_detector(&train_store, 0, exp.train_hours * 3600, &cfg, ExecMode::Sequential)?;
        let mut cells = Vec::new();
        for (&kind, outs) in &runs {
            for (tau, c) in detection_confusion(&model, &cfg, outs, &[1, 2], ExecMode::Sequential)? {
                cells.push(GridCell {
                    kind,
                    window: w,
                    tau,
                    metrics: c.metrics(),
                });
            }
        }
        Ok(cells)
    });
    let mut cells = Vec::new();
    for c in per_window {
        cells.extend(c?);
    }
    Ok(cells)
}

pub fn grid_windows() -> Vec<WindowSpec> {
    GRID_WINDOWS
        .iter()
        .flat_map(|&w| GRID_STRIDES.iter().map(move |&s| WindowSpec::new(w, s)))
        .collect()
}

/// Delimited rows: every cell, then the selected rows.
pub fn grid_csv(cells: &[GridCell], best: &[GridBest]) -> String {
    let mut s = String::from(
        "row,kind,window_s,stride_s,tau,f1,precision,recall,accuracy,weighted_f1,tp,fp,fn,tn\n",
    );
    let mut row = |tag: &str, kind: AnomalyKind, w: WindowSpec, tau: usize, m: &DetectionMetrics| {
        let c = m.confusion;
        let _ = writeln!(
            s,
            "{tag},{kind},{},{},{tau},{:.4},{:.4},{:.4},{:.4},{:.4},{},{},{},{}",
            w.duration_s, w.stride_s, m.f1, m.precision, m.recall, m.accuracy, m.weighted_f1, c.tp, c.fp, c.fn_, c.tn
        );
    };
    for c in cells {
        row("cell", c.kind, c.window, c.tau, &c.metrics);
    }
    for b in best {
        row("best", b.kind, b.window, 1, &b.before);
        row("best", b.kind, b.window, 2, &b.after);
    }
    s
}

/// Table with one row per anomaly kind: chosen W/S and metrics before and
/// after thresholding.
pub fn grid_table(best: &[GridBest]) -> String {
    let mut s = format!(
        "{:<16} {:>5} {:>5} | {:>6} {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6} {:>6}\n",
        "anomaly", "W", "S", "F1@1", "P@1", "R@1", "A@1", "F1@2", "P@2", "R@2", "A@2"
    );
    for b in best {
        let _ = writeln!(
            s,
            "{:<16} {:>5} {:>5} | {:>6.3} {:>6.3} {:>6.3} {:>6.3} | {:>6.3} {:>6.3} {:>6.3} {:>6.3}",
            b.kind.as_str(),
            b.window.duration_s,
            b.window.stride_s,
            b.before.f1,
            b.before.precision,
            b.before.recall,
            b.before.accuracy,
            b.after.f1,
            b.after.precision,
            b.after.recall,
            b.after.accuracy
        );
    }
    s
}

/// Where the anomalous install sits among the trial's installs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CulpritPlacement {
    Uniform,
    /// Any position except the last.
    NeverLast,
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub spacing_s: Timestamp,
    pub installs: usize,
    pub culprit: usize,
    pub pod: String,
    pub kind: AnomalyKind,
    pub magnitude: f64,
    pub start_ts: Timestamp,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub spec: TrialSpec,
    pub true_ts: Timestamp,
    pub install_ts: Vec<Timestamp>,
    pub chosen: Option<Timestamp>,
    pub naive: Option<Timestamp>,
    pub alert_pod: Option<String>,
    pub alert_ts: Option<Timestamp>,
}

impl TrialOutcome {
    pub fn success(&self) -> bool {
        self.chosen == Some(self.true_ts)
    }

    pub fn naive_success(&self) -> bool {
        self.naive == Some(self.true_ts)
    }
}

/// Run length and first-install offset for a trial: a full pre-period of
/// history before the first install and room for detection after the last.
fn trial_layout(cfg: &PipelineConfig, n: usize, spacing_s: Timestamp) -> (Timestamp, Timestamp) {
    let lead = cfg.pre_len();
    let tail = cfg.install_lookback().max(4 * cfg.window_s);
    (lead + (n as Timestamp - 1) * spacing_s + tail, lead)
}

pub fn trial_specs(
    spacings: &[Timestamp],
    trials_per_spacing: usize,
    installs: usize,
    placement: CulpritPlacement,
    seed: u64,
) -> Vec<TrialSpec> {
    let pods = simulator::Topology::social_network().pods();
    let mut specs = Vec::new();
    for &spacing_s in spacings {
        for t in 0..trials_per_spacing {
            let trial_seed = rng::derive_seed(seed, (spacing_s as u64) << 16 | t as u64);
            let mut r = rng::stream(trial_seed, 0x7e1a);
            let culprit = match placement {
                CulpritPlacement::Uniform => r.random_range(0..installs),
                CulpritPlacement::NeverLast => r.random_range(0..installs.saturating_sub(1).max(1)),
                CulpritPlacement::Fixed(i) => i.min(installs - 1),
            };
            specs.push(TrialSpec {
                spacing_s,
                installs,
                culprit,
                pod: pods.choose(&mut r).expect("pods").clone(),
                kind: *AnomalyKind::ALL.choose(&mut r).expect("kinds"),
                magnitude: r.random_range(0.2..=1.0),
                start_ts: r.random_range(0..24) * 3600,
                seed: trial_seed,
            });
        }
    }
    specs
}

/// Simulated run for a trial: `installs` package bumps on one service at
/// fixed spacing, the culprit one starting an anomaly that persists to the
/// end of the run.
pub fn trial_scenario(exp: &ExperimentConfig, spec: &TrialSpec) -> (SimConfig, Scenario, Vec<Timestamp>) {
    let (duration, lead) = trial_layout(&exp.pipeline, spec.installs, spec.spacing_s);
    let sim = exp.sim(spec.seed, spec.start_ts, duration);
    let service = simulator::service_of(&spec.pod).to_string();
    let stamps: Vec<Timestamp> = (0..spec.installs)
        .map(|i| spec.start_ts + lead + i as Timestamp * spec.spacing_s)
        .collect();
    let installs = stamps
        .iter()
        .enumerate()
        .map(|(i, &ts)| InstallSpec {
            service: service.clone(),
            ts,
            delta: vec![format!("app-bundle@1.{i}.0")],
        })
        .collect();
    let t_c = stamps[spec.culprit];
    let scenario = Scenario {
        injections: vec![InjectionSpec {
            kind: spec.kind,
            pod: spec.pod.clone(),
            start_ts: t_c,
            end_ts: spec.start_ts + duration,
            magnitude: spec.magnitude,
        }],
        installs,
    };
    (sim, scenario, stamps)
}

pub fn run_trial(model: &DetectorModel, exp: &ExperimentConfig, spec: &TrialSpec, exec: ExecMode) -> Result<TrialOutcome> {
    let (sim, scenario, stamps) = trial_scenario(exp, spec);
    let out = simulator::run(&sim, &scenario)?;
    let cfg = PipelineConfig {
        seed: spec.seed,
        ..exp.pipeline.clone()
    };
    let d = run_pipeline(model, &cfg, &inputs_of(&out)?, exec)?;
    Ok(TrialOutcome {
        spec: spec.clone(),
        true_ts: out.truth.causal_install_ts.expect("culprit install coincides with injection"),
        install_ts: stamps,
        chosen: d.chosen_ts(),
        naive: d.naive_ts(),
        alert_pod: d.alert.as_ref().map(|a| a.pod.clone()),
        alert_ts: d.alert.as_ref().map(|a| a.fired_at),
    })
}

pub fn attribution_trials(
    model: &DetectorModel,
    exp: &ExperimentConfig,
    specs: &[TrialSpec],
    exec: ExecMode,
) -> Result<Vec<TrialOutcome>> {
    exec.map(specs, |s| run_trial(model, exp, s, ExecMode::Sequential))
        .into_iter()
        .collect()
}

pub fn trials_table(outcomes: &[TrialOutcome]) -> String {
    let mut by_spacing: BTreeMap<Timestamp, (usize, usize, usize)> = BTreeMap::new();
    for o in outcomes {
        let e = by_spacing.entry(o.spec.spacing_s).or_default();
        e.0 += usize::from(o.success());
        e.1 += usize::from(o.naive_success());
        e.2 += 1;
    }
    let mut s = format!("{:>10} {:>10} {:>10}\n", "spacing_s", "praxium", "naive");
    for (spacing, (ok, naive, n)) in by_spacing.iter().rev() {
        let _ = writeln!(s, "{spacing:>10} {:>10} {:>10}", format!("{ok}/{n}"), format!("{naive}/{n}"));
    }
    s
}

/// Outcome of the home-timeline scenario: anomaly on home-timeline-service
/// with installs on home-timeline, social-graph and text services.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalPathOutcome {
    pub variant: u64,
    pub true_ts: Timestamp,
    pub diagnosis: Diagnosis,
    pub install_services: BTreeMap<Timestamp, String>,
}

impl CriticalPathOutcome {
    /// Candidate services lie on the critical path, include both
    /// home-timeline and social-graph, and exclude text-service.
    pub fn candidates_ok(&self) -> bool {
        let services = self.diagnosis.candidate_services();
        let allowed: BTreeSet<&str> = [
            "home-timeline-service",
            "social-graph-service",
            "compose-post-service",
            "nginx-web-server",
        ]
        .into();
        services.contains("home-timeline-service")
            && services.contains("social-graph-service")
            && services.iter().all(|s| allowed.contains(s.as_str()))
    }

    pub fn success(&self) -> bool {
        self.candidates_ok() && self.diagnosis.chosen_ts() == Some(self.true_ts)
    }
}

pub fn critical_path_scenario(exp: &ExperimentConfig, variant: u64) -> (SimConfig, Scenario, Timestamp) {
    let seed = rng::derive_seed(exp.pipeline.seed, 0xf195 ^ variant);
    let mut r = rng::stream(seed, 0);
    let start_ts = r.random_range(0..24) * 3600;
    let lead = exp.pipeline.pre_len();
    let scrape = exp.pipeline.scrape_interval;
    // Culprit after a full pre-period; decoys up to 40 min before it.
    let t_c = start_ts + lead + 2400 + r.random_range(0..20) * scrape;
    let decoy = |r: &mut rand_chacha::ChaCha8Rng| t_c - r.random_range(10..80) * scrape;
    let t_sg = decoy(&mut r);
    let t_text = decoy(&mut r);
    let duration = (t_c - start_ts) + exp.pipeline.install_lookback().max(4 * exp.pipeline.window_s);
    let kind = *AnomalyKind::ALL.choose(&mut r).expect("kinds");
    let scenario = Scenario {
        injections: vec![InjectionSpec {
            kind,
            pod: "home-timeline-service-0".into(),
            start_ts: t_c,
            end_ts: start_ts + duration,
            magnitude: r.random_range(0.2..=1.0),
        }],
        installs: vec![
            InstallSpec {
                service: "home-timeline-service".into(),
                ts: t_c,
                delta: vec!["libhometimeline@2.1.0".into()],
            },
            InstallSpec {
                service: "social-graph-service".into(),
                ts: t_sg,
                delta: vec!["libsocialgraph@0.9.3".into()],
            },
            InstallSpec {
                service: "text-service".into(),
                ts: t_text,
                delta: vec!["libtext@4.2.0".into()],
            },
        ],
    };
    (exp.sim(seed, start_ts, duration), scenario, t_c)
}

pub fn run_critical_path(
    model: &DetectorModel,
    exp: &ExperimentConfig,
    variant: u64,
    exec: ExecMode,
) -> Result<CriticalPathOutcome> {
    let (sim, scenario, t_c) = critical_path_scenario(exp, variant);
    let out = simulator::run(&sim, &scenario)?;
    let cfg = PipelineConfig {
        seed: sim.seed,
        ..exp.pipeline.clone()
    };
    let diagnosis = run_pipeline(model, &cfg, &inputs_of(&out)?, exec)?;
    Ok(CriticalPathOutcome {
        variant,
        true_ts: t_c,
        diagnosis,
        install_services: scenario.installs.iter().map(|i| (i.ts, i.service.clone())).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn keyed(flags: &[bool]) -> BTreeMap<WindowKey, bool> {
        flags
            .iter()
            .enumerate()
            .map(|(i, &f)| (("p".to_string(), i as Timestamp * 300), f))
            .collect()
    }

    #[test]
    fn perfect_predictions() {
        let truth = keyed(&[true, false, false, true]);
        let m = evaluate(&truth, &truth).unwrap();
        assert_eq!((m.f1, m.precision, m.recall, m.accuracy), (1.0, 1.0, 1.0, 1.0));
        let healthy = keyed(&[false; 4]);
        assert_eq!(evaluate(&healthy, &healthy).unwrap().f1, 1.0);
    }

    #[test]
    fn all_negative_on_balanced_set() {
        let truth = keyed(&[true, true, false, false]);
        let m = evaluate(&keyed(&[false; 4]), &truth).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert!((m.f1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn hand_counted_confusion() {
        let c = Confusion { tp: 2, fp: 1, fn_: 0, tn: 7 };
        let m = c.metrics();
        assert!((m.anomalous.precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.anomalous.recall, 1.0);
        assert_eq!(m.accuracy, 0.9);
    }

    #[test]
    fn index_mismatch() {
        let a = keyed(&[true, false]);
        let b = keyed(&[true, false, true]);
        assert!(matches!(evaluate(&a, &b), Err(Error::IndexMismatch(_))));
    }

    fn metrics_with_f1(before: f64, after: f64) -> (DetectionMetrics, DetectionMetrics) {
        let mut b = Confusion::default().metrics();
        b.f1 = before;
        let mut a = b;
        a.f1 = after;
        (b, a)
    }

    fn cells(rows: &[(WindowSpec, f64, f64)]) -> Vec<GridCell> {
        rows.iter()
            .flat_map(|&(w, before, after)| {
                let (b, a) = metrics_with_f1(before, after);
                [
                    GridCell { kind: AnomalyKind::CpuSpike, window: w, tau: 1, metrics: b },
                    GridCell { kind: AnomalyKind::CpuSpike, window: w, tau: 2, metrics: a },
                ]
            })
            .collect()
    }

    #[test]
    fn grid_selection_rules() {
        let (w1, w2) = (WindowSpec::new(600, 300), WindowSpec::new(450, 60));
        let k = [AnomalyKind::CpuSpike];
        let best = select_best(&cells(&[(w1, 0.9, 0.99), (w2, 0.97, 0.95)]), &k, &[w1, w2]).unwrap();
        assert_eq!(best[0].window, w1);
        let best = select_best(&cells(&[(w1, 0.985, 1.0), (w2, 0.961, 1.0)]), &k, &[w1, w2]).unwrap();
        assert_eq!(best[0].window, w1);
        let best = select_best(&cells(&[(w1, 0.961, 1.0), (w2, 0.985, 1.0)]), &k, &[w1, w2]).unwrap();
        assert_eq!(best[0].window, w2);
        let best = select_best(&cells(&[(w2, 0.5, 0.5)]), &k, &[w2]).unwrap();
        assert_eq!(best[0].window, w2);
        match select_best(&cells(&[(w1, 0.5, 0.5)]), &k, &[w1, w2]) {
            Err(Error::MissingCells(m)) => assert_eq!(m.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn grid_selection_reproducible_from_csv() {
        let (w1, w2) = (WindowSpec::new(600, 300), WindowSpec::new(300, 30));
        let cs = cells(&[(w1, 0.8, 0.9), (w2, 0.85, 0.9)]);
        let best = select_best(&cs, &[AnomalyKind::CpuSpike], &[w1, w2]).unwrap();
        let csv = grid_csv(&cs, &best);
        // Re-derive the choice from the emitted cell rows alone.
        let mut rows: Vec<(f64, f64, i64, i64)> = Vec::new();
        let parsed: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
        for r in parsed.iter().filter(|r| r[0] == "cell" && r[4] == "2") {
            let before = parsed
                .iter()
                .find(|b| b[0] == "cell" && b[4] == "1" && b[2] == r[2] && b[3] == r[3])
                .unwrap();
            rows.push((r[5].parse().unwrap(), before[5].parse().unwrap(), r[2].parse().unwrap(), r[3].parse().unwrap()));
        }
        let top = rows
            .iter()
            .fold(None::<&(f64, f64, i64, i64)>, |acc, r| match acc {
                Some(a) if (a.0, a.1) >= (r.0, r.1) => Some(a),
                _ => Some(r),
            })
            .unwrap();
        assert_eq!((top.2, top.3), (best[0].window.duration_s, best[0].window.stride_s));
    }

    proptest! {
        #[test]
        fn evaluate_matches_brute_force(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..200)) {
            let pred = keyed(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
            let truth = keyed(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
            let m = evaluate(&pred, &truth).unwrap();

            let count = |p: bool, t: bool| pairs.iter().filter(|x| **x == (p, t)).count() as f64;
            let (tp, fp, fn_, tn) = (count(true, true), count(true, false), count(false, true), count(false, false));
            let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
            let f1 = |p: f64, r: f64| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            let (pa, ra) = (div(tp, tp + fp), div(tp, tp + fn_));
            let (ph, rh) = (div(tn, tn + fn_), div(tn, tn + fp));
            let mut classes = vec![];
            if tp + fp + fn_ > 0.0 { classes.push(f1(pa, ra)); }
            if tn + fp + fn_ > 0.0 { classes.push(f1(ph, rh)); }
            let macro_f1 = classes.iter().sum::<f64>() / classes.len() as f64;
            prop_assert!((m.f1 - macro_f1).abs() < 1e-12);
            prop_assert!((m.accuracy - (tp + tn) / pairs.len() as f64).abs() < 1e-12);
            for v in [m.f1, m.precision, m.recall, m.accuracy, m.weighted_f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert_eq!(m.confusion.metrics(), m);
        }
    }
}
