//! Seeded microservice simulator.
//!
//! Produces per-pod telemetry on the scrape grid, one trace per scrape tick
//! following the call edges, install events via the periodic SBOM scanner,
//! and ground-truth anomaly intervals. Baselines are a pod-specific mean
//! modulated by a daily load curve plus Gaussian noise. Injected anomalies
//! perturb the target pod's metrics; every injection also inflates request
//! latency on the services downstream of the target, halving per hop.
//!
//! Each (pod, metric) series draws from its own ChaCha8 stream keyed by the
//! run seed and the series name, so an injection never shifts the noise of
//! any other series and the same seed always yields byte-identical files.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CausalGraph, Span};
use crate::rng::{self, name_salt};
use crate::sbom::{InstallEvent, PackageSet, Rollout, Scanner};
use crate::telemetry::{write_samples, MetricSample, WindowSpec, DEFAULT_SCRAPE_INTERVAL};
use crate::Timestamp;

pub const CPU: &str = "cpu_usage_cores";
pub const MEMORY: &str = "memory_usage_bytes";
pub const DISK: &str = "disk_usage_bytes";
pub const NET_RX: &str = "network_receive_bytes_per_second";
pub const NET_TX: &str = "network_transmit_bytes_per_second";
pub const LATENCY: &str = "request_latency_ms";
pub const METRICS: [&str; 6] = [CPU, MEMORY, DISK, NET_RX, NET_TX, LATENCY];

pub const CPU_CAPACITY_CORES: f64 = 1.0;
pub const MEMORY_LIMIT_BYTES: f64 = 1024.0 * 1024.0 * 1024.0;
pub const DISK_CAPACITY_BYTES: f64 = 10.0e9;
pub const NET_CAPACITY_BPS: f64 = 12.5e6;
/// Seconds for a full-magnitude disk fill to go from empty to capacity.
pub const DISK_FILL_SECONDS: f64 = 1200.0;
/// Seconds for a full-magnitude leak to allocate the whole memory limit.
pub const MEMORY_LEAK_SECONDS: f64 = 600.0;
/// Own-span latency multiplier slope for network floods: `1 + 5m`.
pub const NETWORK_LATENCY_SLOPE: f64 = 5.0;
/// Downstream latency multiplier slope at the first hop: `1 + 2m`.
pub const PROPAGATION_SLOPE: f64 = 2.0;
pub const PROPAGATION_ATTENUATION: f64 = 0.5;

/// Service identifier for a pod named `<service>-<n>`.
pub fn service_of(pod: &str) -> &str {
    match pod.rsplit_once('-') {
        Some((svc, idx)) if !idx.is_empty() && idx.bytes().all(|b| b.is_ascii_digit()) => svc,
        _ => pod,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub services: Vec<String>,
    pub call_edges: Vec<(String, String)>,
    #[serde(default)]
    pub pods_per_service: BTreeMap<String, usize>,
}

impl Topology {
    /// The twelve-service social-network ComposePost call graph.
    pub fn social_network() -> Self {
        let edges = [
            ("nginx-web-server", "compose-post-service"),
            ("compose-post-service", "text-service"),
            ("compose-post-service", "media-service"),
            ("compose-post-service", "user-service"),
            ("compose-post-service", "unique-id-service"),
            ("compose-post-service", "user-timeline-service"),
            ("compose-post-service", "post-storage-service"),
            ("compose-post-service", "home-timeline-service"),
            ("text-service", "url-shorten-service"),
            ("text-service", "user-mention-service"),
            ("home-timeline-service", "social-graph-service"),
        ];
        let mut services: Vec<String> = Vec::new();
        for (a, b) in edges {
            for s in [a, b] {
                if !services.iter().any(|x| x == s) {
                    services.push(s.to_string());
                }
            }
        }
        Self {
            services,
            call_edges: edges.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
            pods_per_service: BTreeMap::new(),
        }
    }

    pub fn graph(&self) -> Result<CausalGraph> {
        CausalGraph::from_edges(self.services.iter().map(String::as_str), &self.call_edges_str())
    }

    fn call_edges_str(&self) -> Vec<(&str, &str)> {
        self.call_edges.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect()
    }

    pub fn pods_of(&self, service: &str) -> Vec<String> {
        let n = self.pods_per_service.get(service).copied().unwrap_or(1).max(1);
        (0..n).map(|i| format!("{service}-{i}")).collect()
    }

    pub fn pods(&self) -> Vec<String> {
        let mut pods: Vec<String> = self.services.iter().flat_map(|s| self.pods_of(s)).collect();
        pods.sort();
        pods
    }

    fn roots(&self) -> Vec<&String> {
        let callees: BTreeSet<&String> = self.call_edges.iter().map(|(_, b)| b).collect();
        self.services.iter().filter(|s| !callees.contains(s)).collect()
    }

    fn callees_of(&self, service: &str) -> Vec<&String> {
        self.call_edges.iter().filter(|(a, _)| a == service).map(|(_, b)| b).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    CpuSpike,
    DiskSaturation,
    MemoryLeak,
    NetworkLatency,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 4] = [
        AnomalyKind::CpuSpike,
        AnomalyKind::MemoryLeak,
        AnomalyKind::DiskSaturation,
        AnomalyKind::NetworkLatency,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyKind::CpuSpike => "cpu_spike",
            AnomalyKind::DiskSaturation => "disk_saturation",
            AnomalyKind::MemoryLeak => "memory_leak",
            AnomalyKind::NetworkLatency => "network_latency",
        }
    }
}

impl std::fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AnomalyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cpu_spike" | "cpu" => Ok(AnomalyKind::CpuSpike),
            "disk_saturation" | "disk" => Ok(AnomalyKind::DiskSaturation),
            "memory_leak" | "memory" | "ram" => Ok(AnomalyKind::MemoryLeak),
            "network_latency" | "network" | "http" => Ok(AnomalyKind::NetworkLatency),
            other => Err(Error::InvalidInjection(format!("unknown anomaly kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionSpec {
    pub kind: AnomalyKind,
    pub pod: String,
    pub start_ts: Timestamp,
    pub end_ts: Timestamp,
    pub magnitude: f64,
}

/// How an injection moves its pod's metrics `elapsed` seconds after onset,
/// before the capacity caps are applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    kind: AnomalyKind,
    magnitude: f64,
}

/// Effect of a perturbation on one scrape.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Effect {
    pub cpu_add: f64,
    pub memory_add: f64,
    pub disk_add: f64,
    pub net_add: f64,
    /// Multiplier on the pod's own span durations and latency metric.
    pub latency_factor: f64,
}

impl Perturbation {
    pub fn effect(&self, elapsed: f64) -> Effect {
        let m = self.magnitude;
        let mut e = Effect {
            latency_factor: 1.0,
            ..Effect::default()
        };
        match self.kind {
            AnomalyKind::CpuSpike => e.cpu_add = m * CPU_CAPACITY_CORES,
            AnomalyKind::DiskSaturation => e.disk_add = m * DISK_CAPACITY_BYTES / DISK_FILL_SECONDS * elapsed,
            AnomalyKind::MemoryLeak => e.memory_add = m * MEMORY_LIMIT_BYTES / MEMORY_LEAK_SECONDS * elapsed,
            AnomalyKind::NetworkLatency => {
                e.net_add = m * NET_CAPACITY_BPS;
                e.latency_factor = 1.0 + NETWORK_LATENCY_SLOPE * m;
            }
        }
        e
    }
}

pub fn inject(kind: AnomalyKind, magnitude: f64) -> Result<Perturbation> {
    if !(magnitude > 0.0 && magnitude <= 1.0) {
        return Err(Error::InvalidInjection(format!("magnitude {magnitude} outside (0, 1]")));
    }
    Ok(Perturbation { kind, magnitude })
}

/// Latency inflation on a downstream pod caused by an injection upstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagatedInterval {
    pub pod: String,
    pub start_ts: Timestamp,
    pub end_ts: Timestamp,
    pub hops: usize,
    pub latency_factor: f64,
}

pub fn propagate(topology: &Topology, injections: &[InjectionSpec]) -> Result<Vec<PropagatedInterval>> {
    let graph = topology.graph()?;
    let mut out = Vec::new();
    for inj in injections {
        for (svc, hops) in graph.descendant_hops(service_of(&inj.pod)) {
            let factor =
                1.0 + PROPAGATION_SLOPE * inj.magnitude * PROPAGATION_ATTENUATION.powi(hops as i32 - 1);
            for pod in topology.pods_of(&svc) {
                out.push(PropagatedInterval {
                    pod,
                    start_ts: inj.start_ts,
                    end_ts: inj.end_ts,
                    hops,
                    latency_factor: factor,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadConfig {
    /// Relative amplitude of the daily load curve.
    pub diurnal_amplitude: f64,
    pub period_s: f64,
    pub phase: f64,
    /// Relative noise per scrape of load-driven metrics.
    pub noise: f64,
    /// Requests aggregated per latency scrape.
    pub requests_per_scrape: usize,
}

impl Default for LoadConfig {
    fn default() -> Self {
        Self {
            diurnal_amplitude: 0.2,
            period_s: 86_400.0,
            phase: 0.0,
            noise: 0.05,
            requests_per_scrape: 1000,
        }
    }
}

impl LoadConfig {
    pub fn factor(&self, ts: Timestamp) -> f64 {
        1.0 + self.diurnal_amplitude * (2.0 * PI * ts as f64 / self.period_s + self.phase).sin()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstallSpec {
    pub service: String,
    pub ts: Timestamp,
    pub delta: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub topology: Topology,
    pub load: LoadConfig,
    pub start_ts: Timestamp,
    pub duration_s: Timestamp,
    pub scrape_interval: Timestamp,
    /// Noise seed for this run.
    pub seed: u64,
    /// Seed for pod baselines and package inventories, shared by runs that
    /// simulate the same deployment.
    pub profile_seed: u64,
    pub scan_interval_s: Timestamp,
    /// Window layout used for the labels in the ground-truth file.
    pub label_window: WindowSpec,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            topology: Topology::social_network(),
            load: LoadConfig::default(),
            start_ts: 0,
            duration_s: 3600,
            scrape_interval: DEFAULT_SCRAPE_INTERVAL,
            seed: 0,
            profile_seed: 7,
            scan_interval_s: 3600,
            label_window: WindowSpec::new(600, 300),
        }
    }
}

impl SimConfig {
    pub fn end_ts(&self) -> Timestamp {
        self.start_ts + self.duration_s
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub injections: Vec<InjectionSpec>,
    #[serde(default)]
    pub installs: Vec<InstallSpec>,
}

/// Per-pod baseline levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PodProfile {
    pub cpu: f64,
    pub memory: f64,
    pub disk: f64,
    pub net_rx: f64,
    pub net_tx: f64,
    pub latency_ms: f64,
}

impl PodProfile {
    fn generate(profile_seed: u64, pod: &str) -> Self {
        let mut r = rng::stream(profile_seed, name_salt(pod));
        let mut u = |lo: f64, hi: f64| r.random_range(lo..hi);
        Self {
            cpu: u(0.05, 0.3),
            memory: u(100.0, 400.0) * 1024.0 * 1024.0,
            disk: u(1.0e9, 3.0e9),
            net_rx: u(0.2e6, 2.0e6),
            net_tx: u(0.2e6, 2.0e6),
            latency_ms: u(2.0, 20.0),
        }
    }
}

/// Closed-open anomaly interval on one pod, as recorded in the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelInterval {
    pub pod: String,
    pub start_ts: Timestamp,
    pub end_ts: Timestamp,
    /// `direct:<kind>` or `propagated:<hops>`.
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowLabel {
    pub pod: String,
    pub start: Timestamp,
    pub anomalous: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub intervals: Vec<LabelInterval>,
    /// Install that coincides with an injection onset on its service.
    pub causal_install_ts: Option<Timestamp>,
}

impl GroundTruth {
    /// True iff some scrape of the window falls inside an anomaly interval
    /// on that pod.
    pub fn window_is_anomalous(&self, pod: &str, start: Timestamp, spec: WindowSpec, scrape: Timestamp) -> bool {
        let last = start + spec.duration_s - scrape;
        self.intervals
            .iter()
            .filter(|iv| iv.pod == pod)
            .any(|iv| {
                // first scrape at or after the interval start
                let first_in = iv.start_ts.max(start);
                let aligned = start + (first_in - start + scrape - 1).div_euclid(scrape) * scrape;
                aligned <= last && aligned < iv.end_ts
            })
    }

    pub fn labels(
        &self,
        pods: &[String],
        spec: WindowSpec,
        scrape: Timestamp,
        t0: Timestamp,
        t1: Timestamp,
    ) -> BTreeMap<(String, Timestamp), bool> {
        let mut out = BTreeMap::new();
        for pod in pods {
            for k in 0..spec.count(t0, t1) {
                let start = t0 + k as Timestamp * spec.stride_s;
                out.insert((pod.clone(), start), self.window_is_anomalous(pod, start, spec, scrape));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TruthFile {
    intervals: Vec<LabelInterval>,
    causal_install_ts: Option<Timestamp>,
    window: WindowSpec,
    scrape_interval: Timestamp,
    labels: Vec<WindowLabel>,
}

pub fn read_truth(text: &str) -> Result<(GroundTruth, WindowSpec, Vec<WindowLabel>)> {
    let f: TruthFile = serde_json::from_str(text)?;
    Ok((
        GroundTruth {
            intervals: f.intervals,
            causal_install_ts: f.causal_install_ts,
        },
        f.window,
        f.labels,
    ))
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub samples: Vec<MetricSample>,
    pub spans: Vec<Span>,
    pub installs: Vec<InstallEvent>,
    pub truth: GroundTruth,
    /// Package set of every service at the end of the run.
    pub final_packages: BTreeMap<String, PackageSet>,
    pub pods: Vec<String>,
    config: SimConfig,
}

impl SimOutput {
    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn truth_json(&self) -> Result<String> {
        let spec = self.config.label_window;
        let labels = self
            .truth
            .labels(&self.pods, spec, self.config.scrape_interval, self.config.start_ts, self.config.end_ts())
            .into_iter()
            .map(|((pod, start), anomalous)| WindowLabel { pod, start, anomalous })
            .collect();
        let f = TruthFile {
            intervals: self.truth.intervals.clone(),
            causal_install_ts: self.truth.causal_install_ts,
            window: spec,
            scrape_interval: self.config.scrape_interval,
            labels,
        };
        Ok(serde_json::to_string_pretty(&f)?)
    }

    /// Write `metrics.jsonl`, `spans.jsonl`, `installs.jsonl` and
    /// `truth.json` into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut buf = Vec::new();
        write_samples(&mut buf, &self.samples)?;
        std::fs::write(dir.join("metrics.jsonl"), &buf)?;
        buf.clear();
        crate::graph::write_spans(&mut buf, &self.spans)?;
        std::fs::write(dir.join("spans.jsonl"), &buf)?;
        let mut lines = String::new();
        for ev in &self.installs {
            lines.push_str(&ev.to_line());
            lines.push('\n');
        }
        std::fs::write(dir.join("installs.jsonl"), lines)?;
        std::fs::write(dir.join("truth.json"), self.truth_json()?)?;
        Ok(())
    }
}

/// Deterministic starting inventory of a service.
pub fn initial_packages(profile_seed: u64, service: &str) -> PackageSet {
    const NAMES: [&str; 16] = [
        "libcurl", "openssl", "zlib", "pyyaml", "requests", "thrift", "boost", "libmemcached", "mongo-c-driver",
        "hiredis", "jaeger-client", "nlohmann-json", "libevent", "spdlog", "libuuid", "ca-certificates",
    ];
    let mut r = rng::stream(profile_seed, name_salt(service) ^ 0xbabe);
    let mut pkgs = PackageSet::new();
    for n in NAMES {
        if r.random_bool(0.7) {
            let v = format!("{}.{}.{}", r.random_range(1..4), r.random_range(0..20), r.random_range(0..10));
            pkgs.insert(n, v);
        }
    }
    pkgs
}

fn validate(cfg: &SimConfig, scenario: &Scenario) -> Result<()> {
    cfg.topology.graph()?;
    let pods: BTreeSet<String> = cfg.topology.pods().into_iter().collect();
    let (t0, t1) = (cfg.start_ts, cfg.end_ts());
    for inj in &scenario.injections {
        inject(inj.kind, inj.magnitude)?;
        if !pods.contains(&inj.pod) {
            return Err(Error::InvalidInjection(format!("unknown pod `{}`", inj.pod)));
        }
        if inj.start_ts >= inj.end_ts || inj.start_ts < t0 || inj.end_ts > t1 {
            return Err(Error::InvalidInjection(format!(
                "interval [{}, {}) is empty or outside the run [{t0}, {t1}]",
                inj.start_ts, inj.end_ts
            )));
        }
    }
    for (i, a) in scenario.injections.iter().enumerate() {
        for b in &scenario.injections[i + 1..] {
            if a.kind == b.kind && a.pod == b.pod && a.start_ts < b.end_ts && b.start_ts < a.end_ts {
                return Err(Error::InvalidInjection(format!(
                    "overlapping {} injections on `{}`",
                    a.kind, a.pod
                )));
            }
        }
    }
    for ins in &scenario.installs {
        if !cfg.topology.services.contains(&ins.service) {
            return Err(Error::InvalidInstall(format!("unknown service `{}`", ins.service)));
        }
        if ins.ts < t0 || ins.ts > t1 {
            return Err(Error::InvalidInstall(format!("install at t={} outside the run", ins.ts)));
        }
        PackageSet::from_specs(&ins.delta)?;
    }
    Ok(())
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

struct PodSeries {
    pod: String,
    values: BTreeMap<&'static str, Vec<f64>>,
    latency_factor: Vec<f64>,
}

fn simulate_pod(cfg: &SimConfig, pod: &str, injections: &[InjectionSpec], propagated: &[PropagatedInterval]) -> PodSeries {
    let profile = PodProfile::generate(cfg.profile_seed, pod);
    let n = (cfg.duration_s / cfg.scrape_interval) as usize;
    let ts = |k: usize| cfg.start_ts + k as Timestamp * cfg.scrape_interval;
    let noise = cfg.load.noise;
    let stream = |metric: &str| rng::stream(cfg.seed, name_salt(pod) ^ name_salt(metric).rotate_left(17));

    let load: Vec<f64> = (0..n).map(|k| cfg.load.factor(ts(k))).collect();
    // Latency is an average over many requests, so its scrape noise shrinks
    // with the request count.
    let latency_noise = 0.3 / (cfg.load.requests_per_scrape.max(1) as f64).sqrt();

    let mut r = stream(CPU);
    let mut cpu: Vec<f64> = load.iter().map(|l| profile.cpu * l * (1.0 + noise * normal(&mut r))).collect();
    let mut r = stream(MEMORY);
    let mut memory: Vec<f64> = load
        .iter()
        .map(|l| profile.memory * (1.0 + 0.1 * (l - 1.0)) * (1.0 + 0.01 * normal(&mut r)))
        .collect();
    let mut r = stream(DISK);
    let mut disk: Vec<f64> = (0..n).map(|_| profile.disk * (1.0 + 0.002 * normal(&mut r))).collect();
    let mut r = stream(NET_RX);
    let mut rx: Vec<f64> = load.iter().map(|l| profile.net_rx * l * (1.0 + noise * normal(&mut r))).collect();
    let mut r = stream(NET_TX);
    let mut tx: Vec<f64> = load.iter().map(|l| profile.net_tx * l * (1.0 + noise * normal(&mut r))).collect();
    let mut r = stream(LATENCY);
    let mut latency: Vec<f64> = load
        .iter()
        .map(|l| profile.latency_ms * (1.0 + 0.05 * (l - 1.0)) * (1.0 + latency_noise * normal(&mut r)))
        .collect();

    let mut latency_factor = vec![1.0; n];
    for inj in injections.iter().filter(|i| i.pod == pod) {
        let pert = inject(inj.kind, inj.magnitude).expect("validated");
        let mut leak_floor = f64::NEG_INFINITY;
        for k in 0..n {
            let t = ts(k);
            if t < inj.start_ts || t >= inj.end_ts {
                continue;
            }
            // Effect is measured at the end of the scrape interval.
            let e = pert.effect((t - inj.start_ts + cfg.scrape_interval) as f64);
            cpu[k] += e.cpu_add;
            disk[k] = (disk[k] + e.disk_add).min(DISK_CAPACITY_BYTES);
            rx[k] += e.net_add;
            tx[k] += e.net_add;
            latency_factor[k] *= e.latency_factor;
            if inj.kind == AnomalyKind::MemoryLeak {
                // Leaked memory is never released while the leak runs.
                let v = (memory[k] + e.memory_add).min(MEMORY_LIMIT_BYTES).max(leak_floor);
                leak_floor = v;
                memory[k] = v;
            }
        }
    }
    for iv in propagated.iter().filter(|p| p.pod == pod) {
        for (k, f) in latency_factor.iter_mut().enumerate() {
            let t = ts(k);
            if t >= iv.start_ts && t < iv.end_ts {
                *f *= iv.latency_factor;
            }
        }
    }
    latency.iter_mut().zip(&latency_factor).for_each(|(l, f)| *l *= f);

    // Resource values stay strictly positive.
    let floor = |v: &mut Vec<f64>, min: f64| v.iter_mut().for_each(|x| *x = x.max(min));
    floor(&mut cpu, 1e-4);
    floor(&mut memory, 1.0);
    floor(&mut disk, 1.0);
    floor(&mut rx, 1.0);
    floor(&mut tx, 1.0);
    floor(&mut latency, 1e-3);

    PodSeries {
        pod: pod.to_string(),
        values: [(CPU, cpu), (MEMORY, memory), (DISK, disk), (NET_RX, rx), (NET_TX, tx), (LATENCY, latency)].into(),
        latency_factor,
    }
}

/// One ComposePost-style trace per scrape tick.
fn simulate_traces(cfg: &SimConfig, series: &BTreeMap<String, PodSeries>) -> Vec<Span> {
    let topo = &cfg.topology;
    let n = (cfg.duration_s / cfg.scrape_interval) as usize;
    let mut r = rng::stream(cfg.seed, 0x7ace);
    let means: BTreeMap<&String, f64> = topo
        .services
        .iter()
        .map(|s| (s, PodProfile::generate(cfg.profile_seed, &topo.pods_of(s)[0]).latency_ms / 1000.0))
        .collect();
    let mut spans = Vec::with_capacity(n * topo.services.len());
    for k in 0..n {
        let t = cfg.start_ts + k as Timestamp * cfg.scrape_interval;
        let trace_id = format!("{:016x}", rng::derive_seed(cfg.seed, k as u64));
        let mut next_id = 0u64;
        let mut stack: Vec<(String, Option<String>)> =
            topo.roots().into_iter().rev().map(|s| (s.clone(), None)).collect();
        while let Some((service, parent)) = stack.pop() {
            next_id += 1;
            let span_id = format!("{next_id:04x}");
            let pods = topo.pods_of(&service);
            let pod = &pods[k % pods.len()];
            let factor = series.get(pod).map_or(1.0, |s| s.latency_factor[k]);
            let duration = means[&service] * factor * (0.25 * normal(&mut r)).exp();
            spans.push(Span {
                trace_id: trace_id.clone(),
                span_id: span_id.clone(),
                parent_span_id: parent,
                service: service.clone(),
                start: t,
                duration,
            });
            for callee in topo.callees_of(&service).into_iter().rev() {
                stack.push((callee.clone(), Some(span_id.clone())));
            }
        }
    }
    spans
}

fn simulate_installs(cfg: &SimConfig, scenario: &Scenario) -> Result<(Vec<InstallEvent>, BTreeMap<String, PackageSet>)> {
    let baseline: BTreeMap<String, PackageSet> = cfg
        .topology
        .services
        .iter()
        .map(|s| (s.clone(), initial_packages(cfg.profile_seed, s)))
        .collect();
    let mut state = baseline.clone();
    let mut installs = scenario.installs.clone();
    installs.sort_by(|a, b| (a.ts, &a.service).cmp(&(b.ts, &b.service)));
    let mut rollouts = Vec::new();
    for ins in &installs {
        let pkgs = state.get_mut(&ins.service).expect("validated service");
        pkgs.apply(&PackageSet::from_specs(&ins.delta)?);
        rollouts.push(Rollout {
            service: ins.service.clone(),
            ts: ins.ts,
            packages: pkgs.clone(),
        });
    }
    let mut scanner = Scanner::with_baseline(baseline);
    let mut events = Vec::new();
    let step = cfg.scan_interval_s.max(cfg.scrape_interval);
    let mut scan_at = cfg.start_ts + step;
    let mut last = cfg.start_ts - 1;
    loop {
        let now = scan_at.min(cfg.end_ts());
        let due: Vec<Rollout> = rollouts.iter().filter(|r| r.ts > last && r.ts <= now).cloned().collect();
        events.extend(scanner.scan(&due, now)?);
        last = now;
        if now >= cfg.end_ts() {
            break;
        }
        scan_at += step;
    }
    Ok((events, state))
}

pub fn run(cfg: &SimConfig, scenario: &Scenario) -> Result<SimOutput> {
    validate(cfg, scenario)?;
    let pods = cfg.topology.pods();
    let propagated = propagate(&cfg.topology, &scenario.injections)?;

    let series: BTreeMap<String, PodSeries> = pods
        .iter()
        .map(|p| (p.clone(), simulate_pod(cfg, p, &scenario.injections, &propagated)))
        .collect();

    let n = (cfg.duration_s / cfg.scrape_interval) as usize;
    let mut samples = Vec::with_capacity(n * pods.len() * METRICS.len());
    for k in 0..n {
        let t = cfg.start_ts + k as Timestamp * cfg.scrape_interval;
        for s in series.values() {
            for m in METRICS {
                samples.push(MetricSample::new(&s.pod, m, t, s.values[m][k]));
            }
        }
    }

    let spans = simulate_traces(cfg, &series);
    let (installs, final_packages) = simulate_installs(cfg, scenario)?;

    let mut intervals: Vec<LabelInterval> = scenario
        .injections
        .iter()
        .map(|i| LabelInterval {
            pod: i.pod.clone(),
            start_ts: i.start_ts,
            end_ts: i.end_ts,
            source: format!("direct:{}", i.kind),
        })
        .collect();
    intervals.extend(propagated.iter().map(|p| LabelInterval {
        pod: p.pod.clone(),
        start_ts: p.start_ts,
        end_ts: p.end_ts,
        source: format!("propagated:{}", p.hops),
    }));
    let causal_install_ts = scenario
        .installs
        .iter()
        .filter(|ins| {
            scenario
                .injections
                .iter()
                .any(|inj| inj.start_ts == ins.ts && service_of(&inj.pod) == ins.service)
        })
        .map(|ins| ins.ts)
        .min();

    Ok(SimOutput {
        samples,
        spans,
        installs,
        truth: GroundTruth {
            intervals,
            causal_install_ts,
        },
        final_packages,
        pods,
        config: cfg.clone(),
    })
}
