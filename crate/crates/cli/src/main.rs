use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use praxium_core::config::PipelineConfig;
use praxium_core::detector::DetectorModel;
use praxium_core::eval::{self, CulpritPlacement, ExperimentConfig};
use praxium_core::pipeline::{self, Inputs};
use praxium_core::simulator::{self, AnomalyKind, InjectionSpec, InstallSpec, Scenario};
use praxium_core::telemetry::{read_samples, MetricStore};
use praxium_core::{ExecMode, Timestamp};

/// Detect anomalies in microservice telemetry and attribute them to the
/// software installation that caused them.
#[derive(Parser, Debug)]
#[command(name = "praxium", version)]
struct Cli {
    /// Key-value (TOML) configuration file.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Override a configuration key, e.g. `--set tau=1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Seed for every random choice (simulation, training, draws).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run data-parallel loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the social-network deployment and write metrics, spans,
    /// installs and ground truth into a directory.
    Simulate(SimulateArgs),
    /// Train the detector on healthy metrics and save the model.
    Train,
    /// Score windows and list alerts.
    Detect,
    /// Run detection and root-cause attribution end to end.
    Diagnose,
    /// Score windows against ground-truth labels, or run the simulated
    /// detection experiment with `--experiment`.
    Evaluate(EvaluateArgs),
    /// Search window duration and stride per anomaly kind.
    Grid(ExperimentArgs),
    /// Multi-install attribution trials.
    Trials(TrialsArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    hours: f64,
    #[arg(long, default_value_t = 0)]
    start_ts: Timestamp,
    /// JSON scenario file with `injections` and `installs`.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// `KIND:POD:START:END:MAGNITUDE`, e.g. `cpu:text-service-0:1800:3600:0.8`.
    #[arg(long, value_parser = parse_injection)]
    inject: Vec<InjectionSpec>,
    /// `SERVICE@TS:PKG@VER[,PKG@VER...]`, e.g. `text-service@1800:libtext@4.2.0`.
    #[arg(long, value_parser = parse_install)]
    install: Vec<InstallSpec>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Simulate labelled runs instead of reading `truth`.
    #[arg(long)]
    experiment: bool,
    #[command(flatten)]
    exp: ExperimentArgs,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// Anomaly kinds, comma separated.
    #[arg(long, value_delimiter = ',', default_values = ["cpu", "memory", "disk", "network"])]
    kinds: Vec<AnomalyKind>,
    /// Injections per kind.
    #[arg(long, default_value_t = 10)]
    runs: usize,
    /// Hours of healthy telemetry to train on.
    #[arg(long, default_value_t = 18)]
    train_hours: i64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Placement {
    Uniform,
    NeverLast,
    First,
}

#[derive(Args, Debug)]
struct TrialsArgs {
    /// Install spacings in seconds.
    #[arg(long, value_delimiter = ',', default_values = ["600", "300", "120"])]
    spacings: Vec<Timestamp>,
    #[arg(long, default_value_t = 3)]
    trials: usize,
    #[arg(long, default_value_t = 5)]
    installs: usize,
    #[arg(long, value_enum, default_value_t = Placement::Uniform)]
    placement: Placement,
    #[arg(long, default_value_t = 18)]
    train_hours: i64,
}

fn parse_injection(s: &str) -> Result<InjectionSpec> {
    let parts: Vec<&str> = s.split(':').collect();
    let [kind, pod, start, end, magnitude] = parts[..] else {
        bail!("expected KIND:POD:START:END:MAGNITUDE, got `{s}`");
    };
    Ok(InjectionSpec {
        kind: kind.parse()?,
        pod: pod.to_string(),
        start_ts: start.parse().context("start")?,
        end_ts: end.parse().context("end")?,
        magnitude: magnitude.parse().context("magnitude")?,
    })
}

fn parse_install(s: &str) -> Result<InstallSpec> {
    let (head, pkgs) = s
        .split_once(':')
        .with_context(|| format!("expected SERVICE@TS:PKG@VER[,...], got `{s}`"))?;
    let (service, ts) = head.split_once('@').with_context(|| format!("missing @TS in `{head}`"))?;
    Ok(InstallSpec {
        service: service.to_string(),
        ts: ts.parse().context("install timestamp")?,
        delta: pkgs.split(',').map(str::to_string).collect(),
    })
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    }
    .with_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let exec = if cli.sequential { ExecMode::Sequential } else { ExecMode::Parallel };

    match cli.command {
        Command::Simulate(a) => simulate(&cfg, a),
        Command::Train => train(&cfg, exec),
        Command::Detect => detect(&cfg, exec),
        Command::Diagnose => diagnose(&cfg, exec),
        Command::Evaluate(a) if a.experiment => evaluate_experiment(&cfg, &a.exp, exec),
        Command::Evaluate(_) => evaluate_files(&cfg, exec),
        Command::Grid(a) => grid(&cfg, &a, exec),
        Command::Trials(a) => trials(&cfg, &a, exec),
    }
}

fn simulate(cfg: &PipelineConfig, a: SimulateArgs) -> Result<()> {
    let mut scenario = match &a.scenario {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| p.display().to_string())?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => Scenario::default(),
    };
    scenario.injections.extend(a.inject);
    scenario.installs.extend(a.install);
    let exp = ExperimentConfig { pipeline: cfg.clone(), ..ExperimentConfig::default() };
    let sim = exp.sim(cfg.seed, a.start_ts, (a.hours * 3600.0).round() as Timestamp);
    let out = simulator::run(&sim, &scenario)?;
    out.write_dir(&a.out)?;
    println!(
        "wrote {} samples, {} spans, {} install events for {} pods to {}",
        out.samples.len(),
        out.spans.len(),
        out.installs.len(),
        out.pods.len(),
        a.out.display()
    );
    Ok(())
}

fn load_store(cfg: &PipelineConfig) -> Result<MetricStore> {
    let path = cfg.path("metrics")?;
    let mut store = MetricStore::new(cfg.scrape_interval);
    let file = File::open(path).with_context(|| path.display().to_string())?;
    let report = store.ingest(read_samples(BufReader::new(file))?);
    if !report.rejected.is_empty() {
        eprintln!("warning: {} metric samples rejected", report.rejected.len());
    }
    Ok(store)
}

/// `[first sample, last sample + scrape)` of a store.
fn span_of(store: &MetricStore) -> Result<(Timestamp, Timestamp)> {
    let (t0, t1) = store.time_span().context("no metric samples")?;
    Ok((t0, t1 + store.scrape_interval()))
}

fn load_model(cfg: &PipelineConfig) -> Result<DetectorModel> {
    let path = cfg.path("model")?;
    DetectorModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn write_out(cfg: &PipelineConfig, text: &str) -> Result<()> {
    if let Ok(path) = cfg.path("out") {
        write_file(path, text)?;
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).with_context(|| path.display().to_string())
}

fn train(cfg: &PipelineConfig, exec: ExecMode) -> Result<()> {
    let store = load_store(cfg)?;
    let (t0, t1) = span_of(&store)?;
    let model = pipeline::train_detector(&store, t0, t1, cfg, exec)?;
    let path = cfg.path("model")?;
    model.save(path)?;
    println!(
        "trained on {} pods over [{t0}, {t1}); mean training error {:.4}; model saved to {}",
        model.thresholds.len(),
        model.train_error_mean,
        path.display()
    );
    for (pod, t) in &model.thresholds {
        println!("  {pod:<28} threshold {t:.4}");
    }
    Ok(())
}

fn detect(cfg: &PipelineConfig, exec: ExecMode) -> Result<()> {
    let model = load_model(cfg)?;
    let store = load_store(cfg)?;
    let (t0, t1) = span_of(&store)?;
    let scored = pipeline::score_store(&model, &store, t0, t1, cfg, exec)?;
    let alerts = pipeline::alerts(&scored, cfg.tau, cfg.window_s);
    let flags = pipeline::window_flags(&scored, cfg.tau);
    let flagged = flags.values().filter(|f| **f).count();
    println!("{} windows scored, {flagged} anomalous after tau={}", flags.len(), cfg.tau);
    for a in &alerts {
        println!("alert {} at t={} (windows {:?})", a.pod, a.fired_at, a.window_trace);
    }
    if alerts.is_empty() {
        println!("healthy");
    }
    let rows: Vec<_> = flags
        .iter()
        .map(|((pod, start), f)| serde_json::json!({"pod": pod, "start": start, "anomalous": f}))
        .collect();
    write_out(cfg, &serde_json::to_string_pretty(&serde_json::json!({"alerts": alerts, "windows": rows}))?)
}

fn diagnose(cfg: &PipelineConfig, exec: ExecMode) -> Result<()> {
    let model = load_model(cfg)?;
    let inputs = Inputs::load(cfg)?;
    let d = pipeline::run_pipeline(&model, cfg, &inputs, exec)?;
    print!("{d}");
    write_out(cfg, &d.to_json()?)
}

fn evaluate_files(cfg: &PipelineConfig, exec: ExecMode) -> Result<()> {
    let model = load_model(cfg)?;
    let store = load_store(cfg)?;
    let path = cfg.path("truth")?;
    let (truth, _, _) = simulator::read_truth(&std::fs::read_to_string(path).with_context(|| path.display().to_string())?)?;
    let (t0, t1) = span_of(&store)?;
    let scored = pipeline::score_store(&model, &store, t0, t1, cfg, exec)?;
    let pods: Vec<String> = scored.keys().cloned().collect();
    let labels = truth.labels(&pods, cfg.window(), cfg.scrape_interval, t0, t1);
    let mut report = serde_json::Map::new();
    for tau in [1, cfg.tau] {
        let m = eval::evaluate(&pipeline::window_flags(&scored, tau), &labels)?;
        println!(
            "T={tau}: f1 {:.3} precision {:.3} recall {:.3} accuracy {:.3} (weighted f1 {:.3})",
            m.f1, m.precision, m.recall, m.accuracy, m.weighted_f1
        );
        report.insert(format!("tau_{tau}"), serde_json::to_value(&m)?);
    }
    write_out(cfg, &serde_json::to_string_pretty(&report)?)
}

fn experiment(cfg: &PipelineConfig, a: &ExperimentArgs) -> ExperimentConfig {
    ExperimentConfig {
        pipeline: cfg.clone(),
        train_hours: a.train_hours,
        injections_per_kind: a.runs,
        ..ExperimentConfig::default()
    }
}

fn evaluate_experiment(cfg: &PipelineConfig, a: &ExperimentArgs, exec: ExecMode) -> Result<()> {
    let exp = experiment(cfg, a);
    let model = eval::train_on_healthy(&exp, cfg, exec)?;
    let mut report = serde_json::Map::new();
    println!("{:<16} {:>4} {:>6} {:>6} {:>6} {:>6}", "anomaly", "T", "F1", "P", "R", "A");
    for &kind in &a.kinds {
        let runs = eval::simulate_all(&eval::detection_scenarios(&exp, kind, a.runs, cfg.seed), exec)?;
        let by_tau = eval::detection_confusion(&model, cfg, &runs, &[1, cfg.tau], exec)?;
        for (tau, c) in &by_tau {
            let m = c.metrics();
            println!(
                "{:<16} {tau:>4} {:>6.3} {:>6.3} {:>6.3} {:>6.3}",
                kind.as_str(),
                m.f1,
                m.precision,
                m.recall,
                m.accuracy
            );
            report.insert(format!("{kind}_tau_{tau}"), serde_json::to_value(&m)?);
        }
    }
    write_out(cfg, &serde_json::to_string_pretty(&report)?)
}

fn grid(cfg: &PipelineConfig, a: &ExperimentArgs, exec: ExecMode) -> Result<()> {
    let exp = experiment(cfg, a);
    let windows = eval::grid_windows();
    let cells = eval::grid_search(&exp, &a.kinds, &windows, exec)?;
    let best = eval::select_best(&cells, &a.kinds, &windows)?;
    print!("{}", eval::grid_table(&best));
    write_out(cfg, &eval::grid_csv(&cells, &best))
}

fn trials(cfg: &PipelineConfig, a: &TrialsArgs, exec: ExecMode) -> Result<()> {
    let exp = ExperimentConfig { pipeline: cfg.clone(), train_hours: a.train_hours, ..ExperimentConfig::default() };
    let model = eval::train_on_healthy(&exp, cfg, exec)?;
    let placement = match a.placement {
        Placement::Uniform => CulpritPlacement::Uniform,
        Placement::NeverLast => CulpritPlacement::NeverLast,
        Placement::First => CulpritPlacement::Fixed(0),
    };
    let specs = eval::trial_specs(&a.spacings, a.trials, a.installs, placement, cfg.seed);
    let outcomes = eval::attribution_trials(&model, &exp, &specs, exec)?;
    for o in &outcomes {
        println!(
            "spacing {:>4}s {:<26} {:<16} culprit #{} true {} chosen {:?} naive {:?} {}",
            o.spec.spacing_s,
            o.spec.pod,
            o.spec.kind.as_str(),
            o.spec.culprit,
            o.true_ts,
            o.chosen,
            o.naive,
            if o.success() { "ok" } else { "MISS" }
        );
    }
    print!("{}", eval::trials_table(&outcomes));
    write_out(cfg, &serde_json::to_string_pretty(&outcomes)?)
}
