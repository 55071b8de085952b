//! Acceptance suite. Runs as a plain binary so every criterion prints its
//! verdict line even when the test harness captures output.

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;

use praxium_core::config::PipelineConfig;
use praxium_core::detector::{alert_positions, DetectorModel, TriggerState};
use praxium_core::eval::*;
use praxium_core::graph::CausalGraph;
use praxium_core::impact::{estimate_impact, synthetic_pair, ImpactQuery};
use praxium_core::pipeline::run_pipeline;
use praxium_core::rng;
use praxium_core::sbom::{PackageSet, Rollout, SbomStore, Scanner};
use praxium_core::simulator::{self, AnomalyKind};
use praxium_core::telemetry::{MetricSample, MetricSeries, MetricStore, WindowSpec};
use praxium_core::{ExecMode, Timestamp};

const SEED: u64 = 0;
const EXEC: ExecMode = ExecMode::Parallel;

struct Verdict {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn report(v: &Verdict) {
    let tag = if v.pass { "PASS" } else { "FAIL" };
    println!("[{tag}] criterion {}: {}", v.id, v.detail);
}

fn main() -> ExitCode {
    // libtest passes flags like --nocapture or a name filter; honor a filter
    // that cannot match so `cargo test some_unit_test` stays fast.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if let Some(f) = args.first() {
        if !"acceptance".contains(f.as_str()) {
            return ExitCode::SUCCESS;
        }
    }

    let exp = ExperimentConfig {
        pipeline: PipelineConfig { seed: SEED, ..PipelineConfig::default() },
        ..ExperimentConfig::default()
    };
    let t = Instant::now();
    let model = train_on_healthy(&exp, &exp.pipeline, EXEC).expect("training");
    println!("trained detector on {} h of healthy telemetry in {:.1?}", exp.train_hours, t.elapsed());

    let mut verdicts = Vec::new();
    let (c1, c2) = detection(&model, &exp);
    verdicts.push(c1);
    verdicts.push(c2);
    verdicts.push(attribution(&model, &exp));
    verdicts.push(earliest_culprit(&model, &exp));
    verdicts.push(critical_path(&model, &exp));
    verdicts.extend(properties(&exp));
    verdicts.push(calibration(&model, &exp));

    println!();
    for v in &verdicts {
        report(v);
    }
    let failed = verdicts.iter().filter(|v| !v.pass).count();
    println!("{} of {} acceptance checks passed", verdicts.len() - failed, verdicts.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn detection(model: &DetectorModel, exp: &ExperimentConfig) -> (Verdict, Verdict) {
    let t = Instant::now();
    let cfg = &exp.pipeline;
    let mut f1_ok = true;
    let mut prec_ok = true;
    let mut f1s = Vec::new();
    let mut precs = Vec::new();
    for kind in AnomalyKind::ALL {
        let runs = simulate_all(&detection_scenarios(exp, kind, 10, SEED), EXEC).expect("simulate");
        let by_tau = detection_confusion(model, cfg, &runs, &[1, 2], EXEC).expect("score");
        let m1 = by_tau[&1].metrics();
        let m2 = by_tau[&2].metrics();
        println!(
            "  {kind:<16} T=1 f1 {:.3} precision {:.3} | T=2 f1 {:.3} precision {:.3} recall {:.3}",
            m1.f1, m1.precision, m2.f1, m2.precision, m2.recall
        );
        f1_ok &= m2.f1 >= 0.95;
        prec_ok &= m2.precision >= m1.precision;
        f1s.push(format!("{kind} {:.3}", m2.f1));
        precs.push(format!("{kind} {:.3}->{:.3}", m1.precision, m2.precision));
    }
    println!("  detection runs scored in {:.1?}", t.elapsed());
    (
        Verdict {
            id: "1 detection macro-F1 >= 0.95 per kind (W=600 S=300 T=2)",
            pass: f1_ok,
            detail: f1s.join(", "),
        },
        Verdict {
            id: "2 precision T=2 >= T=1 per kind",
            pass: prec_ok,
            detail: precs.join(", "),
        },
    )
}

fn attribution(model: &DetectorModel, exp: &ExperimentConfig) -> Verdict {
    let specs = trial_specs(&[600, 300, 120], 3, 5, CulpritPlacement::Uniform, SEED);
    let trials = attribution_trials(model, exp, &specs, EXEC).expect("trials");
    print!("{}", trials_table(&trials));
    let ok = trials.iter().filter(|o| o.success()).count();

    let adv_specs = trial_specs(&[120], 9, 5, CulpritPlacement::NeverLast, SEED ^ 1);
    let adv = attribution_trials(model, exp, &adv_specs, EXEC).expect("adversarial trials");
    print!("culprit never last:\n{}", trials_table(&adv));
    let adv_ok = adv.iter().filter(|o| o.success()).count();
    let naive_ok = adv.iter().filter(|o| o.naive_success()).count();

    Verdict {
        id: "3 attribution trials >= 8/9, naive baseline strictly worse when culprit is never last",
        pass: ok >= 8 && naive_ok < adv_ok,
        detail: format!(
            "{ok}/{} correct; adversarial {adv_ok}/{} vs naive {naive_ok}/{}",
            trials.len(),
            adv.len(),
            adv.len()
        ),
    }
}

fn earliest_culprit(model: &DetectorModel, exp: &ExperimentConfig) -> Verdict {
    let specs = trial_specs(&[600, 300, 120], 1, 5, CulpritPlacement::Fixed(0), SEED ^ 2);
    let trials = attribution_trials(model, exp, &specs, EXEC).expect("trials");
    let ok = trials.iter().filter(|o| o.success()).count();
    let naive = trials.iter().filter(|o| o.naive_success()).count();
    Verdict {
        id: "3b culprit as the earliest of 5 installs is still attributed",
        pass: ok == trials.len(),
        detail: format!("{ok}/{} correct, naive {naive}/{}", trials.len(), trials.len()),
    }
}

fn critical_path(model: &DetectorModel, exp: &ExperimentConfig) -> Verdict {
    let mut ok = 0;
    let mut notes = Vec::new();
    for v in 0..3 {
        let o = run_critical_path(model, exp, v, EXEC).expect("critical-path scenario");
        ok += usize::from(o.success());
        notes.push(format!(
            "v{v}: candidates {:?} chosen {:?} true {}",
            o.diagnosis.candidate_services(),
            o.diagnosis.chosen_ts(),
            o.true_ts
        ));
    }
    Verdict {
        id: "4 critical-path filtering excludes text-service and finds the culprit",
        pass: ok == 3,
        detail: format!("{ok}/3; {}", notes.join("; ")),
    }
}

fn properties(exp: &ExperimentConfig) -> Vec<Verdict> {
    vec![
        trigger_equivalence(),
        window_counts(),
        reachability(),
        sbom_replay(),
        null_calibration(),
        p_monotonicity(),
        determinism(exp),
    ]
}

fn trigger_equivalence() -> Verdict {
    let mut r = rng::stream(SEED, 0x7219);
    let mut bad = 0;
    for _ in 0..1000 {
        let len = r.random_range(0..60);
        let density = r.random_range(0.1..0.9);
        let flags: Vec<bool> = (0..len).map(|_| r.random_bool(density)).collect();
        let tau = r.random_range(1..6);
        // Brute force: every tau-th window inside a run of detections alerts.
        let mut expected = Vec::new();
        let mut run = 0;
        for (i, &f) in flags.iter().enumerate() {
            run = if f { run + 1 } else { 0 };
            if run % tau == 0 && run > 0 {
                expected.push(i);
            }
        }
        let mut state = TriggerState::new(["p"], tau, 600);
        let streamed: Vec<usize> = flags
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| state.update("p", f, i as Timestamp * 300).map(|_| i))
            .collect();
        if alert_positions(&flags, tau) != expected || streamed != expected {
            bad += 1;
        }
    }
    Verdict {
        id: "5a trigger logic equals brute force (1000 sequences)",
        pass: bad == 0,
        detail: format!("{bad} mismatches"),
    }
}

fn window_counts() -> Verdict {
    let mut r = rng::stream(SEED, 0x3c0);
    let mut bad = 0;
    for _ in 0..1000 {
        let s = 30 * r.random_range(1..20);
        let w = s * r.random_range(1..6);
        let t0 = 30 * r.random_range(0..100);
        let span = 30 * r.random_range(0..400);
        let brute = (0..)
            .map(|k| t0 + k * s)
            .take_while(|start| start + w <= t0 + span)
            .count();
        if WindowSpec::new(w, s).count(t0, t0 + span) != brute {
            bad += 1;
        }
    }
    Verdict {
        id: "5b window count formula equals enumeration",
        pass: bad == 0,
        detail: format!("{bad} mismatches over 1000 (W, S, span) draws"),
    }
}

fn reachability() -> Verdict {
    let mut r = rng::stream(SEED, 0xda9);
    let mut bad = 0;
    for _ in 0..200 {
        let n = r.random_range(1..14);
        let names: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
        let mut reach = vec![vec![false; n]; n];
        let mut edges = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if r.random_bool(0.25) {
                    edges.push((names[a].clone(), names[b].clone()));
                    reach[a][b] = true;
                }
            }
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    reach[i][j] |= reach[i][k] && reach[k][j];
                }
            }
        }
        let g = CausalGraph::from_edges(names.clone(), &edges).expect("dag");
        let paths: Vec<BTreeSet<String>> = names.iter().map(|s| g.critical_path(s).expect("node")).collect();
        for i in 0..n {
            for j in 0..n {
                let expect = i == j || reach[i][j] || reach[j][i];
                if paths[i].contains(&names[j]) != expect || paths[i].contains(&names[j]) != paths[j].contains(&names[i]) {
                    bad += 1;
                }
            }
        }
    }
    Verdict {
        id: "5c critical path matches transitive closure and is symmetric (200 DAGs)",
        pass: bad == 0,
        detail: format!("{bad} mismatched pairs"),
    }
}

fn sbom_replay() -> Verdict {
    let mut r = rng::stream(SEED, 0x5b0);
    let services = ["a", "b", "c"];
    let mut bad = 0;
    for _ in 0..200 {
        let mut scanner = Scanner::new();
        let mut store = SbomStore::in_memory();
        let mut truth: BTreeMap<&str, PackageSet> = BTreeMap::new();
        for step in 0..r.random_range(1..15) {
            let ts = step as Timestamp * 3600;
            let mut rollouts = Vec::new();
            for svc in services {
                if !r.random_bool(0.5) {
                    continue;
                }
                let mut set = PackageSet::new();
                for p in 0..r.random_range(0..6) {
                    set.insert(format!("pkg{p}"), format!("{}.0", r.random_range(0..3)));
                }
                truth.insert(svc, set.clone());
                rollouts.push(Rollout { service: svc.into(), ts, packages: set });
            }
            let events = scanner.scan(&rollouts, ts).expect("scan");
            store.record(&events).expect("record");
        }
        let mut text = Vec::new();
        store.write_lines(&mut text).expect("write");
        let reloaded = SbomStore::from_lines(std::str::from_utf8(&text).expect("utf8")).expect("reload");
        for (svc, set) in &truth {
            let replayed = reloaded.replay(svc).unwrap_or_default();
            if &replayed != set {
                bad += 1;
            }
        }
    }
    Verdict {
        id: "5d SBOM snapshot + delta replay reconstructs every service (200 logs)",
        pass: bad == 0,
        detail: format!("{bad} mismatched services"),
    }
}

fn series(values: &[f64]) -> MetricSeries {
    let mut store = MetricStore::default();
    store.ingest(
        values
            .iter()
            .enumerate()
            .map(|(k, v)| MetricSample::new("p", "m", k as Timestamp * 30, *v)),
    );
    store.series("p", "m").expect("series").clone()
}

const PRE: usize = 200;
const POST: usize = 20;

fn null_calibration() -> Verdict {
    let alpha = 0.01;
    let trials: Vec<u64> = (0..200).collect();
    let p_values = EXEC.map(&trials, |&i| {
        let seed = rng::derive_seed(SEED, 0x9011 + i);
        let (y, x) = synthetic_pair(PRE + POST, 1.5, 1.0, 0.1, seed);
        let (target, control) = (series(&y), series(&x));
        let q = ImpactQuery {
            target: &target,
            controls: vec![&control],
            intervention_ts: PRE as Timestamp * 30,
            pre_len_s: PRE as Timestamp * 30,
            post_end_ts: (PRE + POST) as Timestamp * 30,
        };
        estimate_impact(&q, 1000, seed).expect("impact").p_value
    });
    let alarms = p_values.iter().filter(|&&p| p < alpha).count();
    let rate = alarms as f64 / p_values.len() as f64;
    Verdict {
        id: "5e impact null false-alarm rate <= 0.05 at alpha 0.01 (200 trials)",
        pass: rate <= 0.05,
        detail: format!("{alarms}/200 = {rate:.3}"),
    }
}

fn p_monotonicity() -> Verdict {
    // p is one-sided in the direction of the observed effect, so along a ray
    // of steps it can only fall once the effect points the way of the step.
    let mut bad = 0;
    let mut checked = 0;
    for i in 0..20 {
        let seed = rng::derive_seed(SEED, 0x30e0 + i);
        let (y, x) = synthetic_pair(PRE + POST, 1.5, 1.0, 0.1, seed);
        let control = series(&x);
        for dir in [1.0, -1.0] {
            let mut prev = f64::INFINITY;
            for step in [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0] {
                let shifted: Vec<f64> =
                    y.iter().enumerate().map(|(k, v)| if k >= PRE { v + dir * step } else { *v }).collect();
                let target = series(&shifted);
                let q = ImpactQuery {
                    target: &target,
                    controls: vec![&control],
                    intervention_ts: PRE as Timestamp * 30,
                    pre_len_s: PRE as Timestamp * 30,
                    post_end_ts: (PRE + POST) as Timestamp * 30,
                };
                let r = estimate_impact(&q, 1000, seed).expect("impact");
                if r.avg_effect * dir < 0.0 {
                    continue;
                }
                checked += 1;
                if r.p_value > prev {
                    bad += 1;
                }
                prev = r.p_value;
            }
        }
    }
    Verdict {
        id: "5f p-value non-increasing in injected step size",
        pass: bad == 0 && checked > 200,
        detail: format!("{bad} increases over {checked} steps (20 series, both directions)"),
    }
}

fn determinism(exp: &ExperimentConfig) -> Verdict {
    // A reduced model keeps this affordable; the full pipeline runs twice,
    // once per execution mode.
    let cfg = PipelineConfig { epochs: 20, seed: 5, ..exp.pipeline.clone() };
    let small = ExperimentConfig { pipeline: cfg.clone(), train_hours: 4, ..exp.clone() };
    let (sim, scenario, _) = critical_path_scenario(&small, 1);
    let end_to_end = |exec: ExecMode| -> (String, Vec<u8>, String) {
        let model = train_on_healthy(&small, &cfg, exec).expect("train");
        let out = simulator::run(&sim, &scenario).expect("simulate");
        let dir = tempfile::tempdir().expect("tempdir");
        out.write_dir(dir.path()).expect("write");
        let mut bytes = Vec::new();
        for f in ["metrics.jsonl", "spans.jsonl", "installs.jsonl", "truth.json"] {
            bytes.extend(std::fs::read(dir.path().join(f)).expect("read"));
        }
        let d = run_pipeline(&model, &cfg, &inputs_of(&out).expect("inputs"), exec).expect("pipeline");
        (model.to_json().expect("model json"), bytes, d.to_json().expect("diagnosis json"))
    };
    let a = end_to_end(ExecMode::Parallel);
    let b = end_to_end(ExecMode::Parallel);
    let c = end_to_end(ExecMode::Sequential);
    let same = a == b && a == c;
    Verdict {
        id: "5g end-to-end byte-determinism under a fixed seed",
        pass: same,
        detail: format!(
            "model {} B, telemetry {} B, diagnosis {} B; repeat and sequential runs {}",
            a.0.len(),
            a.1.len(),
            a.2.len(),
            if same { "identical" } else { "differ" }
        ),
    }
}

fn calibration(model: &DetectorModel, exp: &ExperimentConfig) -> Verdict {
    let hold = exp.healthy_run(rng::derive_seed(SEED, 0x401d), exp.holdout_hours).expect("holdout");
    let rates = holdout_fp_rates(model, &hold, &exp.pipeline, EXEC).expect("holdout scoring");
    let (worst_pod, worst) = rates
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(p, r)| (p.clone(), *r))
        .unwrap_or_default();
    let mean = rates.values().sum::<f64>() / rates.len().max(1) as f64;
    Verdict {
        id: "6 per-pod healthy hold-out FP window rate <= 0.025",
        pass: worst <= 0.025,
        detail: format!(
            "{} h hold-out, worst {worst_pod} {worst:.4}, mean {mean:.4}",
            exp.holdout_hours
        ),
    }
}
