use std::path::Path;
use std::process::{Command, Output};

fn praxium(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_praxium"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn praxium")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = praxium(dir, args);
    assert!(
        out.status.success(),
        "praxium {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const CONFIG: &str = "epochs = 30\nmetrics = \"healthy/metrics.jsonl\"\nmodel = \"model.json\"\n";

fn trained(dir: &Path, epochs: usize, hours: &str) {
    std::fs::write(dir.join("cfg.toml"), CONFIG.replace("30", &epochs.to_string())).unwrap();
    ok(dir, &["-c", "cfg.toml", "--seed", "3", "simulate", "--out", "healthy", "--hours", hours]);
    let out = ok(dir, &["-c", "cfg.toml", "--seed", "3", "train"]);
    assert!(out.contains("model saved to model.json"), "{out}");
}

fn run_args<'a>(run: &'a str, out: &'a str) -> Vec<String> {
    ["metrics", "spans", "installs", "truth"]
        .iter()
        .flat_map(|k| {
            let file = if *k == "truth" { "truth.json".to_string() } else { format!("{k}.jsonl") };
            ["--set".to_string(), format!("{k}={run}/{file}")]
        })
        .chain(["--set".to_string(), format!("out={out}")])
        .collect()
}

#[test]
fn simulate_train_diagnose_attributes_the_faulty_install() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d, 30, "4");
    ok(
        d,
        &[
            "-c", "cfg.toml", "--seed", "9", "simulate", "--out", "run", "--hours", "3",
            "--inject", "cpu:home-timeline-service-0:7200:10800:0.8",
            "--install", "home-timeline-service@7200:libhometimeline@2.1.0",
            "--install", "text-service@6600:libtext@4.2.0",
        ],
    );

    let mut args: Vec<String> = ["-c", "cfg.toml", "--seed", "9"].map(String::from).to_vec();
    args.extend(run_args("run", "a.json"));
    args.push("diagnose".into());
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let text = ok(d, &refs);
    assert!(text.contains("root cause: t=7200 home-timeline-service"), "{text}");
    assert!(!text.contains("text-service"), "text-service is off the critical path:\n{text}");

    // Same seed, sequential execution, separate report file: same bytes.
    let mut again: Vec<&str> = refs.iter().map(|a| if *a == "out=a.json" { "out=b.json" } else { a }).collect();
    again.insert(0, "--sequential");
    ok(d, &again);
    assert_eq!(std::fs::read(d.join("a.json")).unwrap(), std::fs::read(d.join("b.json")).unwrap());

    let mut eval_args = refs.clone();
    *eval_args.last_mut().unwrap() = "evaluate";
    let metrics = ok(d, &eval_args);
    assert!(metrics.contains("T=2: f1"), "{metrics}");
}

#[test]
fn healthy_run_reports_healthy() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // A fully trained detector; the quick one above alarms too often.
    trained(d, 200, "8");
    ok(d, &["-c", "cfg.toml", "--seed", "4", "simulate", "--out", "calm", "--hours", "2"]);
    let mut args: Vec<String> = ["-c", "cfg.toml"].map(String::from).to_vec();
    args.extend(run_args("calm", "calm.json"));
    args.push("diagnose".into());
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let text = ok(d, &refs);
    assert!(text.starts_with("healthy: no alert raised"), "{text}");
}

#[test]
fn bad_configuration_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = praxium(d, &["--set", "tau=0", "detect"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("tau"));

    std::fs::write(d.join("bad.toml"), "windw_s = 600\n").unwrap();
    let out = praxium(d, &["-c", "bad.toml", "detect"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("windw_s"));

    let out = praxium(d, &["detect"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no `model` path"));
}

#[test]
fn malformed_injection_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = praxium(dir.path(), &["simulate", "--out", "x", "--inject", "cpu:pod-0:10"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("KIND:POD:START:END:MAGNITUDE"));
}
