//! Sequential vs. rayon execution of the two hot loops: batch window scoring
//! and per-candidate counterfactual fits.
//!
//! Build with `--no-default-features` to see both modes fall back to the
//! sequential path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use praxium_core::config::PipelineConfig;
use praxium_core::eval::{store_of, ExperimentConfig};
use praxium_core::impact::{estimate_impact, synthetic_pair, ImpactQuery};
use praxium_core::pipeline::{score_store, train_detector};
use praxium_core::telemetry::{MetricSample, MetricSeries, MetricStore};
use praxium_core::{ExecMode, Timestamp};

const MODES: [ExecMode; 2] = [ExecMode::Sequential, ExecMode::Parallel];

fn scoring(c: &mut Criterion) {
    let cfg = PipelineConfig { epochs: 5, ..PipelineConfig::default() };
    let exp = ExperimentConfig { pipeline: cfg.clone(), ..ExperimentConfig::default() };
    let train = store_of(&exp.healthy_run(1, 2).unwrap());
    let model = train_detector(&train, 0, 2 * 3600, &cfg, ExecMode::Parallel).unwrap();
    let store = store_of(&exp.healthy_run(2, 12).unwrap());

    let mut g = c.benchmark_group("score_store_12h");
    g.sample_size(10);
    for mode in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &m| {
            b.iter(|| score_store(&model, &store, 0, 12 * 3600, &cfg, m).unwrap())
        });
    }
    g.finish();
}

fn series(pod: &str, values: &[f64]) -> MetricSeries {
    let mut store = MetricStore::default();
    store.ingest(
        values
            .iter()
            .enumerate()
            .map(|(k, v)| MetricSample::new(pod, "m", k as Timestamp * 30, *v)),
    );
    store.series(pod, "m").unwrap().clone()
}

fn impact(c: &mut Criterion) {
    let pairs: Vec<(MetricSeries, MetricSeries)> = (0..16)
        .map(|i| {
            let (y, x) = synthetic_pair(220, 1.5, 1.0, 0.1, i);
            (series("t", &y), series("c", &x))
        })
        .collect();
    let fit = |(t, x): &(MetricSeries, MetricSeries)| {
        let q = ImpactQuery {
            target: t,
            controls: vec![x],
            intervention_ts: 200 * 30,
            pre_len_s: 200 * 30,
            post_end_ts: 220 * 30,
        };
        estimate_impact(&q, 1000, 7).unwrap().p_value
    };

    let mut g = c.benchmark_group("impact_16_candidates");
    g.sample_size(10);
    for mode in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &m| {
            b.iter(|| m.map(&pairs, fit))
        });
    }
    g.finish();
}

criterion_group!(benches, scoring, impact);
criterion_main!(benches);
