//! Sequential against rayon-parallel execution of the batch hot paths.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use prefetch_rag::bench::{run_traces, Experiment};
use prefetch_rag::config::Config;
use prefetch_rag::parallel::Exec;
use prefetch_rag::predictor::{self, PredictionConfig, PredictorParams};
use prefetch_rag::runtime::{Mode, RuntimeConfig};
use prefetch_rag::synth::{synth_batch, SynthConfig};

fn paths() -> Vec<(&'static str, Exec)> {
    let mut v = vec![("sequential", Exec::Sequential)];
    if Exec::available() == Exec::Parallel {
        v.push(("parallel", Exec::Parallel));
    }
    v
}

fn batch(c: &mut Criterion) {
    let synth = SynthConfig {
        n_tokens: 256,
        ..Default::default()
    };
    let exp = Experiment::new(Config::default(), 1, Exec::Sequential).unwrap();
    let traces = synth_batch(&synth, 42, 64, Exec::Sequential).unwrap();
    let inst = predictor::build_instances(&traces, &PredictionConfig::default(), 1, Exec::Sequential).unwrap();
    let params = PredictorParams::init(inst[0].window.features.len(), 32, 3);
    let rc = RuntimeConfig {
        mode: Mode::SyncReactive,
        ..Default::default()
    };

    let mut g = c.benchmark_group("batch");
    g.sample_size(10);
    for (name, exec) in paths() {
        g.bench_with_input(BenchmarkId::new("synth_64_traces", name), &exec, |b, &e| {
            b.iter(|| synth_batch(&synth, 42, 64, e).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("predict_instances", name), &exec, |b, &e| {
            b.iter(|| predictor::predict_all(&params, &inst, e).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("run_64_queries", name), &exec, |b, &e| {
            b.iter(|| run_traces(&traces, None, &exp.env, &rc, 1, e).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, batch);
criterion_main!(benches);
