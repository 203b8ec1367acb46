//! Scenario sweeps and corpus verification, rayon pool against one thread.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gpux_core::harness::corpus::{corpus_check_with, default_dir};
use gpux_core::harness::{run_batch, Scenario};
use gpux_core::par::Exec;

fn sweep() -> Vec<Scenario> {
    let patterns = ["ZIPF(0.99)", "STRIDE(64KB)", "SEQ_SCAN", "RANDOM"];
    let policies = ["", "[policy]\nkind = LFU\n", "[policy]\nkind = STRIDE\n", "[policy]\nkind = ADAPTIVE_SEQ\n"];
    let mut out = Vec::new();
    for (i, pattern) in patterns.iter().enumerate() {
        for (j, policy) in policies.iter().enumerate() {
            let text = format!(
                "name = sweep-{i}-{j}\nseed = {}\n[device]\ncapacity = 8MB\n[tenant.0]\nworking_set = 12MB\npattern = {pattern}\nevents = 20000\n{policy}",
                i * 4 + j
            );
            out.push(Scenario::parse(&text).expect("sweep scenario parses"));
        }
    }
    out
}

fn bench(c: &mut Criterion) {
    let scenarios = sweep();
    let mut g = c.benchmark_group("scenario_sweep");
    g.sample_size(10);
    for (name, exec) in [("parallel", Exec::Parallel), ("sequential", Exec::Sequential)] {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| run_batch(&scenarios, exec));
        });
    }
    g.finish();

    let dir = default_dir();
    let mut g = c.benchmark_group("corpus");
    for (name, exec) in [("parallel", Exec::Parallel), ("sequential", Exec::Sequential)] {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| corpus_check_with(&dir, exec).expect("corpus loads"));
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
