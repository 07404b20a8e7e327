use adaptex::config::{Algorithm, ArmSpace, BanditConfig, RewardSpec};
use adaptex::par::Execution;
use adaptex::simulator::{sweep, Environment, Grid, PipelineParams};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn bench_sweep(c: &mut Criterion) {
    let config = BanditConfig::new(
        "bench",
        Algorithm::EpsilonGreedy,
        ArmSpace::explicit(["a", "b", "c", "d"]),
        RewardSpec::Binary,
    );
    let env = Environment::bernoulli(&[0.3, 0.4, 0.5, 0.6]);
    let grid = Grid::from([("epsilon".to_string(), vec![0.05.into(), 0.1.into(), 0.2.into()])]);
    let seeds: Vec<u64> = (0..4).collect();
    let params = PipelineParams::default();

    let mut group = c.benchmark_group("sweep");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel.available()] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| sweep(&config, &env, &grid, &seeds, 2_000, &params, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_sweep);
criterion_main!(benches);
