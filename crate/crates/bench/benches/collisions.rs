use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};

use qsteer::model::{step_map, steady_state};
use qsteer::rng::trajectory_rng;
use qsteer::scenarios::{run_trajectory, ScenarioSpec};
use qsteer::steering::{generate_ensemble, TrajectoryBudget};
use qsteer::ModelParams;

fn bench_step_map(c: &mut Criterion) {
    let p = ModelParams::reference();
    let rho = steady_state(&p).unwrap().to_state().unwrap();
    c.bench_function("density_collision_step", |b| {
        b.iter(|| step_map(std::hint::black_box(&rho), &p).unwrap())
    });
}

fn bench_trajectory(c: &mut Criterion) {
    let p = ModelParams::reference();
    let spec = ScenarioSpec::from_name("x").unwrap();
    let steps = 10_000u64;
    let mut group = c.benchmark_group("trajectory");
    group.throughput(Throughput::Elements(steps));
    group.bench_function("x_scenario_10k_collisions", |b| {
        b.iter_batched(
            || trajectory_rng(7, 0),
            |mut rng| run_trajectory(&spec, &p, steps, &mut rng).unwrap(),
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

fn bench_ensemble(c: &mut Criterion) {
    let p = ModelParams::reference();
    let spec = ScenarioSpec::from_name("adaptive").unwrap();
    let budget = TrajectoryBudget::new(64, 5_000, 1_000).unwrap();
    c.bench_function("adaptive_ensemble_64x5k", |b| {
        b.iter(|| generate_ensemble(&spec, &p, &budget, 11).unwrap())
    });
}

criterion_group!(benches, bench_step_map, bench_trajectory, bench_ensemble);
criterion_main!(benches);
