use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use sfuq_core::sde_sim::TriadLimitSystem;
use sfuq_core::twobsde::ApproximatorSpec;
use sfuq_core::{
    make_lq_problem, make_triad_qoi_problem, reduce_lq, simulate, solve_2bsde, solve_ghjb, Axis,
    GhjbProblem, GridSpec, MultiscaleLQModel, SimConfig, TriadLimit, TriadModel, TriadSystem,
    UncertaintyInterval,
};

fn sigma() -> UncertaintyInterval {
    UncertaintyInterval::new(0.8, 1.0).unwrap()
}

fn fd(c: &mut Criterion) {
    let model = MultiscaleLQModel::regulator_benchmark(0.3, sigma(), 0.1).unwrap();
    let reduced = GhjbProblem::lq_reduced(&reduce_lq(&model).unwrap()).unwrap();
    let grid_1d = GridSpec::with_stable_dt(
        vec![Axis::new(-3.0, 5.0, 160).unwrap()],
        0.1,
        &reduced,
        &sigma(),
        2.0,
    )
    .unwrap();
    c.bench_function("ghjb_reduced_lq_160", |b| {
        b.iter(|| solve_ghjb(black_box(&reduced), &sigma(), &grid_1d, &[]).unwrap())
    });

    let full = GhjbProblem::lq_full(&model).unwrap();
    let axes = vec![
        Axis::new(-3.0, 5.0, 40).unwrap(),
        Axis::new(-5.0, 5.0, 30).unwrap(),
    ];
    let grid_2d = GridSpec::with_stable_dt(axes, 0.1, &full, &sigma(), 2.0).unwrap();
    let mut g = c.benchmark_group("ghjb_full_lq");
    g.sample_size(10);
    g.bench_function("40x30", |b| {
        b.iter(|| solve_ghjb(black_box(&full), &sigma(), &grid_2d, &[]).unwrap())
    });
    g.finish();
}

fn bsde(c: &mut Criterion) {
    let model = MultiscaleLQModel::regulator_benchmark(0.3, sigma(), 0.1).unwrap();
    let lq = make_lq_problem(&model, vec![1.0, 0.5]).unwrap();
    let triad = TriadModel::new(1.0, 1.0, -2.0, sigma(), 0.2, 1.0).unwrap();
    let limit = make_triad_qoi_problem(&triad, TriadSystem::Limit, 0.1, vec![1.0, -2.0]).unwrap();
    let spec = ApproximatorSpec::default();
    let mut g = c.benchmark_group("2bsde");
    g.sample_size(10);
    g.bench_function("lq_full_20x5000", |b| {
        b.iter(|| solve_2bsde(black_box(&lq), &spec, 20, 5000, 1).unwrap())
    });
    g.bench_function("triad_limit_20x5000", |b| {
        b.iter(|| solve_2bsde(black_box(&limit), &spec, 20, 5000, 1).unwrap())
    });
    g.finish();
}

fn sde(c: &mut Criterion) {
    let sys = TriadLimitSystem(TriadLimit::new(1.0, 1.0, -2.0, 1.0, 1.0).unwrap());
    let cfg = SimConfig::new(1e-3, 0.5, 200, 7, vec![1.0, -2.0]);
    c.bench_function("simulate_triad_limit_200x500", |b| {
        b.iter(|| simulate(black_box(&sys), &cfg).unwrap())
    });
}

criterion_group!(benches, fd, bsde, sde);
criterion_main!(benches);
