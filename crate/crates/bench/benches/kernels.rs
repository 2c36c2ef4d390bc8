use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use hjcert::certify::{certify_expr, eval_enclosure, eval_interval, route_query, CertifyOptions, Route};
use hjcert::grid::SweepOperator;
use hjcert::net::Trainer;
use hjcert::{ExperimentConfig, GridField, Interval, NetParams, Problem, StateBox};

fn setup() -> (ExperimentConfig, Problem, NetParams) {
    let cfg = ExperimentConfig::preset("double-integrator-paper").unwrap();
    let problem = Problem::new(cfg.problem.clone()).unwrap();
    let net = NetParams::init(cfg.seed, &cfg.layer_sizes(), cfg.network.w0).unwrap();
    (cfg, problem, net)
}

fn network(c: &mut Criterion) {
    let (cfg, problem, net) = setup();
    let x = [0.3, -1.2];
    c.bench_function("forward", |b| b.iter(|| net.forward(black_box(&x))));
    c.bench_function("grad_x", |b| b.iter(|| net.grad_x(black_box(&x))));
    let mut s = cfg.training.clone();
    s.buffer_fill = 20_000;
    let mut trainer = Trainer::new(&problem, net.clone(), &s, 0).unwrap();
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    g.bench_function("step_batch_4096", |b| b.iter(|| trainer.step()));
    g.finish();
}

fn grid(c: &mut Criterion) {
    let (cfg, problem, _) = setup();
    let op = SweepOperator::new(&problem, &cfg.grid.shape).unwrap();
    let field = GridField::from_fn(&cfg.grid.shape, &cfg.problem.roi, &|x: &[f64]| x[0] * x[1]).unwrap();
    let mut g = c.benchmark_group("grid");
    g.sample_size(20);
    g.bench_function("sweep_201x201", |b| b.iter(|| op.apply(black_box(&field))));
    g.finish();
}

fn certifier(c: &mut Criterion) {
    let (_, problem, net) = setup();
    let (domain, residual) = route_query(&problem, Route::B, &net.export_expr()).unwrap();
    let small = StateBox::from_intervals(&[Interval::new(0.3, 0.31), Interval::new(-1.2, -1.19)]);
    let mut g = c.benchmark_group("certify");
    g.sample_size(20);
    g.bench_function("residual_interval_box", |b| b.iter(|| eval_interval(&residual, black_box(&small))));
    g.bench_function("residual_enclosure_box", |b| b.iter(|| eval_enclosure(&residual, black_box(&small))));
    let coarse = CertifyOptions::default();
    g.bench_function("refute_untrained_roi", |b| {
        b.iter(|| certify_expr(&problem, &residual, &domain, Route::B, 0.1, 1e-8, 2, &coarse).unwrap())
    });
    g.finish();
}

criterion_group!(benches, network, grid, certifier);
criterion_main!(benches);
