use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::DVector;
use rand::Rng;
use zofed_core::engine::nn::{local_step_nn, ClientState};
use zofed_core::engine::twostage::{vi_projection_solve, ViBudget};
use zofed_core::engine::RunConfig;
use zofed_core::problems::cournot::{cournot_closed_form, CournotConfig, CournotGame};
use zofed_core::problems::synthetic::ClosureObjective;
use zofed_core::smoothing::{sample_sphere, two_point_grad};
use zofed_core::{stream_rng, ConvexSet, SmoothingParams, Stream, TwoStageProblem};

fn estimator(c: &mut Criterion) {
    let mut rng = stream_rng(1, Stream::Init);
    for n in [10usize, 100, 1000] {
        let params = SmoothingParams::new(0.01, n).unwrap();
        let x = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let v = sample_sphere(&mut rng, &params);
        c.bench_function(&format!("two_point_grad/n={n}"), |b| {
            b.iter(|| two_point_grad(|z| Ok(z.norm_squared()), black_box(&x), &v, &params).unwrap())
        });
    }
}

fn projections(c: &mut Criterion) {
    let n = 100;
    let mut rng = stream_rng(2, Stream::Init);
    let x = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
    let sets = [
        ("box", ConvexSet::uniform_box(n, -1.0, 1.0).unwrap()),
        ("ball", ConvexSet::ball(DVector::zeros(n), 1.0).unwrap()),
        ("halfspace", ConvexSet::halfspace(DVector::from_element(n, 1.0), 0.5).unwrap()),
    ];
    for (name, set) in &sets {
        c.bench_function(&format!("project/{name}"), |b| b.iter(|| set.project(black_box(&x))));
    }
}

fn cournot(c: &mut Criterion) {
    let mut rng = stream_rng(3, Stream::Init);
    let cfg = CournotConfig::sample(20, 1.0, &mut rng).unwrap();
    c.bench_function("cournot_closed_form/n=20", |b| b.iter(|| cournot_closed_form(&cfg, black_box(1.0), 10.0)));

    let game = CournotGame::sample(cfg, 1, 1, &mut rng).unwrap();
    let vi = game.scenario(0, 0);
    let budget = ViBudget::new(35.0, &vi.constants()).unwrap();
    let x = DVector::from_element(1, 1.0);
    c.bench_function("vi_projection_solve/n=20,k=10", |b| {
        b.iter(|| vi_projection_solve(vi.as_ref(), black_box(&x), &budget, 10, None).unwrap())
    });
}

fn local_step(c: &mut Criterion) {
    let n = 100;
    let set = ConvexSet::uniform_box(n, -1.0, 1.0).unwrap();
    let p = ClosureObjective::new(n, 1, set, |x: &DVector<f64>| x.iter().map(|t| t.abs()).sum());
    let cfg = RunConfig::new(1, 1e-3, 0.01, 1, 1, 0);
    let params = SmoothingParams::new(cfg.eta, n).unwrap();
    let mut state = ClientState::new(0, 0, DVector::from_element(n, 0.5));
    c.bench_function("local_step_nn/n=100", |b| b.iter(|| local_step_nn(&p, 0, &mut state, &cfg, &params).unwrap()));
}

criterion_group!(benches, estimator, projections, cournot, local_step);
criterion_main!(benches);
