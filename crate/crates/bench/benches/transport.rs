use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use csda_bench::{scenario, smooth_field};
use csda_core::dose_planner::FixedPointOptions;
use csda_core::solver::solve_forward;

fn operator_apply(c: &mut Criterion) {
    let mut g = c.benchmark_group("apply");
    for n in [4, 6] {
        let s = scenario(n);
        let psi = smooth_field(&s);
        g.bench_with_input(BenchmarkId::new("transport", n), &psi, |b, psi| b.iter(|| s.op.apply(psi).unwrap()));
        g.bench_with_input(BenchmarkId::new("collision", n), &psi, |b, psi| b.iter(|| s.op.collision.apply(psi).unwrap()));
    }
    g.finish();
}

fn forward_solve(c: &mut Criterion) {
    let mut g = c.benchmark_group("solve");
    g.sample_size(10);
    for n in [4, 6] {
        let s = scenario(n);
        let (f, beam) = (s.volume_source(), s.beam());
        g.bench_function(BenchmarkId::new("forward", n), |b| {
            b.iter(|| solve_forward(s.op.clone(), &f, &beam, &s.params.solver).unwrap())
        });
    }
    g.finish();
}

fn planner(c: &mut Criterion) {
    let mut g = c.benchmark_group("planner");
    g.sample_size(10);
    let s = scenario(4);
    let p = s.planner().unwrap();
    let start = p.zero_external();
    g.bench_function("state", |b| b.iter(|| p.state(start.clone()).unwrap()));
    let few = FixedPointOptions {
        max_iter: 5,
        tol: f64::MIN_POSITIVE,
        ..s.params.plan.fixed_point()
    };
    g.bench_function("five_iterations", |b| {
        b.iter(|| {
            // Hitting the iteration cap is expected here.
            let _ = p.optimize_external(None, &few);
        })
    });
    g.finish();
}

criterion_group!(benches, operator_apply, forward_solve, planner);
criterion_main!(benches);
