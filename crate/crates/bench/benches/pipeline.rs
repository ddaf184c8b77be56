use std::sync::Arc;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;
use nudich::builtin::example;
use nudich::polyops::{enumerate_basis, kronecker, lift_matrix};
use nudich::{analyze, build_evolution, normalize, reduce, DichotomyTester, PipelineOptions, SpectrumConfig, SystemSpec};

fn system(name: &str) -> Arc<SystemSpec> {
    Arc::new(example(name).unwrap().system().unwrap())
}

fn evolution(c: &mut Criterion) {
    let mut g = c.benchmark_group("evolution");
    g.sample_size(10);
    for name in ["diag-1-2", "barreira-valls"] {
        let sys = system(name);
        g.bench_with_input(BenchmarkId::new("build", name), &sys, |b, sys| {
            b.iter(|| build_evolution(sys.clone(), (-20.0, 20.0), 1e-10).unwrap())
        });
    }
    let ev = build_evolution(system("barreira-valls"), (-20.0, 20.0), 1e-10).unwrap();
    g.bench_function("propagate off grid", |b| b.iter(|| ev.propagate(black_box(7.31), black_box(-12.07)).unwrap()));
    g.finish();
}

fn dichotomy(c: &mut Criterion) {
    let ev = build_evolution(system("barreira-valls"), (-20.0, 20.0), 1e-10).unwrap();
    let tester = DichotomyTester::new(&ev, &SpectrumConfig::default()).unwrap();
    let mut g = c.benchmark_group("dichotomy");
    g.sample_size(10);
    g.bench_function("classify gamma 0", |b| b.iter(|| tester.classify(black_box(0.0))));
    g.finish();
}

fn polynomial_lifts(c: &mut Criterion) {
    let mut g = c.benchmark_group("polyops");
    for k in [2u32, 3, 4] {
        let a = DMatrix::from_fn(4, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        g.bench_with_input(BenchmarkId::new("lift 4x4", k), &k, |b, &k| b.iter(|| lift_matrix(black_box(&a), k).unwrap()));
    }
    let a = DMatrix::from_fn(6, 6, |i, j| (i as f64 - j as f64).sin());
    let bm = DMatrix::from_fn(5, 5, |i, j| (i * j) as f64 * 0.1);
    g.bench_function("kronecker 6x6 5x5", |b| b.iter(|| kronecker(black_box(&a), black_box(&bm)).unwrap()));
    g.bench_function("basis n=6 k=5", |b| b.iter(|| enumerate_basis(6, 5).unwrap()));
    g.finish();
}

fn stages(c: &mut Criterion) {
    let mut g = c.benchmark_group("pipeline");
    g.sample_size(10);
    let opts = PipelineOptions { window: (-40.0, 40.0), degree: 3, ..Default::default() };
    let sys = system("diag-1-2");
    g.bench_function("spectrum diag-1-2", |b| b.iter(|| analyze(sys.clone(), &opts).unwrap()));
    let an = analyze(sys.clone(), &opts).unwrap();
    g.bench_function("reduce diag-1-2", |b| b.iter(|| reduce(&an, &opts).unwrap()));
    let bs = reduce(&an, &opts).unwrap();
    g.bench_function("normal form diag-1-2 degree 3", |b| b.iter(|| normalize(&an, &bs, &opts).unwrap()));

    let tri = PipelineOptions::default();
    let an = analyze(system("triangular"), &tri).unwrap();
    g.bench_function("reduce triangular", |b| b.iter(|| reduce(&an, &tri).unwrap()));
    g.finish();
}

criterion_group!(benches, evolution, dichotomy, polynomial_lifts, stages);
criterion_main!(benches);
