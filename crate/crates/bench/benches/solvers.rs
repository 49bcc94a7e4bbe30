use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use orim_core::bayes::bayes_opt_rank;
use orim_core::datagen::{
    build_conv_matrix_1d, build_training_set, CircleParams, Circles2D, ForwardModel2D, NoiseSpec, PiecewiseConstant1D,
};
use orim_core::{
    orim2, rank_update_solve, DMatrix, ErrorMeasure, LinearOperator, Orim2Solver, TrainingSet, UpdateConfig,
};

fn deconv(n: usize, k: usize) -> (DMatrix<f64>, TrainingSet) {
    let fwd = build_conv_matrix_1d(n, 2.0).unwrap();
    let data = build_training_set(&PiecewiseConstant1D { n }, &fwd, &NoiseSpec::fixed(0.01, 1), k, 1).unwrap();
    (fwd.matrix, data)
}

fn closed_form(c: &mut Criterion) {
    let mut group = c.benchmark_group("orim2");
    for n in [30, 60, 120] {
        let (_, data) = deconv(n, 10 * n);
        group.bench_with_input(BenchmarkId::new("solve", n), &data, |b, d| {
            b.iter(|| orim2(black_box(d), n / 3).unwrap())
        });
        let solver = Orim2Solver::new(&data).unwrap();
        group.bench_with_input(BenchmarkId::new("at_rank", n), &solver, |b, s| {
            b.iter(|| s.at_rank(black_box(n / 3)).unwrap())
        });
    }
    group.finish();
}

fn rank_update(c: &mut Criterion) {
    let (_, data) = deconv(20, 200);
    let mut group = c.benchmark_group("rank_update");
    group.sample_size(10);
    for p in [1.2, 2.0, 5.0] {
        let measure = ErrorMeasure::trainable(p).unwrap();
        let mut cfg = UpdateConfig::new(4, &measure);
        cfg.ell = 2;
        group.bench_function(BenchmarkId::new("p", p), |b| {
            b.iter(|| rank_update_solve(black_box(&data), &measure, &cfg, 3).unwrap())
        });
    }
    group.finish();
}

fn forward_models(c: &mut Criterion) {
    let side = 64;
    let fwd = ForwardModel2D::new(side, 5.0).unwrap();
    let gen = Circles2D {
        side,
        params: CircleParams::for_side(side),
    };
    let data = build_training_set(&gen, &fwd, &NoiseSpec::range(0.1, 0.15, 1), 16, 2).unwrap();
    c.bench_function("blur_2d/64x64x16", |b| {
        b.iter(|| fwd.apply(black_box(data.truths())).unwrap())
    });
}

fn bayes(c: &mut Criterion) {
    let (a, _) = deconv(60, 1);
    let m = DMatrix::identity(60, 60);
    c.bench_function("bayes_opt_rank/60", |b| {
        b.iter(|| bayes_opt_rank(black_box(&a), &m, 0.05, 20).unwrap())
    });
}

criterion_group!(benches, closed_form, rank_update, forward_models, bayes);
criterion_main!(benches);
