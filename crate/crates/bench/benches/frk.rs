use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use frk_bench::{covariance, grid_baus, grid_model};
use frk_core::basis::{build_s, SMethod};
use frk_core::bench::{cell_centre, exact_krige, simulate_field};
use frk_core::em::{e_step, em_step, loglik};
use frk_core::{auto_basis, fit, predict, AutoBasisOptions, BoundingBox, EmOptions, KType, Manifold, PredictOptions, Variant};

fn estimation(c: &mut Criterion) {
    let mut g = c.benchmark_group("estimation");
    g.sample_size(10);
    for k_type in [KType::Unstructured, KType::BlockExponential] {
        let model = grid_model(50, 1000, 2, k_type, Variant::Case2, 1);
        let params = model.params().clone();
        let name = format!("{k_type:?}");
        g.bench_function(BenchmarkId::new("e_step", &name), |b| b.iter(|| e_step(&model, &params).unwrap()));
        g.bench_function(BenchmarkId::new("loglik", &name), |b| b.iter(|| loglik(&model, &params).unwrap()));
        g.bench_function(BenchmarkId::new("em_step", &name), |b| b.iter(|| em_step(&model, &params).unwrap()));
    }
    g.finish();
}

fn prediction(c: &mut Criterion) {
    let mut g = c.benchmark_group("prediction");
    g.sample_size(10);
    for variant in [Variant::Case1, Variant::Case2] {
        let model = grid_model(50, 1000, 2, KType::Unstructured, variant, 2);
        let (model, _) = fit(model, &EmOptions { n_em: 5, ..Default::default() }).unwrap();
        g.bench_function(BenchmarkId::new("bau_level", variant.name()), |b| {
            b.iter(|| predict(&model, None, &PredictOptions::default()).unwrap())
        });
    }
    g.finish();
}

fn basis_matrix(c: &mut Criterion) {
    let mut g = c.benchmark_group("basis_matrix");
    let extent = BoundingBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
    for nres in [2, 3] {
        let basis = auto_basis(&Manifold::plane(), &extent, &AutoBasisOptions { nres, ..Default::default() }).unwrap();
        let baus = grid_baus(100);
        g.bench_with_input(BenchmarkId::new("centroid", nres), &nres, |b, _| {
            b.iter(|| build_s(&basis, &baus, SMethod::Centroid).unwrap())
        });
    }
    g.finish();
}

fn simulation(c: &mut Criterion) {
    let mut g = c.benchmark_group("simulation");
    g.sample_size(10);
    let cov = covariance();
    for n in [32, 64, 128] {
        g.bench_with_input(BenchmarkId::new("field", n), &n, |b, &n| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            b.iter(|| simulate_field(&cov, n, &mut rng).unwrap())
        });
    }
    let n = 50;
    let obs: Vec<[f64; 2]> = (0..1000).map(|k| cell_centre(n, (k * 7) % (n * n))).collect();
    let z = vec![0.5; obs.len()];
    let pred: Vec<[f64; 2]> = (0..500).map(|k| cell_centre(n, (k * 11 + 3) % (n * n))).collect();
    g.bench_function("exact_krige_1000", |b| b.iter(|| exact_krige(&cov, &obs, &z, 1.0, &pred).unwrap()));
    g.finish();
}

criterion_group!(benches, estimation, prediction, basis_matrix, simulation);
criterion_main!(benches);
