use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mtds_bench::Fixture;
use mtds_core::adais::{adais_fit, sequential_filter, AdaIsConfig, GaussianMixture};
use mtds_core::gradients::loglik_and_grad;
use mtds_core::kalman::{equivalence_gap, kalman_filter, StochasticLds};
use mtds_core::{gaussian_loglik, LatentCode};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const T: usize = 100;

fn fixtures() -> [(&'static str, Fixture); 3] {
    [
        ("pd", Fixture::pd(T)),
        ("lds", Fixture::lds(T)),
        ("mtrnn", Fixture::mtrnn(T)),
    ]
}

fn simulate(c: &mut Criterion) {
    let mut g = c.benchmark_group("simulate");
    for (name, f) in fixtures() {
        let theta = f.theta();
        g.bench_function(name, |b| {
            b.iter(|| {
                f.model
                    .simulate(&f.shared, black_box(theta.as_slice()), &f.record.u)
                    .unwrap()
            })
        });
    }
    g.finish();
}

fn loglik_gradient(c: &mut Criterion) {
    let mut g = c.benchmark_group("loglik_and_grad");
    for (name, f) in fixtures() {
        g.bench_function(name, |b| {
            b.iter(|| loglik_and_grad(&f.model, &f.shared, &f.generator, black_box(&f.z), &f.record, &f.nu).unwrap())
        });
    }
    g.finish();
}

fn adais(c: &mut Criterion) {
    let f = Fixture::pd(T);
    let target = |z: &DVector<f64>| {
        let prior = -0.5 * z.norm_squared();
        match f.generator.apply(&LatentCode(z.clone())) {
            Ok(theta) => match f.model.simulate(&f.shared, theta.as_slice(), &f.record.u) {
                Ok(yhat) => prior + gaussian_loglik(&yhat, &f.record.y, &f.record.mask, &f.nu),
                Err(_) => f64::NEG_INFINITY,
            },
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let q0 = GaussianMixture::standard(2);
    let mut g = c.benchmark_group("adais");
    g.sample_size(10);
    for m in [500, 2000] {
        let cfg = AdaIsConfig {
            m,
            m_ess: m as f64 / 4.0,
            seed: 5,
            ..AdaIsConfig::default()
        };
        g.bench_with_input(BenchmarkId::new("fit_pd", m), &cfg, |b, cfg| {
            b.iter(|| adais_fit(target, &q0, cfg).unwrap())
        });
    }
    let cfg = AdaIsConfig {
        m: 500,
        m_ess: 125.0,
        thin: 10,
        seed: 5,
        ..AdaIsConfig::default()
    };
    g.bench_function("filter_pd_thin10", |b| {
        b.iter(|| sequential_filter(&f.record, &f.generator, &f.shared, &f.nu, &f.model, &cfg).unwrap())
    });
    g.finish();
}

fn kalman(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut g = c.benchmark_group("kalman");
    for n_x in [2, 8] {
        let model = StochasticLds::random_stable(n_x, 2, &mut rng);
        let y = model.sample(300, &mut rng);
        let (m0, p0) = (DVector::zeros(n_x), DMatrix::identity(n_x, n_x));
        g.bench_with_input(BenchmarkId::new("filter", n_x), &y, |b, y| {
            b.iter(|| kalman_filter(&model, y, &m0, &p0).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("equivalence_gap", n_x), &y, |b, y| {
            b.iter(|| equivalence_gap(&model, y, 1e-12).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, simulate, loglik_gradient, adais, kalman);
criterion_main!(benches);
