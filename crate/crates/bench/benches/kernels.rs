use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use sdaf_core::functional as fun;
use sdaf_core::{spectral, spin, ActionConfig, FlatTorus2, MapField, SolverConfig, SpinStructure, SurfaceDomain};

const ID: [[i64; 2]; 2] = [[1, 0], [0, 1]];

fn domain(n: usize) -> SurfaceDomain {
    SurfaceDomain::new(n, 1.0, SpinStructure::from_signs(-1, -1).unwrap()).unwrap()
}

fn operators(c: &mut Criterion) {
    let mut g = c.benchmark_group("operators");
    for n in [16, 32, 64] {
        let d = domain(n);
        let phi = MapField::smooth_sphere_map(&d, 0.5, 1).unwrap();
        let psi = fun::random_tangent_spinor(&d, &phi, 2);
        g.bench_with_input(BenchmarkId::new("twisted_dirac", n), &n, |b, _| {
            b.iter(|| fun::twisted_dirac(&d, &phi, black_box(&psi)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("resolvent", n), &n, |b, _| {
            b.iter(|| spin::resolvent_precondition(&d, black_box(&psi)).unwrap())
        });
    }
    g.finish();
}

fn gradients(c: &mut Criterion) {
    let mut g = c.benchmark_group("gradients");
    let cfg = ActionConfig::with_exponent(1.5, 0.25, 4.0).unwrap();
    for n in [16, 32] {
        let d = domain(n);
        let phi = MapField::smooth_sphere_map(&d, 0.5, 3).unwrap();
        let psi = fun::random_tangent_spinor(&d, &phi, 4);
        g.bench_with_input(BenchmarkId::new("horizontal", n), &n, |b, _| {
            b.iter(|| fun::horizontal_gradient(&d, black_box(&phi), &psi, &cfg).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("vertical", n), &n, |b, _| {
            b.iter(|| fun::vertical_gradient(&d, black_box(&phi), &psi, &cfg).unwrap())
        });
    }
    g.finish();
}

fn solvers(c: &mut Criterion) {
    let mut g = c.benchmark_group("solvers");
    g.sample_size(10);
    let d = domain(16);
    let start = MapField::smooth_torus_map(&d, FlatTorus2::default(), ID, 0.05, 5).unwrap();
    g.bench_function("minimize_16", |b| {
        b.iter(|| sdaf_core::solver::minimize_alpha_energy(&d, black_box(&start), 1.5, &SolverConfig::default()).unwrap())
    });
    let sphere = MapField::smooth_sphere_map(&d, 0.5, 6).unwrap();
    let zt = spectral::default_zero_threshold(&d);
    g.bench_function("spectrum_16_m8", |b| b.iter(|| spectral::dirac_spectrum(&d, black_box(&sphere), 8, zt).unwrap()));
    g.finish();
}

criterion_group!(benches, operators, gradients, solvers);
criterion_main!(benches);
