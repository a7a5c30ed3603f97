use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use cusplab::{find_zeros, Complex64, RandomSection};
use cusplab_bench::{cusped_basis, disk_basis, gaussian_coefficients, sphere_basis};

fn basis_build(c: &mut Criterion) {
    let mut g = c.benchmark_group("basis_build");
    g.sample_size(10);
    for p in [8, 32] {
        g.bench_with_input(BenchmarkId::new("sphere", p), &p, |b, &p| b.iter(|| sphere_basis(black_box(p))));
        g.bench_with_input(BenchmarkId::new("cusped_sphere", p), &p, |b, &p| b.iter(|| cusped_basis(black_box(p))));
        g.bench_with_input(BenchmarkId::new("disk", p), &p, |b, &p| b.iter(|| disk_basis(black_box(p), 0.5)));
    }
    g.finish();
}

fn root_finding(c: &mut Criterion) {
    let mut g = c.benchmark_group("find_zeros");
    for p in [8, 32, 128] {
        let basis = sphere_basis(p);
        let coeffs = gaussian_coefficients(&basis, 0);
        g.bench_with_input(BenchmarkId::new("sphere", p), &p, |b, _| {
            b.iter(|| find_zeros(&RandomSection::new(&basis, coeffs.clone()).unwrap()).unwrap())
        });
    }
    g.finish();
}

fn kernel_evaluation(c: &mut Criterion) {
    let mut g = c.benchmark_group("kernel");
    let x = Complex64::new(0.3, 0.2);
    let y = Complex64::new(-0.1, 0.4);
    for p in [8, 64] {
        let basis = sphere_basis(p);
        g.bench_with_input(BenchmarkId::new("sphere_normalized", p), &p, |b, _| {
            b.iter(|| basis.normalized_kernel(black_box(x), black_box(y)).unwrap())
        });
        let disk = disk_basis(p, 0.5);
        g.bench_with_input(BenchmarkId::new("disk_density", p), &p, |b, _| b.iter(|| disk.bergman_density(black_box(x)).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, basis_build, root_finding, kernel_evaluation);
criterion_main!(benches);
