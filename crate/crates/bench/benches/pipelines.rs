use criterion::{criterion_group, criterion_main, Criterion};

use conewise_core::decomp::{decompose, DecompositionParams};
use conewise_core::grid::{ConvMode, GridSpec};
use conewise_core::lp::band_limited_field;
use conewise_core::potential::{KernelRoute, Orientation, PotentialOperator, TruncationWindow};
use conewise_core::tent::{q_transform, tent_norm, TLadder, TentFunction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded tent function supported in a centered ball, bypassing the
/// mollifier resolution floor so small scales stay cheap.
fn random_tent(grid: &GridSpec, ladder: TLadder, seed: u64) -> TentFunction {
    let mut u = TentFunction::zero(grid.clone(), 1, ladder);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mid = grid.sizes[0] as f64 / 2.0;
    for s in &mut u.slices {
        for c in &mut s.comps {
            for (i, v) in c.iter_mut().enumerate() {
                let cell = grid.decode(i);
                let d2: f64 = cell
                    .iter()
                    .map(|&x| (x as f64 - mid) * (x as f64 - mid))
                    .sum();
                if d2 < (mid / 2.0) * (mid / 2.0) {
                    *v = rng.gen_range(-1.0..1.0);
                }
            }
        }
    }
    u
}

fn grid(size: usize) -> GridSpec {
    GridSpec::cube(2, size, 1.0 / 64.0, 0.0).unwrap()
}

fn bench_square_transform(c: &mut Criterion) {
    let g = grid(96);
    let u = band_limited_field(&g, 1, 1, 3, 7);
    let ladder = TLadder::log_midpoint(0.5, 0.7, 4).unwrap();
    let mut group = c.benchmark_group("square_transform");
    group.sample_size(10);
    group.bench_function("fft_96", |b| {
        b.iter(|| q_transform(&u, 0.5, &ladder, 7, ConvMode::Fft).unwrap())
    });
    group.bench_function("direct_96", |b| {
        b.iter(|| q_transform(&u, 0.5, &ladder, 7, ConvMode::Direct).unwrap())
    });
    group.finish();
}

fn bench_area_norm(c: &mut Criterion) {
    let g = GridSpec::cube(2, 64, 1.0 / 32.0, 0.0).unwrap();
    let ladder = TLadder::log_midpoint(0.15, 0.3, 4).unwrap();
    let qu = random_tent(&g, ladder, 7);
    let mut group = c.benchmark_group("area_norm");
    group.sample_size(10);
    group.bench_function("p1_64", |b| {
        b.iter(|| tent_norm(&qu, 1.0, ConvMode::Fft).unwrap())
    });
    group.finish();
}

fn bench_decompose(c: &mut Criterion) {
    let g = GridSpec::cube(2, 64, 1.0 / 32.0, 0.0).unwrap();
    let ladder = TLadder::log_midpoint(0.15, 0.3, 4).unwrap();
    let qu = random_tent(&g, ladder, 7);
    let params = DecompositionParams::new(1.0, 0.5);
    let mut group = c.benchmark_group("tent_decompose");
    group.sample_size(10);
    group.bench_function("whole_space_64", |b| {
        b.iter(|| decompose(&qu, None, &params, ConvMode::Fft).unwrap())
    });
    group.finish();
}

fn bench_potential(c: &mut Criterion) {
    let g = grid(192);
    let u = band_limited_field(&g, 1, 1, 3, 7);
    let window = TruncationWindow::log_midpoint(0.3, 0.6, 16).unwrap();
    let op = PotentialOperator::build(
        2,
        0.5,
        g.h,
        KernelRoute::ThetaX,
        Orientation::Upward,
        window,
        7,
    )
    .unwrap();
    let mut group = c.benchmark_group("potential_apply");
    group.sample_size(10);
    group.bench_function("fft_192", |b| {
        b.iter(|| op.apply(&u, ConvMode::Fft).unwrap())
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_square_transform,
    bench_area_norm,
    bench_decompose,
    bench_potential
);
criterion_main!(benches);
