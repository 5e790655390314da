use std::collections::BTreeSet;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use gridoctree::synth::{random_grid, random_kernel, shell_occupancy, SplitOdds};
use gridoctree::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn shell_grid(resolution: usize, fraction: f64) -> GridOctree {
    let occ: BTreeSet<[usize; 3]> = shell_occupancy(resolution, fraction).into_iter().collect();
    let n = resolution / 8;
    occupancy_grid([n, n, n], &occ).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let kernel = random_kernel(&mut rng, 1, 1, [3, 3, 3]);
    let mut group = c.benchmark_group("conv3");
    group.sample_size(10);
    for fraction in [0.02, 0.1] {
        let grid = shell_grid(64, fraction);
        let dense_in = oct_to_ten(&grid);
        group.bench_with_input(BenchmarkId::new("naive", fraction), &grid, |b, g| {
            b.iter(|| conv_naive(black_box(g), &kernel, PoolFn::Average).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("efficient", fraction), &grid, |b, g| {
            b.iter(|| conv_efficient(black_box(g), &kernel, PoolFn::Average).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("dense", fraction), &dense_in, |b, t| {
            b.iter(|| dense::conv(black_box(t), &kernel).unwrap())
        });
    }
    group.finish();
}

fn indexing(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let grid = random_grid(&mut rng, [4, 4, 4], 1, SplitOdds::default());
    let tree = grid.structure().tree(0);
    let leaves = tree.leaves();
    c.bench_function("data_index/all_leaves", |b| {
        b.iter(|| {
            leaves
                .iter()
                .map(|l| tree.data_index(black_box(l.node)).unwrap())
                .sum::<usize>()
        })
    });
    c.bench_function("locate/32^3", |b| {
        b.iter(|| {
            let mut acc = 0.0f32;
            for i in (0..32).step_by(3) {
                for j in (0..32).step_by(5) {
                    for k in 0..32 {
                        acc += grid.get(black_box(i), j, k).unwrap()[0];
                    }
                }
            }
            acc
        })
    });
}

fn pooling(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grid = random_grid(&mut rng, [8, 8, 8], 4, SplitOdds::default());
    let pooled = pool2(&grid, PoolFn::Max).unwrap();
    c.bench_function("pool2/max", |b| b.iter(|| pool2(black_box(&grid), PoolFn::Max).unwrap()));
    c.bench_function("unpool2", |b| b.iter(|| unpool2(black_box(&pooled)).unwrap()));
    c.bench_function("unpool2_guided", |b| {
        b.iter(|| unpool2_guided(black_box(&pooled), grid.structure()).unwrap())
    });
}

criterion_group!(benches, conv, indexing, pooling);
criterion_main!(benches);
