//! Seeded generators for random structures, grids, kernels and occupancy
//! patterns. Used by the checker, the benchmarks and the tests.

use rand::Rng;

use crate::dense::ConvKernel;
use crate::grid::{GridOctree, Structure};
use crate::tree::{child, TreeBits, MAX_DEPTH, OCTREE_BRANCHING, TREE_SIZE};

/// Probability that an existing node at depth 0, 1, 2 is split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitOdds(pub [f64; 3]);

impl Default for SplitOdds {
    fn default() -> Self {
        SplitOdds([0.7, 0.5, 0.4])
    }
}

pub fn random_tree<R: Rng + ?Sized>(rng: &mut R, odds: SplitOdds) -> TreeBits {
    let mut raw = 0u128;
    let mut frontier = vec![0usize];
    for depth in 0..MAX_DEPTH {
        let mut next = Vec::new();
        for node in frontier {
            if rng.gen_bool(odds.0[depth]) {
                raw |= 1 << node;
                let first = child(node, OCTREE_BRANCHING);
                next.extend(first..first + OCTREE_BRANCHING);
            }
        }
        frontier = next;
    }
    TreeBits::from_raw(raw).expect("generated trees have no orphan splits")
}

pub fn random_structure<R: Rng + ?Sized>(rng: &mut R, dims: [usize; 3], odds: SplitOdds) -> Structure {
    let n = dims[0] * dims[1] * dims[2];
    let trees = (0..n).map(|_| random_tree(rng, odds)).collect();
    Structure::new(dims, trees).expect("dims are positive")
}

/// Random structure with values uniform in `[-1, 1)`.
pub fn random_grid<R: Rng + ?Sized>(
    rng: &mut R,
    dims: [usize; 3],
    channels: usize,
    odds: SplitOdds,
) -> GridOctree {
    let structure = random_structure(rng, dims, odds);
    random_values(rng, structure, channels)
}

pub fn random_values<R: Rng + ?Sized>(rng: &mut R, structure: Structure, channels: usize) -> GridOctree {
    let n = structure.num_leaves() * channels;
    let data = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    GridOctree::new(structure, channels, data).expect("data sized from structure")
}

/// Random weights and biases uniform in `[-1, 1)`.
pub fn random_kernel<R: Rng + ?Sized>(
    rng: &mut R,
    out_channels: usize,
    in_channels: usize,
    dims: [usize; 3],
) -> ConvKernel {
    let n = out_channels * in_channels * dims[0] * dims[1] * dims[2];
    ConvKernel::new(
        out_channels,
        in_channels,
        dims,
        (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        (0..out_channels).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
    )
    .expect("kernel dims are odd")
}

/// Random structure that refines `base`: every split of `base` is kept and
/// extra splits are added with the given odds.
pub fn random_refinement<R: Rng + ?Sized>(rng: &mut R, base: &Structure, odds: SplitOdds) -> Structure {
    let trees = base
        .trees()
        .iter()
        .map(|&t| {
            let extra = random_tree(rng, odds).raw();
            let mut raw = t.raw() | extra;
            // Drop extra splits whose parents are unsplit, top-down.
            for bit in 1..crate::tree::SPLIT_BITS {
                let pa = (bit - 1) / OCTREE_BRANCHING;
                if raw >> pa & 1 == 0 {
                    raw &= !(1u128 << bit);
                }
            }
            TreeBits::from_raw(raw).expect("orphans removed")
        })
        .collect();
    Structure::new(base.dims(), trees).expect("dims unchanged")
}

/// Occupancy mask of `count` voxels of a single 8³ block, filled in
/// depth-first octant order. Spatially coherent, the way real surfaces are.
pub fn coherent_block_occupancy(count: usize) -> Vec<[usize; 3]> {
    (0..count.min(TREE_SIZE * TREE_SIZE * TREE_SIZE))
        .map(|z| {
            let mut v = [0usize; 3];
            for level in 0..3 {
                let oct = (z >> (3 * (2 - level))) & 7;
                let size = 4 >> level;
                v[0] += ((oct >> 2) & 1) * size;
                v[1] += ((oct >> 1) & 1) * size;
                v[2] += (oct & 1) * size;
            }
            v
        })
        .collect()
}

/// Voxels of a spherical shell centred in a cube of edge `resolution`,
/// thick enough to occupy roughly `fraction` of all voxels.
pub fn shell_occupancy(resolution: usize, fraction: f64) -> Vec<[usize; 3]> {
    if fraction <= 0.0 {
        return Vec::new();
    }
    let n = resolution as f64;
    let center = n / 2.0;
    let radius = 0.35 * n;
    let target = fraction * n * n * n;
    let thickness = (target / (4.0 * std::f64::consts::PI * radius * radius)).max(1.0);
    let (inner, outer) = ((radius - thickness / 2.0).max(0.0), radius + thickness / 2.0);
    let mut out = Vec::new();
    for i in 0..resolution {
        for j in 0..resolution {
            for k in 0..resolution {
                let p = [i as f64 + 0.5 - center, j as f64 + 0.5 - center, k as f64 + 0.5 - center];
                let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                if r >= inner && r < outer {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generators_are_deterministic() {
        let a = random_grid(&mut ChaCha8Rng::seed_from_u64(5), [2, 2, 2], 2, SplitOdds::default());
        let b = random_grid(&mut ChaCha8Rng::seed_from_u64(5), [2, 2, 2], 2, SplitOdds::default());
        assert_eq!(a, b);
    }

    #[test]
    fn refinement_keeps_base_splits() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = random_structure(&mut rng, [2, 1, 1], SplitOdds::default());
        let fine = random_refinement(&mut rng, &base, SplitOdds([0.5, 0.5, 0.5]));
        for (b, f) in base.trees().iter().zip(fine.trees()) {
            assert_eq!(b.raw() & f.raw(), b.raw());
        }
    }

    #[test]
    fn coherent_fill_is_morton_prefix() {
        let v = coherent_block_occupancy(9);
        assert_eq!(v[0], [0, 0, 0]);
        assert_eq!(v[1], [0, 0, 1]);
        assert_eq!(v[8], [0, 0, 2]);
    }

    #[test]
    fn shell_hits_target_roughly() {
        let v = shell_occupancy(32, 0.05);
        let frac = v.len() as f64 / 32f64.powi(3);
        assert!(frac > 0.02 && frac < 0.1, "{frac}");
    }
}
