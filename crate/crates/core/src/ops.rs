//! Network operations defined directly on the grid-octree.
//!
//! Convolution keeps the input structure and pools the dense response over
//! each input cell. Two evaluation strategies are provided: [`conv_naive`]
//! evaluates the kernel at every voxel of every cell, [`conv_efficient`]
//! exploits that a cell holds one constant value and only evaluates truncated
//! kernels along the cell surface.

use std::ops::AddAssign;

use rayon::prelude::*;
use serde::Serialize;

use crate::dense::ConvKernel;
use crate::error::{Error, Result};
use crate::grid::{add3, cube_voxels, GridOctree, GuideStructure, PoolFn, Pooler, Structure};
use crate::tree::{LeafCell, TreeBits, OCTREE_BRANCHING, TREE_SIZE, TREE_VOXELS};

/// Smallest cell edge that the efficient convolution decomposes.
pub const MIN_DECOMPOSED_CELL: usize = 4;

/// Instrumentation counters of a convolution.
///
/// Counts depend only on the structure and the kernel shape, never on the
/// stored values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OpStats {
    /// Weight × value products, including taps that read zero padding.
    pub multiplications: u64,
    pub cells_visited: u64,
    /// Surface voxels evaluated with truncated kernels.
    pub boundary_voxels_evaluated: u64,
    /// Cells evaluated voxel by voxel.
    pub per_voxel_cells: u64,
    /// The efficient path could not decompose this kernel shape.
    pub kernel_fallback: bool,
}

impl AddAssign for OpStats {
    fn add_assign(&mut self, rhs: OpStats) {
        self.multiplications += rhs.multiplications;
        self.cells_visited += rhs.cells_visited;
        self.boundary_voxels_evaluated += rhs.boundary_voxels_evaluated;
        self.per_voxel_cells += rhs.per_voxel_cells;
        self.kernel_fallback |= rhs.kernel_fallback;
    }
}

fn check_conv(grid: &GridOctree, kernel: &ConvKernel) -> Result<()> {
    if grid.channels() != kernel.in_channels() {
        return Err(Error::ChannelMismatch {
            expected: kernel.in_channels(),
            actual: grid.channels(),
        });
    }
    Ok(())
}

/// Voxel offset read by each tap, in kernel `(l, m, n)` order.
fn tap_offsets(kernel: &ConvKernel) -> Vec<[isize; 3]> {
    let [lx, my, nz] = kernel.dims();
    let half = [(lx / 2) as isize, (my / 2) as isize, (nz / 2) as isize];
    let mut out = Vec::with_capacity(kernel.taps());
    for l in 0..lx {
        for m in 0..my {
            for n in 0..nz {
                out.push([half[0] - l as isize, half[1] - m as isize, half[2] - n as isize]);
            }
        }
    }
    out
}

#[inline]
fn offset(v: [usize; 3], d: [isize; 3]) -> [isize; 3] {
    [v[0] as isize + d[0], v[1] as isize + d[1], v[2] as isize + d[2]]
}

/// Leaf offset of every voxel, 512 entries per tree.
fn leaf_table(structure: &Structure) -> Vec<u16> {
    let mut table = vec![0u16; structure.tree_count() * TREE_VOXELS];
    table
        .par_chunks_mut(TREE_VOXELS)
        .zip(structure.trees().par_iter())
        .for_each(|(block, tree)| {
            for leaf in tree.leaves() {
                for v in cube_voxels(leaf.origin, leaf.size) {
                    block[(v[0] * TREE_SIZE + v[1]) * TREE_SIZE + v[2]] = leaf.offset as u16;
                }
            }
        });
    table
}

/// Shared per-tree convolution context.
struct ConvCtx<'a> {
    grid: &'a GridOctree,
    kernel: &'a ConvKernel,
    pool: PoolFn,
    taps: Vec<[isize; 3]>,
    table: Vec<u16>,
}

impl<'a> ConvCtx<'a> {
    fn new(grid: &'a GridOctree, kernel: &'a ConvKernel, pool: PoolFn) -> Self {
        ConvCtx {
            grid,
            kernel,
            pool,
            taps: tap_offsets(kernel),
            table: leaf_table(grid.structure()),
        }
    }

    /// Value of voxel `v`, `None` in the zero padding.
    #[inline]
    fn voxel(&self, v: [isize; 3]) -> Option<&'a [f32]> {
        let shape = self.grid.resolution();
        if (0..3).any(|a| v[a] < 0 || v[a] as usize >= shape[a]) {
            return None;
        }
        let v = [v[0] as usize, v[1] as usize, v[2] as usize];
        let t = self
            .grid
            .structure()
            .tree_index(v[0] / TREE_SIZE, v[1] / TREE_SIZE, v[2] / TREE_SIZE);
        let local = ((v[0] % TREE_SIZE) * TREE_SIZE + v[1] % TREE_SIZE) * TREE_SIZE + v[2] % TREE_SIZE;
        let grid: &'a GridOctree = self.grid;
        Some(grid.leaf_value(t, self.table[t * TREE_VOXELS + local] as usize))
    }

    /// Evaluates the kernel at every voxel of `leaf` and pools the results.
    fn eval_per_voxel(&self, origin: [usize; 3], leaf: &LeafCell, out: &mut [f32], stats: &mut OpStats) {
        let (cin, cout) = (self.kernel.in_channels(), self.kernel.out_channels());
        let bias = self.kernel.bias();
        let mut poolers = vec![Pooler::new(self.pool); cout];
        let mut nbrs: Vec<Option<&[f32]>> = Vec::with_capacity(self.taps.len());
        for v in cube_voxels(origin, leaf.size) {
            nbrs.clear();
            nbrs.extend(self.taps.iter().map(|&d| self.voxel(offset(v, d))));
            for (co, pooler) in poolers.iter_mut().enumerate() {
                let mut acc = bias[co] as f64;
                for ci in 0..cin {
                    let w = self.kernel.taps_for(co, ci);
                    for (tap, nb) in nbrs.iter().enumerate() {
                        if let Some(x) = nb {
                            acc += w[tap] as f64 * x[ci] as f64;
                        }
                    }
                }
                pooler.push(acc as f32);
            }
        }
        for (slot, p) in out.iter_mut().zip(&poolers) {
            *slot = p.finish();
        }
        stats.multiplications += (leaf.volume() * self.taps.len() * cin * cout) as u64;
        stats.cells_visited += 1;
        stats.per_voxel_cells += 1;
    }
}

fn conv_by_tree<F>(grid: &GridOctree, kernel: &ConvKernel, cell: F) -> Result<(GridOctree, OpStats)>
where
    F: Fn(usize, [usize; 3], &LeafCell, &mut [f32], &mut OpStats) + Sync,
{
    let structure = grid.structure();
    let cout = kernel.out_channels();
    let per_tree: Vec<(Vec<f32>, OpStats)> = (0..structure.tree_count())
        .into_par_iter()
        .map(|t| {
            let tree = structure.tree(t);
            let base = structure.tree_origin(t);
            let mut block = vec![0.0f32; tree.num_leaves() * cout];
            let mut stats = OpStats::default();
            for leaf in tree.leaves() {
                let out = &mut block[leaf.offset * cout..(leaf.offset + 1) * cout];
                cell(t, add3(base, leaf.origin), &leaf, out, &mut stats);
            }
            (block, stats)
        })
        .collect();
    // Reduce in tree order so totals never depend on scheduling.
    let mut stats = OpStats::default();
    let mut blocks = Vec::with_capacity(per_tree.len());
    for (block, s) in per_tree {
        stats += s;
        blocks.push(block);
    }
    let out = GridOctree::from_tree_blocks(structure.clone(), cout, blocks)?;
    Ok((out, stats))
}

/// Convolution evaluating the kernel at every voxel of every cell.
pub fn conv_naive(grid: &GridOctree, kernel: &ConvKernel, pool: PoolFn) -> Result<(GridOctree, OpStats)> {
    check_conv(grid, kernel)?;
    let ctx = ConvCtx::new(grid, kernel, pool);
    conv_by_tree(grid, kernel, |_, origin, leaf, out, stats| {
        ctx.eval_per_voxel(origin, leaf, out, stats)
    })
}

/// Position of a voxel along one axis of a cell: 0 = low face, 1 = inside, 2 = high face.
#[inline]
fn axis_class(pos: usize, size: usize) -> usize {
    if pos == 0 {
        0
    } else if pos == size - 1 {
        2
    } else {
        1
    }
}

const INTERIOR_CLASS: usize = 13;

/// Tap partition for each of the 27 voxel classes of a 3³ kernel.
struct Truncations {
    inside: Vec<Vec<usize>>,
    outside: Vec<Vec<usize>>,
}

impl Truncations {
    fn new(taps: &[[isize; 3]]) -> Self {
        let mut inside = vec![Vec::new(); 27];
        let mut outside = vec![Vec::new(); 27];
        for class in 0..27 {
            let cls = [class / 9, (class / 3) % 3, class % 3];
            for (t, d) in taps.iter().enumerate() {
                let leaves = (0..3).any(|a| (cls[a] == 0 && d[a] < 0) || (cls[a] == 2 && d[a] > 0));
                if leaves {
                    outside[class].push(t);
                } else {
                    inside[class].push(t);
                }
            }
        }
        Truncations { inside, outside }
    }
}

/// Convolution that evaluates the constant part of each large cell once and
/// only the surface voxels with truncated kernels.
///
/// For a cell of edge `s >= 4` and a 3³ kernel, the 27 products
/// `W · value` are formed once per channel pair; every in-cell partial sum
/// is a sum of those products. Each surface voxel adds its out-of-cell taps
/// read from the neighbouring cells: 19 at corners, 15 along edges, 9 on
/// faces. Smaller cells and other kernel shapes are evaluated per voxel.
pub fn conv_efficient(
    grid: &GridOctree,
    kernel: &ConvKernel,
    pool: PoolFn,
) -> Result<(GridOctree, OpStats)> {
    check_conv(grid, kernel)?;
    let ctx = ConvCtx::new(grid, kernel, pool);
    if kernel.dims() != [3, 3, 3] {
        let (out, mut stats) = conv_by_tree(grid, kernel, |_, origin, leaf, out, stats| {
            ctx.eval_per_voxel(origin, leaf, out, stats)
        })?;
        stats.kernel_fallback = true;
        return Ok((out, stats));
    }
    let trunc = Truncations::new(&ctx.taps);
    let (cin, cout) = (kernel.in_channels(), kernel.out_channels());
    conv_by_tree(grid, kernel, |t, origin, leaf, out, stats| {
        let s = leaf.size;
        if s < MIN_DECOMPOSED_CELL {
            ctx.eval_per_voxel(origin, leaf, out, stats);
            return;
        }
        let value = grid.leaf_value(t, leaf.offset);
        let ntaps = ctx.taps.len();

        // Constant part: one product per tap and channel pair.
        let mut products = vec![0.0f64; cout * cin * ntaps];
        for co in 0..cout {
            for ci in 0..cin {
                let w = kernel.taps_for(co, ci);
                let p = &mut products[(co * cin + ci) * ntaps..(co * cin + ci + 1) * ntaps];
                for tap in 0..ntaps {
                    p[tap] = w[tap] as f64 * value[ci] as f64;
                }
            }
        }
        stats.multiplications += (ntaps * cin * cout) as u64;

        // In-cell sums per voxel class, bias included.
        let mut in_sum = vec![0.0f64; 27 * cout];
        for class in 0..27 {
            for co in 0..cout {
                let mut acc = kernel.bias()[co] as f64;
                for ci in 0..cin {
                    let p = &products[(co * cin + ci) * ntaps..];
                    for &tap in &trunc.inside[class] {
                        acc += p[tap];
                    }
                }
                in_sum[class * cout + co] = acc;
            }
        }

        let mut poolers = vec![Pooler::new(pool); cout];
        let interior = (s - 2) * (s - 2) * (s - 2);
        for (co, p) in poolers.iter_mut().enumerate() {
            p.push_n(in_sum[INTERIOR_CLASS * cout + co] as f32, interior);
        }

        let mut nbrs: Vec<Option<&[f32]>> = Vec::with_capacity(19);
        let mut eval_surface = |local: [usize; 3], stats: &mut OpStats| {
            let class = axis_class(local[0], s) * 9 + axis_class(local[1], s) * 3 + axis_class(local[2], s);
            let v = add3(origin, local);
            let outside = &trunc.outside[class];
            nbrs.clear();
            nbrs.extend(outside.iter().map(|&tap| ctx.voxel(offset(v, ctx.taps[tap]))));
            for (co, pooler) in poolers.iter_mut().enumerate() {
                let mut acc = in_sum[class * cout + co];
                for ci in 0..cin {
                    let w = kernel.taps_for(co, ci);
                    for (&tap, nb) in outside.iter().zip(&nbrs) {
                        if let Some(x) = nb {
                            acc += w[tap] as f64 * x[ci] as f64;
                        }
                    }
                }
                pooler.push(acc as f32);
            }
            stats.multiplications += (outside.len() * cin * cout) as u64;
            stats.boundary_voxels_evaluated += 1;
        };
        for a in 0..s {
            for b in 0..s {
                if a == 0 || a == s - 1 || b == 0 || b == s - 1 {
                    for c in 0..s {
                        eval_surface([a, b, c], stats);
                    }
                } else {
                    eval_surface([a, b, 0], stats);
                    eval_surface([a, b, s - 1], stats);
                }
            }
        }
        for (slot, p) in out.iter_mut().zip(&poolers) {
            *slot = p.finish();
        }
        stats.cells_visited += 1;
    })
}

fn even_dims(grid: &GridOctree) -> Result<[usize; 3]> {
    let dims = grid.dims();
    if dims.iter().any(|d| d % 2 != 0) {
        return Err(Error::ShapeMismatch {
            expected: "even grid dims".into(),
            actual: format!("{dims:?}"),
        });
    }
    Ok([dims[0] / 2, dims[1] / 2, dims[2] / 2])
}

#[inline]
fn octant_of(a: usize, b: usize, c: usize) -> usize {
    (a << 2) | (b << 1) | c
}

/// Structure after 2³ pooling: eight input trees become the eight children
/// of one output root, every node moves one level deeper and input depth-2
/// splits disappear (their depth-3 leaves are pooled).
pub fn pooled_structure(input: &Structure) -> Result<Structure> {
    let dims = input.dims();
    if dims.iter().any(|d| d % 2 != 0) {
        return Err(Error::ShapeMismatch {
            expected: "even grid dims".into(),
            actual: format!("{dims:?}"),
        });
    }
    let out_dims = [dims[0] / 2, dims[1] / 2, dims[2] / 2];
    let mut trees = Vec::with_capacity(out_dims.iter().product());
    for d in 0..out_dims[0] {
        for h in 0..out_dims[1] {
            for w in 0..out_dims[2] {
                let mut raw = 1u128;
                for (a, b, c) in octants() {
                    let o = octant_of(a, b, c);
                    let src = input.tree(input.tree_index(2 * d + a, 2 * h + b, 2 * w + c));
                    if src.is_split(0) {
                        raw |= 1 << (1 + o);
                    }
                    for q in 0..OCTREE_BRANCHING {
                        if src.is_split(1 + q) {
                            raw |= 1 << (9 + OCTREE_BRANCHING * o + q);
                        }
                    }
                }
                trees.push(TreeBits::from_raw(raw)?);
            }
        }
    }
    Structure::new(out_dims, trees)
}

fn octants() -> impl Iterator<Item = (usize, usize, usize)> {
    (0..8).map(|o| ((o >> 2) & 1, (o >> 1) & 1, o & 1))
}

/// 2³ pooling: halves the grid dims.
///
/// Cells coarser than the finest level are copied one level deeper; each
/// group of eight finest voxels is pooled into one output voxel.
pub fn pool2(grid: &GridOctree, pool: PoolFn) -> Result<GridOctree> {
    even_dims(grid)?;
    let structure = pooled_structure(grid.structure())?;
    let channels = grid.channels();
    GridOctree::from_leaves(structure, channels, |_, origin, leaf, out| {
        let src = [2 * origin[0], 2 * origin[1], 2 * origin[2]];
        let addr = grid.locate_unchecked(src);
        if addr.size >= 2 * leaf.size {
            out.copy_from_slice(grid.leaf_value(addr.tree_index, addr.leaf_offset));
            return;
        }
        for (c, slot) in out.iter_mut().enumerate() {
            let mut p = Pooler::new(pool);
            for v in cube_voxels(src, 2) {
                p.push(grid.voxel(v)[c]);
            }
            *slot = p.finish();
        }
    })
}

/// Structure after 2³ unpooling: each depth-1 node of an input tree becomes
/// the root of a new tree and every other node moves one level up.
pub fn unpooled_structure(input: &Structure) -> Structure {
    let dims = input.dims();
    let out_dims = [2 * dims[0], 2 * dims[1], 2 * dims[2]];
    let mut trees = Vec::with_capacity(out_dims.iter().product());
    for d in 0..out_dims[0] {
        for h in 0..out_dims[1] {
            for w in 0..out_dims[2] {
                let src = input.tree(input.tree_index(d / 2, h / 2, w / 2));
                let o = octant_of(d % 2, h % 2, w % 2);
                let mut raw = 0u128;
                if src.is_split(0) && src.is_split(1 + o) {
                    raw |= 1;
                    for q in 0..OCTREE_BRANCHING {
                        if src.is_split(9 + OCTREE_BRANCHING * o + q) {
                            raw |= 1 << (1 + q);
                        }
                    }
                }
                trees.push(TreeBits::from_raw(raw).expect("shifted masks keep parents"));
            }
        }
    }
    Structure::new(out_dims, trees).expect("dims are positive")
}

/// Nearest-neighbour 2³ unpooling: `O_out[i, j, k] = O_in[i/2, j/2, k/2]`.
pub fn unpool2(grid: &GridOctree) -> Result<GridOctree> {
    let structure = unpooled_structure(grid.structure());
    GridOctree::from_leaves(structure, grid.channels(), |_, origin, _, out| {
        out.copy_from_slice(grid.voxel([origin[0] / 2, origin[1] / 2, origin[2] / 2]));
    })
}

/// Unpooling whose output structure is copied from `guide`, typically the
/// input structure of the matching pooling layer.
///
/// Each output leaf takes the nearest-neighbour value of its source region.
/// Where the guide is coarser than the source cells the region is averaged.
pub fn unpool2_guided(grid: &GridOctree, guide: &GuideStructure) -> Result<GridOctree> {
    let dims = grid.dims();
    let expected = [2 * dims[0], 2 * dims[1], 2 * dims[2]];
    if guide.dims() != expected {
        return Err(Error::ShapeMismatch {
            expected: format!("guide dims {expected:?}"),
            actual: format!("{:?}", guide.dims()),
        });
    }
    GridOctree::from_leaves(guide.clone(), grid.channels(), |_, origin, leaf, out| {
        let src = [origin[0] / 2, origin[1] / 2, origin[2] / 2];
        let region = (leaf.size / 2).max(1);
        let addr = grid.locate_unchecked(src);
        if addr.size >= region {
            out.copy_from_slice(grid.leaf_value(addr.tree_index, addr.leaf_offset));
            return;
        }
        for (c, slot) in out.iter_mut().enumerate() {
            let mut p = Pooler::new(PoolFn::Average);
            for v in cube_voxels(src, region) {
                p.push(grid.voxel(v)[c]);
            }
            *slot = p.finish();
        }
    })
}

/// Applies `f` to every stored value; the structure is unchanged.
pub fn pointwise(grid: &GridOctree, f: impl Fn(f32) -> f32) -> GridOctree {
    grid.map_values(f)
}

/// Channel concatenation of two grids with identical structure, `a` first.
pub fn concat(a: &GridOctree, b: &GridOctree) -> Result<GridOctree> {
    if !a.same_structure(b) {
        return Err(Error::StructureMismatch);
    }
    let (ca, cb) = (a.channels(), b.channels());
    let mut data = Vec::with_capacity(a.value_count() + b.value_count());
    for (va, vb) in a.data().chunks(ca).zip(b.data().chunks(cb)) {
        data.extend_from_slice(va);
        data.extend_from_slice(vb);
    }
    GridOctree::new(a.structure().clone(), ca + cb, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::{self, DenseTensor};
    use crate::grid::{oct_to_ten, wrap_dense, wrap_dense_onto};
    use crate::synth::{self, SplitOdds};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn max_rel(a: &[f32], b: &[f32]) -> f64 {
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs() as f64));
        let diff = a
            .iter()
            .zip(b)
            .fold(0.0f64, |m, (x, y)| m.max((*x as f64 - *y as f64).abs()));
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }

    fn isolated_cell() -> GridOctree {
        GridOctree::new(Structure::empty([1, 1, 1]).unwrap(), 1, vec![1.5]).unwrap()
    }

    #[test]
    fn multiplication_counts_for_isolated_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = synth::random_kernel(&mut rng, 1, 1, [3, 3, 3]);
        let g = isolated_cell();
        let (_, naive) = conv_naive(&g, &k, PoolFn::Average).unwrap();
        let (_, eff) = conv_efficient(&g, &k, PoolFn::Average).unwrap();
        assert_eq!(naive.multiplications, 13_824);
        assert_eq!(eff.multiplications, 27 + 8 * 19 + 12 * 6 * 15 + 6 * 36 * 9);
        assert_eq!(eff.multiplications, 3_203);
        assert_eq!(eff.boundary_voxels_evaluated, 512 - 216);
    }

    #[test]
    fn identity_kernel_preserves_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = synth::random_grid(&mut rng, [2, 2, 1], 2, SplitOdds::default());
        for dims in [[1, 1, 1], [3, 3, 3]] {
            let k = ConvKernel::identity(2, dims).unwrap();
            for pool in [PoolFn::Max, PoolFn::Average] {
                assert_eq!(conv_naive(&g, &k, pool).unwrap().0, g);
                assert_eq!(conv_efficient(&g, &k, pool).unwrap().0, g);
            }
        }
    }

    #[test]
    fn convs_match_dense_wrapper() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..4 {
            let g = synth::random_grid(&mut rng, [2, 2, 2], 2, SplitOdds::default());
            let k = synth::random_kernel(&mut rng, 3, 2, [3, 3, 3]);
            for pool in [PoolFn::Max, PoolFn::Average] {
                let oracle = wrap_dense(|t| dense::conv(t, &k), &g, pool).unwrap();
                let (naive, _) = conv_naive(&g, &k, pool).unwrap();
                let (eff, _) = conv_efficient(&g, &k, pool).unwrap();
                assert!(naive.same_structure(&g) && eff.same_structure(&g));
                assert!(max_rel(naive.data(), oracle.data()) <= 1e-5);
                assert!(max_rel(eff.data(), oracle.data()) <= 1e-5);
            }
        }
    }

    #[test]
    fn non_cubic_kernels_fall_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = synth::random_grid(&mut rng, [1, 1, 2], 1, SplitOdds::default());
        let k = synth::random_kernel(&mut rng, 1, 1, [5, 3, 1]);
        let (naive, ns) = conv_naive(&g, &k, PoolFn::Average).unwrap();
        let (eff, es) = conv_efficient(&g, &k, PoolFn::Average).unwrap();
        assert!(es.kernel_fallback && !ns.kernel_fallback);
        assert_eq!(naive, eff);
        assert_eq!(ns.multiplications, es.multiplications);
        let oracle = wrap_dense(|t| dense::conv(t, &k), &g, PoolFn::Average).unwrap();
        assert!(max_rel(naive.data(), oracle.data()) <= 1e-5);
    }

    #[test]
    fn constant_grid_interior_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = synth::random_kernel(&mut rng, 1, 1, [3, 3, 3]);
        let s = synth::random_structure(&mut rng, [3, 3, 3], SplitOdds::default());
        let g = GridOctree::new(s.clone(), 1, vec![0.5; s.num_leaves()]).unwrap();
        let (out, _) = conv_efficient(&g, &k, PoolFn::Max).unwrap();
        let expected = k.weights().iter().map(|&w| w as f64).sum::<f64>() * 0.5 + k.bias()[0] as f64;
        // The centre tree touches no grid border.
        for &v in out.tree_data(13) {
            assert!((v as f64 - expected).abs() <= 1e-5 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let g = isolated_cell();
        let k = ConvKernel::identity(2, [3, 3, 3]).unwrap();
        assert!(conv_naive(&g, &k, PoolFn::Max).is_err());
        assert!(conv_efficient(&g, &k, PoolFn::Max).is_err());
    }

    #[test]
    fn stats_are_value_independent_and_efficient_is_cheaper() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = synth::random_structure(&mut rng, [2, 2, 2], SplitOdds([0.6, 0.3, 0.3]));
        let a = synth::random_values(&mut rng, s.clone(), 2);
        let b = synth::random_values(&mut rng, s, 2);
        let k = synth::random_kernel(&mut rng, 2, 2, [3, 3, 3]);
        let na = conv_naive(&a, &k, PoolFn::Max).unwrap().1;
        let nb = conv_naive(&b, &k, PoolFn::Average).unwrap().1;
        let ea = conv_efficient(&a, &k, PoolFn::Max).unwrap().1;
        let eb = conv_efficient(&b, &k, PoolFn::Average).unwrap().1;
        assert_eq!(na, nb);
        assert_eq!(ea, eb);
        assert!(ea.multiplications < na.multiplications);
    }

    #[test]
    fn pool2_of_empty_trees_shifts_roots() {
        let s = Structure::empty([2, 2, 2]).unwrap();
        let g = GridOctree::new(s, 1, (0..8).map(|v| v as f32).collect()).unwrap();
        let p = pool2(&g, PoolFn::Max).unwrap();
        assert_eq!(p.dims(), [1, 1, 1]);
        assert_eq!(p.structure().tree(0), TreeBits::from_splits([0]).unwrap());
        assert_eq!(p.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn pool2_collapses_finest_leaves() {
        let s = Structure::full([2, 2, 2]).unwrap();
        let mut g = GridOctree::zeros(s, 1).unwrap();
        // Put 1..=8 into the first depth-2 sibling group of tree 0.
        let data: Vec<f32> = (0..g.value_count())
            .map(|i| if i < 8 { (i + 1) as f32 } else { 0.0 })
            .collect();
        g = GridOctree::new(g.structure().clone(), 1, data).unwrap();
        assert_eq!(pool2(&g, PoolFn::Max).unwrap().get(0, 0, 0).unwrap(), &[8.0]);
        assert_eq!(pool2(&g, PoolFn::Average).unwrap().get(0, 0, 0).unwrap(), &[4.5]);
        assert!(pool2(&GridOctree::zeros(Structure::empty([1, 2, 2]).unwrap(), 1).unwrap(), PoolFn::Max).is_err());
    }

    #[test]
    fn pool2_matches_dense_pooling_on_any_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let g = synth::random_grid(&mut rng, [2, 2, 2], 2, SplitOdds::default());
            let dense_in = oct_to_ten(&g);
            let max = oct_to_ten(&pool2(&g, PoolFn::Max).unwrap());
            let avg = oct_to_ten(&pool2(&g, PoolFn::Average).unwrap());
            assert_eq!(max, dense::max_pool2(&dense_in).unwrap());
            assert_eq!(avg, dense::avg_pool2(&dense_in).unwrap());
        }
    }

    #[test]
    fn unpool2_examples() {
        let g = GridOctree::new(Structure::empty([1, 1, 1]).unwrap(), 1, vec![3.0]).unwrap();
        let u = unpool2(&g).unwrap();
        assert_eq!(u.dims(), [2, 2, 2]);
        assert!(u.structure().trees().iter().all(|t| t.is_empty()));
        assert!(u.data().iter().all(|&v| v == 3.0));

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let g = synth::random_grid(&mut rng, [1, 2, 1], 2, SplitOdds::default());
            let u = unpool2(&g).unwrap();
            assert_eq!(oct_to_ten(&u), dense::unpool2(&oct_to_ten(&g)));
        }
    }

    #[test]
    fn pool_then_unpool_restores_coarse_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = synth::random_grid(&mut rng, [2, 2, 2], 1, SplitOdds::default());
        let back = unpool2(&pool2(&g, PoolFn::Max).unwrap()).unwrap();
        for t in 0..g.structure().tree_count() {
            let base = g.structure().tree_origin(t);
            for leaf in g.structure().tree(t).leaves().iter().filter(|l| l.depth() < 3) {
                let o = add3(base, leaf.origin);
                assert_eq!(back.get(o[0], o[1], o[2]).unwrap(), g.leaf_value(t, leaf.offset));
            }
        }
    }

    #[test]
    fn guided_unpool_follows_guide() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let g = synth::random_grid(&mut rng, [1, 1, 2], 2, SplitOdds::default());
        let plain = unpool2(&g).unwrap();
        assert_eq!(unpool2_guided(&g, plain.structure()).unwrap(), plain);

        let guide = synth::random_refinement(&mut rng, plain.structure(), SplitOdds([0.5, 0.5, 0.5]));
        let guided = unpool2_guided(&g, &guide).unwrap();
        assert_eq!(guided.structure(), &guide);
        assert_eq!(oct_to_ten(&guided), dense::unpool2(&oct_to_ten(&g)));

        let full = Structure::full([2, 2, 4]).unwrap();
        let guided = unpool2_guided(&g, &full).unwrap();
        assert_eq!(guided.leaf_count(), 512 * 16);
        assert_eq!(oct_to_ten(&guided), dense::unpool2(&oct_to_ten(&g)));

        assert!(unpool2_guided(&g, &Structure::full([2, 2, 2]).unwrap()).is_err());
    }

    #[test]
    fn guided_unpool_averages_under_coarse_guide() {
        let s = Structure::full([1, 1, 1]).unwrap();
        let g = GridOctree::new(s, 1, (0..512).map(|v| v as f32).collect()).unwrap();
        let guide = Structure::empty([2, 2, 2]).unwrap();
        let u = unpool2_guided(&g, &guide).unwrap();
        let oracle = wrap_dense_onto(|t| Ok(dense::unpool2(t)), &g, &guide, PoolFn::Average).unwrap();
        assert_eq!(u, oracle);
    }

    #[test]
    fn pointwise_and_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = synth::random_grid(&mut rng, [1, 2, 2], 2, SplitOdds::default());
        let neg = pointwise(&g, |x| -x.abs() - 1.0);
        let r = pointwise(&neg, dense::relu);
        assert!(r.same_structure(&g) && r.data().iter().all(|&v| v == 0.0));
        assert_eq!(pointwise(&g, |x| x), g);
        assert_eq!(
            oct_to_ten(&pointwise(&g, dense::relu)),
            dense::pointwise(&oct_to_ten(&g), dense::relu)
        );

        let zeros = GridOctree::zeros(g.structure().clone(), 1).unwrap();
        let c = concat(&g, &zeros).unwrap();
        assert_eq!(c.channels(), 3);
        for [i, j, k] in cube_voxels([0, 0, 0], 8) {
            let v = c.get(i, j, k).unwrap();
            assert_eq!(&v[..2], g.get(i, j, k).unwrap());
            assert_eq!(v[2], 0.0);
        }
        let dense_cat: DenseTensor = oct_to_ten(&g).concat(&oct_to_ten(&zeros)).unwrap();
        assert_eq!(oct_to_ten(&c), dense_cat);
        let other = GridOctree::zeros(Structure::full([1, 2, 2]).unwrap(), 1).unwrap();
        assert!(matches!(concat(&g, &other), Err(Error::StructureMismatch)));
    }
}
