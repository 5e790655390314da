//! The hybrid grid-octree container and its mappings to and from dense tensors.

use serde::{Deserialize, Serialize};

use crate::dense::DenseTensor;
use crate::error::{Error, Result};
use crate::tree::{LeafCell, NodeIndex, TreeBits, TREE_SIZE};

/// Pooling function used to collapse voxels into one cell value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolFn {
    Max,
    #[serde(alias = "avg")]
    Average,
}

impl std::str::FromStr for PoolFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(PoolFn::Max),
            "avg" | "average" => Ok(PoolFn::Average),
            other => Err(Error::InvalidConfig(format!("unknown pool function `{other}`"))),
        }
    }
}

/// Streaming accumulator for one channel of a [`PoolFn`].
///
/// Averages accumulate in f64 and divide once at the end. For max, the first
/// maximum encountered wins.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Pooler {
    kind: PoolFn,
    sum: f64,
    best: f32,
    count: usize,
}

impl Pooler {
    pub(crate) fn new(kind: PoolFn) -> Self {
        Pooler {
            kind,
            sum: 0.0,
            best: f32::NEG_INFINITY,
            count: 0,
        }
    }

    #[inline]
    pub(crate) fn push(&mut self, v: f32) {
        self.push_n(v, 1);
    }

    #[inline]
    pub(crate) fn push_n(&mut self, v: f32, n: usize) {
        if n == 0 {
            return;
        }
        match self.kind {
            PoolFn::Average => self.sum += v as f64 * n as f64,
            PoolFn::Max => {
                if v > self.best || self.count == 0 {
                    self.best = v;
                }
            }
        }
        self.count += n;
    }

    pub(crate) fn finish(&self) -> f32 {
        match self.kind {
            PoolFn::Average => (self.sum / self.count as f64) as f32,
            PoolFn::Max => self.best,
        }
    }
}

/// The tree layout of a grid-octree: `D × H × W` split masks in row-major order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Structure {
    dims: [usize; 3],
    trees: Vec<TreeBits>,
}

/// Tree layout captured at a pooling layer and replayed by guided unpooling.
pub type GuideStructure = Structure;

impl Structure {
    pub fn new(dims: [usize; 3], trees: Vec<TreeBits>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::ShapeMismatch {
                expected: "positive grid dims".into(),
                actual: format!("{dims:?}"),
            });
        }
        let n = dims[0] * dims[1] * dims[2];
        if trees.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} trees"),
                actual: format!("{} trees", trees.len()),
            });
        }
        Ok(Structure { dims, trees })
    }

    pub fn uniform(dims: [usize; 3], tree: TreeBits) -> Result<Self> {
        Self::new(dims, vec![tree; dims[0] * dims[1] * dims[2]])
    }

    pub fn empty(dims: [usize; 3]) -> Result<Self> {
        Self::uniform(dims, TreeBits::EMPTY)
    }

    pub fn full(dims: [usize; 3]) -> Result<Self> {
        Self::uniform(dims, TreeBits::FULL)
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Voxel resolution `(8D, 8H, 8W)`.
    #[inline]
    pub fn resolution(&self) -> [usize; 3] {
        [
            self.dims[0] * TREE_SIZE,
            self.dims[1] * TREE_SIZE,
            self.dims[2] * TREE_SIZE,
        ]
    }

    pub fn trees(&self) -> &[TreeBits] {
        &self.trees
    }

    #[inline]
    pub fn tree(&self, t: usize) -> TreeBits {
        self.trees[t]
    }

    pub fn tree_count(&self) -> usize {
        self.trees.len()
    }

    #[inline]
    pub fn tree_index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    #[inline]
    pub fn tree_coords(&self, t: usize) -> [usize; 3] {
        let w = t % self.dims[2];
        let h = (t / self.dims[2]) % self.dims[1];
        let d = t / (self.dims[1] * self.dims[2]);
        [d, h, w]
    }

    /// Global voxel coordinate of a tree's lowest corner.
    #[inline]
    pub fn tree_origin(&self, t: usize) -> [usize; 3] {
        let [d, h, w] = self.tree_coords(t);
        [d * TREE_SIZE, h * TREE_SIZE, w * TREE_SIZE]
    }

    pub fn num_leaves(&self) -> usize {
        self.trees.iter().map(|t| t.num_leaves()).sum()
    }
}

/// Address of the smallest cell containing a voxel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VoxelAddr {
    pub tree_index: usize,
    pub node: NodeIndex,
    /// Leaf offset inside the tree's data block.
    pub leaf_offset: usize,
    /// Global voxel coordinate of the cell's lowest corner.
    pub origin: [usize; 3],
    pub size: usize,
}

/// A `D × H × W` grid of shallow octrees with `C` channels per leaf.
///
/// Data is one contiguous array: per-tree blocks in tree order, leaves in
/// data-index order inside a block, channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct GridOctree {
    structure: Structure,
    channels: usize,
    /// Leaf index where each tree's block starts; one extra entry at the end.
    leaf_starts: Vec<usize>,
    data: Vec<f32>,
}

fn leaf_starts(structure: &Structure) -> Vec<usize> {
    let mut starts = Vec::with_capacity(structure.tree_count() + 1);
    let mut acc = 0;
    starts.push(0);
    for t in &structure.trees {
        acc += t.num_leaves();
        starts.push(acc);
    }
    starts
}

impl GridOctree {
    pub fn new(structure: Structure, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidConfig("channel count must be positive".into()));
        }
        let starts = leaf_starts(&structure);
        let expected = starts[starts.len() - 1] * channels;
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("{expected} values"),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(GridOctree {
            structure,
            channels,
            leaf_starts: starts,
            data,
        })
    }

    pub fn zeros(structure: Structure, channels: usize) -> Result<Self> {
        let n = structure.num_leaves() * channels;
        Self::new(structure, channels, vec![0.0; n])
    }

    /// Fills every leaf through `fill(tree_index, global_origin, leaf, out)`.
    ///
    /// `global_origin` is the leaf's lowest corner in global voxel coordinates.
    pub fn from_leaves(
        structure: Structure,
        channels: usize,
        mut fill: impl FnMut(usize, [usize; 3], &LeafCell, &mut [f32]),
    ) -> Result<Self> {
        let mut grid = Self::zeros(structure, channels)?;
        for t in 0..grid.structure.tree_count() {
            let base = grid.structure.tree_origin(t);
            let start = grid.leaf_starts[t] * channels;
            for leaf in grid.structure.tree(t).leaves() {
                let origin = add3(base, leaf.origin);
                let at = start + leaf.offset * channels;
                fill(t, origin, &leaf, &mut grid.data[at..at + channels]);
            }
        }
        Ok(grid)
    }

    /// Assembles a grid from per-tree data blocks produced independently.
    pub(crate) fn from_tree_blocks(
        structure: Structure,
        channels: usize,
        blocks: Vec<Vec<f32>>,
    ) -> Result<Self> {
        let data: Vec<f32> = blocks.into_iter().flatten().collect();
        Self::new(structure, channels, data)
    }

    pub fn structure(&self) -> &Structure {
        &self.structure
    }

    pub fn into_parts(self) -> (Structure, usize, Vec<f32>) {
        (self.structure, self.channels, self.data)
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.structure.dims
    }

    #[inline]
    pub fn resolution(&self) -> [usize; 3] {
        self.structure.resolution()
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Total stored feature values, `C · Σ num_leaves`.
    pub fn value_count(&self) -> usize {
        self.data.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_starts[self.leaf_starts.len() - 1]
    }

    pub fn tree_data(&self, t: usize) -> &[f32] {
        &self.data[self.leaf_starts[t] * self.channels..self.leaf_starts[t + 1] * self.channels]
    }

    #[inline]
    pub fn leaf_value(&self, t: usize, offset: usize) -> &[f32] {
        let at = (self.leaf_starts[t] + offset) * self.channels;
        &self.data[at..at + self.channels]
    }

    fn check_voxel(&self, i: usize, j: usize, k: usize) -> Result<()> {
        let shape = self.resolution();
        if i >= shape[0] || j >= shape[1] || k >= shape[2] {
            return Err(Error::VoxelOutOfRange { i, j, k, shape });
        }
        Ok(())
    }

    pub fn locate(&self, i: usize, j: usize, k: usize) -> Result<VoxelAddr> {
        self.check_voxel(i, j, k)?;
        Ok(self.locate_unchecked([i, j, k]))
    }

    #[inline]
    pub(crate) fn locate_unchecked(&self, v: [usize; 3]) -> VoxelAddr {
        let t = self
            .structure
            .tree_index(v[0] / TREE_SIZE, v[1] / TREE_SIZE, v[2] / TREE_SIZE);
        let local = [v[0] % TREE_SIZE, v[1] % TREE_SIZE, v[2] % TREE_SIZE];
        let leaf = self.structure.tree(t).leaf_at(local);
        VoxelAddr {
            tree_index: t,
            node: leaf.node,
            leaf_offset: leaf.offset,
            origin: [
                v[0] - local[0] + leaf.origin[0],
                v[1] - local[1] + leaf.origin[1],
                v[2] - local[2] + leaf.origin[2],
            ],
            size: leaf.size,
        }
    }

    /// Feature vector `O[i, j, k]` of the smallest cell containing the voxel.
    pub fn get(&self, i: usize, j: usize, k: usize) -> Result<&[f32]> {
        self.check_voxel(i, j, k)?;
        Ok(self.voxel([i, j, k]))
    }

    #[inline]
    pub(crate) fn voxel(&self, v: [usize; 3]) -> &[f32] {
        let addr = self.locate_unchecked(v);
        self.leaf_value(addr.tree_index, addr.leaf_offset)
    }

    /// Same structure, every stored value mapped by `f`.
    pub fn map_values(&self, f: impl Fn(f32) -> f32) -> GridOctree {
        GridOctree {
            structure: self.structure.clone(),
            channels: self.channels,
            leaf_starts: self.leaf_starts.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_structure(&self, other: &GridOctree) -> bool {
        same_structure(self, other)
    }
}

#[inline]
pub(crate) fn add3(a: [usize; 3], b: [usize; 3]) -> [usize; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Iterates the voxels of a cube `[origin, origin + size)³` in `(i, j, k)` order.
pub(crate) fn cube_voxels(origin: [usize; 3], size: usize) -> impl Iterator<Item = [usize; 3]> {
    (0..size).flat_map(move |a| {
        (0..size).flat_map(move |b| {
            (0..size).map(move |c| [origin[0] + a, origin[1] + b, origin[2] + c])
        })
    })
}

/// True iff both grids have equal dims and bitwise-equal trees.
pub fn same_structure(a: &GridOctree, b: &GridOctree) -> bool {
    a.structure == b.structure
}

/// Expands a grid-octree into a dense tensor: `T[c, i, j, k] = O[i, j, k][c]`.
pub fn oct_to_ten(grid: &GridOctree) -> DenseTensor {
    let s = &grid.structure;
    let mut out = DenseTensor::zeros(grid.channels, s.resolution());
    for t in 0..s.tree_count() {
        let base = s.tree_origin(t);
        for leaf in s.tree(t).leaves() {
            let value = grid.leaf_value(t, leaf.offset);
            for [i, j, k] in cube_voxels(add3(base, leaf.origin), leaf.size) {
                for (c, &v) in value.iter().enumerate() {
                    out.set(c, i, j, k, v);
                }
            }
        }
    }
    out
}

/// Pools a dense tensor onto a given structure, cell by cell.
pub fn ten_to_oct(t: &DenseTensor, structure: &Structure, pool: PoolFn) -> Result<GridOctree> {
    if t.shape() != structure.resolution() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", structure.resolution()),
            actual: format!("{:?}", t.shape()),
        });
    }
    let channels = t.channels();
    GridOctree::from_leaves(structure.clone(), channels, |_, origin, leaf, out| {
        for (c, slot) in out.iter_mut().enumerate() {
            let mut p = Pooler::new(pool);
            for [i, j, k] in cube_voxels(origin, leaf.size) {
                p.push(t.at(c, i, j, k));
            }
            *slot = p.finish();
        }
    })
}

/// `ten_to_oct(f(oct_to_ten(grid)))` onto the grid's own structure.
pub fn wrap_dense<F>(f: F, grid: &GridOctree, pool: PoolFn) -> Result<GridOctree>
where
    F: FnOnce(&DenseTensor) -> Result<DenseTensor>,
{
    wrap_dense_onto(f, grid, grid.structure(), pool)
}

/// Wraps a shape-changing dense operation; the output structure is supplied.
pub fn wrap_dense_onto<F>(
    f: F,
    grid: &GridOctree,
    out_structure: &Structure,
    pool: PoolFn,
) -> Result<GridOctree>
where
    F: FnOnce(&DenseTensor) -> Result<DenseTensor>,
{
    let dense = f(&oct_to_ten(grid))?;
    ten_to_oct(&dense, out_structure, pool)
}
