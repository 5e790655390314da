//! Hybrid grid-octree storage for sparse 3D feature volumes.
//!
//! A volume is a regular grid of shallow octrees, each covering an 8³ block
//! of voxels and encoded as a 73-bit breadth-first split mask. Leaf values
//! are packed contiguously, so a voxel's value is found from the mask alone
//! with a few popcounts.
//!
//! ```
//! use gridoctree::{GridOctree, Structure, TreeBits};
//!
//! let tree = TreeBits::from_splits([0, 1]).unwrap();
//! let grid = GridOctree::zeros(Structure::uniform([2, 2, 2], tree).unwrap(), 1).unwrap();
//! assert_eq!(grid.leaf_count(), 8 * 15);
//! assert_eq!(grid.get(3, 0, 0).unwrap(), &[0.0]);
//! ```

pub mod builder;
pub mod check;
pub mod dense;
pub mod error;
pub mod grid;
pub mod io;
pub mod ops;
pub mod report;
pub mod synth;
pub mod tree;

pub use builder::{
    build_from_points, fit_transform, occupancy_grid, structure_from_dense, structure_from_voxels,
    tri_box_overlap, voxelize_mesh, Aabb, PointGrids, PointSet, Transform, TriangleMesh, VoxelizeConfig,
};
pub use check::{run_check, CheckConfig, CheckReport, OpCheck};
pub use dense::{ConvKernel, DenseTensor};
pub use error::{Error, Result};
pub use grid::{
    oct_to_ten, same_structure, ten_to_oct, wrap_dense, wrap_dense_onto, GridOctree, GuideStructure,
    PoolFn, Structure, VoxelAddr,
};
pub use ops::{
    concat, conv_efficient, conv_naive, pool2, pointwise, unpool2, unpool2_guided, OpStats,
};
pub use report::{memory_report, run_bench, BenchConfig, BenchRecord, BenchReport, MemoryReport};
pub use tree::{data_index, LeafCell, NodeIndex, SplitMask, TreeBits};
