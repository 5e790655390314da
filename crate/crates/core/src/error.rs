use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("the root node has no parent")]
    RootHasNoParent,
    #[error("bit {bit} is set but its parent bit {parent} is not")]
    OrphanSplit { bit: usize, parent: usize },
    #[error("bit {0} is outside the 73-bit split mask")]
    BitOutOfRange(usize),
    #[error("node {0} is a split node and carries no data")]
    SplitNode(usize),
    #[error("node {0} is not reachable: an ancestor is not split")]
    UnreachableNode(usize),
    #[error("node index {0} is out of range")]
    NodeOutOfRange(usize),
    #[error("voxel ({i}, {j}, {k}) is outside the grid resolution {shape:?}")]
    VoxelOutOfRange {
        i: usize,
        j: usize,
        k: usize,
        shape: [usize; 3],
    },
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("channel mismatch: expected {expected}, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("grids do not share the same tree structure")]
    StructureMismatch,
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("value {value} at flat index {index} is not binary (0 or 1)")]
    NonBinary { index: usize, value: f32 },
    #[error("point {index} maps to voxel coordinates {coords:?} outside [0, {resolution})^3")]
    PointOutOfRange {
        index: usize,
        coords: [f64; 3],
        resolution: usize,
    },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
