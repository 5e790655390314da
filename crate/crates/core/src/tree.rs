//! Structure of a single shallow octree.
//!
//! A shallow octree covers an 8×8×8 block of voxels and has a maximal depth
//! of 3. Its structure is a 73-bit split mask in breadth-first order: bit 0
//! is the root, bits 1..=8 the depth-1 nodes, bits 9..=72 the depth-2 nodes.
//! Depth-3 nodes (indices 73..585) are implicit leaves.
//!
//! Inside a node the eight children are ordered by octant
//! `4 * i_half + 2 * j_half + k_half`, where `(i, j, k)` are the local voxel
//! coordinates along the grid's (D, H, W) axes; `k` varies fastest.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Number of explicit split bits in a shallow octree.
pub const SPLIT_BITS: usize = 73;
/// Number of addressable nodes, including the implicit depth-3 leaves.
pub const NODE_COUNT: usize = 585;
/// Edge length of a shallow octree in finest-resolution voxels.
pub const TREE_SIZE: usize = 8;
pub const TREE_VOXELS: usize = TREE_SIZE * TREE_SIZE * TREE_SIZE;
pub const MAX_DEPTH: usize = 3;
pub const OCTREE_BRANCHING: usize = 8;
/// Serialized size of one tree record.
pub const TREE_BYTES: usize = 10;

const MASK: u128 = (1u128 << SPLIT_BITS) - 1;
const FIRST_AT_DEPTH: [usize; 4] = [0, 1, 9, 73];

/// Bit index of the parent of node `i` in a tree with branching factor `b`.
pub fn parent(i: usize, branching: usize) -> Result<usize> {
    if i == 0 {
        return Err(Error::RootHasNoParent);
    }
    Ok((i - 1) / branching)
}

/// Bit index of the first child of node `i`.
pub fn child(i: usize, branching: usize) -> usize {
    branching * i + 1
}

/// Read access to a breadth-first split mask of any branching factor.
pub trait SplitMask {
    /// Number of explicit bits; nodes past the end are implicit leaves.
    fn bit_len(&self) -> usize;
    fn is_split(&self, i: usize) -> bool;
    /// Number of set bits with index `< end`.
    fn splits_before(&self, end: usize) -> usize;
}

impl SplitMask for [bool] {
    fn bit_len(&self) -> usize {
        self.len()
    }

    fn is_split(&self, i: usize) -> bool {
        self.get(i).copied().unwrap_or(false)
    }

    fn splits_before(&self, end: usize) -> usize {
        self[..end.min(self.len())].iter().filter(|&&b| b).count()
    }
}

/// Offset of leaf `i` in its tree's data array.
///
/// Counts the nodes that precede the first sibling of `i`, subtracts the
/// split nodes before `i`, and adds the position of `i` among its siblings.
/// Works for any branching factor so that quadtree masks exercise the same
/// code path as octrees.
pub fn data_index<M: SplitMask + ?Sized>(mask: &M, i: usize, branching: usize) -> Result<usize> {
    let node_count = branching * mask.bit_len() + 1;
    if i >= node_count {
        return Err(Error::NodeOutOfRange(i));
    }
    if mask.is_split(i) {
        return Err(Error::SplitNode(i));
    }
    if i == 0 {
        return Ok(0);
    }
    let mut ancestor = i;
    while ancestor != 0 {
        ancestor = (ancestor - 1) / branching;
        if !mask.is_split(ancestor) {
            return Err(Error::UnreachableNode(i));
        }
    }
    let pa = (i - 1) / branching;
    Ok(branching * mask.splits_before(pa) + 1 + (i - 1) % branching - mask.splits_before(i))
}

/// Bit index of a node in a shallow octree, including implicit depth-3 leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeIndex(u16);

impl NodeIndex {
    pub const ROOT: NodeIndex = NodeIndex(0);

    pub fn new(i: usize) -> Result<Self> {
        if i >= NODE_COUNT {
            return Err(Error::NodeOutOfRange(i));
        }
        Ok(NodeIndex(i as u16))
    }

    #[inline]
    pub fn get(self) -> usize {
        self.0 as usize
    }

    #[inline]
    pub fn depth(self) -> usize {
        match self.0 {
            0 => 0,
            1..=8 => 1,
            9..=72 => 2,
            _ => 3,
        }
    }

    /// Edge length of the node's extent in voxels.
    #[inline]
    pub fn size(self) -> usize {
        TREE_SIZE >> self.depth()
    }

    /// Local voxel coordinate of the node's lowest corner.
    pub fn origin(self) -> [usize; 3] {
        let depth = self.depth();
        let pos = self.get() - FIRST_AT_DEPTH[depth];
        let mut origin = [0; 3];
        for level in 0..depth {
            let octant = (pos >> (3 * (depth - 1 - level))) & 7;
            let size = TREE_SIZE >> (level + 1);
            origin[0] += ((octant >> 2) & 1) * size;
            origin[1] += ((octant >> 1) & 1) * size;
            origin[2] += (octant & 1) * size;
        }
        origin
    }

    pub fn is_implicit(self) -> bool {
        self.get() >= SPLIT_BITS
    }
}

/// Octant of a local coordinate inside a node of edge length `2 * half`.
#[inline]
pub(crate) fn octant(local: [usize; 3], half: usize) -> usize {
    (((local[0] / half) & 1) << 2) | (((local[1] / half) & 1) << 1) | ((local[2] / half) & 1)
}

/// One leaf of a shallow octree with its local extent and data offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LeafCell {
    pub node: NodeIndex,
    pub origin: [usize; 3],
    pub size: usize,
    pub offset: usize,
}

impl LeafCell {
    pub fn depth(&self) -> usize {
        self.node.depth()
    }

    pub fn volume(&self) -> usize {
        self.size * self.size * self.size
    }

    pub fn contains(&self, local: [usize; 3]) -> bool {
        (0..3).all(|a| local[a] >= self.origin[a] && local[a] < self.origin[a] + self.size)
    }
}

/// The 73-bit split mask of one shallow octree.
///
/// Always valid: a bit may only be set when its parent bit is set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct TreeBits(u128);

impl TreeBits {
    pub const EMPTY: TreeBits = TreeBits(0);
    pub const FULL: TreeBits = TreeBits(MASK);

    pub fn from_raw(raw: u128) -> Result<Self> {
        if raw & !MASK != 0 {
            let bit = (raw & !MASK).trailing_zeros() as usize;
            return Err(Error::BitOutOfRange(bit));
        }
        for bit in 1..SPLIT_BITS {
            if raw >> bit & 1 == 1 {
                let pa = (bit - 1) / OCTREE_BRANCHING;
                if raw >> pa & 1 == 0 {
                    return Err(Error::OrphanSplit { bit, parent: pa });
                }
            }
        }
        Ok(TreeBits(raw))
    }

    /// Builds a mask from the bit indices of its split nodes.
    pub fn from_splits<I: IntoIterator<Item = usize>>(splits: I) -> Result<Self> {
        let mut raw = 0u128;
        for bit in splits {
            if bit >= SPLIT_BITS {
                return Err(Error::BitOutOfRange(bit));
            }
            raw |= 1 << bit;
        }
        Self::from_raw(raw)
    }

    #[inline]
    pub fn raw(self) -> u128 {
        self.0
    }

    #[inline]
    pub fn is_split(self, i: usize) -> bool {
        i < SPLIT_BITS && (self.0 >> i) & 1 == 1
    }

    #[inline]
    pub fn split_count(self) -> usize {
        self.0.count_ones() as usize
    }

    /// Number of leaves, i.e. feature vectors stored for this tree.
    #[inline]
    pub fn num_leaves(self) -> usize {
        1 + (OCTREE_BRANCHING - 1) * self.split_count()
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// True if the node exists in this tree (all its ancestors are split).
    pub fn contains_node(self, i: usize) -> bool {
        if i >= NODE_COUNT {
            return false;
        }
        let mut n = i;
        while n != 0 {
            n = (n - 1) / OCTREE_BRANCHING;
            if !self.is_split(n) {
                return false;
            }
        }
        true
    }

    pub fn is_leaf(self, i: usize) -> bool {
        self.contains_node(i) && !self.is_split(i)
    }

    pub fn data_index(self, node: NodeIndex) -> Result<usize> {
        data_index(&self, node.get(), OCTREE_BRANCHING)
    }

    /// Offset of a leaf known to exist; skips the validity checks.
    #[inline]
    pub(crate) fn leaf_offset_unchecked(self, i: usize) -> usize {
        if i == 0 {
            return 0;
        }
        let pa = (i - 1) / OCTREE_BRANCHING;
        OCTREE_BRANCHING * self.splits_before(pa) + 1 + (i - 1) % OCTREE_BRANCHING
            - self.splits_before(i)
    }

    /// Depth and bit index of the leaf containing the local voxel.
    pub fn voxel_depth(self, local: [usize; 3]) -> (usize, NodeIndex) {
        let mut node = 0;
        let mut depth = 0;
        while depth < MAX_DEPTH && self.is_split(node) {
            let half = TREE_SIZE >> (depth + 1);
            node = child(node, OCTREE_BRANCHING) + octant(local, half);
            depth += 1;
        }
        (depth, NodeIndex(node as u16))
    }

    /// The leaf containing the local voxel.
    pub fn leaf_at(self, local: [usize; 3]) -> LeafCell {
        let (_, node) = self.voxel_depth(local);
        LeafCell {
            node,
            origin: node.origin(),
            size: node.size(),
            offset: self.leaf_offset_unchecked(node.get()),
        }
    }

    /// All leaves in ascending data offset (breadth-first) order.
    pub fn leaves(self) -> Vec<LeafCell> {
        let mut out = Vec::with_capacity(self.num_leaves());
        let mut queue = VecDeque::from([0usize]);
        while let Some(node) = queue.pop_front() {
            if self.is_split(node) {
                let first = child(node, OCTREE_BRANCHING);
                queue.extend(first..first + OCTREE_BRANCHING);
            } else {
                let idx = NodeIndex(node as u16);
                out.push(LeafCell {
                    node: idx,
                    origin: idx.origin(),
                    size: idx.size(),
                    offset: out.len(),
                });
            }
        }
        out
    }

    /// Leaf counts per depth 0..=3.
    pub fn depth_histogram(self) -> [usize; 4] {
        let mut hist = [0; 4];
        for leaf in self.leaves() {
            hist[leaf.depth()] += 1;
        }
        hist
    }

    /// LSB-first record: bit `i` lives in byte `i / 8` at position `i % 8`.
    pub fn to_bytes(self) -> [u8; TREE_BYTES] {
        let mut out = [0u8; TREE_BYTES];
        out.copy_from_slice(&self.0.to_le_bytes()[..TREE_BYTES]);
        out
    }

    pub fn from_bytes(bytes: &[u8; TREE_BYTES]) -> Result<Self> {
        let mut full = [0u8; 16];
        full[..TREE_BYTES].copy_from_slice(bytes);
        Self::from_raw(u128::from_le_bytes(full))
    }
}

impl SplitMask for TreeBits {
    fn bit_len(&self) -> usize {
        SPLIT_BITS
    }

    fn is_split(&self, i: usize) -> bool {
        TreeBits::is_split(*self, i)
    }

    #[inline]
    fn splits_before(&self, end: usize) -> usize {
        if end >= 128 {
            return self.0.count_ones() as usize;
        }
        (self.0 & ((1u128 << end) - 1)).count_ones() as usize
    }
}
