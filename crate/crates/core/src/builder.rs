//! Construction of grid-octrees from triangle meshes, labelled point clouds
//! and dense occupancy tensors.
//!
//! Structures are minimal: a node is split iff its extent holds at least one
//! occupied voxel and it sits above depth 3, so every occupied voxel ends up
//! in its own depth-3 leaf and every empty region is a single leaf.

use std::collections::{BTreeMap, BTreeSet};

use crate::dense::DenseTensor;
use crate::error::{Error, Result};
use crate::grid::{GridOctree, Structure};
use crate::tree::{NodeIndex, TreeBits, SPLIT_BITS, TREE_SIZE};

pub type Vec3 = [f64; 3];
pub type Rotation = [[f64; 3]; 3];

#[inline]
fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn rotate(r: &Rotation, p: Vec3) -> Vec3 {
    [dot(r[0], p), dot(r[1], p), dot(r[2], p)]
}

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Option<Aabb> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let mut b = Aabb {
            min: first,
            max: first,
        };
        for p in it {
            for a in 0..3 {
                b.min[a] = b.min[a].min(p[a]);
                b.max[a] = b.max[a].max(p[a]);
            }
        }
        Some(b)
    }

    pub fn extent(&self) -> Vec3 {
        sub(self.max, self.min)
    }
}

/// Uniform scale followed by a translation, model units to voxel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub scale: f64,
    pub translation: Vec3,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        scale: 1.0,
        translation: [0.0; 3],
    };

    #[inline]
    pub fn apply(&self, p: Vec3) -> Vec3 {
        [
            p[0] * self.scale + self.translation[0],
            p[1] * self.scale + self.translation[1],
            p[2] * self.scale + self.translation[2],
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelizeConfig {
    /// Voxels per axis; a multiple of 8.
    pub resolution: usize,
    /// Voxels left free around the fitted geometry.
    pub padding: usize,
    /// Fixed model-to-voxel transform; fitted to the input bounds when `None`.
    pub transform: Option<Transform>,
}

impl VoxelizeConfig {
    pub fn new(resolution: usize, padding: usize) -> Result<Self> {
        let cfg = VoxelizeConfig {
            resolution,
            padding,
            transform: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_transform(mut self, transform: Transform) -> Self {
        self.transform = Some(transform);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || !self.resolution.is_multiple_of(TREE_SIZE) {
            return Err(Error::InvalidConfig(format!(
                "resolution must be a positive multiple of 8, got {}",
                self.resolution
            )));
        }
        if self.padding >= self.resolution {
            return Err(Error::InvalidConfig(format!(
                "padding {} must be smaller than the resolution {}",
                self.padding, self.resolution
            )));
        }
        Ok(())
    }

    fn grid_dims(&self) -> [usize; 3] {
        let n = self.resolution / TREE_SIZE;
        [n, n, n]
    }
}

/// Maps `bounds` into the centred `(N − P)³` sub-box of `[0, N)³`, keeping
/// the aspect ratio: the longest axis spans exactly `N − P` voxels.
pub fn fit_transform(bounds: &Aabb, cfg: &VoxelizeConfig) -> Result<Transform> {
    cfg.validate()?;
    let extent = bounds.extent();
    let longest = extent.iter().cloned().fold(0.0f64, f64::max);
    if !(longest > 0.0) || !longest.is_finite() {
        return Err(Error::Degenerate(format!(
            "bounding box {:?}..{:?} has zero extent",
            bounds.min, bounds.max
        )));
    }
    let scale = (cfg.resolution - cfg.padding) as f64 / longest;
    let half = cfg.resolution as f64 / 2.0;
    let mut translation = [0.0; 3];
    for a in 0..3 {
        let center = (bounds.min[a] + bounds.max[a]) / 2.0;
        translation[a] = half - scale * center;
    }
    Ok(Transform { scale, translation })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if triangles.is_empty() {
            return Err(Error::Degenerate("mesh has no triangles".into()));
        }
        if let Some(bad) = triangles.iter().flatten().find(|&&i| i >= vertices.len()) {
            return Err(Error::Degenerate(format!(
                "vertex index {bad} out of range ({} vertices)",
                vertices.len()
            )));
        }
        Ok(TriangleMesh {
            vertices,
            triangles,
        })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn triangle(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn bounds(&self) -> Aabb {
        Aabb::from_points(self.triangles.iter().flatten().map(|&i| &self.vertices[i]))
            .expect("mesh has at least one triangle")
    }

    /// Rotates every vertex about the origin, e.g. for augmentation.
    pub fn rotated(&self, r: &Rotation) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.iter().map(|&p| rotate(r, p)).collect(),
            triangles: self.triangles.clone(),
        }
    }
}

/// Points with per-point feature vectors of length `F` and optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    points: Vec<Vec3>,
    feature_len: usize,
    features: Vec<f32>,
    labels: Option<Vec<u32>>,
}

impl PointSet {
    pub fn new(
        points: Vec<Vec3>,
        feature_len: usize,
        features: Vec<f32>,
        labels: Option<Vec<u32>>,
    ) -> Result<Self> {
        if feature_len == 0 {
            return Err(Error::InvalidConfig("feature length must be at least 1".into()));
        }
        if features.len() != points.len() * feature_len {
            return Err(Error::ShapeMismatch {
                expected: format!("{} feature values", points.len() * feature_len),
                actual: format!("{}", features.len()),
            });
        }
        if let Some(l) = &labels {
            if l.len() != points.len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} labels", points.len()),
                    actual: format!("{}", l.len()),
                });
            }
        }
        Ok(PointSet {
            points,
            feature_len,
            features,
            labels,
        })
    }

    /// Points carrying a single occupancy feature of 1.
    pub fn occupancy(points: Vec<Vec3>) -> Self {
        let n = points.len();
        PointSet {
            points,
            feature_len: 1,
            features: vec![1.0; n],
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn feature_len(&self) -> usize {
        self.feature_len
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i * self.feature_len..(i + 1) * self.feature_len]
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    /// Number of real classes; the void label takes this id.
    pub fn num_classes(&self) -> u32 {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |m| m + 1)
    }

    pub fn bounds(&self) -> Option<Aabb> {
        Aabb::from_points(&self.points)
    }

    pub fn rotated(&self, r: &Rotation) -> PointSet {
        PointSet {
            points: self.points.iter().map(|&p| rotate(r, p)).collect(),
            ..self.clone()
        }
    }
}

/// Separating-axis overlap test between a triangle and an axis-aligned box.
///
/// Tests the 3 box normals, the triangle normal and the 9 edge × axis
/// cross products. Touching counts as overlap.
pub fn tri_box_overlap(tri: &[Vec3; 3], center: Vec3, half: Vec3) -> bool {
    let v = [sub(tri[0], center), sub(tri[1], center), sub(tri[2], center)];

    for a in 0..3 {
        let lo = v[0][a].min(v[1][a]).min(v[2][a]);
        let hi = v[0][a].max(v[1][a]).max(v[2][a]);
        if lo > half[a] || hi < -half[a] {
            return false;
        }
    }

    let edges = [sub(v[1], v[0]), sub(v[2], v[1]), sub(v[0], v[2])];
    let normal = cross(edges[0], edges[1]);
    let r = half[0] * normal[0].abs() + half[1] * normal[1].abs() + half[2] * normal[2].abs();
    if dot(normal, v[0]).abs() > r {
        return false;
    }

    const UNIT: [Vec3; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for e in &edges {
        for u in &UNIT {
            let axis = cross(*e, *u);
            let p = [dot(axis, v[0]), dot(axis, v[1]), dot(axis, v[2])];
            let lo = p[0].min(p[1]).min(p[2]);
            let hi = p[0].max(p[1]).max(p[2]);
            let r = half[0] * axis[0].abs() + half[1] * axis[1].abs() + half[2] * axis[2].abs();
            if lo > r || hi < -r {
                return false;
            }
        }
    }
    true
}

/// Occupancy of one 8³ block, bit `i·64 + j·8 + k`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct BlockMask([u64; 8]);

impl BlockMask {
    #[inline]
    fn set(&mut self, local: [usize; 3]) {
        let bit = local[0] * 64 + local[1] * 8 + local[2];
        self.0[bit / 64] |= 1 << (bit % 64);
    }

    #[inline]
    fn get(&self, local: [usize; 3]) -> bool {
        let bit = local[0] * 64 + local[1] * 8 + local[2];
        self.0[bit / 64] >> (bit % 64) & 1 == 1
    }

    fn any_in(&self, origin: [usize; 3], size: usize) -> bool {
        for i in origin[0]..origin[0] + size {
            for j in origin[1]..origin[1] + size {
                for k in origin[2]..origin[2] + size {
                    if self.get([i, j, k]) {
                        return true;
                    }
                }
            }
        }
        false
    }

    fn to_tree(self) -> TreeBits {
        let mut raw = 0u128;
        for node in 0..SPLIT_BITS {
            let idx = NodeIndex::new(node).expect("explicit bits are valid nodes");
            if self.any_in(idx.origin(), idx.size()) {
                raw |= 1 << node;
            }
        }
        TreeBits::from_raw(raw).expect("occupied children imply occupied parents")
    }
}

/// Minimal structure for a set of occupied global voxels.
pub fn structure_from_voxels<'a>(
    dims: [usize; 3],
    voxels: impl IntoIterator<Item = &'a [usize; 3]>,
) -> Result<Structure> {
    let n = dims.iter().product();
    let mut masks = vec![BlockMask::default(); n];
    let res = [dims[0] * TREE_SIZE, dims[1] * TREE_SIZE, dims[2] * TREE_SIZE];
    for v in voxels {
        if (0..3).any(|a| v[a] >= res[a]) {
            return Err(Error::VoxelOutOfRange {
                i: v[0],
                j: v[1],
                k: v[2],
                shape: res,
            });
        }
        let t = (v[0] / TREE_SIZE * dims[1] + v[1] / TREE_SIZE) * dims[2] + v[2] / TREE_SIZE;
        masks[t].set([v[0] % TREE_SIZE, v[1] % TREE_SIZE, v[2] % TREE_SIZE]);
    }
    Structure::new(dims, masks.into_iter().map(BlockMask::to_tree).collect())
}

/// Minimal structure of a single-channel binary occupancy tensor.
pub fn structure_from_dense(occ: &DenseTensor) -> Result<Structure> {
    if occ.channels() != 1 {
        return Err(Error::ChannelMismatch {
            expected: 1,
            actual: occ.channels(),
        });
    }
    let shape = occ.shape();
    if shape.iter().any(|s| s % TREE_SIZE != 0) {
        return Err(Error::ShapeMismatch {
            expected: "spatial dims that are multiples of 8".into(),
            actual: format!("{shape:?}"),
        });
    }
    if let Some((index, &value)) = occ
        .data()
        .iter()
        .enumerate()
        .find(|(_, &v)| v != 0.0 && v != 1.0)
    {
        return Err(Error::NonBinary { index, value });
    }
    let mut occupied = Vec::new();
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                if occ.at(0, i, j, k) == 1.0 {
                    occupied.push([i, j, k]);
                }
            }
        }
    }
    let dims = [shape[0] / TREE_SIZE, shape[1] / TREE_SIZE, shape[2] / TREE_SIZE];
    structure_from_voxels(dims, &occupied)
}

/// Voxel index range `[lo, hi]` along one axis touched by a closed interval.
fn touched_range(min: f64, max: f64, n: usize) -> Option<(usize, usize)> {
    let lo = (min.ceil() - 1.0).max(0.0);
    let hi = max.floor().min(n as f64 - 1.0);
    if hi < lo || !lo.is_finite() || !hi.is_finite() {
        return None;
    }
    Some((lo as usize, hi as usize))
}

/// Surface occupancy of a mesh: a voxel is 1 iff a triangle touches its box.
pub fn voxelize_mesh(mesh: &TriangleMesh, cfg: &VoxelizeConfig) -> Result<GridOctree> {
    cfg.validate()?;
    let transform = match cfg.transform {
        Some(t) => t,
        None => fit_transform(&mesh.bounds(), cfg)?,
    };
    let n = cfg.resolution;
    let mut occupied = BTreeSet::new();
    for t in 0..mesh.triangles().len() {
        let tri = mesh.triangle(t).map(|p| transform.apply(p));
        let mut ranges = [(0, 0); 3];
        let mut hit = true;
        for (a, range) in ranges.iter_mut().enumerate() {
            let lo = tri[0][a].min(tri[1][a]).min(tri[2][a]);
            let hi = tri[0][a].max(tri[1][a]).max(tri[2][a]);
            match touched_range(lo, hi, n) {
                Some(r) => *range = r,
                None => hit = false,
            }
        }
        if !hit {
            continue;
        }
        for i in ranges[0].0..=ranges[0].1 {
            for j in ranges[1].0..=ranges[1].1 {
                for k in ranges[2].0..=ranges[2].1 {
                    let center = [i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5];
                    if tri_box_overlap(&tri, center, [0.5; 3]) {
                        occupied.insert([i, j, k]);
                    }
                }
            }
        }
    }
    occupancy_grid(cfg.grid_dims(), &occupied)
}

/// One-channel grid storing 1 in every occupied voxel and 0 elsewhere, on
/// the minimal structure of the occupied set.
pub fn occupancy_grid(dims: [usize; 3], occupied: &BTreeSet<[usize; 3]>) -> Result<GridOctree> {
    let structure = structure_from_voxels(dims, occupied)?;
    GridOctree::from_leaves(structure, 1, |_, origin, leaf, out| {
        out[0] = if leaf.size == 1 && occupied.contains(&origin) {
            1.0
        } else {
            0.0
        };
    })
}

/// Grids produced from a point set, all sharing one structure.
#[derive(Clone, Debug, PartialEq)]
pub struct PointGrids {
    /// Mean feature vector of the points in each leaf; zero where empty.
    pub features: GridOctree,
    /// Majority label per leaf; `void_label` where empty.
    pub labels: Option<GridOctree>,
    /// Number of points binned into each leaf.
    pub counts: GridOctree,
    pub void_label: u32,
    pub transform: Transform,
}

#[derive(Default)]
struct VoxelAcc {
    count: usize,
    sums: Vec<f64>,
    labels: BTreeMap<u32, usize>,
}

/// Bins points into finest voxels, averaging features and taking a
/// majority vote over labels (ties go to the smallest class id).
pub fn build_from_points(pts: &PointSet, cfg: &VoxelizeConfig) -> Result<PointGrids> {
    cfg.validate()?;
    let transform = match (cfg.transform, pts.bounds()) {
        (Some(t), _) => t,
        (None, Some(b)) => fit_transform(&b, cfg)?,
        (None, None) => Transform::IDENTITY,
    };
    let n = cfg.resolution;
    let f = pts.feature_len();
    let mut voxels: BTreeMap<[usize; 3], VoxelAcc> = BTreeMap::new();
    for (idx, &p) in pts.points().iter().enumerate() {
        let q = transform.apply(p);
        if q.iter().any(|&c| !(c >= 0.0 && c < n as f64)) {
            return Err(Error::PointOutOfRange {
                index: idx,
                coords: q,
                resolution: n,
            });
        }
        let v = [q[0] as usize, q[1] as usize, q[2] as usize];
        let acc = voxels.entry(v).or_insert_with(|| VoxelAcc {
            sums: vec![0.0; f],
            ..Default::default()
        });
        acc.count += 1;
        for (s, &x) in acc.sums.iter_mut().zip(pts.feature(idx)) {
            *s += x as f64;
        }
        if let Some(labels) = pts.labels() {
            *acc.labels.entry(labels[idx]).or_insert(0) += 1;
        }
    }
    let structure = structure_from_voxels(cfg.grid_dims(), voxels.keys())?;
    let void_label = pts.num_classes();
    let lookup = |origin: [usize; 3], size: usize| {
        if size == 1 {
            voxels.get(&origin)
        } else {
            None
        }
    };
    let features = GridOctree::from_leaves(structure.clone(), f, |_, origin, leaf, out| {
        if let Some(acc) = lookup(origin, leaf.size) {
            for (o, s) in out.iter_mut().zip(&acc.sums) {
                *o = (s / acc.count as f64) as f32;
            }
        }
    })?;
    let counts = GridOctree::from_leaves(structure.clone(), 1, |_, origin, leaf, out| {
        out[0] = lookup(origin, leaf.size).map_or(0.0, |a| a.count as f32);
    })?;
    let labels = match pts.labels() {
        None => None,
        Some(_) => Some(GridOctree::from_leaves(structure, 1, |_, origin, leaf, out| {
            out[0] = match lookup(origin, leaf.size) {
                Some(acc) => majority(&acc.labels) as f32,
                None => void_label as f32,
            };
        })?),
    };
    Ok(PointGrids {
        features,
        labels,
        counts,
        void_label,
        transform,
    })
}

/// Most frequent label; ties resolve to the smallest id.
fn majority(counts: &BTreeMap<u32, usize>) -> u32 {
    let mut best = (0u32, 0usize);
    for (&label, &count) in counts {
        if count > best.1 {
            best = (label, count);
        }
    }
    best.0
}
