//! Memory accounting and the benchmark harness.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::builder::occupancy_grid;
use crate::dense;
use crate::error::{Error, Result};
use crate::grid::{oct_to_ten, GridOctree, PoolFn};
use crate::io::ocgr_size;
use crate::ops::{conv_efficient, conv_naive, OpStats};
use crate::synth::{random_kernel, shell_occupancy};
use crate::tree::{TREE_BYTES, TREE_SIZE};

/// Storage cost of a grid next to its dense equivalent.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryReport {
    pub resolution: [usize; 3],
    pub channels: usize,
    pub trees: usize,
    pub leaves: usize,
    pub leaves_per_depth: [usize; 4],
    /// Fraction of voxels whose leaf holds a nonzero value in any channel.
    pub occupancy: f64,
    pub dense_bytes: u64,
    /// `10 · trees + 4 · channels · leaves`.
    pub octree_bytes: u64,
    /// Size of the serialized OCGR file, header included.
    pub file_bytes: u64,
    pub compression_ratio: f64,
}

pub fn memory_report(grid: &GridOctree) -> MemoryReport {
    let s = grid.structure();
    let c = grid.channels();
    let [rd, rh, rw] = s.resolution();
    let voxels = (rd * rh * rw) as u64;
    let mut hist = [0usize; 4];
    let mut occupied = 0u64;
    for (t, tree) in s.trees().iter().enumerate() {
        let block = grid.tree_data(t);
        for leaf in tree.leaves() {
            hist[leaf.depth()] += 1;
            let v = &block[leaf.offset * c..(leaf.offset + 1) * c];
            if v.iter().any(|&x| x != 0.0) {
                occupied += leaf.volume() as u64;
            }
        }
    }
    let dense_bytes = 4 * c as u64 * voxels;
    let octree_bytes = (TREE_BYTES * s.tree_count() + 4 * c * s.num_leaves()) as u64;
    MemoryReport {
        resolution: [rd, rh, rw],
        channels: c,
        trees: s.tree_count(),
        leaves: s.num_leaves(),
        leaves_per_depth: hist,
        occupancy: occupied as f64 / voxels as f64,
        dense_bytes,
        octree_bytes,
        file_bytes: ocgr_size(grid) as u64,
        compression_ratio: dense_bytes as f64 / octree_bytes as f64,
    }
}

pub const BENCH_SCHEMA_VERSION: u32 = 1;
pub const BENCH_CSV_HEADER: &str = "schema_version,op,resolution,occupancy,reps,wall_ms,\
multiplications,cells_visited,boundary_voxels_evaluated,per_voxel_cells,mult_ratio,checksum";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    /// Voxels per axis; a multiple of 8.
    pub resolution: usize,
    /// Target fractions of occupied voxels.
    pub occupancies: Vec<f64>,
    pub reps: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRecord {
    pub op: String,
    pub resolution: usize,
    /// Measured occupancy of the generated pattern.
    pub occupancy: f64,
    pub reps: usize,
    /// Mean wall time per repetition.
    pub wall_ms: f64,
    pub stats: OpStats,
    /// Multiplications relative to a dense convolution of the same volume.
    pub mult_ratio: f64,
    pub checksum: u64,
}

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{},{:.4},{},{},{},{},{:.6},{:016x}",
            BENCH_SCHEMA_VERSION,
            self.op,
            self.resolution,
            self.occupancy,
            self.reps,
            self.wall_ms,
            self.stats.multiplications,
            self.stats.cells_visited,
            self.stats.boundary_voxels_evaluated,
            self.stats.per_voxel_cells,
            self.mult_ratio,
            self.checksum
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
    pub warnings: Vec<String>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{BENCH_CSV_HEADER}").unwrap();
        for r in &self.records {
            writeln!(out, "{}", r.csv_row()).unwrap();
        }
        out
    }
}

/// FNV-1a over the bit patterns of `values`.
pub fn checksum(values: &[f32]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

fn time_reps<T>(reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<(f64, T)> {
    let reps = reps.max(1);
    let start = Instant::now();
    let mut last = f()?;
    for _ in 1..reps {
        last = f()?;
    }
    Ok((start.elapsed().as_secs_f64() * 1e3 / reps as f64, last))
}

fn bench_pattern(
    records: &mut Vec<BenchRecord>,
    grid: &GridOctree,
    kernel: &dense::ConvKernel,
    reps: usize,
) -> Result<()> {
    let report = memory_report(grid);
    let resolution = report.resolution[0];
    let voxels = (resolution as u64).pow(3);
    let dense_mults = voxels * kernel.taps() as u64 * (kernel.in_channels() * kernel.out_channels()) as u64;
    let ratio = |m: u64| m as f64 / dense_mults as f64;

    let (ms, (out, stats)) = time_reps(reps, || conv_naive(grid, kernel, PoolFn::Average))?;
    records.push(BenchRecord {
        op: "conv_naive".into(),
        resolution,
        occupancy: report.occupancy,
        reps,
        wall_ms: ms,
        stats,
        mult_ratio: ratio(stats.multiplications),
        checksum: checksum(out.data()),
    });

    let (ms, (out, stats)) = time_reps(reps, || conv_efficient(grid, kernel, PoolFn::Average))?;
    records.push(BenchRecord {
        op: "conv_efficient".into(),
        resolution,
        occupancy: report.occupancy,
        reps,
        wall_ms: ms,
        stats,
        mult_ratio: ratio(stats.multiplications),
        checksum: checksum(out.data()),
    });

    let t = oct_to_ten(grid);
    let (ms, out) = time_reps(reps, || dense::conv(&t, kernel))?;
    records.push(BenchRecord {
        op: "conv_dense".into(),
        resolution,
        occupancy: report.occupancy,
        reps,
        wall_ms: ms,
        stats: OpStats {
            multiplications: dense_mults,
            cells_visited: voxels,
            ..OpStats::default()
        },
        mult_ratio: 1.0,
        checksum: checksum(out.data()),
    });
    Ok(())
}

/// Times naive, efficient and dense 3³ convolution on a single isolated 8³
/// cell and on shell-shaped occupancy patterns at each requested level.
///
/// At 128³ and above, a warning is recorded when the efficient octree
/// convolution is slower than the dense one at occupancy of 5 % or less.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.resolution == 0 || !cfg.resolution.is_multiple_of(TREE_SIZE) {
        return Err(Error::InvalidConfig(format!(
            "resolution must be a positive multiple of 8, got {}",
            cfg.resolution
        )));
    }
    if let Some(bad) = cfg.occupancies.iter().find(|&&o| !(0.0..=1.0).contains(&o)) {
        return Err(Error::InvalidConfig(format!("occupancy {bad} is outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let kernel = random_kernel(&mut rng, 1, 1, [3, 3, 3]);
    let mut report = BenchReport::default();

    let cell = GridOctree::new(crate::grid::Structure::empty([1, 1, 1])?, 1, vec![1.0])?;
    bench_pattern(&mut report.records, &cell, &kernel, cfg.reps)?;

    let n = cfg.resolution / TREE_SIZE;
    for &occ in &cfg.occupancies {
        let voxels: BTreeSet<[usize; 3]> = shell_occupancy(cfg.resolution, occ).into_iter().collect();
        let grid = occupancy_grid([n, n, n], &voxels)?;
        let first = report.records.len();
        bench_pattern(&mut report.records, &grid, &kernel, cfg.reps)?;
        let rows = &report.records[first..];
        let (eff, dense) = (&rows[1], &rows[2]);
        if cfg.resolution >= 128 && eff.occupancy <= 0.05 && eff.wall_ms > dense.wall_ms {
            report.warnings.push(format!(
                "octree convolution slower than dense at {}^3, occupancy {:.4}: {:.2} ms vs {:.2} ms",
                cfg.resolution, eff.occupancy, eff.wall_ms, dense.wall_ms
            ));
        }
    }
    Ok(report)
}
