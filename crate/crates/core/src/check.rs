//! Equivalence check of every octree operation against its dense
//! counterpart on seeded random inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dense::{self, ConvKernel, DenseTensor};
use crate::error::{Error, Result};
use crate::grid::{oct_to_ten, wrap_dense, GridOctree, PoolFn, Structure};
use crate::ops;
use crate::synth::{random_grid, random_kernel, random_values, SplitOdds};
use crate::tree::TREE_SIZE;

/// Tolerance for convolutions, relative to the largest reference magnitude.
pub const CONV_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckConfig {
    /// Voxels per axis; a multiple of 16 so that pooling is defined.
    pub resolution: usize,
    pub trials: usize,
    pub seed: u64,
    /// Cell reduction used by the convolutions.
    pub pool: PoolFn,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl CheckConfig {
    pub fn new(resolution: usize, trials: usize, seed: u64) -> Self {
        CheckConfig {
            resolution,
            trials,
            seed,
            pool: PoolFn::Average,
            in_channels: 2,
            out_channels: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpCheck {
    pub op: String,
    pub cases: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub structure_match: bool,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub resolution: usize,
    pub trials: usize,
    pub seed: u64,
    pub pool: PoolFn,
    pub ops: Vec<OpCheck>,
    pub pass: bool,
}

/// `max |a − b| / max |b|`; zero when both are identically zero.
pub fn max_relative_error(a: &[f32], b: &[f32]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        diff = diff.max((x as f64 - y as f64).abs());
        scale = scale.max((y as f64).abs());
    }
    if diff == 0.0 {
        0.0
    } else if scale == 0.0 {
        f64::INFINITY
    } else {
        diff / scale
    }
}

struct Tally {
    op: &'static str,
    tolerance: f64,
    cases: usize,
    err: f64,
    structure_match: bool,
}

impl Tally {
    fn new(op: &'static str, tolerance: f64) -> Self {
        Tally {
            op,
            tolerance,
            cases: 0,
            err: 0.0,
            structure_match: true,
        }
    }

    fn values(&mut self, got: &[f32], want: &[f32]) {
        self.cases += 1;
        self.err = self.err.max(max_relative_error(got, want));
    }

    fn dense(&mut self, got: &DenseTensor, want: &DenseTensor) {
        if got.shape() != want.shape() || got.channels() != want.channels() {
            self.structure_match = false;
        }
        self.values(got.data(), want.data());
    }

    fn grids(&mut self, got: &GridOctree, want: &GridOctree) {
        if !got.same_structure(want) {
            self.structure_match = false;
        }
        self.values(got.data(), want.data());
    }

    fn finish(self) -> OpCheck {
        OpCheck {
            op: self.op.to_string(),
            cases: self.cases,
            max_rel_error: self.err,
            tolerance: self.tolerance,
            structure_match: self.structure_match,
            pass: self.structure_match && self.err <= self.tolerance,
        }
    }
}

/// Runs every operation `trials` times on random structures and values.
pub fn run_check(cfg: &CheckConfig) -> Result<CheckReport> {
    if cfg.resolution == 0 || !cfg.resolution.is_multiple_of(2 * TREE_SIZE) {
        return Err(Error::InvalidConfig(format!(
            "resolution must be a positive multiple of 16, got {}",
            cfg.resolution
        )));
    }
    if cfg.in_channels == 0 || cfg.out_channels == 0 {
        return Err(Error::InvalidConfig("channel counts must be positive".into()));
    }
    let n = cfg.resolution / TREE_SIZE;
    let dims = [n, n, n];
    let (cin, cout) = (cfg.in_channels, cfg.out_channels);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut naive = Tally::new("conv_naive", CONV_TOLERANCE);
    let mut efficient = Tally::new("conv_efficient", CONV_TOLERANCE);
    let mut identity = Tally::new("conv_identity", 0.0);
    let mut pool_full_max = Tally::new("pool2_max_full", 0.0);
    let mut pool_full_avg = Tally::new("pool2_avg_full", 0.0);
    let mut pool_adaptive_max = Tally::new("pool2_max_adaptive", 0.0);
    let mut pool_adaptive_avg = Tally::new("pool2_avg_adaptive", 0.0);
    let mut unpool = Tally::new("unpool2", 0.0);
    let mut guided = Tally::new("unpool2_guided", 0.0);
    let mut relu = Tally::new("pointwise_relu", 0.0);
    let mut concat = Tally::new("concat", 0.0);

    for _ in 0..cfg.trials {
        let grid = random_grid(&mut rng, dims, cin, SplitOdds::default());
        let kernel = random_kernel(&mut rng, cout, cin, [3, 3, 3]);
        let reference = wrap_dense(|t| dense::conv(t, &kernel), &grid, cfg.pool)?;
        naive.grids(&ops::conv_naive(&grid, &kernel, cfg.pool)?.0, &reference);
        efficient.grids(&ops::conv_efficient(&grid, &kernel, cfg.pool)?.0, &reference);

        let id = ConvKernel::identity(cin, [3, 3, 3])?;
        identity.grids(&ops::conv_naive(&grid, &id, cfg.pool)?.0, &grid);
        identity.grids(&ops::conv_efficient(&grid, &id, cfg.pool)?.0, &grid);

        let full = random_values(&mut rng, Structure::full(dims)?, cin);
        let dense_full = oct_to_ten(&full);
        pool_full_max.dense(
            &oct_to_ten(&ops::pool2(&full, PoolFn::Max)?),
            &dense::max_pool2(&dense_full)?,
        );
        pool_full_avg.dense(
            &oct_to_ten(&ops::pool2(&full, PoolFn::Average)?),
            &dense::avg_pool2(&dense_full)?,
        );

        let t = oct_to_ten(&grid);
        pool_adaptive_max.dense(&oct_to_ten(&ops::pool2(&grid, PoolFn::Max)?), &dense::max_pool2(&t)?);
        pool_adaptive_avg.dense(
            &oct_to_ten(&ops::pool2(&grid, PoolFn::Average)?),
            &dense::avg_pool2(&t)?,
        );

        let pooled = ops::pool2(&grid, PoolFn::Max)?;
        let pooled_dense = oct_to_ten(&pooled);
        let up = ops::unpool2(&pooled)?;
        unpool.dense(&oct_to_ten(&up), &dense::unpool2(&pooled_dense));

        let back = ops::unpool2_guided(&pooled, grid.structure())?;
        if back.structure() != grid.structure() {
            guided.structure_match = false;
        }
        guided.dense(&oct_to_ten(&back), &dense::unpool2(&pooled_dense));

        relu.dense(
            &oct_to_ten(&ops::pointwise(&grid, dense::relu)),
            &dense::pointwise(&t, dense::relu),
        );

        let other = random_values(&mut rng, grid.structure().clone(), cout);
        concat.dense(&oct_to_ten(&ops::concat(&grid, &other)?), &t.concat(&oct_to_ten(&other))?);
    }

    let ops: Vec<OpCheck> = [
        naive,
        efficient,
        identity,
        pool_full_max,
        pool_full_avg,
        pool_adaptive_max,
        pool_adaptive_avg,
        unpool,
        guided,
        relu,
        concat,
    ]
    .into_iter()
    .map(Tally::finish)
    .collect();
    let pass = ops.iter().all(|o| o.pass);
    Ok(CheckReport {
        resolution: cfg.resolution,
        trials: cfg.trials,
        seed: cfg.seed,
        pool: cfg.pool,
        ops,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_cases() {
        assert_eq!(max_relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(max_relative_error(&[0.0], &[0.0]), 0.0);
        assert!((max_relative_error(&[1.0, 2.5], &[1.0, 2.0]) - 0.25).abs() < 1e-12);
        assert!(max_relative_error(&[1.0], &[0.0]).is_infinite());
        assert!(max_relative_error(&[1.0], &[1.0, 2.0]).is_infinite());
    }

    #[test]
    fn small_check_passes() {
        let rep = run_check(&CheckConfig::new(16, 2, 3)).unwrap();
        for op in &rep.ops {
            assert!(op.pass, "{op:?}");
            assert!(op.cases >= 2);
        }
        assert!(rep.pass);
    }

    #[test]
    fn max_pool_cells_pass() {
        let mut cfg = CheckConfig::new(16, 1, 11);
        cfg.pool = PoolFn::Max;
        assert!(run_check(&cfg).unwrap().pass);
    }

    #[test]
    fn rejects_odd_grid() {
        assert!(run_check(&CheckConfig::new(24, 1, 0)).is_err());
    }
}
