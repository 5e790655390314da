use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use gridoctree::dense::{self, DenseTensor};
use gridoctree::io::{self as gio, DTEN_MAGIC, OCGR_MAGIC};
use gridoctree::{
    build_from_points, memory_report, run_bench, run_check, structure_from_dense, ten_to_oct,
    voxelize_mesh, BenchConfig, CheckConfig, GridOctree, PoolFn, VoxelizeConfig,
};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "gridoctree", version, about = "Grid-octree tensors for sparse 3D data")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for per-tree parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Output path. `voxelize` writes the grid here; other commands write
    /// their report here instead of to standard output.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum InputFormat {
    Off,
    Xyz,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StructureSource {
    /// Minimal structure around the nonzero voxels of one channel.
    FromOccupancy,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Voxelize a triangle mesh (OFF) or point cloud (XYZ) into an OCGR grid.
    Voxelize {
        input: PathBuf,
        /// Input format; inferred from the file extension when omitted.
        #[arg(long, value_enum)]
        format: Option<InputFormat>,
        /// Voxels per axis, a multiple of 8.
        #[arg(long)]
        resolution: usize,
        /// Free voxels left around the fitted geometry.
        #[arg(long, default_value_t = 2)]
        padding: usize,
        /// XYZ only: the last column holds an integer class label.
        #[arg(long)]
        with_labels: bool,
        /// XYZ only: where to write the majority-label grid.
        #[arg(long, requires = "with_labels")]
        labels_out: Option<PathBuf>,
    },
    /// Print the memory report of an OCGR file.
    Stats { file: PathBuf },
    /// Compare every octree operation with its dense counterpart.
    Check {
        #[arg(long, default_value_t = 16)]
        resolution: usize,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        /// Cell reduction inside convolutions: max or avg.
        #[arg(long, default_value = "avg")]
        pool: PoolFn,
    },
    /// Time octree and dense convolutions on shell-shaped occupancy patterns (CSV).
    Bench {
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        /// Comma-separated occupancy fractions.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.01, 0.05, 0.1, 0.2])]
        occupancy: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// Convert between OCGR and DTEN; the direction follows the input's magic.
    Convert {
        input: PathBuf,
        #[arg(long)]
        to: PathBuf,
        #[arg(long, value_enum, default_value = "from-occupancy")]
        structure: StructureSource,
        /// DTEN to OCGR: channel whose nonzero voxels define the structure.
        #[arg(long, default_value_t = 0)]
        channel: usize,
        /// DTEN to OCGR: reduction of the voxels inside each coarse leaf.
        #[arg(long, default_value = "avg")]
        pool: PoolFn,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if cli.threads == 0 {
        bail!("--threads must be at least 1");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .context("configuring the thread pool")?;

    match &cli.command {
        Command::Voxelize {
            input,
            format,
            resolution,
            padding,
            with_labels,
            labels_out,
        } => {
            let out = cli.out.as_ref().context("voxelize needs --out <path>")?;
            let format = match format {
                Some(f) => *f,
                None => infer_format(input)?,
            };
            let cfg = VoxelizeConfig::new(*resolution, *padding)?;
            let reader = BufReader::new(open(input)?);
            let grid = match format {
                InputFormat::Off => {
                    let mesh = gio::read_off(reader).with_context(|| format!("parsing {}", input.display()))?;
                    voxelize_mesh(&mesh, &cfg)?
                }
                InputFormat::Xyz => {
                    let pts = gio::read_xyz(reader, *with_labels)
                        .with_context(|| format!("parsing {}", input.display()))?;
                    let grids = build_from_points(&pts, &cfg)?;
                    if let (Some(path), Some(labels)) = (labels_out, &grids.labels) {
                        write_ocgr(path, labels)?;
                    }
                    grids.features
                }
            };
            write_ocgr(out, &grid)?;
            print_json(None, &serde_json::to_value(memory_report(&grid))?)?;
        }
        Command::Stats { file } => {
            let grid = read_ocgr(file)?;
            print_json(cli.out.as_deref(), &serde_json::to_value(memory_report(&grid))?)?;
        }
        Command::Check {
            resolution,
            trials,
            pool,
        } => {
            if *trials == 0 {
                bail!("--trials must be at least 1");
            }
            let mut cfg = CheckConfig::new(*resolution, *trials, cli.seed);
            cfg.pool = *pool;
            let report = run_check(&cfg)?;
            let mut v = serde_json::to_value(&report)?;
            v["threads"] = json!(cli.threads);
            print_json(cli.out.as_deref(), &v)?;
            if !report.pass {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Bench {
            resolution,
            occupancy,
            reps,
        } => {
            let report = run_bench(&BenchConfig {
                resolution: *resolution,
                occupancies: occupancy.clone(),
                reps: *reps,
                seed: cli.seed,
            })?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            eprintln!("threads: {}", cli.threads);
            write_text(cli.out.as_deref(), &report.to_csv())?;
        }
        Command::Convert {
            input,
            to,
            structure: StructureSource::FromOccupancy,
            channel,
            pool,
        } => {
            let mut bytes = Vec::new();
            open(input)?.read_to_end(&mut bytes)?;
            if bytes.starts_with(OCGR_MAGIC) {
                let grid = gio::read_ocgr(&mut bytes.as_slice()).context("reading OCGR")?;
                let t = gridoctree::oct_to_ten(&grid);
                let mut w = BufWriter::new(create(to)?);
                gio::write_dten(&mut w, &t)?;
                w.flush()?;
            } else if bytes.starts_with(DTEN_MAGIC) {
                let t = gio::read_dten(&mut bytes.as_slice()).context("reading DTEN")?;
                let grid = dense_to_grid(&t, *channel, *pool)?;
                write_ocgr(to, &grid)?;
            } else {
                bail!("{} is neither an OCGR nor a DTEN file", input.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn dense_to_grid(t: &DenseTensor, channel: usize, pool: PoolFn) -> Result<GridOctree> {
    if channel >= t.channels() {
        bail!("--channel {channel} out of range for {} channels", t.channels());
    }
    let mask = dense::pointwise(&t.channel(channel)?, |v| if v != 0.0 { 1.0 } else { 0.0 });
    let structure = structure_from_dense(&mask)?;
    Ok(ten_to_oct(t, &structure, pool)?)
}

fn infer_format(path: &Path) -> Result<InputFormat> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("off") => Ok(InputFormat::Off),
        Some("xyz") | Some("txt") | Some("pts") => Ok(InputFormat::Xyz),
        _ => bail!("cannot infer the format of {}; pass --format", path.display()),
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).with_context(|| format!("opening {}", path.display()))
}

fn create(path: &Path) -> Result<File> {
    File::create(path).with_context(|| format!("creating {}", path.display()))
}

fn read_ocgr(path: &Path) -> Result<GridOctree> {
    let mut r = BufReader::new(open(path)?);
    gio::read_ocgr(&mut r).with_context(|| format!("reading {}", path.display()))
}

fn write_ocgr(path: &Path, grid: &GridOctree) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    gio::write_ocgr(&mut w, grid)?;
    w.flush()?;
    Ok(())
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn print_json(path: Option<&Path>, v: &Value) -> Result<()> {
    write_text(path, &format!("{}\n", serde_json::to_string_pretty(v)?))
}
