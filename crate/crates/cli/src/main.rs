//! Command-line front end: registration, synthetic benchmark generation,
//! warping, field inversion, error metrics and the gradient check.
//!
//! Metric outputs are printed as machine-parsable `name value` lines on
//! stdout; human-readable progress goes to stderr via the logger.

use clap::{Parser, Subcommand};
use srwcr_core::bspline::{self, DisplacementField};
use srwcr_core::engine;
use srwcr_core::eval::{self, PatternKind, PointSet, SynthParams};
use srwcr_core::pipeline::{self, RegistrationConfig};
use srwcr_core::volume::{self, ElementType};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "srwcr",
    about = "3-D non-rigid registration with the spatially region-weighted correlation ratio",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register a moving volume onto a fixed volume
    Register {
        /// fixed volume header
        #[arg(long)]
        fixed: PathBuf,
        /// moving volume header
        #[arg(long)]
        moving: PathBuf,
        /// registration config file (key = value lines)
        #[arg(long)]
        config: Option<PathBuf>,
        /// output displacement field header
        #[arg(long)]
        out_field: PathBuf,
        /// optional output warped moving volume header
        #[arg(long)]
        out_warped: Option<PathBuf>,
        /// worker threads (0 = all cores); overrides the config file
        #[arg(long)]
        threads: Option<usize>,
        /// deterministic parallel reductions (on/off); overrides the config
        #[arg(long)]
        deterministic: Option<String>,
    },
    /// Generate a synthetic benchmark pair with a known warp
    Synth {
        /// cube edge, or three comma-separated dims (e.g. 128 or 128,96,64)
        #[arg(long, default_value = "128")]
        dims: String,
        /// maximum node displacement of the hidden warp, voxels
        #[arg(long, default_value_t = 15.0)]
        amplitude: f64,
        /// node spacing of the hidden warp grid, voxels
        #[arg(long, default_value_t = 32.0)]
        warp_spacing: f64,
        /// spatial period of the checkerboard pattern, voxels
        #[arg(long, default_value_t = 16)]
        period: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// output prefix; writes <prefix>_orig.hdr, <prefix>_warped.hdr,
        /// <prefix>_field.hdr (plus .raw payloads)
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// Backward-warp a volume with a displacement field
    Warp {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Invert a displacement field by Gaussian splatting
    Invert {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// splatting kernel width, voxels
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
    },
    /// RMSE between a displacement field and a ground-truth field
    EvalRmse {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Mean target registration error between landmark sets
    EvalTre {
        #[arg(long)]
        fixed_pts: PathBuf,
        #[arg(long)]
        moving_pts: PathBuf,
        #[arg(long)]
        field: PathBuf,
        /// voxel spacing in mm: one value or three comma-separated
        #[arg(long, default_value = "1")]
        spacing: String,
    },
    /// Hausdorff and mean surface distance between point sets
    EvalSurface {
        #[arg(long)]
        pts_a: PathBuf,
        #[arg(long)]
        pts_b: PathBuf,
        /// optional field applied to the first set before comparing
        #[arg(long)]
        field: Option<PathBuf>,
    },
    /// Finite-difference verification of the analytic gradient
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// cube edge of the verification fixture
        #[arg(long, default_value_t = 16)]
        dims: usize,
        /// control grid spacing of the fixture, voxels
        #[arg(long, default_value_t = 4.0)]
        grid_spacing: f64,
    },
}

fn parse_triple(s: &str) -> Result<(f64, f64, f64), String> {
    let parts: Vec<f64> = s
        .split([',', ' '])
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    match parts.as_slice() {
        [v] => Ok((*v, *v, *v)),
        [a, b, c] => Ok((*a, *b, *c)),
        _ => Err(format!("expected one or three numbers, got `{s}`")),
    }
}

fn parse_dims(s: &str) -> Result<(usize, usize, usize), String> {
    let (a, b, c) = parse_triple(s)?;
    if a < 1.0 || b < 1.0 || c < 1.0 {
        return Err("dims must be positive".into());
    }
    Ok((a as usize, b as usize, c as usize))
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Register {
            fixed,
            moving,
            config,
            out_field,
            out_warped,
            threads,
            deterministic,
        } => {
            let mut cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| format!("{}: {e}", path.display()))?;
                    RegistrationConfig::parse(&text).map_err(|e| e.to_string())?
                }
                None => RegistrationConfig::default(),
            };
            if let Some(t) = threads {
                cfg.threads = t;
            }
            if let Some(d) = deterministic {
                cfg.deterministic = match d.as_str() {
                    "on" | "true" | "1" => true,
                    "off" | "false" | "0" => false,
                    other => return Err(format!("bad --deterministic value `{other}`")),
                };
            }
            let f = volume::load_volume(&fixed).map_err(|e| e.to_string())?;
            let m = volume::load_volume(&moving).map_err(|e| e.to_string())?;
            let res = pipeline::register(&f, &m, &cfg).map_err(|e| e.to_string())?;
            bspline::save_field(&out_field, &res.field, ElementType::Float32)
                .map_err(|e| e.to_string())?;
            if let Some(path) = out_warped {
                volume::save_volume(&path, &res.warped, ElementType::Float32)
                    .map_err(|e| e.to_string())?;
            }
            let last = res.levels.last().expect("at least one level");
            println!("final_cost {}", last.final_cost.total);
            println!("final_similarity {}", last.final_cost.similarity);
            println!("final_penalty {}", last.final_cost.penalty);
            println!(
                "iterations_total {}",
                res.levels.iter().map(|l| l.iterations).sum::<usize>()
            );
            for (i, l) in res.levels.iter().enumerate() {
                println!("level{}_termination {}", i, l.termination.name());
            }
            Ok(())
        }
        Command::Synth {
            dims,
            amplitude,
            warp_spacing,
            period,
            seed,
            out_prefix,
        } => {
            let dims = parse_dims(&dims)?;
            let params = SynthParams {
                dims,
                amplitude,
                warp_spacing,
                period,
                pattern: PatternKind::Checkerboard,
                seed,
                ..SynthParams::default()
            };
            let pair = eval::generate_synthetic(&params).map_err(|e| e.to_string())?;
            let prefix = out_prefix
                .to_str()
                .ok_or_else(|| "bad prefix".to_string())?
                .to_string();
            let orig = PathBuf::from(format!("{prefix}_orig.hdr"));
            let warped = PathBuf::from(format!("{prefix}_warped.hdr"));
            let field = PathBuf::from(format!("{prefix}_field.hdr"));
            volume::save_volume(&orig, &pair.original, ElementType::Uint8)
                .map_err(|e| e.to_string())?;
            volume::save_volume(&warped, &pair.warped, ElementType::Float32)
                .map_err(|e| e.to_string())?;
            bspline::save_field(&field, &pair.ground_truth, ElementType::Float32)
                .map_err(|e| e.to_string())?;
            let zero = DisplacementField::zero(pair.ground_truth.dims());
            let initial = eval::rmse_displacement(&zero, &pair.ground_truth)
                .map_err(|e| e.to_string())?;
            println!("initial_rmse {initial}");
            Ok(())
        }
        Command::Warp { input, field, out } => {
            let v = volume::load_volume(&input).map_err(|e| e.to_string())?;
            let f = bspline::load_field(&field).map_err(|e| e.to_string())?;
            let w = pipeline::warp_with_field(&v, &f).map_err(|e| e.to_string())?;
            // preserve the input element type so identity warps stay bit-exact
            let etype = volume::read_header(&input)
                .map_err(|e| e.to_string())?
                .element_type;
            let etype = if w
                .data()
                .iter()
                .all(|v| (v - v.round()).abs() < 1e-9 && *v >= 0.0 && *v <= 255.0)
            {
                etype
            } else {
                ElementType::Float32
            };
            volume::save_volume(&out, &w, etype).map_err(|e| e.to_string())?;
            Ok(())
        }
        Command::Invert { field, out, sigma } => {
            let f = bspline::load_field(&field).map_err(|e| e.to_string())?;
            let inv = bspline::invert_field(&f, sigma);
            bspline::save_field(&out, &inv, ElementType::Float32).map_err(|e| e.to_string())?;
            Ok(())
        }
        Command::EvalRmse { field, gt } => {
            let f = bspline::load_field(&field).map_err(|e| e.to_string())?;
            let g = bspline::load_field(&gt).map_err(|e| e.to_string())?;
            let rmse = eval::rmse_displacement(&f, &g).map_err(|e| e.to_string())?;
            println!("rmse {rmse}");
            Ok(())
        }
        Command::EvalTre {
            fixed_pts,
            moving_pts,
            field,
            spacing,
        } => {
            let fp = PointSet::load(&fixed_pts).map_err(|e| e.to_string())?;
            let mp = PointSet::load(&moving_pts).map_err(|e| e.to_string())?;
            let f = bspline::load_field(&field).map_err(|e| e.to_string())?;
            let spacing = parse_triple(&spacing)?;
            let tre = eval::mean_tre(&fp, &mp, &f, spacing).map_err(|e| e.to_string())?;
            println!("mtre {tre}");
            Ok(())
        }
        Command::EvalSurface { pts_a, pts_b, field } => {
            let mut a = PointSet::load(&pts_a).map_err(|e| e.to_string())?;
            let b = PointSet::load(&pts_b).map_err(|e| e.to_string())?;
            if let Some(path) = field {
                let f = bspline::load_field(&path).map_err(|e| e.to_string())?;
                a = PointSet::new(pipeline::transform_landmarks(&a.points, &f));
            }
            let hd = eval::hausdorff(&a, &b).map_err(|e| e.to_string())?;
            let mhd = eval::mhd(&a, &b).map_err(|e| e.to_string())?;
            println!("hd {hd}");
            println!("mhd {mhd}");
            Ok(())
        }
        Command::Gradcheck {
            seed,
            dims,
            grid_spacing,
        } => {
            let report = engine::gradcheck((dims, dims, dims), grid_spacing, seed, 0.1)
                .map_err(|e| e.to_string())?;
            for e in &report.entries {
                println!(
                    "max_rel_error_{}_{} {}",
                    e.weight_kind.name().replace('-', "_"),
                    e.orientation.name().replace('-', "_"),
                    e.max_rel
                );
            }
            println!("max_rel_error {}", report.max_rel());
            println!("max_abs_error_small {}", report.max_abs_small());
            if !report.passes(1e-3, 1e-6) {
                return Err(format!(
                    "gradient check failed: max relative error {}",
                    report.max_rel()
                ));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
