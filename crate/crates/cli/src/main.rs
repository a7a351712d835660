//! `acreg`: auto-context registration of tissue segmentation maps.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use acreg_core::autocontext::{register_auto_context, ContextEncoding};
use acreg_core::io::{
    read_displacement, read_labels, read_velocity, read_volume, write_diagnostics, write_volume, Orientation,
    RunConfig, Volume,
};
use acreg_core::metrics::{dice, tissue_jacobian_stats, FoldingCounts};
use acreg_core::phantom::{make_pair, GENERATOR};
use acreg_core::transform::{
    compose, integrate_svf, jacobian_determinant, warp_labels, warp_scalar, warp_scalar_nearest,
    DEFAULT_SQUARING_STEPS,
};
use acreg_core::{Error, LabelVolume, PhantomSpec, Result, Tissue};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::json;

const EXIT_INVALID: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(name = "acreg", version, about = "Auto-context diffeomorphic registration of tissue label maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register a moving label map (or every .nii file in a directory) onto a fixed one.
    Register(RegisterArgs),
    /// Resample a volume through a displacement field.
    Warp {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to nearest for label maps and trilinear otherwise.
        #[arg(long, value_enum)]
        interp: Option<Interp>,
    },
    /// Write `a ∘ b`, the field that warps by `a` and then by `b`.
    Compose {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Integrate a stationary velocity field by scaling and squaring.
    Integrate {
        #[arg(long)]
        velocity: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SQUARING_STEPS)]
        steps: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the Jacobian determinant of a displacement field.
    Jacobian {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dice overlap between two label maps as JSON. With --field, `a` is
    /// warped first and folding statistics of the field are added.
    Metrics {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        field: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic pair with its ground-truth field.
    Phantom {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4.0)]
        amplitude: f64,
        #[arg(long, default_value_t = 10.0)]
        sigma: f64,
    },
}

#[derive(clap::Args)]
struct RegisterArgs {
    /// Moving label map, or a directory of them.
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    /// Output field path (a directory when --moving is one).
    #[arg(long)]
    out_field: PathBuf,
    /// Output warped labels path (a directory when --moving is one).
    #[arg(long)]
    out_warped: PathBuf,
    /// Number of auto-context iterations; overrides the config.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Per-iteration CSV (a directory when --moving is one).
    #[arg(long)]
    diagnostics: Option<PathBuf>,
    /// Stop once an iteration improves mean Dice by less than 0.001.
    #[arg(long)]
    early_stop: bool,
    #[arg(long, value_enum, default_value_t = Encoding::Reencode)]
    encoding: Encoding,
}

#[derive(Clone, Copy, ValueEnum)]
enum Interp {
    Trilinear,
    Nearest,
}

#[derive(Clone, Copy, ValueEnum)]
enum Encoding {
    /// Warp hard labels, then soft-encode.
    Reencode,
    /// Warp the soft encoding of the original labels.
    WarpSoft,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::Io { .. } => EXIT_IO,
        _ => EXIT_INVALID,
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("ACREG_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("ACREG_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size thread pool: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match configure_threads().and_then(|()| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("acreg: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Register(args) => register(&args),
        Command::Warp {
            input,
            field,
            out,
            interp,
        } => {
            let (phi, _) = read_displacement(&field)?;
            let (vol, orient) = read_volume(&input, None)?;
            match (vol, interp) {
                (Volume::Labels(l), None | Some(Interp::Nearest)) => write_volume(&out, &warp_labels(&l, &phi)?, &orient),
                (Volume::Labels(l), Some(Interp::Trilinear)) => {
                    let s = acreg_core::ScalarVolume::new(*l.meta(), l.labels().iter().map(|&v| v as f64).collect())?;
                    write_volume(&out, &warp_scalar(&s, &phi)?, &orient)
                }
                (Volume::Scalar(s), None | Some(Interp::Trilinear)) => write_volume(&out, &warp_scalar(&s, &phi)?, &orient),
                (Volume::Scalar(s), Some(Interp::Nearest)) => write_volume(&out, &warp_scalar_nearest(&s, &phi)?, &orient),
                (Volume::Displacement(_) | Volume::Velocity(_), _) => Err(Error::InvalidInput(format!(
                    "{}: warp expects a scalar or label volume, found a vector field",
                    input.display()
                ))),
            }
        }
        Command::Compose { a, b, out } => {
            let (fa, orient) = read_displacement(&a)?;
            let (fb, _) = read_displacement(&b)?;
            write_volume(&out, &compose(&fa, &fb)?, &orient)
        }
        Command::Integrate { velocity, steps, out } => {
            let (v, orient) = read_velocity(&velocity)?;
            write_volume(&out, &integrate_svf(&v, steps), &orient)
        }
        Command::Jacobian { field, out } => {
            let (phi, orient) = read_displacement(&field)?;
            let j = jacobian_determinant(&phi)?;
            let folding = FoldingCounts::of(&j);
            log::info!("rfp {:.5}% ({} negative, {} zero)", folding.rfp_percent(), folding.negative, folding.zero);
            write_volume(&out, &j, &orient)
        }
        Command::Metrics { a, b, field, out } => metrics(&a, &b, field.as_deref(), &out),
        Command::Phantom {
            out_dir,
            size,
            seed,
            amplitude,
            sigma,
        } => phantom(
            &out_dir,
            PhantomSpec {
                size,
                seed,
                amplitude,
                sigma,
            },
        ),
    }
}

fn load_config(args: &RegisterArgs) -> Result<acreg_core::AutoContextConfig> {
    let mut run = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(n) = args.iterations {
        run.n_autocontext = n;
    }
    let mut cfg = run.auto_context()?;
    cfg.early_stop = args.early_stop;
    cfg.encoding = match args.encoding {
        Encoding::Reencode => ContextEncoding::ReencodeLabels,
        Encoding::WarpSoft => ContextEncoding::WarpSoft,
    };
    Ok(cfg)
}

struct Job {
    moving: PathBuf,
    out_field: PathBuf,
    out_warped: PathBuf,
    diagnostics: Option<PathBuf>,
}

fn register(args: &RegisterArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let (fixed, orient) = read_labels(&args.fixed)?;

    if !args.moving.is_dir() {
        return register_one(
            &Job {
                moving: args.moving.clone(),
                out_field: args.out_field.clone(),
                out_warped: args.out_warped.clone(),
                diagnostics: args.diagnostics.clone(),
            },
            &fixed,
            &orient,
            &cfg,
        );
    }

    let mut inputs: Vec<PathBuf> = std::fs::read_dir(&args.moving)
        .map_err(|e| io_err(&args.moving, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| io_err(&args.moving, e)))
        .collect::<Result<_>>()?;
    inputs.retain(|p| p.is_file() && p.extension().is_some_and(|e| e == "nii"));
    inputs.sort();
    if inputs.is_empty() {
        return Err(Error::InvalidInput(format!("no .nii files in {}", args.moving.display())));
    }
    let mut dirs = vec![&args.out_field, &args.out_warped];
    dirs.extend(args.diagnostics.as_ref());
    for dir in dirs {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }

    let jobs: Vec<Job> = inputs
        .into_iter()
        .map(|moving| {
            let stem = moving.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            Job {
                out_field: args.out_field.join(format!("{stem}_field.nii")),
                out_warped: args.out_warped.join(format!("{stem}_warped.nii")),
                diagnostics: args.diagnostics.as_ref().map(|d| d.join(format!("{stem}.csv"))),
                moving,
            }
        })
        .collect();
    let results: Vec<Result<()>> = jobs.par_iter().map(|job| register_one(job, &fixed, &orient, &cfg)).collect();

    let mut first = None;
    for (job, r) in jobs.iter().zip(results) {
        if let Err(e) = r {
            eprintln!("acreg: {}: {e}", job.moving.display());
            first.get_or_insert(e);
        }
    }
    first.map_or(Ok(()), Err)
}

fn register_one(
    job: &Job,
    fixed: &LabelVolume,
    orient: &Orientation,
    cfg: &acreg_core::AutoContextConfig,
) -> Result<()> {
    let (moving, _) = read_labels(&job.moving)?;
    let result = register_auto_context(&moving, fixed, cfg)?;
    write_volume(&job.out_field, &result.final_field, orient)?;
    write_volume(&job.out_warped, &result.warped_labels, orient)?;
    if let Some(path) = &job.diagnostics {
        write_diagnostics(path, &result.diagnostics)?;
    }
    if let Some(last) = result.diagnostics.last() {
        log::info!(
            "{}: dsc gm {:.4} wm {:.4} rfp {:.5}%",
            job.moving.display(),
            last.dsc_gm,
            last.dsc_wm,
            last.rfp_percent
        );
    }
    Ok(())
}

fn dice_json(a: &LabelVolume, b: &LabelVolume) -> serde_json::Value {
    let mut map = serde_json::Map::new();
    for t in Tissue::ALL {
        let v = dice(a, b, t.label()).ok();
        map.insert(format!("{t:?}").to_lowercase(), json!(v));
    }
    serde_json::Value::Object(map)
}

fn metrics(a: &Path, b: &Path, field: Option<&Path>, out: &Path) -> Result<()> {
    let (la, _) = read_labels(a)?;
    let (lb, _) = read_labels(b)?;
    let report = match field {
        None => json!({ "dice": dice_json(&la, &lb) }),
        Some(path) => {
            let (phi, _) = read_displacement(path)?;
            let warped = warp_labels(&la, &phi)?;
            let j = jacobian_determinant(&phi)?;
            let folding = FoldingCounts::of(&j);
            let stats = tissue_jacobian_stats(&j, &lb)?;
            let mut per_tissue = serde_json::Map::new();
            for t in Tissue::ALL {
                let v = stats.get(t).map(|r| json!({ "min": r.min, "mean": r.mean, "count": r.count }));
                per_tissue.insert(format!("{t:?}").to_lowercase(), json!(v));
            }
            json!({
                "dice": dice_json(&warped, &lb),
                "rfp_percent": folding.rfp_percent(),
                "negative_jacobian_voxels": folding.negative,
                "zero_jacobian_voxels": folding.zero,
                "jacobian": per_tissue,
            })
        }
    };
    let text = serde_json::to_string_pretty(&report).expect("report is serializable");
    std::fs::write(out, text + "\n").map_err(|e| io_err(out, e))
}

fn phantom(out_dir: &Path, spec: PhantomSpec) -> Result<()> {
    let pair = make_pair(&spec)?;
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let orient = Orientation::default();
    write_volume(out_dir.join("moving.nii"), &pair.moving, &orient)?;
    write_volume(out_dir.join("fixed.nii"), &pair.fixed, &orient)?;
    write_volume(out_dir.join("truth.nii"), &pair.truth, &orient)?;
    let manifest = json!({
        "generator": GENERATOR,
        "size": spec.size,
        "seed": spec.seed,
        "amplitude": spec.amplitude,
        "sigma": spec.sigma,
        "squaring_steps": DEFAULT_SQUARING_STEPS,
        "files": { "moving": "moving.nii", "fixed": "fixed.nii", "truth": "truth.nii" },
        "truth_convention": "moving(x) = fixed(x + truth(x))",
        "initial_dice": dice_json(&pair.moving, &pair.fixed),
    });
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest is serializable");
    std::fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
}
