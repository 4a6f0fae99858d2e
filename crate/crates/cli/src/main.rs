//! `opreg` command-line front end.
//!
//! Exit codes: 0 success, 2 bad arguments, 3 I/O or file format errors,
//! 4 numerical failure during registration.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use opreg::cascade::normalize_intensity;
use opreg::io::{read_volume, write_volume, Payload, ReadAs, VolumeHeader};
use opreg::{
    dice, global_ncc, jacobian_report, register, synth, warp_labels, warp_volume, CascadeConfig, Dims, EvalReport,
    Field64, FlowConfig, LabelVolume, NccConfig, OptimConfig, Volume64,
};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "opreg", version, about = "Patch-wise diffeomorphic registration of 3D volumes")]
struct Cli {
    /// Worker threads [default: number of logical cores]
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    threads: Option<u32>,

    /// Seed for synthetic volumes
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// Container used for output paths without a .nii or .rawvol extension
    #[arg(long, global = true, value_enum, default_value_t = Format::Nii)]
    format: Format,

    /// Print per-stage progress to standard error
    #[arg(long, short, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Nii,
    Rawvol,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Register a moving image to a fixed image
    Register(RegisterArgs),
    /// Resample an image or label map through a displacement field
    Warp(WarpArgs),
    /// Write a JSON report of Jacobian folding and optional Dice overlap
    Report(ReportArgs),
    /// Generate a synthetic image and its label map
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct RegisterArgs {
    #[arg(long)]
    moving: PathBuf,

    #[arg(long)]
    fixed: PathBuf,

    /// Output warp. The forward and inverse displacements are written with
    /// `.fwd` and `.inv` inserted before the extension. Resample the moving
    /// image with the `.inv` field to bring it into the fixed space.
    #[arg(long)]
    out_warp: PathBuf,

    /// Write only the forward displacement, at exactly --out-warp
    #[arg(long)]
    forward_only: bool,

    /// Moving image resampled into the fixed space
    #[arg(long)]
    out_image: Option<PathBuf>,

    /// Smoothness weights, one per stage, strictly decreasing
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.005,0.001")]
    alphas: Vec<f64>,

    /// Noise scale of the similarity term
    #[arg(long, default_value_t = 0.001)]
    sigma: f64,

    /// Weight of the smoothness energy in the reported loss
    /// [default: sigma^2 / voxels per patch]
    #[arg(long)]
    lambda: Option<f64>,

    /// Local NCC window width (odd)
    #[arg(long, default_value_t = 7)]
    ncc_window: usize,

    /// Patch edge length in voxels
    #[arg(long, default_value_t = 64)]
    patch: usize,

    /// Core edge length in voxels
    #[arg(long, default_value_t = 32)]
    core: usize,

    /// Integration steps of the flow
    #[arg(long, default_value_t = 8)]
    steps: usize,

    /// Descent iterations per patch and stage
    #[arg(long, default_value_t = 100)]
    iters: usize,

    /// JSON metrics output
    #[arg(long)]
    metrics: Option<PathBuf>,

    /// Labels of the moving image; with --fixed-labels adds Dice to the metrics
    #[arg(long, requires = "fixed_labels")]
    moving_labels: Option<PathBuf>,

    /// Labels of the fixed image
    #[arg(long, requires = "moving_labels")]
    fixed_labels: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct WarpArgs {
    /// Image or label map to resample
    #[arg(long = "in")]
    input: PathBuf,

    /// Displacement field `u`; the output at `x` samples the input at `x + u(x)`
    #[arg(long)]
    warp: PathBuf,

    #[arg(long)]
    out: PathBuf,

    /// Treat the input as a label map (nearest neighbour)
    #[arg(long)]
    labels: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Forward displacement field
    #[arg(long)]
    warp: PathBuf,

    #[arg(long, requires = "warped_labels")]
    fixed_labels: Option<PathBuf>,

    #[arg(long, requires = "fixed_labels")]
    warped_labels: Option<PathBuf>,

    /// JSON report output
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Kind {
    Sphere,
    Ellipsoid,
    Blobs,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: Kind,

    /// Grid size as X,Y,Z
    #[arg(long, value_parser = parse_dims)]
    dims: [usize; 3],

    /// Image output; the label map gets `.labels` before the extension
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Io(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Io(_) => 3,
            Failure::Numerical(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Io(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<opreg::Error> for Failure {
    fn from(e: opreg::Error) -> Self {
        let msg = e.to_string();
        if e.is_io() {
            Failure::Io(msg)
        } else if e.is_numerical() || matches!(e, opreg::Error::Patch { .. }) {
            Failure::Numerical(msg)
        } else {
            Failure::Usage(msg)
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("opreg: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    let threads = match cli.threads {
        Some(n) => n as usize,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Usage(format!("cannot start {threads} worker threads: {e}")))?;

    match &cli.command {
        Command::Register(a) => cmd_register(cli, a),
        Command::Warp(a) => cmd_warp(cli, a),
        Command::Report(a) => cmd_report(a),
        Command::Synth(a) => cmd_synth(cli, a),
    }
}

fn parse_dims(text: &str) -> Result<[usize; 3], String> {
    let sizes: Vec<usize> = text
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<Result<_, _>>()?;
    sizes.try_into().map_err(|v: Vec<usize>| format!("expected X,Y,Z, got {} sizes", v.len()))
}

fn output_path(path: &Path, format: Format) -> PathBuf {
    let name = path.to_string_lossy();
    if name.ends_with(".nii") || name.ends_with(".rawvol") {
        path.to_path_buf()
    } else {
        let ext = match format {
            Format::Nii => "nii",
            Format::Rawvol => "rawvol",
        };
        PathBuf::from(format!("{name}.{ext}"))
    }
}

/// `dir/name.ext` becomes `dir/name.tag.ext`.
fn tagged(path: &Path, tag: &str) -> PathBuf {
    match (path.file_stem(), path.extension()) {
        (Some(stem), Some(ext)) => path.with_file_name(format!(
            "{}.{tag}.{}",
            stem.to_string_lossy(),
            ext.to_string_lossy()
        )),
        _ => PathBuf::from(format!("{}.{tag}", path.display())),
    }
}

fn read_scalar(path: &Path) -> CliResult<(VolumeHeader, Volume64)> {
    let (h, p) = read_volume::<f64>(path, ReadAs::Auto)?;
    let v = p
        .into_scalar()
        .ok_or_else(|| Failure::Io(format!("{}: expected a scalar volume", path.display())))?;
    Ok((h, v))
}

fn read_labels(path: &Path) -> CliResult<(VolumeHeader, LabelVolume)> {
    let (h, p) = read_volume::<f64>(path, ReadAs::Labels)?;
    let l = p
        .into_labels()
        .ok_or_else(|| Failure::Io(format!("{}: expected an integer label volume", path.display())))?;
    Ok((h, l))
}

fn read_field(path: &Path) -> CliResult<(VolumeHeader, Field64)> {
    let (h, p) = read_volume::<f64>(path, ReadAs::Auto)?;
    let f = p
        .into_field()
        .ok_or_else(|| Failure::Io(format!("{}: expected a 3-channel vector field", path.display())))?;
    Ok((h, f))
}

/// Writes `payload`, carrying spacing and affine over from `like`.
fn write(path: &Path, payload: &Payload<f64>, like: Option<&VolumeHeader>) -> CliResult<()> {
    let mut h = VolumeHeader::for_payload(payload);
    if let Some(src) = like {
        h.spacing = src.spacing;
        h.affine = src.affine;
    }
    write_volume(path, &h, payload)?;
    Ok(())
}

fn write_json(path: &Path, value: &Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("JSON values always serialize");
    std::fs::write(path, text + "\n").map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn same_dims(what: &str, a: Dims, other: &str, b: Dims) -> CliResult<()> {
    if a == b {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} is {a} but {other} is {b}")))
    }
}

fn cmd_register(cli: &Cli, a: &RegisterArgs) -> CliResult<()> {
    let cfg = CascadeConfig {
        alphas: a.alphas.clone(),
        optim: OptimConfig {
            sigma: a.sigma,
            lambda: a.lambda,
            max_iters: a.iters,
            ..OptimConfig::default()
        },
        flow: FlowConfig {
            steps: a.steps,
            ..FlowConfig::default()
        },
        ncc: NccConfig {
            window: a.ncc_window,
            ..NccConfig::default()
        },
        patch_size: a.patch,
        core_size: a.core,
        ..CascadeConfig::default()
    };
    cfg.validate()?;

    let (mh, moving) = read_scalar(&a.moving)?;
    let (fh, fixed) = read_scalar(&a.fixed)?;
    same_dims("--moving", moving.dims(), "--fixed", fixed.dims())?;
    let labels = match (&a.moving_labels, &a.fixed_labels) {
        (Some(ml), Some(fl)) => {
            let (_, ml) = read_labels(ml)?;
            let (_, fl) = read_labels(fl)?;
            same_dims("--moving-labels", ml.dims(), "--fixed", fixed.dims())?;
            same_dims("--fixed-labels", fl.dims(), "--fixed", fixed.dims())?;
            Some((ml, fl))
        }
        _ => None,
    };

    let m = normalize_intensity(&moving);
    let f = normalize_intensity(&fixed);
    let result = register(&m, &f, &cfg)?;
    if cli.verbose {
        for (k, s) in result.stages.iter().enumerate() {
            let s = &s.metrics;
            eprintln!(
                "stage {k} alpha {}: ncc {:.6} -> {:.6}, {} patches ({} skipped), {} iterations, {:.1} s",
                s.alpha, s.ncc_before, s.ncc_after, s.patches_optimized, s.patches_skipped, s.total_iters, s.runtime_secs
            );
        }
    }

    let out = output_path(&a.out_warp, cli.format);
    let forward = Payload::Field(result.total.forward().clone());
    if a.forward_only {
        write(&out, &forward, Some(&fh))?;
    } else {
        write(&tagged(&out, "fwd"), &forward, Some(&fh))?;
        write(&tagged(&out, "inv"), &Payload::Field(result.total.inverse().clone()), Some(&fh))?;
    }
    if let Some(p) = &a.out_image {
        let warped = warp_volume(&moving, result.total.inverse())?;
        write(&output_path(p, cli.format), &Payload::Scalar(warped), Some(&fh))?;
    }

    if let Some(p) = &a.metrics {
        let final_ncc = global_ncc(&result.warp(&m)?, &f)?;
        let (dice_report, dice_before) = match &labels {
            Some((ml, fl)) => {
                let warped = warp_labels(ml, result.total.inverse())?;
                (Some(dice(&warped, fl)?), Some(dice(ml, fl)?.avg_dsc))
            }
            None => (None, None),
        };
        let report = EvalReport {
            dice: dice_report,
            jacobian: Some(jacobian_report(result.total.forward())?),
        };
        let mut v = serde_json::to_value(&report).expect("report serializes");
        let obj = v.as_object_mut().expect("report is an object");
        obj.insert("final_ncc".into(), json!(final_ncc));
        if let Some(d) = dice_before {
            obj.insert("avg_dsc_before".into(), json!(d));
        }
        let stages: Vec<&opreg::cascade::StageMetrics> = result.stages.iter().map(|s| &s.metrics).collect();
        obj.insert("stages".into(), json!(stages));
        obj.insert("moving".into(), json!(a.moving.display().to_string()));
        obj.insert("fixed".into(), json!(a.fixed.display().to_string()));
        obj.insert("dims".into(), json!(mh.dims.as_array()));
        write_json(p, &v)?;
    }
    Ok(())
}

fn cmd_warp(cli: &Cli, a: &WarpArgs) -> CliResult<()> {
    let (_, field) = read_field(&a.warp)?;
    let out = output_path(&a.out, cli.format);
    if a.labels {
        let (h, lab) = read_labels(&a.input)?;
        same_dims("--in", lab.dims(), "--warp", field.dims())?;
        write(&out, &Payload::Labels(warp_labels(&lab, &field)?), Some(&h))
    } else {
        let (h, img) = read_scalar(&a.input)?;
        same_dims("--in", img.dims(), "--warp", field.dims())?;
        write(&out, &Payload::Scalar(warp_volume(&img, &field)?), Some(&h))
    }
}

fn cmd_report(a: &ReportArgs) -> CliResult<()> {
    let (_, field) = read_field(&a.warp)?;
    let dice_report = match (&a.fixed_labels, &a.warped_labels) {
        (Some(fl), Some(wl)) => {
            let (_, fl) = read_labels(fl)?;
            let (_, wl) = read_labels(wl)?;
            same_dims("--warped-labels", wl.dims(), "--fixed-labels", fl.dims())?;
            Some(dice(&wl, &fl)?)
        }
        _ => None,
    };
    let report = EvalReport {
        dice: dice_report,
        jacobian: Some(jacobian_report(&field)?),
    };
    write_json(&a.out, &serde_json::to_value(&report).expect("report serializes"))
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> CliResult<()> {
    let dims = Dims::new(a.dims[0], a.dims[1], a.dims[2])?;
    let (img, lab) = match a.kind {
        Kind::Sphere => synth::sphere::<f64>(dims, synth::default_radius(dims))?,
        Kind::Ellipsoid => synth::ellipsoid::<f64>(dims, synth::default_radii(dims))?,
        Kind::Blobs => synth::blobs::<f64>(dims, cli.seed)?,
    };
    let out = output_path(&a.out, cli.format);
    write(&out, &Payload::Scalar(img), None)?;
    write(&tagged(&out, "labels"), &Payload::Labels(lab), None)
}
