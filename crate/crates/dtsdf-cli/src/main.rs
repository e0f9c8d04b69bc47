//! Command line front end for the dtsdf mapping and tracking engine.
//!
//! One binary, five subcommands: `track` fuses and tracks a sequence,
//! `eval` scores trajectories, `sim3` runs the multi-sensor scale
//! experiment, `render` exports a synthetic preset as an on-disk
//! dataset, and `info` summarizes datasets and volume snapshots.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 tracking
//! failure rate above one half.

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use dtsdf::eval::{post_fusion_mae, rpe, Trajectory};
use dtsdf::frame::Frame;
use dtsdf::io::{export_tum_dataset, read_trajectory, IoError};
use dtsdf::pipeline::{
    resolve_dataset, run_sim3, run_track, PipelineConfig, PipelineError, Sim3Result, TrackResult,
};
use dtsdf::tracking::{IcpWeightMode, PhotoMode};
use dtsdf::volume::{DirectionalVolume, Representation};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const USAGE_EXIT: u8 = 1;
const DATA_EXIT: u8 = 2;
const TRACKING_EXIT: u8 = 3;
/// Failure-rate threshold above which a run exits with [`TRACKING_EXIT`].
const FAILURE_RATE_LIMIT: f64 = 0.5;

#[derive(Parser)]
#[command(
    name = "dtsdf",
    version,
    about = "Dense RGB-D mapping and tracking on a directional TSDF"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fuse and track an RGB-D sequence, writing trajectory and reports
    Track(TrackArgs),
    /// Score an estimated trajectory against ground truth
    Eval(EvalArgs),
    /// Multi-sensor scale estimation on interleaved rescaled frames
    Sim3(Sim3Args),
    /// Export a synthetic preset as an on-disk RGB-D dataset
    Render(RenderArgs),
    /// Summarize a dataset or a fused volume snapshot
    Info(InfoArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum RepresentationArg {
    /// Six directional distance fields
    Dtsdf,
    /// Single-field baseline
    Regular,
}

impl From<RepresentationArg> for Representation {
    fn from(v: RepresentationArg) -> Self {
        match v {
            RepresentationArg::Dtsdf => Representation::Dtsdf,
            RepresentationArg::Regular => Representation::Regular,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PhotoModeArg {
    /// Geometric residuals only
    Off,
    /// Photometric term against the previous frame
    F2f,
    /// Photometric term against the last keyframe
    F2kf,
    /// Photometric term against the rendered model view
    F2r,
}

impl From<PhotoModeArg> for PhotoMode {
    fn from(v: PhotoModeArg) -> Self {
        match v {
            PhotoModeArg::Off => PhotoMode::Off,
            PhotoModeArg::F2f => PhotoMode::F2f,
            PhotoModeArg::F2kf => PhotoMode::F2kf,
            PhotoModeArg::F2r => PhotoMode::F2r,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightModeArg {
    /// Unit weight for every measurement
    Constant,
    /// Normalized inverse squared depth
    Xia,
    /// Structured-light axial noise model
    Nguyen,
    /// Shifted inverse squared depth
    Proposed,
}

impl From<WeightModeArg> for IcpWeightMode {
    fn from(v: WeightModeArg) -> Self {
        match v {
            WeightModeArg::Constant => IcpWeightMode::Constant,
            WeightModeArg::Xia => IcpWeightMode::Xia,
            WeightModeArg::Nguyen => IcpWeightMode::Nguyen,
            WeightModeArg::Proposed => IcpWeightMode::Proposed,
        }
    }
}

/// Flags shared by the pipeline-running subcommands. Every flag
/// overrides the matching config-file field; unset flags leave the file
/// value (or the built-in default) in place.
#[derive(Args)]
struct PipelineArgs {
    /// Configuration file (TOML); flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory or synthetic:<preset>
    #[arg(long)]
    dataset: Option<String>,
    /// Frame cap (disk) or sequence length (synthetic)
    #[arg(long)]
    frames: Option<usize>,
    /// Voxel edge length in meters; the truncation band follows at four
    /// voxels
    #[arg(long)]
    voxel_size: Option<f64>,
    /// Volume representation
    #[arg(long)]
    representation: Option<RepresentationArg>,
    /// Photometric residual source
    #[arg(long)]
    photo_mode: Option<PhotoModeArg>,
    /// Measurement weighting of the tracker and fusion
    #[arg(long)]
    weight_mode: Option<WeightModeArg>,
    /// Output directory; created if absent
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write rendered model views every N frames (0 disables)
    #[arg(long)]
    image_every: Option<usize>,
    /// Save the fused volume snapshot at the end of the run
    #[arg(long)]
    save_volume: bool,
    /// Seed of the synthetic depth noise stream
    #[arg(long)]
    seed: Option<u64>,
    /// Enable quadratic depth noise on synthetic datasets
    #[arg(long)]
    noise: bool,
}

impl PipelineArgs {
    /// Layered config: built-in defaults, then the config file, then
    /// explicit flags.
    fn resolve(&self) -> Result<PipelineConfig, CliError> {
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::Data(format!("config file {}: {e}", path.display()))
                })?;
                PipelineConfig::from_toml(&text).map_err(|e| {
                    CliError::Data(format!("config file {}: {e}", path.display()))
                })?
            }
            None => PipelineConfig::default(),
        };
        if let Some(dataset) = &self.dataset {
            config.dataset = dataset.clone();
        }
        if let Some(frames) = self.frames {
            config.frames = Some(frames);
        }
        if let Some(v) = self.voxel_size {
            if !(v > 0.0) {
                return Err(CliError::Usage("voxel size must be positive".into()));
            }
            config.volume.voxel_size = v;
            config.volume.truncation = 4.0 * v;
        }
        if let Some(r) = self.representation {
            config.volume.representation = r.into();
        }
        if let Some(p) = self.photo_mode {
            config.icp.photo_mode = p.into();
        }
        if let Some(w) = self.weight_mode {
            config.icp.weight_mode = w.into();
            config.fusion.depth_weight = w.into();
        }
        if let Some(out) = &self.out {
            config.out = Some(out.clone());
        }
        if let Some(n) = self.image_every {
            config.image_every = n;
        }
        if self.save_volume {
            config.save_volume = true;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if self.noise {
            config.noise = true;
        }
        Ok(config)
    }
}

#[derive(Args)]
struct TrackArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Estimated trajectory file (timestamp tx ty tz qx qy qz qw)
    #[arg(long)]
    est: PathBuf,
    /// Ground-truth trajectory file
    #[arg(long)]
    gt: PathBuf,
    /// Relative pose error window, frames
    #[arg(long, default_value_t = 30)]
    window: usize,
    /// Fused volume snapshot for the post-fusion error series
    #[arg(long)]
    volume: Option<PathBuf>,
    /// Dataset the snapshot was fused from (required with --volume)
    #[arg(long, requires = "volume")]
    dataset: Option<String>,
    /// Frame cap for the post-fusion series
    #[arg(long)]
    frames: Option<usize>,
    /// Directory for report files; created if absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Sim3Args {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Comma-separated per-sensor depth scale factors
    #[arg(long, value_delimiter = ',')]
    factors: Option<Vec<f64>>,
    /// Sensor whose scale anchors the others [default: 0]
    #[arg(long, conflicts_with = "no_anchor")]
    anchor: Option<usize>,
    /// Run without a scale anchor; sensors drift in unison
    #[arg(long)]
    no_anchor: bool,
}

#[derive(Args)]
struct RenderArgs {
    /// Synthetic preset name, with or without the synthetic: prefix
    #[arg(long)]
    dataset: String,
    /// Dataset directory to create
    #[arg(long)]
    out: PathBuf,
    /// Sequence length
    #[arg(long)]
    frames: Option<usize>,
    /// Enable quadratic depth noise
    #[arg(long)]
    noise: bool,
    /// Seed of the depth noise stream
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct InfoArgs {
    /// Dataset directory or synthetic:<preset>
    #[arg(long)]
    dataset: Option<String>,
    /// Fused volume snapshot
    #[arg(long)]
    volume: Option<PathBuf>,
    /// Frame cap applied before summarizing
    #[arg(long)]
    frames: Option<usize>,
}

/// Failures reported by subcommands, partitioned by exit code.
enum CliError {
    /// Invalid flags or configuration values.
    Usage(String),
    /// Unreadable or unparseable input data, or unwritable output.
    Data(String),
}

impl CliError {
    fn report(self) -> ExitCode {
        match self {
            CliError::Usage(msg) => {
                eprintln!("error: {msg}");
                ExitCode::from(USAGE_EXIT)
            }
            CliError::Data(msg) => {
                eprintln!("error: {msg}");
                ExitCode::from(DATA_EXIT)
            }
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(msg) => CliError::Usage(msg),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; everything else is
            // a usage error, reported on stderr.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(USAGE_EXIT),
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Track(args) => cmd_track(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sim3(args) => cmd_sim3(args),
        Command::Render(args) => cmd_render(args),
        Command::Info(args) => cmd_info(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => e.report(),
    }
}

// ---------------------------------------------------------------------------
// track
// ---------------------------------------------------------------------------

fn cmd_track(args: TrackArgs) -> Result<ExitCode, CliError> {
    let config = args.pipeline.resolve()?;
    let result = run_track(&config)?;
    print_track_summary(&config, &result);
    maybe_print_rpe(&config, &result);
    Ok(failure_exit(&result))
}

/// Exit code of a finished run: tracking failures beyond the limit are
/// reported as a distinct status so scripts can detect degraded output.
fn failure_exit(result: &TrackResult) -> ExitCode {
    if result.failure_rate() > FAILURE_RATE_LIMIT {
        eprintln!(
            "tracking failed on {:.0}% of frames (limit {:.0}%)",
            100.0 * result.failure_rate(),
            100.0 * FAILURE_RATE_LIMIT
        );
        ExitCode::from(TRACKING_EXIT)
    } else {
        ExitCode::SUCCESS
    }
}

fn print_track_summary(config: &PipelineConfig, result: &TrackResult) {
    println!(
        "dataset {}: {} frames, {} lost (failure rate {:.1}%)",
        config.dataset,
        result.records.len(),
        result.lost_frames,
        100.0 * result.failure_rate()
    );
    let m = result.stats.mean_times();
    println!(
        "mean frame time {:.1} ms (preprocess {:.1}, track {:.1}, allocate {:.1}, fuse {:.1}, combine {:.1}, raycast {:.1})",
        1e3 * m.total(),
        1e3 * m.preprocess,
        1e3 * m.track,
        1e3 * m.allocate,
        1e3 * m.fuse,
        1e3 * m.combine,
        1e3 * m.raycast
    );
    println!(
        "map: {} blocks, {:.1} MiB",
        result.stats.block_count,
        result.stats.memory_bytes as f64 / (1024.0 * 1024.0)
    );
    if let Some(out) = &config.out {
        println!("outputs written to {}", out.display());
    }
}

/// Prints the trajectory error when the dataset carries ground truth and
/// the sequence is long enough for at least one window.
fn maybe_print_rpe(config: &PipelineConfig, result: &TrackResult) {
    let Ok(source) = resolve_dataset(config) else {
        return;
    };
    let Some(gt) = source.ground_truth() else {
        return;
    };
    if let Ok(report) = rpe(&result.trajectory, gt, 30) {
        println!(
            "RPE vs ground truth (window 30): {:.2} mm translation, {:.4} deg rotation",
            report.rmse_translation_mm,
            report.rmse_rotation_rad.to_degrees()
        );
    }
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn cmd_eval(args: EvalArgs) -> Result<ExitCode, CliError> {
    let est = read_trajectory(&args.est)?;
    let gt = read_trajectory(&args.gt)?;
    let report = rpe(&est, &gt, args.window).map_err(|e| CliError::Data(e.to_string()))?;
    println!(
        "RPE window {}: {:.3} mm translation RMSE, {:.4} deg rotation RMSE ({} pairs, {} unassociated)",
        args.window,
        report.rmse_translation_mm,
        report.rmse_rotation_rad.to_degrees(),
        report.pairs.len(),
        report.unassociated
    );
    if let Some(out) = &args.out {
        make_out_dir(out)?;
        write_json(&out.join("rpe.json"), &report)?;
    }
    if let Some(volume_path) = &args.volume {
        let dataset = args.dataset.as_ref().expect("clap enforces --dataset");
        eval_post_fusion(&est, volume_path, dataset, args.frames, args.out.as_deref())?;
    }
    Ok(ExitCode::SUCCESS)
}

/// Re-renders the snapshot along the estimated trajectory and reports the
/// depth and intensity error against the dataset frames.
fn eval_post_fusion(
    est: &Trajectory,
    volume_path: &Path,
    dataset: &str,
    frames: Option<usize>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let volume =
        DirectionalVolume::load_snapshot(volume_path).map_err(|e| CliError::Data(e.to_string()))?;
    let config = PipelineConfig {
        dataset: dataset.to_string(),
        frames,
        ..PipelineConfig::default()
    };
    let source = resolve_dataset(&config)?;
    if source.len() != est.len() {
        return Err(CliError::Data(format!(
            "trajectory has {} samples but the dataset has {} frames",
            est.len(),
            source.len()
        )));
    }
    let loaded: Result<Vec<Frame>, IoError> = (0..source.len())
        .map(|i| source.load_frame(i, &config.frame))
        .collect();
    let report = post_fusion_mae(&volume, est, &loaded?);
    println!(
        "post-fusion MAE: {:.3} mm +- {:.3} geometric, {:.4} +- {:.4} intensity ({} frames)",
        report.mean_geometric_mae_mm,
        report.ci95_geometric_mae_mm,
        report.mean_photometric_mae,
        report.ci95_photometric_mae,
        report.frames.len()
    );
    if let Some(out) = out {
        make_out_dir(out)?;
        write_json(&out.join("mae.json"), &report)?;
        write_text(&out.join("mae_series.txt"), &report.geometric_series())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sim3
// ---------------------------------------------------------------------------

fn cmd_sim3(args: Sim3Args) -> Result<ExitCode, CliError> {
    let mut config = args.pipeline.resolve()?;
    if config.dataset.is_empty() {
        config.dataset = "synthetic:scale-room".into();
    }
    if let Some(factors) = args.factors {
        config.factors = factors;
    }
    // The anchor defaults to sensor 0; a config-file anchor survives
    // unless a flag overrides it.
    if args.no_anchor {
        config.anchor = None;
    } else if args.anchor.is_some() {
        config.anchor = args.anchor;
    } else if config.anchor.is_none() {
        config.anchor = Some(0);
    }
    let result = run_sim3(&config)?;
    print_sim3_summary(&config, &result);
    Ok(failure_exit(&result.track))
}

fn print_sim3_summary(config: &PipelineConfig, result: &Sim3Result) {
    print_track_summary(config, &result.track);
    println!(
        "scale estimation {} over {} sensors:",
        if result.anchored {
            "anchored"
        } else {
            "unanchored"
        },
        config.factors.len()
    );
    for (i, (estimate, truth)) in result
        .final_factors
        .iter()
        .zip(&config.factors)
        .enumerate()
    {
        println!(
            "  sensor {i}: factor {estimate:.4} (target {truth:.4}, error {:+.4})",
            estimate - truth
        );
    }
}

// ---------------------------------------------------------------------------
// render
// ---------------------------------------------------------------------------

fn cmd_render(args: RenderArgs) -> Result<ExitCode, CliError> {
    let name = args
        .dataset
        .strip_prefix("synthetic:")
        .unwrap_or(&args.dataset);
    let config = PipelineConfig {
        dataset: format!("synthetic:{name}"),
        frames: args.frames,
        noise: args.noise,
        seed: args.seed.unwrap_or(0),
        ..PipelineConfig::default()
    };
    let source = resolve_dataset(&config)?;
    export_tum_dataset(&source, &args.out)?;
    println!(
        "wrote {} frames of {} to {}",
        source.len(),
        config.dataset,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// info
// ---------------------------------------------------------------------------

fn cmd_info(args: InfoArgs) -> Result<ExitCode, CliError> {
    if args.dataset.is_none() && args.volume.is_none() {
        return Err(CliError::Usage(
            "nothing to summarize; pass --dataset and/or --volume".into(),
        ));
    }
    if let Some(dataset) = &args.dataset {
        let config = PipelineConfig {
            dataset: dataset.clone(),
            frames: args.frames,
            ..PipelineConfig::default()
        };
        let source = resolve_dataset(&config)?;
        let k = source.intrinsics;
        println!("dataset {}: {} frames", dataset, source.len());
        println!(
            "  intrinsics: fx {} fy {} cx {} cy {}, {}x{}, depth range {}..{} m",
            k.fx, k.fy, k.cx, k.cy, k.width, k.height, k.z_min, k.z_max
        );
        match source.ground_truth() {
            Some(gt) => println!("  ground truth: {} poses", gt.len()),
            None => println!("  ground truth: none"),
        }
        if let Some(scene) = source.scene() {
            println!("  synthetic scene: {} objects", scene.objects.len());
        }
        if source.skipped > 0 {
            println!("  skipped frames (no color partner): {}", source.skipped);
        }
    }
    if let Some(path) = &args.volume {
        let volume =
            DirectionalVolume::load_snapshot(path).map_err(|e| CliError::Data(e.to_string()))?;
        let p = volume.params();
        println!("volume {}:", path.display());
        println!(
            "  voxel size {} m, truncation {} m, membership half-angle {:.1} deg",
            p.voxel_size,
            p.truncation,
            p.theta.to_degrees()
        );
        println!(
            "  representation {}",
            match p.representation {
                Representation::Dtsdf => "dtsdf",
                Representation::Regular => "regular",
            }
        );
        let counts = volume.block_counts_per_direction();
        println!(
            "  {} blocks ({}), {:.1} MiB",
            volume.block_count(),
            counts.map(|c| c.to_string()).join("/"),
            volume.memory_bytes() as f64 / (1024.0 * 1024.0)
        );
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// Output helpers
// ---------------------------------------------------------------------------

fn make_out_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Data(format!("output directory {}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
