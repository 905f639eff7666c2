mod commands;
mod inputs;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use evmotion::geometry::Pose6;

#[derive(Parser, Debug)]
#[command(
    name = "evmotion",
    version,
    about = "Event-camera motion compensation, estimation and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cut an event file into fixed windows and write each window's maps as PGM.
    Slice(SliceArgs),
    /// Warp a window of events with a given pose and report the losses before and after.
    Compensate(CompensateArgs),
    /// Estimate the camera velocity that sharpens a window of events.
    EstimateEgo(EstimateEgoArgs),
    /// Estimate the residual translation of a masked object.
    EstimateObj(EstimateObjArgs),
    /// Render depth, masks and velocities from a scene manifest.
    GenGt(GenGtArgs),
    /// Depth error and accuracy metrics between two sets of PFM maps.
    EvalDepth(EvalDepthArgs),
    /// Velocity errors between two ground-truth style manifests.
    EvalMotion(EvalMotionArgs),
    /// Per-object IoU between two sets of PGM label masks.
    EvalMask(EvalMaskArgs),
    /// Generate a synthetic scene with known motion.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Clone)]
pub struct SensorArgs {
    /// Intrinsics file `fx fy cx cy width height`.
    #[arg(long)]
    pub intrinsics: Option<PathBuf>,
    #[arg(long, default_value_t = 346)]
    pub width: u32,
    #[arg(long, default_value_t = 260)]
    pub height: u32,
}

#[derive(Args, Debug, Clone)]
pub struct WindowArgs {
    /// Slice duration in milliseconds.
    #[arg(long = "dt-ms", default_value_t = 25.0)]
    pub dt_ms: f64,
    /// Sub-slice duration of the fine loss in milliseconds.
    #[arg(long = "fine-dt-ms", default_value_t = 1.0)]
    pub fine_dt_ms: f64,
    /// Neighbour slices on each side of the middle one.
    #[arg(long = "K", default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub k: u8,
    /// Start of the first slice in seconds; defaults to the first event.
    #[arg(long)]
    pub t0: Option<f64>,
    /// Fail on decreasing timestamps instead of sorting them.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Args, Debug, Clone)]
pub struct LossArgs {
    /// Quasi-norm exponent of the fine loss.
    #[arg(long, default_value_t = 0.5)]
    pub p: f64,
    #[arg(long, default_value_t = 1.0)]
    pub w_coarse: f64,
    #[arg(long, default_value_t = 1.0)]
    pub w_fine: f64,
}

#[derive(Args, Debug, Clone)]
pub struct DepthArgs {
    /// Depth map (PFM, metres, 0 = invalid).
    #[arg(long, conflicts_with = "plane_depth")]
    pub depth: Option<PathBuf>,
    /// Use a fronto-parallel plane at this depth instead of a depth map.
    #[arg(long)]
    pub plane_depth: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SliceArgs {
    #[arg(long)]
    pub events: PathBuf,
    #[command(flatten)]
    pub sensor: SensorArgs,
    #[arg(long = "dt-ms", default_value_t = 25.0)]
    pub dt_ms: f64,
    #[arg(long)]
    pub strict: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("pose_source").required(true).args(["pose", "gt_manifest"])))]
pub struct CompensateArgs {
    #[arg(long)]
    pub events: PathBuf,
    #[arg(long)]
    pub intrinsics: PathBuf,
    #[command(flatten)]
    pub window: WindowArgs,
    #[command(flatten)]
    pub loss: LossArgs,
    #[command(flatten)]
    pub depth: DepthArgs,
    /// Camera velocity `vx,vy,vz,wx,wy,wz`.
    #[arg(long, value_parser = parse_pose, allow_hyphen_values = true)]
    pub pose: Option<Pose6>,
    /// Ground-truth manifest; the frame nearest the window centre supplies pose and depth.
    #[arg(long)]
    pub gt_manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum ModeArg {
    #[value(name = "6dof")]
    SixDof,
    #[value(name = "4dof-planar")]
    FourDofPlanar,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum SplatArg {
    Nearest,
    Bilinear,
}

#[derive(Args, Debug, Clone)]
pub struct EstimatorArgs {
    #[arg(long, value_enum, default_value = "6dof")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of simplex starts.
    #[arg(long, default_value_t = 4)]
    pub multistart: usize,
    /// Iteration cap per simplex run.
    #[arg(long, default_value_t = 400)]
    pub max_iters: usize,
    #[arg(long, value_enum, default_value = "bilinear")]
    pub splat: SplatArg,
    /// Pixel-binning levels searched before full resolution.
    #[arg(long, default_value_t = 3)]
    pub pyramid_levels: usize,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("depth_source").required(true).args(["depth", "plane_depth", "gt_manifest"])))]
pub struct EstimateEgoArgs {
    #[arg(long)]
    pub events: PathBuf,
    #[arg(long)]
    pub intrinsics: PathBuf,
    #[command(flatten)]
    pub window: WindowArgs,
    #[command(flatten)]
    pub loss: LossArgs,
    #[command(flatten)]
    pub depth: DepthArgs,
    /// Ground-truth manifest supplying the depth of the frame nearest the window centre.
    #[arg(long)]
    pub gt_manifest: Option<PathBuf>,
    #[command(flatten)]
    pub estimator: EstimatorArgs,
    /// JSON report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("depth_source").required(true).args(["depth", "plane_depth", "gt_manifest"])))]
pub struct EstimateObjArgs {
    #[arg(long)]
    pub events: PathBuf,
    #[arg(long)]
    pub intrinsics: PathBuf,
    #[command(flatten)]
    pub window: WindowArgs,
    #[command(flatten)]
    pub loss: LossArgs,
    #[command(flatten)]
    pub depth: DepthArgs,
    /// Ground-truth manifest; supplies depth, the object mask and (unless given) the ego velocity.
    #[arg(long)]
    pub gt_manifest: Option<PathBuf>,
    /// Label mask (PGM, object ids as gray levels).
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub object_id: u8,
    /// Camera velocity `vx,vy,vz,wx,wy,wz`.
    #[arg(long, value_parser = parse_pose, allow_hyphen_values = true, conflicts_with = "ego_json")]
    pub ego: Option<Pose6>,
    /// Report written by `estimate-ego`.
    #[arg(long)]
    pub ego_json: Option<PathBuf>,
    #[command(flatten)]
    pub estimator: EstimatorArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenGtArgs {
    /// Scene manifest (JSON) referencing intrinsics, clouds and trajectories.
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, default_value_t = 40.0)]
    pub fps: f64,
    /// Side of the square each projected point covers, in pixels.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub footprint: u8,
    /// Half-width of the velocity difference step in milliseconds.
    #[arg(long, default_value_t = 2.5)]
    pub velocity_dt_ms: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum AlignmentArg {
    Median,
    Mean,
    None,
}

#[derive(Args, Debug)]
pub struct EvalDepthArgs {
    /// PFM file or directory of PFM files.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_enum, default_value = "median")]
    pub alignment: AlignmentArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalMotionArgs {
    /// Manifest file, or a directory holding `manifest.json`.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Fit one least-squares scale of the predicted translations to the truth.
    #[arg(long)]
    pub scale_from_gt: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalMaskArgs {
    /// PGM file or directory of PGM files.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum SceneKind {
    /// Static textured surface, moving camera.
    Rigid,
    /// Static camera, textured background and one moving patch.
    Object,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "rigid")]
    pub kind: SceneKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Texture points on the background (rigid) or on the object (object).
    #[arg(long)]
    pub points: Option<usize>,
    /// Camera velocity for a rigid scene, viewing a fronto-parallel plane 2 m away.
    #[arg(long, value_parser = parse_pose, allow_hyphen_values = true)]
    pub pose: Option<Pose6>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_pose(s: &str) -> Result<Pose6, String> {
    let vals: Vec<f64> = s
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}")))
        .collect::<Result<_, _>>()?;
    let arr: [f64; 6] = vals
        .try_into()
        .map_err(|v: Vec<f64>| format!("expected 6 comma-separated numbers, got {}", v.len()))?;
    if arr.iter().any(|x| !x.is_finite()) {
        return Err("pose components must be finite".into());
    }
    Ok(Pose6::from_array(arr))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Slice(a) => commands::slice(a),
        Command::Compensate(a) => commands::compensate(a),
        Command::EstimateEgo(a) => commands::estimate_ego(a),
        Command::EstimateObj(a) => commands::estimate_obj(a),
        Command::GenGt(a) => commands::gen_gt(a),
        Command::EvalDepth(a) => commands::eval_depth(a),
        Command::EvalMotion(a) => commands::eval_motion(a),
        Command::EvalMask(a) => commands::eval_mask(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for unreadable inputs, 1 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    let missing = e.chain().any(|c| {
        c.downcast_ref::<std::io::Error>()
            .map(|io| io.kind() == std::io::ErrorKind::NotFound)
            .unwrap_or(false)
    });
    if missing {
        2
    } else {
        1
    }
}
