//! The `keypose` command line.

mod annotate;
mod basis;
mod evaluate;
mod solve;
mod synth;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::annotation::{AnnotationConfig, AnnotationMode};
use crate::error::{Error, Result};
use crate::io::read_json;
use crate::metrics::ArThresholds;
use crate::solver::EstimateConfig;
use crate::synth::SynthConfig;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FRAME_FAILURES: u8 = 1;
pub const EXIT_INVALID_INPUT: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "keypose",
    version,
    about = "Pose from weighted semantic keypoints, and depth-based keypoint annotation"
)]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for per-frame work (0 = all cores).
    #[arg(long, global = true, env = "KEYPOSE_WORKERS")]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a PCA shape basis from 3D keypoint files.
    BuildBasis(BuildBasisArgs),
    /// Estimate object pose per frame from observations or heatmaps.
    Solve(SolveArgs),
    /// Project and refine 3D keypoint annotations against depth frames.
    Annotate(AnnotateArgs),
    /// Compare pose estimates with ground truth.
    Evaluate(EvaluateArgs),
    /// Write a seeded synthetic scenario.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct BuildBasisArgs {
    /// Keypoint JSON files, one instance each.
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, conflicts_with = "variance_target")]
    pub components: Option<usize>,
    /// Keep the fewest modes explaining more than this fraction of variance.
    #[arg(long)]
    pub variance_target: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub basis: PathBuf,
    /// Directory of observation JSON files.
    #[arg(long, required_unless_present = "heatmaps", conflicts_with = "heatmaps")]
    pub observations: Option<PathBuf>,
    /// Directory of KHM heatmap stacks.
    #[arg(long)]
    pub heatmaps: Option<PathBuf>,
    /// Without intrinsics only the weak-perspective pose is estimated.
    #[arg(long)]
    pub intrinsics: Option<PathBuf>,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Give every detected keypoint the same weight.
    #[arg(long)]
    pub uniform_weights: bool,
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub mesh: PathBuf,
    /// TUM trajectory; line i is frame i.
    #[arg(long)]
    pub trajectory: PathBuf,
    #[arg(long)]
    pub keypoints: PathBuf,
    /// Depth frames named `<frame id>.pfm` or `<frame id>.pgm`.
    #[arg(long)]
    pub depth_dir: PathBuf,
    #[arg(long)]
    pub intrinsics: PathBuf,
    #[arg(long, value_enum, default_value = "project")]
    pub mode: ModeArg,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub heatmap_stride: usize,
    #[arg(long, default_value_t = 1.0)]
    pub heatmap_sigma: f64,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum ModeArg {
    Project,
    RefineObject,
    RefineKeypoint,
}

impl From<ModeArg> for AnnotationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Project => AnnotationMode::Project,
            ModeArg::RefineObject => AnnotationMode::RefineObject,
            ModeArg::RefineKeypoint => AnnotationMode::RefineKeypoint,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of pose JSON files written by `solve`.
    #[arg(long)]
    pub poses: PathBuf,
    /// Directory of ground-truth JSON files.
    #[arg(long)]
    pub gt: PathBuf,
    /// PLY whose vertices are the model points.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub symmetries: Option<PathBuf>,
    #[arg(long)]
    pub intrinsics: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub pixel_sigma: Option<f64>,
    #[arg(long)]
    pub outlier_fraction: Option<f64>,
    #[arg(long)]
    pub depth_frames: Option<usize>,
}

/// Everything a run can be configured with besides paths.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub solve: EstimateConfig,
    pub annotation: AnnotationConfig,
    pub synth: SynthConfig,
    pub ar: ArThresholds,
    pub workers: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => read_json(p),
            None => Ok(RunConfig::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.solve.solver.validate()?;
        self.annotation.validate()?;
        self.synth.validate()?;
        let ar = &self.ar;
        if ar.mssd_diameter_fractions.is_empty() || ar.mspd_pixels.is_empty() || !(ar.mspd_reference_width > 0.0) {
            return Err(Error::InvalidInput("AR threshold lists must be nonempty".into()));
        }
        Ok(())
    }
}

/// What a command reports when it ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    FrameFailures,
}

impl Outcome {
    pub fn from_failures(n: usize) -> Self {
        if n == 0 {
            Outcome::Success
        } else {
            Outcome::FrameFailures
        }
    }
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidInput(format!("cannot start {workers} workers: {e}")))
}

pub fn execute(cli: &Cli) -> Result<Outcome> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(w) = cli.workers {
        cfg.workers = Some(w);
    }
    let pool = thread_pool(cfg.workers.unwrap_or(0))?;
    match &cli.command {
        Command::BuildBasis(a) => basis::run(a),
        Command::Solve(a) => {
            if let Some(l) = a.lambda {
                cfg.solve.solver.lambda = l;
            }
            if let Some(m) = a.max_iters {
                cfg.solve.solver.max_iters = m;
            }
            cfg.validate()?;
            pool.install(|| solve::run(a, &cfg))
        }
        Command::Annotate(a) => {
            cfg.validate()?;
            pool.install(|| annotate::run(a, &cfg))
        }
        Command::Evaluate(a) => {
            cfg.validate()?;
            evaluate::run(a, &cfg)
        }
        Command::Synth(a) => {
            let s = &mut cfg.synth;
            if let Some(v) = a.seed {
                s.seed = v;
            }
            if let Some(v) = a.frames {
                s.frames = v;
            }
            if let Some(v) = a.pixel_sigma {
                s.noise.pixel_sigma = v;
            }
            if let Some(v) = a.outlier_fraction {
                s.noise.outlier_fraction = v;
            }
            if let Some(v) = a.depth_frames {
                s.depth_frames = v;
            }
            cfg.validate()?;
            synth::run(a, &cfg)
        }
    }
}

/// Runs the command and maps the result to the process exit code.
pub fn run(cli: &Cli) -> u8 {
    match execute(cli) {
        Ok(Outcome::Success) => EXIT_OK,
        Ok(Outcome::FrameFailures) => EXIT_FRAME_FAILURES,
        Err(e) => {
            log::error!("{e}");
            EXIT_INVALID_INPUT
        }
    }
}
