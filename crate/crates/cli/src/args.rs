use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fepll::solver::{RestorationConfig, DEFAULT_BETA_MULTIPLIERS};
use fepll::{CgConfig, GridMode};
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Parser, Debug)]
#[command(name = "fepll", version, about = "Patch-prior image restoration with flat-tail GMMs and a Gaussian search tree")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a zero-mean patch GMM with EM on a directory of grayscale images.
    Train(TrainArgs),
    /// Convert a text covariance dump (`K P`, then weight and P×P matrix per component) to a model file.
    Import(ImportArgs),
    /// Flatten the spectrum tail of every component at ratio rho.
    Flatten(FlattenArgs),
    /// Build the balanced Gaussian search tree for a model.
    BuildTree(BuildTreeArgs),
    /// Restore a degraded image and write a run manifest next to it.
    Restore(RestoreArgs),
    /// Re-run a restoration from its manifest and compare output digests.
    Replay(ReplayArgs),
    /// Synthesize a degraded observation from a clean image.
    Degrade(DegradeArgs),
    /// Compare restoration profiles over a corpus of clean images.
    Benchmark(BenchmarkArgs),
    /// Describe a model, tree, image or manifest file.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory of grayscale PGM/PNG images.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, short = 'k', default_value_t = 20)]
    pub components: usize,
    /// Patch side; patches have side² pixels.
    #[arg(long, default_value_t = 8)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 15)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sampling stride of the training patch grid.
    #[arg(long, default_value_t = 2)]
    pub stride: usize,
    #[arg(long, short = 'o')]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ImportArgs {
    pub input: PathBuf,
    #[arg(long, short = 'o')]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FlattenArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = fepll::gmm::DEFAULT_RHO)]
    pub rho: f64,
    #[arg(long, short = 'o')]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BuildTreeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Cluster counts per level, coarsest last (e.g. 64,32,16,8,4,2,1).
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<usize>>,
    /// Flattening ratio applied to every tree node.
    #[arg(long, default_value_t = fepll::gmm::DEFAULT_RHO)]
    pub rho: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, short = 'o')]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Denoise,
    Deblur,
    Inpaint,
    Devignette,
    Sr,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Denoise => "denoise",
            Task::Deblur => "deblur",
            Task::Inpaint => "inpaint",
            Task::Devignette => "devignette",
            Task::Sr => "sr",
        }
    }
}

/// Degradation parameters shared by `restore` and `degrade`.
#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct DegradationArgs {
    /// Blur kernel file (`H W` then row-major values); deblur kernel or sr anti-alias filter.
    #[arg(long)]
    pub kernel: Option<PathBuf>,
    /// Standard deviation of a Gaussian blur kernel, used when no kernel file is given.
    #[arg(long)]
    pub blur_sigma: Option<f64>,
    /// Inpainting mask (nonzero = observed).
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Devignetting gain map.
    #[arg(long)]
    pub gain: Option<PathBuf>,
    /// Strength of the generated radial gain 1 - s·(r/r_max)² when no map is given.
    #[arg(long, default_value_t = 0.75)]
    pub vignette: f64,
    /// Super-resolution factor.
    #[arg(long)]
    pub factor: Option<usize>,
}

/// Solver settings; defaults are the fully accelerated profile.
#[derive(Args, Debug, Clone)]
pub struct SolverArgs {
    /// Noise standard deviation on the 0-255 scale.
    #[arg(long)]
    pub sigma: f64,
    /// Seed of the jittered patch grid.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub spacing: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub no_tree: bool,
    #[arg(long)]
    pub no_flat_tail: bool,
    #[arg(long)]
    pub regular_grid: bool,
    /// Turn every acceleration off (exhaustive selection, full rank, all patches).
    #[arg(long)]
    pub exact: bool,
    /// Number of outer iterations.
    #[arg(long, conflicts_with = "beta_multipliers")]
    pub iters: Option<usize>,
    /// Comma-separated β multipliers, one per iteration.
    #[arg(long, value_delimiter = ',')]
    pub beta_multipliers: Option<Vec<f64>>,
    #[arg(long)]
    pub cg_tol: Option<f64>,
    #[arg(long)]
    pub cg_max_iter: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
}

impl SolverArgs {
    pub fn config(&self) -> Result<RestorationConfig, UsageError> {
        let mut c = if self.exact { RestorationConfig::exact(self.sigma) } else { RestorationConfig::fepll(self.sigma) };
        if self.exact && (self.spacing.is_some() || self.rho.is_some()) {
            return Err(UsageError("--exact cannot be combined with --spacing or --rho".into()));
        }
        c.seed = self.seed;
        if self.no_tree {
            c.use_tree = false;
        }
        if self.no_flat_tail {
            c.use_flat_tail = false;
            c.rho = 1.0;
        }
        if self.regular_grid {
            c.grid = GridMode::Regular;
        }
        if let Some(s) = self.spacing {
            c.spacing = s;
        }
        if let Some(r) = self.rho {
            if self.no_flat_tail {
                return Err(UsageError("--rho has no effect with --no-flat-tail".into()));
            }
            c.rho = r;
        }
        if let Some(t) = self.iters {
            c.beta_multipliers = multipliers_for(t).ok_or_else(|| UsageError("--iters must be at least 1".into()))?;
        }
        if let Some(m) = &self.beta_multipliers {
            c.beta_multipliers = m.clone();
        }
        c.cg = CgConfig {
            tolerance: self.cg_tol.unwrap_or(c.cg.tolerance),
            max_iterations: self.cg_max_iter.unwrap_or(c.cg.max_iterations),
        };
        c.threads = self.threads;
        Ok(c)
    }
}

/// First `t` default multipliers; past the default schedule they keep doubling.
pub fn multipliers_for(t: usize) -> Option<Vec<f64>> {
    if t == 0 {
        return None;
    }
    let mut m: Vec<f64> = DEFAULT_BETA_MULTIPLIERS.iter().copied().take(t).collect();
    while m.len() < t {
        m.push(m[m.len() - 1] * 2.0);
    }
    Some(m)
}

#[derive(Args, Debug)]
pub struct RestoreArgs {
    pub task: Task,
    #[arg(long, short = 'i')]
    pub input: PathBuf,
    #[arg(long, short = 'o')]
    pub output: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Prebuilt search tree; built on the fly when omitted.
    #[arg(long)]
    pub tree: Option<PathBuf>,
    /// Tree levels when the tree is built on the fly.
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    pub tree_seed: u64,
    /// Clean image for PSNR/SSIM.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Manifest path (default: `<output>.manifest.json`).
    #[arg(long)]
    pub manifest_out: Option<PathBuf>,
    #[command(flatten)]
    pub degradation: DegradationArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Where to write the replayed image (default: `<output>.replay.<ext>`).
    #[arg(long, short = 'o')]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DegradeArgs {
    pub task: Task,
    #[arg(long, short = 'i')]
    pub input: PathBuf,
    #[arg(long, short = 'o')]
    pub output: PathBuf,
    /// Noise standard deviation on the 0-255 scale.
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of pixels removed when a mask is generated.
    #[arg(long, default_value_t = 0.5)]
    pub missing: f64,
    /// Where to write a generated inpainting mask.
    #[arg(long)]
    pub mask_out: Option<PathBuf>,
    #[command(flatten)]
    pub degradation: DegradationArgs,
}

#[derive(Args, Debug)]
pub struct BenchmarkArgs {
    /// Directory of clean grayscale images.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Tasks as `task[:sigma]`; default noise levels are 20 for denoise, 0.5 for deblur and 2 otherwise.
    #[arg(long, value_delimiter = ',', default_value = "denoise")]
    pub tasks: Vec<String>,
    /// Profiles: fepll, fepll-prime, exact, or any `+`-joined subset of flat, tree, jitter.
    #[arg(long, value_delimiter = ',', default_value = "fepll,exact")]
    pub profiles: Vec<String>,
    /// Run all eight combinations of the three accelerations.
    #[arg(long)]
    pub ablation: bool,
    /// Restrict every image to its central crop of this size.
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<usize>>,
    #[arg(long)]
    pub spacing: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Gaussian blur for deblur and sr degradations.
    #[arg(long, default_value_t = 1.6)]
    pub blur_sigma: f64,
    #[arg(long, default_value_t = 2)]
    pub factor: usize,
    #[arg(long, default_value_t = 0.5)]
    pub missing: f64,
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long)]
    pub markdown: PathBuf,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    pub path: PathBuf,
}
