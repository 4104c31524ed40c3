//! Restoration jobs: asset loading, operator construction and the run itself.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use fepll::gmm::model_from_bytes;
use fepll::metrics::{evaluate, MetricReport};
use fepll::operators::radial_gain;
use fepll::solver::{build_tree_for, prepare_model, Restoration, RestorationConfig};
use fepll::tree::{tree_from_bytes, tree_to_bytes};
use fepll::{restore, DegradationOperator, GmmTree, Image, Kernel};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::args::{DegradationArgs, Task};
use crate::UsageError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Everything needed to reproduce a restoration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RestoreJob {
    pub task: Task,
    pub input: PathBuf,
    pub output: PathBuf,
    pub model: PathBuf,
    pub tree: Option<PathBuf>,
    pub levels: Option<Vec<usize>>,
    pub tree_seed: u64,
    pub reference: Option<PathBuf>,
    pub degradation: DegradationArgs,
    pub config: RestorationConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreeSource {
    None,
    File,
    Built,
}

pub struct JobResult {
    /// Clamped estimate.
    pub output: Image,
    pub restoration: Restoration,
    pub operator: &'static str,
    pub input_dims: (usize, usize),
    /// SHA-256 of every file read, plus the tree actually used.
    pub digests: BTreeMap<String, String>,
    pub tree_source: TreeSource,
    pub tree_seconds: f64,
    pub restore_seconds: f64,
    pub metrics: Option<MetricReport>,
}

/// Reads a file and records its digest under `name`.
pub fn load(path: &Path, name: &str, digests: &mut BTreeMap<String, String>) -> Result<Vec<u8>> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {name} {}", path.display()))?;
    digests.insert(name.to_string(), sha256_hex(&bytes));
    Ok(bytes)
}

pub fn load_image(path: &Path, name: &str, digests: &mut BTreeMap<String, String>) -> Result<Image> {
    let bytes = load(path, name, digests)?;
    Image::decode(&bytes).with_context(|| format!("cannot decode {name} {}", path.display()))
}

/// Task-specific inputs, loaded and checked against the task.
#[derive(Default)]
pub struct Assets {
    pub kernel: Option<Kernel>,
    pub mask: Option<Image>,
    pub gain: Option<Image>,
}

pub fn load_assets(task: Task, deg: &DegradationArgs, digests: &mut BTreeMap<String, String>) -> Result<Assets> {
    let usage = |flag: &str, tasks: &str| -> Result<()> { Err(UsageError(format!("{flag} only applies to {tasks}")).into()) };
    let blurs = matches!(task, Task::Deblur | Task::Sr);
    if deg.kernel.is_some() && !blurs {
        usage("--kernel", "deblur and sr")?;
    }
    if deg.blur_sigma.is_some() && !blurs {
        usage("--blur-sigma", "deblur and sr")?;
    }
    if deg.kernel.is_some() && deg.blur_sigma.is_some() {
        bail!(UsageError("give either --kernel or --blur-sigma, not both".into()));
    }
    if deg.mask.is_some() && task != Task::Inpaint {
        usage("--mask", "inpaint")?;
    }
    if deg.gain.is_some() && task != Task::Devignette {
        usage("--gain", "devignette")?;
    }
    if deg.factor.is_some() && task != Task::Sr {
        usage("--factor", "sr")?;
    }
    let mut assets = Assets::default();
    if let Some(p) = &deg.kernel {
        let bytes = load(p, "kernel", digests)?;
        let text = String::from_utf8(bytes).with_context(|| format!("kernel {} is not text", p.display()))?;
        assets.kernel = Some(Kernel::from_text(&text).with_context(|| format!("kernel {}", p.display()))?);
    } else if let Some(s) = deg.blur_sigma {
        assets.kernel = Some(Kernel::gaussian(s)?);
    }
    if let Some(p) = &deg.mask {
        assets.mask = Some(load_image(p, "mask", digests)?);
    }
    if let Some(p) = &deg.gain {
        assets.gain = Some(load_image(p, "gain", digests)?);
    }
    Ok(assets)
}

/// Super-resolution factor, required for `sr`.
pub fn factor(task: Task, deg: &DegradationArgs) -> Result<usize> {
    match (task, deg.factor) {
        (Task::Sr, Some(d)) if d >= 1 => Ok(d),
        (Task::Sr, _) => bail!(UsageError("sr needs --factor of at least 1".into())),
        _ => Ok(1),
    }
}

/// Operator acting on a `dims` image (the high-resolution grid for `sr`).
pub fn build_operator(task: Task, deg: &DegradationArgs, assets: &Assets, dims: (usize, usize)) -> Result<DegradationOperator> {
    let (h, w) = dims;
    let check = |what: &str, img: &Image| -> Result<()> {
        if img.dims() != dims {
            bail!("{what} is {}x{} but the image is {h}x{w}", img.height(), img.width());
        }
        Ok(())
    };
    Ok(match task {
        Task::Denoise => DegradationOperator::identity(h, w)?,
        Task::Deblur => {
            let k = assets
                .kernel
                .clone()
                .ok_or_else(|| UsageError("deblur needs --kernel or --blur-sigma".into()))?;
            DegradationOperator::convolution(h, w, k)?
        }
        Task::Inpaint => {
            let m = assets.mask.as_ref().ok_or_else(|| UsageError("inpaint needs --mask".into()))?;
            check("mask", m)?;
            DegradationOperator::mask(m)?
        }
        Task::Devignette => match &assets.gain {
            Some(g) => {
                check("gain map", g)?;
                DegradationOperator::gain(g)?
            }
            None => DegradationOperator::gain(&radial_gain(h, w, deg.vignette))?,
        },
        Task::Sr => DegradationOperator::decimate(h, w, factor(task, deg)?, assets.kernel.clone())?,
    })
}

pub fn run_job(job: &RestoreJob) -> Result<JobResult> {
    let mut digests = BTreeMap::new();
    let y = load_image(&job.input, "input", &mut digests)?;
    let d = factor(job.task, &job.degradation)?;
    let hi = (y.height() * d, y.width() * d);
    let assets = load_assets(job.task, &job.degradation, &mut digests)?;
    let op = build_operator(job.task, &job.degradation, &assets, hi)?;
    let model_bytes = load(&job.model, "model", &mut digests)?;
    let model = model_from_bytes(&model_bytes).with_context(|| format!("model {}", job.model.display()))?;
    let prepared = prepare_model(&model, &job.config)?;
    job.config.validate(model.patch_side()?)?;

    let clock = Instant::now();
    let (tree, tree_source): (Option<GmmTree>, TreeSource) = match (&job.tree, job.config.use_tree) {
        (Some(_), false) => bail!(UsageError("--tree conflicts with a profile that does not use the tree".into())),
        (None, false) => (None, TreeSource::None),
        (Some(p), true) => {
            let t = tree_from_bytes(&load(p, "tree", &mut digests)?).with_context(|| format!("tree {}", p.display()))?;
            t.check_matches(&prepared).with_context(|| {
                format!(
                    "tree {} was not built for this model and flat-tail setting; rebuild it with build-tree{}",
                    p.display(),
                    if job.config.use_flat_tail { format!(" --rho {}", job.config.rho) } else { " --rho 1".into() }
                )
            })?;
            (Some(t), TreeSource::File)
        }
        (None, true) => {
            let t = build_tree_for(&model, &job.config, job.levels.as_deref(), job.tree_seed)?;
            digests.insert("tree".into(), sha256_hex(&tree_to_bytes(&t)));
            (Some(t), TreeSource::Built)
        }
    };
    let tree_seconds = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let restoration = restore(&y, &op, &prepared, tree.as_ref(), &job.config)?;
    let restore_seconds = clock.elapsed().as_secs_f64();
    let output = restoration.image.clamped();
    let metrics = match &job.reference {
        Some(p) => {
            let r = load_image(p, "reference", &mut digests)?;
            Some(evaluate(&output, &r).with_context(|| format!("reference {}", p.display()))?)
        }
        None => None,
    };
    Ok(JobResult {
        output,
        restoration,
        operator: op.kind_name(),
        input_dims: y.dims(),
        digests,
        tree_source,
        tree_seconds,
        restore_seconds,
        metrics,
    })
}
