use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fepll::solver::SolverStats;
use serde::{Deserialize, Serialize};

use crate::job::{JobResult, RestoreJob, TreeSource};

/// Record written next to every restored image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: Vec<String>,
    pub job: RestoreJob,
    pub seeds: Seeds,
    /// SHA-256 of inputs, model, tree and output.
    pub digests: BTreeMap<String, String>,
    pub tree_source: TreeSource,
    pub operator: String,
    pub input_dims: [usize; 2],
    pub output_dims: [usize; 2],
    pub timings: Timings,
    pub metrics: Option<Metrics>,
    pub stats: SolverStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Seeds {
    pub jitter: u64,
    pub tree: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timings {
    pub tree_seconds: f64,
    pub restore_seconds: f64,
    pub total_seconds: f64,
}

/// PSNR is `None` for a perfect reconstruction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub psnr: Option<f64>,
    pub ssim: f64,
    pub mse: f64,
}

impl RunManifest {
    pub fn new(command: Vec<String>, job: RestoreJob, res: &JobResult, output_digest: String, total_seconds: f64) -> Self {
        let mut digests = res.digests.clone();
        digests.insert("output".into(), output_digest);
        RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command,
            seeds: Seeds {
                jitter: job.config.seed,
                tree: (res.tree_source == TreeSource::Built).then_some(job.tree_seed),
            },
            job,
            digests,
            tree_source: res.tree_source,
            operator: res.operator.to_string(),
            input_dims: [res.input_dims.0, res.input_dims.1],
            output_dims: [res.output.height(), res.output.width()],
            timings: Timings { tree_seconds: res.tree_seconds, restore_seconds: res.restore_seconds, total_seconds },
            metrics: res.metrics.map(|m| Metrics { psnr: m.psnr.is_finite().then_some(m.psnr), ssim: m.ssim, mse: m.mse }),
            stats: res.restoration.stats.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").with_context(|| format!("cannot write manifest {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("malformed manifest {}", path.display()))
    }
}

/// `<output>.manifest.json`.
pub fn default_manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// `<stem>.replay.<ext>` next to `output`.
pub fn default_replay_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "output".into());
    let name = match output.extension() {
        Some(ext) => format!("{stem}.replay.{}", ext.to_string_lossy()),
        None => format!("{stem}.replay"),
    };
    output.with_file_name(name)
}
