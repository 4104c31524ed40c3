//! Profile comparison over a corpus of clean images.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use fepll::gmm::read_model;
use fepll::operators::radial_gain;
use fepll::solver::{build_tree_for, compare_profiles, ProfileResult, RestorationConfig};
use fepll::{synth, DegradationOperator, GmmTree, GridMode, Image, Kernel};
use serde::Serialize;

use crate::args::{multipliers_for, BenchmarkArgs, Task};
use crate::commands::list_images;
use crate::UsageError;

const ABLATION: [&str; 8] =
    ["exact", "flat", "tree", "jitter", "flat+tree", "flat+jitter", "tree+jitter", "fepll"];

#[derive(Debug, Clone, Copy)]
pub struct TaskSpec {
    pub task: Task,
    pub sigma: f64,
}

/// `task[:sigma]`.
pub fn parse_task(s: &str) -> Result<TaskSpec, UsageError> {
    let (name, sigma) = match s.split_once(':') {
        Some((n, v)) => (n, Some(v.parse::<f64>().map_err(|_| UsageError(format!("bad noise level in task {s:?}")))?)),
        None => (s, None),
    };
    let task = <Task as clap::ValueEnum>::from_str(name, true).map_err(|_| UsageError(format!("unknown task {name:?}")))?;
    let sigma = sigma.unwrap_or(match task {
        Task::Denoise => 20.0,
        Task::Deblur => 0.5,
        _ => 2.0,
    });
    Ok(TaskSpec { task, sigma })
}

/// Configuration of a named profile at noise level `sigma`.
pub fn profile_config(name: &str, sigma: f64, a: &BenchmarkArgs) -> Result<RestorationConfig, UsageError> {
    let mut c = match name {
        "fepll" => RestorationConfig::fepll(sigma),
        "fepll-prime" => RestorationConfig::fepll_prime(sigma),
        "exact" => RestorationConfig::exact(sigma),
        _ => {
            let base = RestorationConfig::fepll(sigma);
            let mut c = RestorationConfig::exact(sigma);
            for part in name.split('+') {
                match part {
                    "flat" => {
                        c.use_flat_tail = true;
                        c.rho = base.rho;
                    }
                    "tree" => c.use_tree = true,
                    "jitter" => {
                        c.grid = GridMode::Jittered;
                        c.spacing = base.spacing;
                    }
                    _ => return Err(UsageError(format!("unknown profile {name:?}"))),
                }
            }
            c
        }
    };
    c.seed = a.seed;
    c.threads = a.threads;
    if let Some(t) = a.iters {
        c.beta_multipliers = multipliers_for(t).ok_or_else(|| UsageError("--iters must be at least 1".into()))?;
    }
    if let (Some(s), GridMode::Jittered) = (a.spacing, c.grid) {
        c.spacing = s;
    }
    if let (Some(r), true) = (a.rho, c.use_flat_tail) {
        c.rho = r;
    }
    Ok(c)
}

#[derive(Debug, Serialize)]
struct Row {
    image: String,
    height: usize,
    width: usize,
    task: &'static str,
    sigma: f64,
    profile: String,
    psnr: Option<f64>,
    ssim: Option<f64>,
    seconds: Option<f64>,
    score_evals_per_patch: Option<f64>,
    multiplies: Option<u64>,
    patches: Option<usize>,
    converged: Option<bool>,
    error: Option<String>,
}

/// Clean image, operator and noisy observation for one benchmark case.
fn degrade(clean: &Image, spec: TaskSpec, a: &BenchmarkArgs, seed: u64) -> Result<(Image, DegradationOperator, Image)> {
    let clean = if spec.task == Task::Sr {
        let d = a.factor;
        clean.crop(0, 0, clean.height() / d * d, clean.width() / d * d)?
    } else {
        clean.clone()
    };
    let (h, w) = clean.dims();
    let op = match spec.task {
        Task::Denoise => DegradationOperator::identity(h, w)?,
        Task::Deblur => DegradationOperator::convolution(h, w, Kernel::gaussian(a.blur_sigma)?)?,
        Task::Inpaint => DegradationOperator::mask(&synth::random_mask(h, w, a.missing, seed)?)?,
        Task::Devignette => DegradationOperator::gain(&radial_gain(h, w, 0.75))?,
        Task::Sr => DegradationOperator::decimate(h, w, a.factor, None)?,
    };
    let y = synth::add_noise(&op.apply(&clean)?, spec.sigma, seed);
    Ok((clean, op, y))
}

pub fn benchmark(a: &BenchmarkArgs) -> Result<()> {
    let tasks: Vec<TaskSpec> = a.tasks.iter().map(|t| parse_task(t)).collect::<Result<_, _>>()?;
    let mut names: Vec<String> = a.profiles.iter().filter(|n| !n.is_empty()).cloned().collect();
    if a.ablation {
        for n in ABLATION {
            if !names.iter().any(|x| x == n) {
                names.push(n.to_string());
            }
        }
    }
    if names.is_empty() || tasks.is_empty() {
        bail!(UsageError("need at least one task and one profile".into()));
    }
    for n in &names {
        profile_config(n, 1.0, a)?;
    }
    let mut paths = list_images(&a.corpus)?;
    if let Some(n) = a.limit {
        paths.truncate(n);
    }
    let model = read_model(&a.model)?;

    // one tree per distinct flat-tail setting; the noise level does not affect it
    let clock = Instant::now();
    let mut trees: Vec<GmmTree> = Vec::new();
    let mut built = Vec::new();
    for n in &names {
        let c = profile_config(n, 1.0, a)?;
        let key = (c.use_flat_tail, c.rho.to_bits());
        if c.use_tree && !built.contains(&key) {
            trees.push(build_tree_for(&model, &c, a.levels.as_deref(), a.seed)?);
            built.push(key);
        }
    }
    let tree_seconds = clock.elapsed().as_secs_f64();

    let mut rows = Vec::new();
    for (i, path) in paths.iter().enumerate() {
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let loaded = Image::read(path).map_err(anyhow::Error::from).and_then(|img| match a.crop {
            Some(s) if img.height() >= s && img.width() >= s => {
                Ok(img.crop((img.height() - s) / 2, (img.width() - s) / 2, s, s)?)
            }
            Some(s) => bail!("smaller than the {s}x{s} crop"),
            None => Ok(img),
        });
        for spec in &tasks {
            let mut push = |profile: &str, dims: (usize, usize), r: Result<ProfileResult>| {
                let base = Row {
                    image: name.clone(),
                    height: dims.0,
                    width: dims.1,
                    task: spec.task.name(),
                    sigma: spec.sigma,
                    profile: profile.to_string(),
                    psnr: None,
                    ssim: None,
                    seconds: None,
                    score_evals_per_patch: None,
                    multiplies: None,
                    patches: None,
                    converged: None,
                    error: None,
                };
                rows.push(match r {
                    Ok(p) => Row {
                        psnr: p.metrics.map(|m| m.psnr),
                        ssim: p.metrics.map(|m| m.ssim),
                        seconds: Some(p.seconds),
                        score_evals_per_patch: Some(p.score_evals_per_patch),
                        multiplies: Some(p.ops.total_mults()),
                        patches: Some(p.patches),
                        converged: Some(p.converged),
                        ..base
                    },
                    Err(e) => Row { error: Some(format!("{e:#}")), ..base },
                });
            };
            let case = loaded
                .as_ref()
                .map_err(|e| anyhow::anyhow!("{e:#}"))
                .and_then(|img| degrade(img, *spec, a, a.seed.wrapping_add(i as u64)));
            match case {
                Err(e) => {
                    for n in &names {
                        push(n, (0, 0), Err(anyhow::anyhow!("{e:#}")));
                    }
                }
                Ok((clean, op, y)) => {
                    for n in &names {
                        let cfg = profile_config(n, spec.sigma, a)?;
                        let res = compare_profiles(&y, &op, &model, &trees, &[(n.clone(), cfg)], Some(&clean))
                            .map(|mut v| v.remove(0))
                            .map_err(anyhow::Error::from);
                        push(n, clean.dims(), res);
                    }
                }
            }
            eprintln!("{name} {}: done", spec.task.name());
        }
    }

    let mut csv = csv::Writer::from_path(&a.csv).with_context(|| format!("cannot write {}", a.csv.display()))?;
    for r in &rows {
        csv.serialize(r)?;
    }
    csv.flush()?;
    let md = markdown(&rows, &names, &tasks, paths.len(), tree_seconds);
    fs::write(&a.markdown, &md).with_context(|| format!("cannot write {}", a.markdown.display()))?;
    print!("{md}");
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} of {} runs failed; see the error column", rows.len());
    }
    Ok(())
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn markdown(rows: &[Row], names: &[String], tasks: &[TaskSpec], images: usize, tree_seconds: f64) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Benchmark\n\n{images} images; search trees built once in {tree_seconds:.2} s.\n");
    for spec in tasks {
        let _ = writeln!(out, "## {} (sigma = {})\n", spec.task.name(), spec.sigma);
        let _ = writeln!(out, "| profile | runs | PSNR (dB) | SSIM | time (s) | speedup | multiplies ratio | scores/patch |");
        let _ = writeln!(out, "|---|---|---|---|---|---|---|---|");
        let ok = |n: &str| -> Vec<&Row> {
            rows.iter().filter(|r| r.task == spec.task.name() && r.profile == n && r.error.is_none()).collect()
        };
        let stats = |n: &str| -> BTreeMap<&'static str, Option<f64>> {
            let rs = ok(n);
            BTreeMap::from([
                ("psnr", mean(rs.iter().filter_map(|r| r.psnr).filter(|p| p.is_finite()))),
                ("ssim", mean(rs.iter().filter_map(|r| r.ssim))),
                ("seconds", mean(rs.iter().filter_map(|r| r.seconds))),
                ("mults", mean(rs.iter().filter_map(|r| r.multiplies.map(|m| m as f64)))),
                ("evals", mean(rs.iter().filter_map(|r| r.score_evals_per_patch))),
            ])
        };
        let exact = stats("exact");
        let fmt = |v: Option<f64>, p: usize| v.map_or("n/a".to_string(), |x| format!("{x:.p$}"));
        for n in names {
            let s = stats(n);
            let total = rows.iter().filter(|r| r.task == spec.task.name() && &r.profile == n).count();
            let ratio = |k: &str| match (exact[k], s[k]) {
                (Some(e), Some(x)) if x > 0.0 => Some(e / x),
                _ => None,
            };
            let _ = writeln!(
                out,
                "| {n} | {}/{total} | {} | {} | {} | {} | {} | {} |",
                ok(n).len(),
                fmt(s["psnr"], 2),
                fmt(s["ssim"], 4),
                fmt(s["seconds"], 3),
                fmt(ratio("seconds"), 1),
                fmt(ratio("mults"), 1),
                fmt(s["evals"], 2),
            );
        }
        out.push('\n');
    }
    let failures: Vec<&Row> = rows.iter().filter(|r| r.error.is_some()).collect();
    if !failures.is_empty() {
        let _ = writeln!(out, "## Failures\n");
        for r in failures {
            let _ = writeln!(out, "- {} / {} / {}: {}", r.image, r.task, r.profile, r.error.as_deref().unwrap_or(""));
        }
        out.push('\n');
    }
    out
}
