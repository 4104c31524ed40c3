use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use fepll::gmm::{em_train, import_text_model, model_from_bytes, read_model, write_model, EmConfig};
use fepll::patches::{extract_patches, regular_grid};
use fepll::solver::SolverStats;
use fepll::tree::{build_tree, default_levels, tree_from_bytes, write_tree};
use fepll::{synth, GmmModel, GmmTree, Image};

use crate::args::*;
use crate::job::{build_operator, factor, load_assets, run_job, sha256_hex, RestoreJob};
use crate::manifest::{default_manifest_path, default_replay_path, RunManifest};
use crate::UsageError;

/// Grayscale images in `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot read corpus {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "pnm" | "png"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("corpus {} contains no PGM or PNG images", dir.display());
    }
    Ok(paths)
}

fn read_image(path: &Path) -> Result<Image> {
    Image::read(path).with_context(|| format!("cannot load image {}", path.display()))
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).with_context(|| format!("cannot resolve {}", p.display()))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    if a.patch_size == 0 || a.stride == 0 {
        bail!(UsageError("--patch-size and --stride must be positive".into()));
    }
    let paths = list_images(&a.corpus)?;
    let mut patches = Vec::new();
    let mut used = 0;
    for p in &paths {
        let img = read_image(p)?;
        if img.height() < a.patch_size || img.width() < a.patch_size {
            eprintln!("skipping {}: smaller than the patch", p.display());
            continue;
        }
        let grid = regular_grid(img.height(), img.width(), a.patch_size, a.stride)?;
        patches.extend_from_slice(&extract_patches(&img, &grid)?.values);
        used += 1;
    }
    let dim = a.patch_size * a.patch_size;
    let report = em_train(&patches, dim, &EmConfig { components: a.components, iterations: a.iters, seed: a.seed })?;
    write_model(&report.model, &a.out)?;
    println!(
        "trained {} components on {} patches of {}x{} from {used} images ({} re-seeds)",
        a.components,
        patches.len() / dim,
        a.patch_size,
        a.patch_size,
        report.reseeds
    );
    println!("final mean log-likelihood: {:.6}", report.log_likelihoods.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

pub fn import(a: &ImportArgs) -> Result<()> {
    let text = fs::read_to_string(&a.input).with_context(|| format!("cannot read {}", a.input.display()))?;
    let model = import_text_model(&text).with_context(|| format!("cannot import {}", a.input.display()))?;
    write_model(&model, &a.out)?;
    println!("imported {} components of dimension {}", model.len(), model.patch_dim());
    Ok(())
}

pub fn flatten(a: &FlattenArgs) -> Result<()> {
    let model = read_model(&a.model)?;
    let flat = model.flattened(a.rho)?;
    write_model(&flat, &a.out)?;
    println!(
        "flattened {} components at rho = {}: mean rank {:.2} of {}",
        flat.len(),
        a.rho,
        flat.mean_rank(),
        flat.patch_dim()
    );
    Ok(())
}

fn describe_tree(tree: &GmmTree) -> String {
    format!(
        "{} nodes, level sizes {:?} (root first), at most {} scores per patch vs {} exhaustive",
        tree.nodes().len(),
        tree.level_sizes(),
        tree.max_descent_cost(),
        tree.leaf_count()
    )
}

pub fn build_tree_cmd(a: &BuildTreeArgs) -> Result<()> {
    let model = read_model(&a.model)?;
    let levels = a.levels.clone().unwrap_or_else(|| default_levels(model.len()));
    let tree = build_tree(&model, &levels, a.rho, a.seed)?;
    write_tree(&tree, &a.out)?;
    println!("levels {levels:?}: {}", describe_tree(&tree));
    if !model.is_exact() {
        println!("model is already flattened; its components are used as leaves unchanged");
    }
    Ok(())
}

pub fn restore_cmd(a: &RestoreArgs, command: Vec<String>) -> Result<()> {
    let config = a.solver.config()?;
    let opt_abs = |p: &Option<PathBuf>| p.as_deref().map(absolute).transpose();
    let mut degradation = a.degradation.clone();
    degradation.kernel = opt_abs(&degradation.kernel)?;
    degradation.mask = opt_abs(&degradation.mask)?;
    degradation.gain = opt_abs(&degradation.gain)?;
    let job = RestoreJob {
        task: a.task,
        input: absolute(&a.input)?,
        output: absolute(&a.output)?,
        model: absolute(&a.model)?,
        tree: opt_abs(&a.tree)?,
        levels: a.levels.clone(),
        tree_seed: a.tree_seed,
        reference: opt_abs(&a.reference)?,
        degradation,
        config,
    };
    let manifest_path = a.manifest_out.clone().unwrap_or_else(|| default_manifest_path(&a.output));
    let (manifest, _) = execute(&job, &job.output, command)?;
    manifest.write(&manifest_path)?;
    print_summary(&manifest);
    println!("wrote {} and {}", a.output.display(), manifest_path.display());
    Ok(())
}

/// Runs `job`, writes the image to `output` and returns the manifest and output digest.
fn execute(job: &RestoreJob, output: &Path, command: Vec<String>) -> Result<(RunManifest, String)> {
    let start = Instant::now();
    let res = run_job(job)?;
    res.output.write(output).with_context(|| format!("cannot write {}", output.display()))?;
    let digest = sha256_hex(&fs::read(output)?);
    let manifest = RunManifest::new(command, job.clone(), &res, digest.clone(), start.elapsed().as_secs_f64());
    Ok((manifest, digest))
}

fn print_summary(m: &RunManifest) {
    let s: &SolverStats = &m.stats;
    let ops = s.total_ops();
    println!(
        "{} ({}): {}x{} -> {}x{}, {} iterations, lambda {:.4}, {} patches, {:.2} scores/patch, {:.3e} multiplies, {:.3} s",
        m.job.task.name(),
        m.operator,
        m.input_dims[0],
        m.input_dims[1],
        m.output_dims[0],
        m.output_dims[1],
        s.iterations.len(),
        s.lambda,
        s.total_patches(),
        s.score_evals_per_patch(),
        ops.total_mults() as f64,
        m.timings.total_seconds
    );
    if !s.all_converged() {
        println!("warning: a conjugate-gradient solve stopped before reaching its tolerance");
    }
    if let Some(mt) = &m.metrics {
        let psnr = mt.psnr.map_or("inf".to_string(), |p| format!("{p:.2}"));
        println!("PSNR {psnr} dB, SSIM {:.4}", mt.ssim);
    }
}

pub fn replay(a: &ReplayArgs) -> Result<()> {
    let recorded = RunManifest::read(&a.manifest)?;
    let output = a.output.clone().unwrap_or_else(|| default_replay_path(&recorded.job.output));
    let mut job = recorded.job.clone();
    job.output = absolute(&output)?;
    let (replayed, digest) = execute(&job, &output, recorded.command.clone())?;
    for (name, want) in &recorded.digests {
        if name == "output" {
            continue;
        }
        match replayed.digests.get(name) {
            Some(got) if got == want => {}
            Some(_) => bail!("{name} differs from the recorded run"),
            None => bail!("{name} was not used by the replay"),
        }
    }
    let want = recorded.digests.get("output").context("manifest has no output digest")?;
    if *want != digest {
        bail!("replayed output {} has digest {digest}, recorded {want}", output.display());
    }
    println!("output digest matches: {digest}");
    Ok(())
}

pub fn degrade(a: &DegradeArgs) -> Result<()> {
    let clean = read_image(&a.input)?;
    let mut digests = Default::default();
    let mut assets = load_assets(a.task, &a.degradation, &mut digests)?;
    if a.mask_out.is_some() && a.task != Task::Inpaint {
        bail!(UsageError("--mask-out only applies to inpaint".into()));
    }
    if a.task == Task::Inpaint && assets.mask.is_none() {
        let out = a.mask_out.as_ref().ok_or_else(|| UsageError("inpaint needs --mask or --mask-out".into()))?;
        let mask = synth::random_mask(clean.height(), clean.width(), a.missing, a.seed)?;
        mask.write(out)?;
        assets.mask = Some(mask);
    }
    let d = factor(a.task, &a.degradation)?;
    if clean.height() % d != 0 || clean.width() % d != 0 {
        bail!("image {}x{} is not divisible by the factor {d}", clean.height(), clean.width());
    }
    let op = build_operator(a.task, &a.degradation, &assets, clean.dims())?;
    let observed = synth::add_noise(&op.apply(&clean)?, a.sigma, a.seed).clamped();
    observed.write(&a.output)?;
    println!(
        "{} ({}): {}x{} -> {}x{}, sigma {}",
        a.task.name(),
        op.kind_name(),
        clean.height(),
        clean.width(),
        observed.height(),
        observed.width(),
        a.sigma
    );
    Ok(())
}

fn describe_model(m: &GmmModel) -> String {
    let ranks: Vec<usize> = m.components().iter().map(|c| c.rank()).collect();
    format!(
        "model: {} components, patch {}x{}, {}, mean rank {:.2} (min {}, max {})",
        m.len(),
        m.patch_side().unwrap_or(0),
        m.patch_side().unwrap_or(0),
        if m.is_exact() { "full rank".to_string() } else { format!("flattened at rho = {}", m.rho()) },
        m.mean_rank(),
        ranks.iter().min().unwrap_or(&0),
        ranks.iter().max().unwrap_or(&0),
    )
}

pub fn inspect(a: &InspectArgs) -> Result<()> {
    let bytes = fs::read(&a.path).with_context(|| format!("cannot read {}", a.path.display()))?;
    if bytes.starts_with(b"FEPLLGM1") {
        println!("{}", describe_model(&model_from_bytes(&bytes)?));
    } else if bytes.starts_with(b"FEPLLTR1") {
        let tree = tree_from_bytes(&bytes)?;
        println!("tree: {} leaves of dimension {}, rho = {}", tree.leaf_count(), tree.patch_dim(), tree.rho());
        println!("{}", describe_tree(&tree));
    } else if bytes.first() == Some(&b'{') {
        let m = RunManifest::read(&a.path)?;
        print_summary(&m);
        for (k, v) in &m.digests {
            println!("{k:>9}  {v}");
        }
    } else {
        let img = Image::decode(&bytes).with_context(|| format!("{} is not a model, tree, manifest or image", a.path.display()))?;
        let v = img.as_slice();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
        println!("image: {}x{}, range [{lo:.4}, {hi:.4}], mean {mean:.4}", img.height(), img.width());
    }
    Ok(())
}
