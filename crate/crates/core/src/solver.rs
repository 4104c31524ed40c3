//! Half-quadratic-splitting restoration loop.
//!
//! Each outer iteration samples a patch grid, removes patch means, selects a
//! Gaussian per patch (tree descent or exhaustive scoring), Wiener-filters the
//! patch, averages the restored patches back into an image and finally solves
//! the quadratic image-estimation problem against the observation.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::counters::OpCounter;
use crate::error::{FepllError, Result};
use crate::gmm::{select_with, GmmModel, ScoreContext};
use crate::image::Image;
use crate::metrics::{evaluate, MetricReport};
use crate::operators::{CgConfig, DegradationOperator, OperatorKind, SolveReport};
use crate::patches::{extract_patches, reproject, sample_grid, GridMode};
use crate::tree::{build_tree, default_levels, select_in_tree, GmmTree};

pub const DEFAULT_BETA_MULTIPLIERS: [f64; 5] = [1.0, 4.0, 8.0, 16.0, 32.0];
pub const DEFAULT_SPACING: usize = 6;
/// Noise level (8-bit scale) used when the input is declared noiseless.
pub const SIGMA_FLOOR: f64 = 0.5;
/// ρ used by the tree-less preset.
pub const PRIME_RHO: f64 = 0.98;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestorationConfig {
    /// Noise standard deviation on the 0–255 scale.
    pub sigma: f64,
    /// One entry per outer iteration.
    pub beta_multipliers: Vec<f64>,
    pub spacing: usize,
    pub grid: GridMode,
    pub use_tree: bool,
    pub use_flat_tail: bool,
    pub rho: f64,
    pub seed: u64,
    pub cg: CgConfig,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl RestorationConfig {
    /// All accelerations on.
    pub fn fepll(sigma: f64) -> Self {
        Self {
            sigma,
            beta_multipliers: DEFAULT_BETA_MULTIPLIERS.to_vec(),
            spacing: DEFAULT_SPACING,
            grid: GridMode::Jittered,
            use_tree: true,
            use_flat_tail: true,
            rho: crate::gmm::DEFAULT_RHO,
            seed: 0,
            cg: CgConfig::default(),
            threads: None,
        }
    }

    /// Flat tail at ρ = 0.98 with jittered subsampling, no search tree.
    pub fn fepll_prime(sigma: f64) -> Self {
        Self { use_tree: false, rho: PRIME_RHO, ..Self::fepll(sigma) }
    }

    /// Exhaustive selection, full-rank covariances, every patch.
    pub fn exact(sigma: f64) -> Self {
        Self {
            spacing: 1,
            grid: GridMode::Regular,
            use_tree: false,
            use_flat_tail: false,
            rho: 1.0,
            ..Self::fepll(sigma)
        }
    }

    pub fn iterations(&self) -> usize {
        self.beta_multipliers.len()
    }

    /// Noise level on the unit scale, with the floor applied.
    pub fn sigma_unit(&self) -> f64 {
        (if self.sigma > 0.0 { self.sigma } else { SIGMA_FLOOR }) / 255.0
    }

    pub fn validate(&self, patch_side: usize) -> Result<()> {
        let bad = |m: String| Err(FepllError::InvalidInput(m));
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return bad(format!("sigma must be a finite nonnegative number, got {}", self.sigma));
        }
        if self.beta_multipliers.is_empty() {
            return bad("at least one beta multiplier is required".into());
        }
        if self.beta_multipliers.iter().any(|m| !(*m > 0.0) || !m.is_finite()) {
            return bad("beta multipliers must be positive".into());
        }
        if self.spacing == 0 || self.spacing > patch_side {
            return bad(format!("spacing {} must be in 1..={patch_side}", self.spacing));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(format!("rho must be in (0, 1], got {}", self.rho));
        }
        if self.threads == Some(0) {
            return bad("thread count must be positive".into());
        }
        self.cg.validate()
    }
}

/// `β_t = m_t λ / σ²`.
pub fn beta_schedule(sigma: f64, lambda: f64, multipliers: &[f64]) -> Vec<f64> {
    multipliers.iter().map(|m| m * lambda / (sigma * sigma)).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTimings {
    pub grid: f64,
    pub extract: f64,
    pub select_and_estimate: f64,
    pub reproject: f64,
    pub image_estimation: f64,
}

impl StepTimings {
    pub fn total(&self) -> f64 {
        self.grid + self.extract + self.select_and_estimate + self.reproject + self.image_estimation
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub beta: f64,
    pub patches: usize,
    pub ops: OpCounter,
    /// Seconds per step.
    pub timings: StepTimings,
    pub solve: SolveReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub lambda: f64,
    pub init: Option<SolveReport>,
    pub init_seconds: f64,
    pub iterations: Vec<IterationStats>,
}

impl SolverStats {
    pub fn total_ops(&self) -> OpCounter {
        let mut t = OpCounter::default();
        for it in &self.iterations {
            t += it.ops;
        }
        t
    }

    pub fn total_patches(&self) -> usize {
        self.iterations.iter().map(|i| i.patches).sum()
    }

    pub fn total_seconds(&self) -> f64 {
        self.init_seconds + self.iterations.iter().map(|i| i.timings.total()).sum::<f64>()
    }

    /// Mean number of selection scores evaluated per patch.
    pub fn score_evals_per_patch(&self) -> f64 {
        self.total_ops().score_evals as f64 / self.total_patches().max(1) as f64
    }

    /// Whether every CG solve met its tolerance.
    pub fn all_converged(&self) -> bool {
        self.init.is_none_or(|r| r.converged) && self.iterations.iter().all(|i| i.solve.converged)
    }
}

#[derive(Debug, Clone)]
pub struct Restoration {
    /// Unclamped estimate; clamp before writing to disk.
    pub image: Image,
    pub stats: SolverStats,
}

/// Model actually used by a configuration: flattened at `rho` when the flat
/// tail is on and the input is full-rank, expanded to full rank when it is off.
pub fn prepare_model(model: &GmmModel, config: &RestorationConfig) -> Result<GmmModel> {
    if config.use_flat_tail {
        if model.is_exact() && config.rho < 1.0 {
            model.flattened(config.rho)
        } else {
            Ok(model.clone())
        }
    } else {
        model.to_full_rank()
    }
}

/// Search tree whose leaves match `prepare_model(model, config)`. Levels
/// default to [`default_levels`] for the model size.
pub fn build_tree_for(model: &GmmModel, config: &RestorationConfig, levels: Option<&[usize]>, seed: u64) -> Result<GmmTree> {
    let levels = levels.map_or_else(|| default_levels(model.len()), <[usize]>::to_vec);
    if config.use_flat_tail {
        build_tree(model, &levels, config.rho, seed)
    } else {
        build_tree(&model.to_full_rank()?, &levels, 1.0, seed)
    }
}

/// Restores `y` observed through `op`. The model is used as given; call
/// [`prepare_model`] first to apply the flat-tail setting.
pub fn restore(
    y: &Image,
    op: &DegradationOperator,
    model: &GmmModel,
    tree: Option<&GmmTree>,
    config: &RestorationConfig,
) -> Result<Restoration> {
    let side = model.patch_side()?;
    config.validate(side)?;
    if y.dims() != op.output_dims() {
        return Err(FepllError::InvalidInput(format!(
            "observation is {}x{} but the operator produces {}x{}",
            y.height(),
            y.width(),
            op.output_dims().0,
            op.output_dims().1
        )));
    }
    let tree = if config.use_tree {
        let t = tree.ok_or_else(|| FepllError::InvalidInput("search tree requested but none supplied".into()))?;
        t.check_matches(model)?;
        Some(t)
    } else {
        None
    };
    match config.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| FepllError::InvalidInput(format!("cannot start thread pool: {e}")))?
            .install(|| run(y, op, model, tree, config)),
        None => run(y, op, model, tree, config),
    }
}

fn run(
    y: &Image,
    op: &DegradationOperator,
    model: &GmmModel,
    tree: Option<&GmmTree>,
    config: &RestorationConfig,
) -> Result<Restoration> {
    let sigma = config.sigma_unit();
    let lambda = op.lambda(sigma)?;
    let betas = beta_schedule(sigma, lambda, &config.beta_multipliers);
    let (h, w) = op.input_dims();
    let side = model.patch_side()?;
    let p = model.patch_dim();

    let start = Instant::now();
    let (mut x, init) = match op.kind() {
        OperatorKind::Identity => (y.clone(), None),
        _ => {
            let (x0, rep) = op.init_estimate(y, sigma, lambda, &config.cg)?;
            (x0, Some(rep))
        }
    };
    let init_seconds = start.elapsed().as_secs_f64();

    let mut iterations = Vec::with_capacity(betas.len());
    for (t, (&beta, &mult)) in betas.iter().zip(&config.beta_multipliers).enumerate() {
        let mut timings = StepTimings::default();
        let clock = Instant::now();
        let grid = sample_grid(config.grid, h, w, side, config.spacing, config.seed, t as u64)?;
        timings.grid = clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let mut batch = extract_patches(&x, &grid)?;
        timings.extract = clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let contexts = model.contexts(beta);
        let tree_contexts = tree.map(|t| t.contexts(beta));
        let ops = batch
            .values
            .par_chunks_mut(p)
            .fold(
                || (OpCounter::default(), vec![0.0; p]),
                |(mut ops, mut out), patch| {
                    let k = match (tree, &tree_contexts) {
                        (Some(t), Some(tc)) => select_in_tree(t, tc, patch, &mut ops),
                        _ => select_with(&contexts, patch, &mut ops),
                    };
                    contexts[k].wiener_into(patch, &mut out, &mut ops);
                    patch.copy_from_slice(&out);
                    (ops, out)
                },
            )
            .map(|(ops, _)| ops)
            .reduce(OpCounter::default, |mut a, b| {
                a += b;
                a
            });
        timings.select_and_estimate = clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let x_tilde = reproject(&batch, &grid)?;
        timings.reproject = clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        // β σ² = m_t λ
        let (x_new, solve) = op.solve_image_estimation(y, &x_tilde, mult * lambda, &config.cg)?;
        timings.image_estimation = clock.elapsed().as_secs_f64();
        x = x_new;
        if x.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(FepllError::Numerical(format!("non-finite pixel after iteration {}", t + 1)));
        }
        iterations.push(IterationStats { beta, patches: grid.len(), ops, timings, solve });
    }
    Ok(Restoration { image: x, stats: SolverStats { lambda, init, init_seconds, iterations } })
}

/// Component selected for every patch of `grid` at coupling `beta`, without
/// running the estimation step.
pub fn select_patches(
    image: &Image,
    model: &GmmModel,
    tree: Option<&GmmTree>,
    beta: f64,
    grid: &crate::patches::SampleGrid,
) -> Result<(Vec<usize>, OpCounter)> {
    let batch = extract_patches(image, grid)?;
    let contexts: Vec<ScoreContext<'_>> = model.contexts(beta);
    let tree_contexts = tree.map(|t| t.contexts(beta));
    let mut ops = OpCounter::default();
    let picks = (0..batch.len())
        .map(|i| match (tree, &tree_contexts) {
            (Some(t), Some(tc)) => select_in_tree(t, tc, batch.patch(i), &mut ops),
            _ => select_with(&contexts, batch.patch(i), &mut ops),
        })
        .collect();
    Ok((picks, ops))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileResult {
    pub name: String,
    pub metrics: Option<MetricReport>,
    pub seconds: f64,
    pub ops: OpCounter,
    pub patches: usize,
    pub score_evals_per_patch: f64,
    pub converged: bool,
}

/// Runs each named configuration on the same observation. Profiles using the
/// tree take the first of `trees` whose leaves match their prepared model.
/// Metrics are computed against `reference` on the clamped output when given.
pub fn compare_profiles(
    y: &Image,
    op: &DegradationOperator,
    model: &GmmModel,
    trees: &[GmmTree],
    profiles: &[(String, RestorationConfig)],
    reference: Option<&Image>,
) -> Result<Vec<ProfileResult>> {
    profiles
        .iter()
        .map(|(name, cfg)| {
            let prepared = prepare_model(model, cfg)?;
            let tree = if cfg.use_tree {
                Some(trees.iter().find(|t| t.check_matches(&prepared).is_ok()).ok_or_else(|| {
                    FepllError::InvalidInput(format!("no search tree matches the model of profile {name}"))
                })?)
            } else {
                None
            };
            let start = Instant::now();
            let out = restore(y, op, &prepared, tree, cfg)?;
            let seconds = start.elapsed().as_secs_f64();
            let metrics = reference.map(|r| evaluate(&out.image.clamped(), r)).transpose()?;
            Ok(ProfileResult {
                name: name.clone(),
                metrics,
                seconds,
                ops: out.stats.total_ops(),
                patches: out.stats.total_patches(),
                score_evals_per_patch: out.stats.score_evals_per_patch(),
                converged: out.stats.all_converged(),
            })
        })
        .collect()
}
