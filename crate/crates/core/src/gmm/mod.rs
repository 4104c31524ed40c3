//! Zero-mean Gaussian mixture patch priors stored in eigen form.
//!
//! Every component keeps its leading `rank` eigenvectors and eigenvalues and
//! replaces the remaining spectrum by its mean (`tail_value`). A component
//! with `rank == patch_dim` is the exact model. Selection scores and Wiener
//! estimates are computed in the space of projection coefficients, at a cost
//! of `O(P * rank)` per component instead of `O(P^2)`.

mod em;
mod format;

pub use em::{em_train, EmConfig, EmReport};
pub use format::{import_text_model, model_from_bytes, model_to_bytes, read_model, write_model};
pub(crate) use format::{put_component, read_component};

use nalgebra::{DMatrix, SymmetricEigen};

use crate::counters::OpCounter;
use crate::error::{check_dim, FepllError, Result};
use crate::linalg::{axpy, dot, sq_norm};

/// Default fraction of the spectrum kept before the flat tail.
pub const DEFAULT_RHO: f64 = 0.95;

const SYMMETRY_TOL: f64 = 1e-10;
const NEGATIVE_EIGEN_TOL: f64 = 1e-6;
pub(crate) const ORTHONORMAL_TOL: f64 = 1e-10;

/// Orthonormal eigenvectors (columns) with non-increasing, nonnegative eigenvalues.
#[derive(Debug, Clone)]
pub struct Eigenbasis {
    pub basis: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

impl Eigenbasis {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn trace(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let scaled = &self.basis * DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.eigenvalues));
        scaled * self.basis.transpose()
    }
}

/// Eigendecomposition of a covariance matrix, sorted by decreasing eigenvalue.
///
/// Slightly negative eigenvalues (down to `-1e-6`) from round-off are clamped
/// to zero; anything more negative is not a covariance.
pub fn eigen_from_covariance(cov: &DMatrix<f64>) -> Result<Eigenbasis> {
    let p = cov.nrows();
    if p == 0 || cov.ncols() != p {
        return Err(FepllError::InvalidInput(format!("covariance must be square, got {}x{}", p, cov.ncols())));
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(FepllError::InvalidInput("covariance has non-finite entries".into()));
    }
    let scale = cov.amax().max(1.0);
    for i in 0..p {
        for j in (i + 1)..p {
            if (cov[(i, j)] - cov[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(FepllError::InvalidInput(format!(
                    "covariance is not symmetric at ({i}, {j}): {} vs {}",
                    cov[(i, j)],
                    cov[(j, i)]
                )));
            }
        }
    }
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    if let Some(&last) = order.last() {
        let smallest = eig.eigenvalues[last];
        if smallest < -NEGATIVE_EIGEN_TOL {
            return Err(FepllError::InvalidInput(format!(
                "matrix has eigenvalue {smallest:e}; not a covariance"
            )));
        }
    }
    let mut basis = DMatrix::zeros(p, p);
    let mut eigenvalues = Vec::with_capacity(p);
    for (dst, &src) in order.iter().enumerate() {
        basis.set_column(dst, &eig.eigenvectors.column(src));
        eigenvalues.push(eig.eigenvalues[src].max(0.0));
    }
    Ok(Eigenbasis { basis, eigenvalues })
}

/// A Gaussian component whose spectrum is flat beyond `rank`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatTailComponent {
    weight: f64,
    patch_dim: usize,
    rank: usize,
    /// `patch_dim x rank`, column-major.
    kept_basis: Vec<f64>,
    kept_eigenvalues: Vec<f64>,
    tail_value: f64,
    log_weight_term: f64,
}

impl FlatTailComponent {
    /// Assembles a component from stored parts, checking every invariant.
    pub fn from_parts(
        weight: f64,
        patch_dim: usize,
        kept_eigenvalues: Vec<f64>,
        kept_basis: Vec<f64>,
        tail_value: f64,
    ) -> Result<Self> {
        let rank = kept_eigenvalues.len();
        let comp = Self {
            weight,
            patch_dim,
            rank,
            kept_basis,
            kept_eigenvalues,
            tail_value: if rank == patch_dim { 0.0 } else { tail_value },
            log_weight_term: -2.0 * weight.ln(),
        };
        comp.validate()?;
        Ok(comp)
    }

    /// Exact (full-rank) component.
    pub fn exact(weight: f64, eig: &Eigenbasis) -> Result<Self> {
        Self::from_eigen_rank(weight, eig, eig.dim())
    }

    fn from_eigen_rank(weight: f64, eig: &Eigenbasis, rank: usize) -> Result<Self> {
        let p = eig.dim();
        let kept_basis = eig.basis.columns(0, rank).iter().copied().collect();
        let kept_eigenvalues = eig.eigenvalues[..rank].to_vec();
        let tail_value = if rank < p { eig.eigenvalues[rank..].iter().sum::<f64>() / (p - rank) as f64 } else { 0.0 };
        Self::from_parts(weight, p, kept_eigenvalues, kept_basis, tail_value)
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_dim
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn is_exact(&self) -> bool {
        self.rank == self.patch_dim
    }

    pub fn kept_eigenvalues(&self) -> &[f64] {
        &self.kept_eigenvalues
    }

    pub fn tail_value(&self) -> f64 {
        self.tail_value
    }

    pub fn log_weight_term(&self) -> f64 {
        self.log_weight_term
    }

    /// Column-major `patch_dim x rank` basis.
    pub fn kept_basis(&self) -> &[f64] {
        &self.kept_basis
    }

    #[inline]
    pub fn basis_column(&self, j: usize) -> &[f64] {
        &self.kept_basis[j * self.patch_dim..(j + 1) * self.patch_dim]
    }

    pub fn trace(&self) -> f64 {
        self.kept_eigenvalues.iter().sum::<f64>() + (self.patch_dim - self.rank) as f64 * self.tail_value
    }

    pub(crate) fn with_weight(&self, weight: f64) -> Self {
        Self { weight, log_weight_term: -2.0 * weight.ln(), ..self.clone() }
    }

    /// Dense covariance `Ū S̄ Ūᵗ + λ (I - Ū Ūᵗ)`.
    pub fn covariance(&self) -> DMatrix<f64> {
        self.dense_with(|s| s, self.tail_value)
    }

    /// Dense inverse covariance; fails if any retained or tail variance is zero.
    pub fn precision(&self) -> Result<DMatrix<f64>> {
        if self.kept_eigenvalues.iter().any(|&s| s <= 0.0) || (self.rank < self.patch_dim && self.tail_value <= 0.0) {
            return Err(FepllError::Numerical("singular covariance (zero variance direction)".into()));
        }
        let inv_tail = if self.rank < self.patch_dim { 1.0 / self.tail_value } else { 0.0 };
        Ok(self.dense_with(|s| 1.0 / s, inv_tail))
    }

    fn dense_with(&self, f: impl Fn(f64) -> f64, tail: f64) -> DMatrix<f64> {
        let p = self.patch_dim;
        let mut out = DMatrix::from_diagonal_element(p, p, tail);
        for j in 0..self.rank {
            let u = self.basis_column(j);
            let coef = f(self.kept_eigenvalues[j]) - tail;
            for c in 0..p {
                let uc = coef * u[c];
                for r in 0..p {
                    out[(r, c)] += u[r] * uc;
                }
            }
        }
        out
    }

    /// Full eigen form of the dense covariance (used when re-flattening).
    pub fn to_eigenbasis(&self) -> Result<Eigenbasis> {
        if self.is_exact() {
            let basis = DMatrix::from_column_slice(self.patch_dim, self.patch_dim, &self.kept_basis);
            Ok(Eigenbasis { basis, eigenvalues: self.kept_eigenvalues.clone() })
        } else {
            eigen_from_covariance(&self.covariance())
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_dim;
        let bad = |msg: String| Err(FepllError::Format(msg));
        if p == 0 {
            return bad("patch dimension must be positive".into());
        }
        if self.rank > p {
            return bad(format!("rank {} exceeds patch dimension {p}", self.rank));
        }
        if self.kept_basis.len() != p * self.rank {
            return bad(format!("basis has {} entries, expected {}", self.kept_basis.len(), p * self.rank));
        }
        if !(self.weight > 0.0 && self.weight.is_finite()) {
            return bad(format!("component weight {} is not positive", self.weight));
        }
        if !(self.tail_value >= 0.0 && self.tail_value.is_finite()) {
            return bad(format!("tail value {} is invalid", self.tail_value));
        }
        if self.kept_eigenvalues.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("eigenvalues must be finite and nonnegative".into());
        }
        if self.kept_eigenvalues.windows(2).any(|w| w[0] < w[1]) {
            return bad("eigenvalues are not sorted in non-increasing order".into());
        }
        if self.rank < p {
            if let Some(&smallest) = self.kept_eigenvalues.last() {
                if smallest < self.tail_value {
                    return bad(format!("tail value {} exceeds smallest kept eigenvalue {smallest}", self.tail_value));
                }
            }
        }
        let dev = self.orthonormality_error();
        if !(dev <= ORTHONORMAL_TOL) {
            return bad(format!("basis is not orthonormal (max deviation {dev:e})"));
        }
        Ok(())
    }

    /// Max absolute deviation of `Ūᵗ Ū` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for a in 0..self.rank {
            for b in a..self.rank {
                let target = if a == b { 1.0 } else { 0.0 };
                let d = (dot(self.basis_column(a), self.basis_column(b)) - target).abs();
                worst = if d.is_nan() { f64::NAN } else { worst.max(d) };
            }
        }
        worst
    }
}

/// Smallest rank whose leading eigenvalues hold at least `rho` of the trace;
/// the rest of the spectrum is replaced by its mean.
pub fn flatten_component(weight: f64, eig: &Eigenbasis, rho: f64) -> Result<FlatTailComponent> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(FepllError::InvalidInput(format!("rho must lie in (0, 1], got {rho}")));
    }
    let p = eig.dim();
    let rank = if rho >= 1.0 {
        p
    } else {
        let target = rho * eig.trace() * (1.0 - 1e-12);
        let mut cum = 0.0;
        let mut rank = p;
        for r in 0..=p {
            if cum >= target {
                rank = r;
                break;
            }
            if r < p {
                cum += eig.eigenvalues[r];
            }
        }
        rank
    };
    FlatTailComponent::from_eigen_rank(weight, eig, rank)
}

/// Mixture of zero-mean components over `patch_dim`-pixel patches.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    patch_dim: usize,
    rho: f64,
    components: Vec<FlatTailComponent>,
}

impl GmmModel {
    pub fn new(patch_dim: usize, rho: f64, components: Vec<FlatTailComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(FepllError::InvalidInput("a mixture needs at least one component".into()));
        }
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(FepllError::InvalidInput(format!("rho must lie in (0, 1], got {rho}")));
        }
        for c in &components {
            check_dim(patch_dim, c.patch_dim())?;
        }
        let total: f64 = components.iter().map(|c| c.weight()).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(FepllError::InvalidInput(format!("weights sum to {total}, expected 1")));
        }
        Ok(Self { patch_dim, rho, components })
    }

    /// Builds a full-rank model from `(weight, covariance)` pairs; weights are normalized.
    pub fn from_covariances(patch_dim: usize, entries: &[(f64, DMatrix<f64>)]) -> Result<Self> {
        let total: f64 = entries.iter().map(|(w, _)| *w).sum();
        if !(total > 0.0) {
            return Err(FepllError::InvalidInput("weights must be positive".into()));
        }
        let comps = entries
            .iter()
            .map(|(w, cov)| {
                check_dim(patch_dim, cov.nrows())?;
                FlatTailComponent::exact(w / total, &eigen_from_covariance(cov)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(patch_dim, 1.0, normalize_weights(comps))
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_dim
    }

    /// Patch side length; `patch_dim` must be a perfect square.
    pub fn patch_side(&self) -> Result<usize> {
        let side = (self.patch_dim as f64).sqrt().round() as usize;
        if side * side == self.patch_dim {
            Ok(side)
        } else {
            Err(FepllError::InvalidInput(format!("patch dimension {} is not a square", self.patch_dim)))
        }
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn components(&self) -> &[FlatTailComponent] {
        &self.components
    }

    pub fn is_exact(&self) -> bool {
        self.components.iter().all(FlatTailComponent::is_exact)
    }

    pub fn mean_rank(&self) -> f64 {
        self.components.iter().map(|c| c.rank() as f64).sum::<f64>() / self.len() as f64
    }

    /// Flat-tail version of an exact model.
    pub fn flattened(&self, rho: f64) -> Result<Self> {
        if !self.is_exact() {
            return Err(FepllError::InvalidInput(
                "model is already flattened; flatten from the full-rank model instead".into(),
            ));
        }
        let comps = self
            .components
            .iter()
            .map(|c| flatten_component(c.weight(), &c.to_eigenbasis()?, rho))
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.patch_dim, rho, comps)
    }

    /// Full-rank model with the same covariances (tails expanded into explicit
    /// eigendirections).
    pub fn to_full_rank(&self) -> Result<Self> {
        if self.is_exact() {
            return Ok(self.clone());
        }
        let comps = self
            .components
            .iter()
            .map(|c| FlatTailComponent::exact(c.weight(), &c.to_eigenbasis()?))
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.patch_dim, 1.0, comps)
    }

    pub fn contexts(&self, beta: f64) -> Vec<ScoreContext<'_>> {
        self.components.iter().map(|c| ScoreContext::new(c, beta)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.components {
            c.validate()?;
        }
        Ok(())
    }
}

/// Rescales weights to sum exactly to one (up to rounding).
pub(crate) fn normalize_weights(comps: Vec<FlatTailComponent>) -> Vec<FlatTailComponent> {
    let total: f64 = comps.iter().map(|c| c.weight()).sum();
    comps.into_iter().map(|c| c.with_weight(c.weight() / total)).collect()
}

/// Per-component quantities that depend on the coupling weight `beta`.
#[derive(Debug, Clone)]
pub struct ScoreContext<'a> {
    comp: &'a FlatTailComponent,
    beta: f64,
    /// `ι + Σ log ν_j (+ (P - r) log ν_P)`.
    offset: f64,
    /// `1/ν_j - 1/ν_P` (or `1/ν_j` without a tail).
    inv_nu_diff: Vec<f64>,
    inv_nu_tail: f64,
    /// `γ_j - γ_P` (or `γ_j` without a tail).
    gamma_diff: Vec<f64>,
    gamma_tail: f64,
}

impl<'a> ScoreContext<'a> {
    /// `beta = f64::INFINITY` is accepted and means no added noise variance.
    pub fn new(comp: &'a FlatTailComponent, beta: f64) -> Self {
        let noise = 1.0 / beta;
        let has_tail = comp.rank() < comp.patch_dim();
        let nu: Vec<f64> = comp.kept_eigenvalues().iter().map(|s| s + noise).collect();
        let gamma: Vec<f64> = comp.kept_eigenvalues().iter().zip(&nu).map(|(s, n)| s / n).collect();
        let nu_tail = comp.tail_value() + noise;
        let (inv_nu_tail, gamma_tail) = if has_tail { (1.0 / nu_tail, comp.tail_value() / nu_tail) } else { (0.0, 0.0) };
        let mut offset = comp.log_weight_term() + nu.iter().map(|n| n.ln()).sum::<f64>();
        if has_tail {
            offset += (comp.patch_dim() - comp.rank()) as f64 * nu_tail.ln();
        }
        Self {
            comp,
            beta,
            offset,
            inv_nu_diff: nu.iter().map(|n| 1.0 / n - inv_nu_tail).collect(),
            inv_nu_tail,
            gamma_diff: gamma.iter().map(|g| g - gamma_tail).collect(),
            gamma_tail,
        }
    }

    pub fn component(&self) -> &'a FlatTailComponent {
        self.comp
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn has_tail(&self) -> bool {
        self.comp.rank() < self.comp.patch_dim()
    }

    pub fn nu_tail(&self) -> f64 {
        self.comp.tail_value() + 1.0 / self.beta
    }

    pub fn gamma_tail(&self) -> f64 {
        self.gamma_tail
    }

    /// Selection score `-2 log(w N(z; 0, Σ + I/β))` without the shared `P log 2π`.
    ///
    /// `sq_norm` must be `‖patch‖²`; it is computed once per patch by the caller.
    #[inline]
    pub fn score(&self, patch: &[f64], sq_norm: f64, ops: &mut OpCounter) -> f64 {
        debug_assert_eq!(patch.len(), self.comp.patch_dim());
        let r = self.comp.rank();
        let mut s = self.offset;
        for (j, coef) in self.inv_nu_diff.iter().enumerate() {
            let c = dot(self.comp.basis_column(j), patch);
            s += c * c * coef;
        }
        let mut mults = (r * self.comp.patch_dim() + 2 * r) as u64;
        if self.has_tail() {
            s += sq_norm * self.inv_nu_tail;
            mults += 1;
        }
        ops.score_evals += 1;
        ops.select_mults += mults;
        s
    }

    /// Wiener estimate `(Σ + I/β)⁻¹ Σ z̃` written into `out`.
    #[inline]
    pub fn wiener_into(&self, patch: &[f64], out: &mut [f64], ops: &mut OpCounter) {
        let p = self.comp.patch_dim();
        debug_assert_eq!(patch.len(), p);
        debug_assert_eq!(out.len(), p);
        let r = self.comp.rank();
        let mut mults = (2 * r * p + r) as u64;
        if self.has_tail() {
            for (o, z) in out.iter_mut().zip(patch) {
                *o = self.gamma_tail * z;
            }
            mults += p as u64;
        } else {
            out.fill(0.0);
        }
        for (j, g) in self.gamma_diff.iter().enumerate() {
            let u = self.comp.basis_column(j);
            axpy(g * dot(u, patch), u, out);
        }
        ops.estimate_mults += mults;
    }

    pub fn wiener(&self, patch: &[f64], ops: &mut OpCounter) -> Vec<f64> {
        let mut out = vec![0.0; patch.len()];
        self.wiener_into(patch, &mut out, ops);
        out
    }
}

/// Score of an exact (full-rank) component.
pub fn score_exact(ctx: &ScoreContext<'_>, patch: &[f64]) -> Result<f64> {
    if !ctx.component().is_exact() {
        return Err(FepllError::InvalidInput("score_exact needs a full-rank component".into()));
    }
    check_dim(ctx.component().patch_dim(), patch.len())?;
    Ok(ctx.score(patch, sq_norm(patch), &mut OpCounter::default()))
}

/// Score of a flat-tail component with a precomputed `‖patch‖²`.
pub fn score_flat(ctx: &ScoreContext<'_>, patch: &[f64], patch_sq_norm: f64) -> Result<f64> {
    check_dim(ctx.component().patch_dim(), patch.len())?;
    Ok(ctx.score(patch, patch_sq_norm, &mut OpCounter::default()))
}

pub fn wiener_exact(ctx: &ScoreContext<'_>, patch: &[f64]) -> Result<Vec<f64>> {
    if !ctx.component().is_exact() {
        return Err(FepllError::InvalidInput("wiener_exact needs a full-rank component".into()));
    }
    wiener_flat(ctx, patch)
}

pub fn wiener_flat(ctx: &ScoreContext<'_>, patch: &[f64]) -> Result<Vec<f64>> {
    check_dim(ctx.component().patch_dim(), patch.len())?;
    Ok(ctx.wiener(patch, &mut OpCounter::default()))
}

/// Index of the lowest-scoring component; ties go to the lowest index.
#[inline]
pub fn select_with(contexts: &[ScoreContext<'_>], patch: &[f64], ops: &mut OpCounter) -> usize {
    let norm = sq_norm(patch);
    ops.select_mults += patch.len() as u64;
    argmin_score(contexts.iter().enumerate(), patch, norm, ops)
}

#[inline]
pub(crate) fn argmin_score<'c, 'a: 'c>(
    candidates: impl Iterator<Item = (usize, &'c ScoreContext<'a>)>,
    patch: &[f64],
    norm: f64,
    ops: &mut OpCounter,
) -> usize {
    let mut best = (usize::MAX, f64::INFINITY);
    for (idx, ctx) in candidates {
        let s = ctx.score(patch, norm, ops);
        if best.0 == usize::MAX || s < best.1 {
            best = (idx, s);
        }
    }
    best.0
}

/// Exhaustive Gaussian selection over all components of `contexts`.
pub fn select_exhaustive(contexts: &[ScoreContext<'_>], patch: &[f64]) -> Result<usize> {
    let first = contexts.first().ok_or_else(|| FepllError::InvalidInput("empty model".into()))?;
    check_dim(first.component().patch_dim(), patch.len())?;
    Ok(select_with(contexts, patch, &mut OpCounter::default()))
}
