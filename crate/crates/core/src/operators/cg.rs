//! Conjugate gradient for symmetric positive (semi)definite systems.

use serde::{Deserialize, Serialize};

use crate::error::{FepllError, Result};
use crate::linalg::{axpy, dot, sq_norm};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgConfig {
    /// Stop when `‖b - M x‖ ≤ tolerance · ‖b‖`.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self { tolerance: 1e-6, max_iterations: 200 }
    }
}

impl CgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(FepllError::InvalidInput(format!("CG tolerance must be positive, got {}", self.tolerance)));
        }
        Ok(())
    }
}

/// Outcome of an image-estimation or initialization solve.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SolveReport {
    /// CG iterations (0 for direct solves).
    pub iterations: usize,
    /// Relative residual `‖b - M x‖ / ‖b‖` of the returned solution.
    pub residual: f64,
    pub converged: bool,
}

/// Solves `M x = b` starting from `x`. Returns the final report; the caller
/// decides what to do when `converged` is false.
pub(crate) fn conjugate_gradient(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    x: &mut [f64],
    config: &CgConfig,
) -> SolveReport {
    let b_norm = sq_norm(b).sqrt();
    if b_norm == 0.0 {
        x.fill(0.0);
        return SolveReport { iterations: 0, residual: 0.0, converged: true };
    }
    let mx = apply(x);
    let mut r: Vec<f64> = b.iter().zip(&mx).map(|(b, m)| b - m).collect();
    let mut p = r.clone();
    let mut rr = sq_norm(&r);
    let target = config.tolerance * b_norm;
    let mut it = 0;
    while rr.sqrt() > target && it < config.max_iterations {
        let mp = apply(&p);
        let pmp = dot(&p, &mp);
        if !(pmp > 0.0) {
            break;
        }
        let alpha = rr / pmp;
        axpy(alpha, &p, x);
        axpy(-alpha, &mp, &mut r);
        let rr_new = sq_norm(&r);
        let beta = rr_new / rr;
        for (pv, rv) in p.iter_mut().zip(&r) {
            *pv = rv + beta * *pv;
        }
        rr = rr_new;
        it += 1;
    }
    // report the true residual, not the recursively updated one
    let mx = apply(x);
    let res = b.iter().zip(&mx).map(|(b, m)| (b - m) * (b - m)).sum::<f64>().sqrt() / b_norm;
    SolveReport { iterations: it, residual: res, converged: res <= config.tolerance }
}
