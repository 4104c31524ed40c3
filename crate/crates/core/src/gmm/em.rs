//! Desk-scale EM training of zero-mean patch mixtures.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{eigen_from_covariance, Eigenbasis, FlatTailComponent, GmmModel};
use crate::error::{FepllError, Result};

/// Relative eigenvalue floor applied after every M-step (`floor = 1e-8 * trace / P`).
pub const EIGEN_FLOOR: f64 = 1e-8;

/// A component whose effective sample count falls below this is re-seeded.
const EMPTY_CLUSTER_MASS: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct EmConfig {
    pub components: usize,
    pub iterations: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct EmReport {
    pub model: GmmModel,
    /// Mean per-patch log-likelihood before each M-step, plus the final value.
    pub log_likelihoods: Vec<f64>,
    /// Number of empty-cluster re-seeds performed.
    pub reseeds: usize,
    /// Final posterior responsibilities (`N x K`, row-major).
    pub responsibilities: Vec<f64>,
}

struct Component {
    weight: f64,
    eig: Eigenbasis,
}

/// Fits a `K`-component zero-mean mixture to DC-removed patches.
///
/// `patches` holds `N` patches of `patch_dim` values each, row after row.
/// Initialization picks `K` seed directions k-means++ style (probability
/// proportional to `‖z‖² · (1 - cos²)` against the nearest seed), assigns every
/// patch to its closest seed direction and runs one M-step on that hard
/// assignment. A component that empties out is re-seeded from the patch with
/// the lowest likelihood under the current mixture.
pub fn em_train(patches: &[f64], patch_dim: usize, config: &EmConfig) -> Result<EmReport> {
    let p = patch_dim;
    let k = config.components;
    if p == 0 || patches.len() % p != 0 {
        return Err(FepllError::InvalidInput(format!(
            "patch buffer of length {} is not a multiple of {p}",
            patches.len()
        )));
    }
    let n = patches.len() / p;
    if k == 0 {
        return Err(FepllError::InvalidInput("need at least one component".into()));
    }
    if k > n {
        return Err(FepllError::InvalidInput(format!("{k} components requested but only {n} patches")));
    }
    let data = DMatrix::from_row_slice(n, p, patches);
    let global = weighted_covariance(&data, None, n as f64);

    let assignment = seed_assignment(&data, k, config.seed);
    let mut resp = vec![0.0; n * k];
    for (i, &a) in assignment.iter().enumerate() {
        resp[i * k + a] = 1.0;
    }
    let mut reseeds = 0;
    let mut comps = m_step(&data, &resp, k, &global, &mut reseeds, None)?;

    let mut lls = Vec::with_capacity(config.iterations + 1);
    for _ in 0..config.iterations {
        let (ll, point_ll) = e_step(&data, &comps, &mut resp);
        lls.push(ll);
        comps = m_step(&data, &resp, k, &global, &mut reseeds, Some(&point_ll))?;
    }
    let (ll, _) = e_step(&data, &comps, &mut resp);
    lls.push(ll);

    let total: f64 = comps.iter().map(|c| c.weight).sum();
    let components = comps
        .iter()
        .map(|c| FlatTailComponent::exact(c.weight / total, &c.eig))
        .collect::<Result<Vec<_>>>()?;
    let model = GmmModel::new(p, 1.0, super::normalize_weights(components))?;
    Ok(EmReport { model, log_likelihoods: lls, reseeds, responsibilities: resp })
}

fn seed_assignment(data: &DMatrix<f64>, k: usize, seed: u64) -> Vec<usize> {
    let (n, p) = data.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let norms: Vec<f64> = (0..n).map(|i| data.row(i).norm_squared()).collect();
    let unit: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let s = norms[i].sqrt();
            (0..p).map(|j| if s > 0.0 { data[(i, j)] / s } else { 0.0 }).collect()
        })
        .collect();
    let cos2 = |a: usize, b: usize| {
        let d: f64 = unit[a].iter().zip(&unit[b]).map(|(x, y)| x * y).sum();
        d * d
    };
    let mut centers = vec![pick_weighted(&mut rng, &norms)];
    let mut best_cos2: Vec<f64> = (0..n).map(|i| cos2(i, centers[0])).collect();
    while centers.len() < k {
        let weights: Vec<f64> = (0..n).map(|i| norms[i] * (1.0 - best_cos2[i]).max(0.0)).collect();
        let next = pick_weighted(&mut rng, &weights);
        // degenerate data (all patches collinear or zero): fall back to an unused index
        let next = if centers.contains(&next) { (0..n).find(|i| !centers.contains(i)).unwrap() } else { next };
        for (i, b) in best_cos2.iter_mut().enumerate() {
            *b = b.max(cos2(i, next));
        }
        centers.push(next);
    }
    (0..n)
        .map(|i| {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (c, &ci) in centers.iter().enumerate() {
                let v = cos2(i, ci);
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn pick_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return rng.random_range(0..weights.len());
    }
    let mut t = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        t -= w;
        if t < 0.0 {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
}

/// Fills `resp` with posterior responsibilities; returns the mean log-likelihood
/// and the per-patch log-likelihoods.
fn e_step(data: &DMatrix<f64>, comps: &[Component], resp: &mut [f64]) -> (f64, Vec<f64>) {
    let (n, p) = data.shape();
    let k = comps.len();
    let log2pi = (2.0 * std::f64::consts::PI).ln();
    for (c, comp) in comps.iter().enumerate() {
        let coeffs = data * &comp.eig.basis;
        let logdet: f64 = comp.eig.eigenvalues.iter().map(|s| s.ln()).sum();
        let inv: Vec<f64> = comp.eig.eigenvalues.iter().map(|s| 1.0 / s).collect();
        let base = comp.weight.ln() - 0.5 * (p as f64 * log2pi + logdet);
        for i in 0..n {
            let maha: f64 = (0..p).map(|j| coeffs[(i, j)] * coeffs[(i, j)] * inv[j]).sum();
            resp[i * k + c] = base - 0.5 * maha;
        }
    }
    let mut point_ll = Vec::with_capacity(n);
    for row in resp.chunks_exact_mut(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
        point_ll.push(lse);
    }
    let mean = point_ll.iter().sum::<f64>() / n as f64;
    (mean, point_ll)
}

fn m_step(
    data: &DMatrix<f64>,
    resp: &[f64],
    k: usize,
    global: &DMatrix<f64>,
    reseeds: &mut usize,
    point_ll: Option<&[f64]>,
) -> Result<Vec<Component>> {
    let n = data.nrows();
    let mut used_reseed = Vec::new();
    let mut out = Vec::with_capacity(k);
    for c in 0..k {
        let w: Vec<f64> = (0..n).map(|i| resp[i * k + c]).collect();
        let mass: f64 = w.iter().sum();
        let cov = if mass < EMPTY_CLUSTER_MASS {
            *reseeds += 1;
            let worst = lowest_likelihood(point_ll, n, &used_reseed);
            used_reseed.push(worst);
            let z = data.row(worst).transpose();
            out.push(Component { weight: 1.0 / n as f64, eig: floored_eigen(&(global * 0.5 + &z * z.transpose()))? });
            continue;
        } else {
            weighted_covariance(data, Some(&w), mass)
        };
        out.push(Component { weight: mass / n as f64, eig: floored_eigen(&cov)? });
    }
    Ok(out)
}

fn lowest_likelihood(point_ll: Option<&[f64]>, n: usize, exclude: &[usize]) -> usize {
    match point_ll {
        Some(ll) => (0..n)
            .filter(|i| !exclude.contains(i))
            .min_by(|&a, &b| ll[a].total_cmp(&ll[b]))
            .unwrap_or(0),
        None => (0..n).find(|i| !exclude.contains(i)).unwrap_or(0),
    }
}

fn weighted_covariance(data: &DMatrix<f64>, weights: Option<&[f64]>, mass: f64) -> DMatrix<f64> {
    let scaled = match weights {
        Some(w) => {
            let mut m = data.clone();
            for (i, mut row) in m.row_iter_mut().enumerate() {
                row *= w[i];
            }
            m
        }
        None => data.clone(),
    };
    let cov = scaled.transpose() * data / mass;
    (&cov + cov.transpose()) * 0.5
}

fn floored_eigen(cov: &DMatrix<f64>) -> Result<Eigenbasis> {
    let mut eig = eigen_from_covariance(cov)?;
    let p = eig.dim();
    let floor = (EIGEN_FLOOR * eig.trace() / p as f64).max(f64::MIN_POSITIVE);
    for s in &mut eig.eigenvalues {
        *s = s.max(floor);
    }
    Ok(eig)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_more_components_than_patches() {
        let patches = vec![1.0, -1.0, 0.5, -0.5];
        let cfg = EmConfig { components: 3, iterations: 1, seed: 0 };
        assert!(em_train(&patches, 2, &cfg).is_err());
    }

    #[test]
    fn eigenvalues_are_floored() {
        // all patches on one line: the orthogonal direction gets the floor
        let patches: Vec<f64> = (0..50).flat_map(|i| [i as f64 - 25.0, 0.0]).collect();
        let cfg = EmConfig { components: 1, iterations: 2, seed: 1 };
        let report = em_train(&patches, 2, &cfg).unwrap();
        let comp = &report.model.components()[0];
        let s = comp.kept_eigenvalues();
        assert!(s[1] > 0.0);
        assert!((s[1] - EIGEN_FLOOR * (s[0] + s[1]) / 2.0).abs() < 1e-9 * s[0]);
    }
}
