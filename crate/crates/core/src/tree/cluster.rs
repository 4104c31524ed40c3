//! Symmetric KL divergence between zero-mean Gaussians, balanced clustering
//! of components and mixture collapse.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, FepllError, Result};
use crate::gmm::{flatten_component, FlatTailComponent};

/// Maximum number of local-search sweeps per start.
pub const MAX_SWAP_SWEEPS: usize = 200;

/// Number of seeded starts of the clustering heuristic.
pub const RESTARTS: usize = 8;

/// A zero-mean Gaussian kept in dense form while the tree is assembled.
#[derive(Debug, Clone)]
pub(crate) struct DenseGaussian {
    pub weight: f64,
    pub cov: DMatrix<f64>,
}

/// `½ Tr(Σ₂⁻¹Σ₁ + Σ₁⁻¹Σ₂ − 2I)` for two flat-tail components.
pub fn symmetric_kl(a: &FlatTailComponent, b: &FlatTailComponent) -> Result<f64> {
    check_dim(a.patch_dim(), b.patch_dim())?;
    let (ca, pa) = (a.covariance(), a.precision()?);
    let (cb, pb) = (b.covariance(), b.precision()?);
    Ok(kl_dense(&ca, &pa, &cb, &pb))
}

/// Symmetric KL from dense covariances and their inverses. Both trace terms
/// reduce to elementwise products since the matrices are symmetric.
pub(crate) fn kl_dense(cov_a: &DMatrix<f64>, prec_a: &DMatrix<f64>, cov_b: &DMatrix<f64>, prec_b: &DMatrix<f64>) -> f64 {
    let p = cov_a.nrows() as f64;
    let t1: f64 = prec_b.iter().zip(cov_a.iter()).map(|(x, y)| x * y).sum();
    let t2: f64 = prec_a.iter().zip(cov_b.iter()).map(|(x, y)| x * y).sum();
    (0.5 * (t1 + t2) - p).max(0.0)
}

/// Pairwise symmetric KL matrix.
pub(crate) fn kl_matrix(covs: &[DMatrix<f64>], precs: &[DMatrix<f64>]) -> Vec<Vec<f64>> {
    let n = covs.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = kl_dense(&covs[i], &precs[i], &covs[j], &precs[j]);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

pub(crate) fn dense_precision(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = crate::gmm::eigen_from_covariance(cov)?;
    let p = eig.dim();
    if eig.eigenvalues.iter().any(|&s| s <= 0.0) {
        return Err(FepllError::Numerical("singular covariance in KL divergence".into()));
    }
    let mut scaled = eig.basis.clone();
    for j in 0..p {
        let inv = 1.0 / eig.eigenvalues[j];
        scaled.column_mut(j).scale_mut(inv);
    }
    Ok(scaled * eig.basis.transpose())
}

/// Sum of within-cluster pairwise distances (unordered pairs).
pub fn partition_objective(dist: &[Vec<f64>], partition: &[Vec<usize>]) -> f64 {
    partition
        .iter()
        .map(|g| {
            let mut s = 0.0;
            for (a, &i) in g.iter().enumerate() {
                for &j in &g[a + 1..] {
                    s += dist[i][j];
                }
            }
            s
        })
        .sum()
}

/// Balanced clustering of flat-tail components under the symmetric KL divergence.
pub fn balanced_cluster(
    components: &[FlatTailComponent],
    clusters: usize,
    min_size: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let covs: Vec<_> = components.iter().map(FlatTailComponent::covariance).collect();
    let precs = components.iter().map(FlatTailComponent::precision).collect::<Result<Vec<_>>>()?;
    balanced_cluster_by_distance(&kl_matrix(&covs, &precs), clusters, min_size, seed)
}

/// Partitions `0..n` into `clusters` groups of at least `min_size` members
/// each, minimizing the sum of within-group pairwise distances. The quadratic
/// growth of that sum with group size keeps groups roughly equal.
///
/// Each of [`RESTARTS`] starts picks a seeded first center followed by
/// farthest-first centers; groups then grow one member at a time, always
/// extending the currently smallest group with the unassigned item closest to
/// its members. Local search then applies single-item moves (keeping every
/// group at `min_size` or more) and pairwise swaps while they lower the
/// objective, for at most [`MAX_SWAP_SWEEPS`] sweeps. The best partition over
/// all starts is kept.
pub fn balanced_cluster_by_distance(
    dist: &[Vec<f64>],
    clusters: usize,
    min_size: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let n = dist.len();
    if clusters == 0 || clusters > n || clusters * min_size > n {
        return Err(FepllError::Infeasible(format!(
            "cannot split {n} items into {clusters} clusters of at least {min_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<Vec<usize>>)> = None;
    for _ in 0..RESTARTS.min(n) {
        let first = rng.random_range(0..n);
        let groups = cluster_from(dist, clusters, min_size, first);
        let obj = partition_objective(dist, &groups);
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, groups));
        }
    }
    Ok(best.map(|(_, g)| g).unwrap())
}

fn cluster_from(dist: &[Vec<f64>], clusters: usize, min_size: usize, first: usize) -> Vec<Vec<usize>> {
    let n = dist.len();
    let mut centers = vec![first];
    let mut nearest: Vec<f64> = (0..n).map(|i| dist[i][first]).collect();
    while centers.len() < clusters {
        let next = (0..n)
            .filter(|i| !centers.contains(i))
            .fold(None::<(usize, f64)>, |best, i| match best {
                Some((_, v)) if nearest[i] <= v => best,
                _ => Some((i, nearest[i])),
            })
            .map(|(i, _)| i)
            .unwrap();
        for (i, v) in nearest.iter_mut().enumerate() {
            *v = v.min(dist[i][next]);
        }
        centers.push(next);
    }

    let mut label = vec![usize::MAX; n];
    let mut sizes = vec![1usize; clusters];
    for (g, &c) in centers.iter().enumerate() {
        label[c] = g;
    }
    // sum of distances from every item to each group
    let mut to_group = vec![vec![0.0; clusters]; n];
    for (i, row) in to_group.iter_mut().enumerate() {
        for (g, &c) in centers.iter().enumerate() {
            row[g] = dist[i][c];
        }
    }
    for _ in clusters..n {
        let g = (0..clusters).min_by_key(|&g| (sizes[g], g)).unwrap();
        let pick = (0..n)
            .filter(|&i| label[i] == usize::MAX)
            .min_by(|&a, &b| to_group[a][g].total_cmp(&to_group[b][g]).then(a.cmp(&b)))
            .unwrap();
        label[pick] = g;
        sizes[g] += 1;
        for (i, row) in to_group.iter_mut().enumerate() {
            row[g] += dist[i][pick];
        }
    }

    for _ in 0..MAX_SWAP_SWEEPS {
        let mut improved = false;
        for a in 0..n {
            let ga = label[a];
            if let Some(gb) = (0..clusters)
                .filter(|&g| g != ga && sizes[ga] > min_size.max(1))
                .min_by(|&x, &y| to_group[a][x].total_cmp(&to_group[a][y]))
            {
                if to_group[a][gb] - to_group[a][ga] < -1e-12 {
                    for (i, row) in to_group.iter_mut().enumerate() {
                        row[ga] -= dist[i][a];
                        row[gb] += dist[i][a];
                    }
                    label[a] = gb;
                    sizes[ga] -= 1;
                    sizes[gb] += 1;
                    improved = true;
                }
            }
            for b in (a + 1)..n {
                let (ga, gb) = (label[a], label[b]);
                if ga == gb {
                    continue;
                }
                let delta = (to_group[a][gb] - dist[a][b]) + (to_group[b][ga] - dist[a][b])
                    - to_group[a][ga]
                    - to_group[b][gb];
                if delta < -1e-12 {
                    for (i, row) in to_group.iter_mut().enumerate() {
                        row[ga] += dist[i][b] - dist[i][a];
                        row[gb] += dist[i][a] - dist[i][b];
                    }
                    label[a] = gb;
                    label[b] = ga;
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }

    let mut out = vec![Vec::new(); clusters];
    for (i, &g) in label.iter().enumerate() {
        out[g].push(i);
    }
    out
}

/// Merges each group into one Gaussian: `w = Σ w_k`, `Σ = Σ w_k Σ_k / w`.
pub(crate) fn collapse_dense(items: &[DenseGaussian], partition: &[Vec<usize>]) -> Result<Vec<DenseGaussian>> {
    validate_partition(items.len(), partition)?;
    partition
        .iter()
        .map(|group| {
            let weight: f64 = group.iter().map(|&k| items[k].weight).sum();
            if !(weight > 0.0) {
                return Err(FepllError::InvalidInput("cannot collapse a zero-weight cluster".into()));
            }
            let p = items[group[0]].cov.nrows();
            let mut cov = DMatrix::zeros(p, p);
            for &k in group {
                cov += &items[k].cov * items[k].weight;
            }
            cov /= weight;
            Ok(DenseGaussian { weight, cov: (&cov + cov.transpose()) * 0.5 })
        })
        .collect()
}

/// Collapses flat-tail components group by group and re-flattens the merged
/// covariances at `rho`.
pub fn collapse(components: &[FlatTailComponent], partition: &[Vec<usize>], rho: f64) -> Result<Vec<FlatTailComponent>> {
    let dense: Vec<_> = components
        .iter()
        .map(|c| DenseGaussian { weight: c.weight(), cov: c.covariance() })
        .collect();
    collapse_dense(&dense, partition)?
        .iter()
        .map(|g| flatten_component(g.weight, &crate::gmm::eigen_from_covariance(&g.cov)?, rho))
        .collect()
}

pub(crate) fn validate_partition(n: usize, partition: &[Vec<usize>]) -> Result<()> {
    let mut seen = vec![false; n];
    for group in partition {
        if group.is_empty() {
            return Err(FepllError::InvalidInput("partition contains an empty group".into()));
        }
        for &i in group {
            if i >= n || seen[i] {
                return Err(FepllError::InvalidInput(format!("partition index {i} is out of range or repeated")));
            }
            seen[i] = true;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(FepllError::InvalidInput("partition does not cover every component".into()));
    }
    Ok(())
}
