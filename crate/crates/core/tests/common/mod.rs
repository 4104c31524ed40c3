//! Dense reference implementations and generators shared by the integration
//! tests. Nothing here uses eigenspace shortcuts: scores and filters are
//! computed from explicit covariance matrices with Cholesky/LU factorizations.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use fepll::gmm::GmmModel;
use fepll::patches::regular_grid;
use fepll::Image;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

/// Random symmetric positive definite matrix with eigenvalues decaying
/// geometrically from `top` (ratio `decay`), in a random orthonormal basis.
pub fn random_spd(rng: &mut ChaCha8Rng, p: usize, top: f64, decay: f64) -> DMatrix<f64> {
    let g = DMatrix::<f64>::from_fn(p, p, |_, _| StandardNormal.sample(rng));
    let q = g.qr().q();
    let d = DVector::from_fn(p, |i, _| top * decay.powi(i as i32) * rng.random_range(0.8..1.2));
    let m = &q * DMatrix::from_diagonal(&d) * q.transpose();
    (&m + m.transpose()) * 0.5
}

pub fn random_model(rng: &mut ChaCha8Rng, k: usize, p: usize) -> GmmModel {
    let entries: Vec<(f64, DMatrix<f64>)> = (0..k)
        .map(|_| {
            let top = rng.random_range(0.01..0.2);
            let decay = rng.random_range(0.6..0.9);
            (rng.random_range(0.2..1.0), random_spd(rng, p, top, decay))
        })
        .collect();
    GmmModel::from_covariances(p, &entries).unwrap()
}

/// Dense selection score `-2 log w + log det(Σ + I/β) + zᵗ (Σ + I/β)⁻¹ z`.
pub fn dense_score(weight: f64, cov: &DMatrix<f64>, beta: f64, z: &[f64]) -> f64 {
    let p = cov.nrows();
    let m = cov + DMatrix::identity(p, p) / beta;
    let chol = m.cholesky().expect("positive definite");
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let zv = DVector::from_column_slice(z);
    let sol = chol.solve(&zv);
    -2.0 * weight.ln() + logdet + zv.dot(&sol)
}

/// Dense Wiener filter `(Σ + I/β)⁻¹ Σ z`.
pub fn dense_wiener(cov: &DMatrix<f64>, beta: f64, z: &[f64]) -> Vec<f64> {
    let p = cov.nrows();
    let m = cov + DMatrix::identity(p, p) / beta;
    let rhs = cov * DVector::from_column_slice(z);
    m.lu().solve(&rhs).expect("invertible").as_slice().to_vec()
}

pub fn dense_select(model: &GmmModel, beta: f64, z: &[f64]) -> (usize, Vec<f64>) {
    let scores: Vec<f64> =
        model.components().iter().map(|c| dense_score(c.weight(), &c.covariance(), beta, z)).collect();
    let best = (0..scores.len()).min_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
    (best, scores)
}

/// Dense matrix of a linear map on `n`-vectors, column by column.
pub fn materialize(n_in: usize, apply: impl Fn(&[f64]) -> Vec<f64>) -> DMatrix<f64> {
    let mut cols = Vec::with_capacity(n_in);
    for j in 0..n_in {
        let mut e = vec![0.0; n_in];
        e[j] = 1.0;
        cols.push(DVector::from_vec(apply(&e)));
    }
    DMatrix::from_columns(&cols)
}

/// Dense periodic convolution matrix, built directly from the stencil.
pub fn dense_convolution(h: usize, w: usize, kh: usize, kw: usize, k: &[f64]) -> DMatrix<f64> {
    let n = h * w;
    let mut m = DMatrix::zeros(n, n);
    let (ch, cw) = (kh as i64 / 2, kw as i64 / 2);
    for i in 0..h as i64 {
        for j in 0..w as i64 {
            for a in 0..kh as i64 {
                for b in 0..kw as i64 {
                    let si = (i - (a - ch)).rem_euclid(h as i64);
                    let sj = (j - (b - cw)).rem_euclid(w as i64);
                    m[((i * w as i64 + j) as usize, (si * w as i64 + sj) as usize)] += k[(a * kw as i64 + b) as usize];
                }
            }
        }
    }
    m
}

/// Dense periodic negative 5-point Laplacian.
pub fn dense_neg_laplacian(h: usize, w: usize) -> DMatrix<f64> {
    let n = h * w;
    let mut m = DMatrix::zeros(n, n);
    for i in 0..h {
        for j in 0..w {
            let me = i * w + j;
            m[(me, me)] += 4.0;
            for (di, dj) in [(h - 1, 0), (1, 0), (0, w - 1), (0, 1)] {
                let nb = ((i + di) % h) * w + (j + dj) % w;
                m[(me, nb)] -= 1.0;
            }
        }
    }
    m
}

/// Full-set EPLL on an `h x w` image with dense linear algebra throughout:
/// every patch, exhaustive dense selection, dense Wiener filter, reprojection
/// by explicit per-pixel averaging and a dense image-estimation solve.
/// `a` is the dense operator; `init` the starting image.
pub fn dense_epll(
    y: &[f64],
    a: &DMatrix<f64>,
    init: &[f64],
    h: usize,
    w: usize,
    model: &GmmModel,
    betas: &[f64],
    sigma: f64,
) -> Vec<f64> {
    let side = (model.patch_dim() as f64).sqrt() as usize;
    let p = side * side;
    let n = h * w;
    let yv = DVector::from_column_slice(y);
    let aty = a.transpose() * &yv;
    let ata = a.transpose() * a;
    let covs: Vec<DMatrix<f64>> = model.components().iter().map(|c| c.covariance()).collect();
    let mut x = init.to_vec();
    for &beta in betas {
        // Cholesky factors and log-determinants of Σ_k + I/β
        let facts: Vec<_> = covs
            .iter()
            .map(|cov| {
                let chol = (cov + DMatrix::identity(p, p) / beta).cholesky().expect("positive definite");
                let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                (chol, logdet)
            })
            .collect();
        let mut acc = vec![0.0; n];
        let mut count = vec![0.0; n];
        for r in 0..=h - side {
            for c in 0..=w - side {
                let mut z: Vec<f64> = (0..p).map(|q| x[(r + q / side) * w + c + q % side]).collect();
                let mean = z.iter().sum::<f64>() / p as f64;
                z.iter_mut().for_each(|v| *v -= mean);
                let zv = DVector::from_column_slice(&z);
                let scores: Vec<f64> = model
                    .components()
                    .iter()
                    .zip(&facts)
                    .map(|(comp, (chol, logdet))| -2.0 * comp.weight().ln() + logdet + zv.dot(&chol.solve(&zv)))
                    .collect();
                let k = (0..scores.len()).min_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
                // (Σ + I/β)⁻¹ Σ z
                let est = facts[k].0.solve(&(&covs[k] * &zv));
                for q in 0..p {
                    let idx = (r + q / side) * w + c + q % side;
                    acc[idx] += est[q] + mean;
                    count[idx] += 1.0;
                }
            }
        }
        let x_tilde = DVector::from_iterator(n, acc.iter().zip(&count).map(|(a, c)| a / c));
        let cst = beta * sigma * sigma;
        let lhs = &ata + DMatrix::identity(n, n) * cst;
        let rhs = &aty + x_tilde * cst;
        x = lhs.cholesky().expect("positive definite").solve(&rhs).as_slice().to_vec();
    }
    x
}

/// Plain conjugate gradient on a symmetric positive definite map, from zero,
/// until the residual drops below `tol` relative to `b`.
pub fn cg_solve(apply: impl Fn(&[f64]) -> Vec<f64>, b: &[f64], tol: f64, max_iter: usize) -> Vec<f64> {
    let mut x = vec![0.0; b.len()];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr: f64 = r.iter().map(|v| v * v).sum();
    let target = tol * rr.sqrt();
    for _ in 0..max_iter {
        if rr.sqrt() <= target {
            break;
        }
        let ap = apply(&p);
        let alpha = rr / p.iter().zip(&ap).map(|(a, b)| a * b).sum::<f64>();
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new: f64 = r.iter().map(|v| v * v).sum();
        for i in 0..p.len() {
            p[i] = r[i] + rr_new / rr * p[i];
        }
        rr = rr_new;
    }
    x
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
}

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn read_fixture_images(sub: &str) -> Vec<(String, Image)> {
    let dir = fixtures_dir().join(sub);
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("cannot list {}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| (p.file_stem().unwrap().to_string_lossy().into_owned(), Image::read(&p).unwrap()))
        .collect()
}

/// DC-removed patches sampled on a regular grid of the given stride.
pub fn training_patches(images: &[Image], side: usize, stride: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for img in images {
        let grid = regular_grid(img.height(), img.width(), side, stride).unwrap();
        out.extend_from_slice(&fepll::patches::extract_patches(img, &grid).unwrap().values);
    }
    out
}

/// Draws `n` patches from a zero-mean mixture with known covariances; returns
/// the patches (row after row) and the generating component of each.
pub fn sample_mixture(rng: &mut ChaCha8Rng, weights: &[f64], covs: &[DMatrix<f64>], n: usize) -> (Vec<f64>, Vec<usize>) {
    let p = covs[0].nrows();
    let chols: Vec<DMatrix<f64>> = covs.iter().map(|c| c.clone().cholesky().unwrap().l()).collect();
    let total: f64 = weights.iter().sum();
    let mut data = Vec::with_capacity(n * p);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mut u = rng.random::<f64>() * total;
        let mut k = 0;
        while k + 1 < weights.len() && u >= weights[k] {
            u -= weights[k];
            k += 1;
        }
        let g = DVector::from_vec(gaussian_vec(rng, p, 1.0));
        data.extend_from_slice((&chols[k] * g).as_slice());
        labels.push(k);
    }
    (data, labels)
}
