//! PSNR and single-scale SSIM on the unit intensity scale.

use serde::{Deserialize, Serialize};

use crate::error::{FepllError, Result};
use crate::image::Image;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `+∞` for identical images.
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
}

fn check_same(x: &Image, reference: &Image) -> Result<()> {
    if x.dims() != reference.dims() {
        return Err(FepllError::InvalidInput(format!(
            "image is {}x{} but reference is {}x{}",
            x.height(),
            x.width(),
            reference.height(),
            reference.width()
        )));
    }
    Ok(())
}

pub fn mse(x: &Image, reference: &Image) -> Result<f64> {
    check_same(x, reference)?;
    let n = x.len() as f64;
    Ok(x.as_slice().iter().zip(reference.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// `10 log₁₀(peak² / MSE)`; infinite when the images are identical.
pub fn psnr(x: &Image, reference: &Image, peak: f64) -> Result<f64> {
    let m = mse(x, reference)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / m).log10() })
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable weighted average over every fully contained window.
fn filter_valid(data: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = win.iter().enumerate().map(|(k, c)| c * data[i * w + j + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = win.iter().enumerate().map(|(k, c)| c * rows[(i + k) * ow + j]).sum();
        }
    }
    out
}

/// Mean SSIM over valid `11 x 11` Gaussian windows (`σ = 1.5`, `K₁ = 0.01`,
/// `K₂ = 0.03`, dynamic range 1).
pub fn ssim(x: &Image, reference: &Image) -> Result<f64> {
    check_same(x, reference)?;
    let (h, w) = x.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(FepllError::InvalidInput(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let (a, b) = (x.as_slice(), reference.as_slice());
    let prod = |f: &dyn Fn(usize) -> f64| (0..a.len()).map(f).collect::<Vec<f64>>();
    let mu_a = filter_valid(a, h, w, &win);
    let mu_b = filter_valid(b, h, w, &win);
    let aa = filter_valid(&prod(&|i| a[i] * a[i]), h, w, &win);
    let bb = filter_valid(&prod(&|i| b[i] * b[i]), h, w, &win);
    let ab = filter_valid(&prod(&|i| a[i] * b[i]), h, w, &win);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

pub fn evaluate(x: &Image, reference: &Image) -> Result<MetricReport> {
    Ok(MetricReport { psnr: psnr(x, reference, 1.0)?, ssim: ssim(x, reference)?, mse: mse(x, reference)? })
}
