//! Linear degradation operators and the quadratic image-estimation solves.
//!
//! Every operator maps an `H x W` image to its observation. Identity, mask and
//! gain act pixelwise; convolution is circular and diagonal in the Fourier
//! domain; decimation blurs with an anti-alias kernel and keeps every `d`-th
//! pixel, and is solved with conjugate gradient.

mod cg;
mod fft;

pub use cg::{CgConfig, SolveReport};

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{FepllError, Result};
use crate::image::Image;
use cg::conjugate_gradient;
use fft::Fft2;

/// Weight of the Laplacian regularizer in the initial estimate, relative to `σ² / λ`.
pub const INIT_LAPLACIAN_WEIGHT: f64 = 0.2;

/// Upper bound of `λ` relative to `σ²`.
pub const LAMBDA_CAP: f64 = 250.0;

/// Odd-sized 2-D stencil, row-major, centered at `(height / 2, width / 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Kernel {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height % 2 == 0 || width % 2 == 0 {
            return Err(FepllError::InvalidInput(format!("kernel size {height}x{width} must be odd")));
        }
        if values.len() != height * width {
            return Err(FepllError::DimensionMismatch { expected: height * width, actual: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FepllError::InvalidInput("kernel contains non-finite values".into()));
        }
        Ok(Self { height, width, values })
    }

    /// Parses `h w` followed by `h * w` values in row-major order.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut tok = text.split_whitespace();
        let mut dim = |what| -> Result<usize> {
            tok.next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| FepllError::Format(format!("kernel file: missing or bad {what}")))
        };
        let h = dim("height")?;
        let w = dim("width")?;
        let values = tok
            .map(|t| t.parse::<f64>().map_err(|_| FepllError::Format(format!("kernel file: bad number {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != h * w {
            return Err(FepllError::Format(format!("kernel file: expected {} values, found {}", h * w, values.len())));
        }
        Self::new(h, w, values)
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&std::fs::read_to_string(path)?).map_err(|e| match e {
            FepllError::Format(m) => FepllError::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Normalized isotropic Gaussian of radius `⌈3σ⌉`.
    pub fn gaussian(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(FepllError::InvalidInput(format!("Gaussian width must be positive, got {sigma}")));
        }
        let r = (3.0 * sigma).ceil() as usize;
        let n = 2 * r + 1;
        let mut values: Vec<f64> = (0..n * n)
            .map(|i| {
                let (y, x) = ((i / n) as f64 - r as f64, (i % n) as f64 - r as f64);
                (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let s: f64 = values.iter().sum();
        values.iter_mut().for_each(|v| *v /= s);
        Self::new(n, n, values)
    }

    /// Uniform `size x size` averaging kernel.
    pub fn uniform(size: usize) -> Result<Self> {
        Self::new(size, size, vec![1.0 / (size * size) as f64; size * size])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Kernel wrapped onto an `h x w` periodic grid with its center at the origin.
    fn embed(&self, h: usize, w: usize) -> Vec<f64> {
        let (ch, cw) = (self.height / 2, self.width / 2);
        let mut out = vec![0.0; h * w];
        for a in 0..self.height {
            for b in 0..self.width {
                let i = (a + h * (ch / h + 1) - ch) % h;
                let j = (b + w * (cw / w + 1) - cw) % w;
                out[i * w + j] += self.values[a * self.width + b];
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OperatorKind {
    Identity,
    Convolution(Kernel),
    /// 0/1 map of observed pixels.
    Mask(Vec<f64>),
    /// Nonnegative per-pixel attenuation.
    Gain(Vec<f64>),
    Decimate { factor: usize, kernel: Kernel },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStrategy {
    PixelDiagonal,
    FrequencyDiagonal,
    Iterative,
}

#[derive(Debug, Clone)]
pub struct DegradationOperator {
    kind: OperatorKind,
    height: usize,
    width: usize,
    fft: Option<Fft2>,
    /// Kernel transfer function on the input grid, for convolution and decimation.
    spectrum: Option<Arc<Vec<Complex64>>>,
}

impl DegradationOperator {
    pub fn identity(height: usize, width: usize) -> Result<Self> {
        Self::build(OperatorKind::Identity, height, width)
    }

    pub fn convolution(height: usize, width: usize, kernel: Kernel) -> Result<Self> {
        Self::build(OperatorKind::Convolution(kernel), height, width)
    }

    /// Nonzero pixels of `mask` are observed.
    pub fn mask(mask: &Image) -> Result<Self> {
        let m = mask.as_slice().iter().map(|&v| if v != 0.0 { 1.0 } else { 0.0 }).collect();
        Self::build(OperatorKind::Mask(m), mask.height(), mask.width())
    }

    pub fn gain(gain: &Image) -> Result<Self> {
        if gain.as_slice().iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(FepllError::InvalidInput("gain map must be finite and nonnegative".into()));
        }
        Self::build(OperatorKind::Gain(gain.as_slice().to_vec()), gain.height(), gain.width())
    }

    /// Decimation of an `height x width` image by `factor`. Without a kernel,
    /// a Gaussian anti-alias filter of width `factor / 2` is used.
    pub fn decimate(height: usize, width: usize, factor: usize, kernel: Option<Kernel>) -> Result<Self> {
        if factor == 0 {
            return Err(FepllError::InvalidInput("decimation factor must be positive".into()));
        }
        if height % factor != 0 || width % factor != 0 {
            return Err(FepllError::InvalidInput(format!(
                "image {height}x{width} is not divisible by the decimation factor {factor}"
            )));
        }
        let kernel = match kernel {
            Some(k) => k,
            None => Kernel::gaussian(factor as f64 / 2.0)?,
        };
        Self::build(OperatorKind::Decimate { factor, kernel }, height, width)
    }

    fn build(kind: OperatorKind, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(FepllError::InvalidInput("operator dimensions must be positive".into()));
        }
        let (fft, spectrum) = match &kind {
            OperatorKind::Convolution(k) | OperatorKind::Decimate { kernel: k, .. } => {
                let fft = Fft2::new(height, width);
                let spec = fft.forward_real(&k.embed(height, width));
                (Some(fft), Some(Arc::new(spec)))
            }
            _ => {
                // identity needs transforms for the initial estimate
                let fft = matches!(kind, OperatorKind::Identity).then(|| Fft2::new(height, width));
                (fft, None)
            }
        };
        Ok(Self { kind, height, width, fft, spectrum })
    }

    pub fn kind(&self) -> &OperatorKind {
        &self.kind
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            OperatorKind::Identity => "identity",
            OperatorKind::Convolution(_) => "convolution",
            OperatorKind::Mask(_) => "mask",
            OperatorKind::Gain(_) => "gain",
            OperatorKind::Decimate { .. } => "decimate",
        }
    }

    pub fn input_dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn output_dims(&self) -> (usize, usize) {
        match self.kind {
            OperatorKind::Decimate { factor, .. } => (self.height / factor, self.width / factor),
            _ => (self.height, self.width),
        }
    }

    pub fn solve_strategy(&self) -> SolveStrategy {
        match self.kind {
            OperatorKind::Identity | OperatorKind::Mask(_) | OperatorKind::Gain(_) => SolveStrategy::PixelDiagonal,
            OperatorKind::Convolution(_) => SolveStrategy::FrequencyDiagonal,
            OperatorKind::Decimate { .. } => SolveStrategy::Iterative,
        }
    }

    fn pixel_weights(&self) -> Option<&[f64]> {
        match &self.kind {
            OperatorKind::Mask(m) | OperatorKind::Gain(m) => Some(m),
            _ => None,
        }
    }

    fn check_input(&self, img: &Image) -> Result<()> {
        check_dims((self.height, self.width), img.dims())
    }

    fn check_output(&self, img: &Image) -> Result<()> {
        check_dims(self.output_dims(), img.dims())
    }

    pub fn apply(&self, x: &Image) -> Result<Image> {
        self.check_input(x)?;
        let (oh, ow) = self.output_dims();
        Image::new(oh, ow, self.apply_raw(x.as_slice()))
    }

    pub fn apply_adjoint(&self, y: &Image) -> Result<Image> {
        self.check_output(y)?;
        Image::new(self.height, self.width, self.adjoint_raw(y.as_slice()))
    }

    fn apply_raw(&self, x: &[f64]) -> Vec<f64> {
        match &self.kind {
            OperatorKind::Identity => x.to_vec(),
            OperatorKind::Mask(m) | OperatorKind::Gain(m) => x.iter().zip(m).map(|(a, b)| a * b).collect(),
            OperatorKind::Convolution(_) => self.filter(x, false),
            OperatorKind::Decimate { factor, .. } => {
                let blurred = self.filter(x, false);
                let d = *factor;
                let (oh, ow) = self.output_dims();
                (0..oh * ow).map(|i| blurred[(i / ow) * d * self.width + (i % ow) * d]).collect()
            }
        }
    }

    fn adjoint_raw(&self, y: &[f64]) -> Vec<f64> {
        match &self.kind {
            OperatorKind::Identity => y.to_vec(),
            OperatorKind::Mask(m) | OperatorKind::Gain(m) => y.iter().zip(m).map(|(a, b)| a * b).collect(),
            OperatorKind::Convolution(_) => self.filter(y, true),
            OperatorKind::Decimate { factor, .. } => {
                let d = *factor;
                let (_, ow) = self.output_dims();
                let mut up = vec![0.0; self.height * self.width];
                for (i, v) in y.iter().enumerate() {
                    up[(i / ow) * d * self.width + (i % ow) * d] = *v;
                }
                self.filter(&up, true)
            }
        }
    }

    /// `AᵗA x`.
    fn normal_raw(&self, x: &[f64]) -> Vec<f64> {
        match &self.kind {
            OperatorKind::Identity => x.to_vec(),
            OperatorKind::Mask(m) | OperatorKind::Gain(m) => x.iter().zip(m).map(|(a, b)| a * b * b).collect(),
            OperatorKind::Convolution(_) => {
                let fft = self.fft.as_ref().unwrap();
                let spec = self.spectrum.as_ref().unwrap();
                let mut buf = fft.forward_real(x);
                for (b, k) in buf.iter_mut().zip(spec.iter()) {
                    *b *= k.norm_sqr();
                }
                fft.inverse_real(buf)
            }
            OperatorKind::Decimate { .. } => self.adjoint_raw(&self.apply_raw(x)),
        }
    }

    /// Circular filtering with the kernel (`adjoint` uses the flipped kernel).
    fn filter(&self, x: &[f64], adjoint: bool) -> Vec<f64> {
        let fft = self.fft.as_ref().expect("filtering operator has transforms");
        let spec = self.spectrum.as_ref().expect("filtering operator has a spectrum");
        let mut buf = fft.forward_real(x);
        for (b, k) in buf.iter_mut().zip(spec.iter()) {
            *b *= if adjoint { k.conj() } else { *k };
        }
        fft.inverse_real(buf)
    }

    /// Image-estimation step: minimizes `‖A x - y‖² + c ‖x - x̃‖²`, i.e. solves
    /// `(AᵗA + c I) x = Aᵗ y + c x̃` with `c = β σ²`.
    pub fn solve_image_estimation(
        &self,
        y: &Image,
        x_tilde: &Image,
        c: f64,
        cg: &CgConfig,
    ) -> Result<(Image, SolveReport)> {
        self.check_output(y)?;
        self.check_input(x_tilde)?;
        if !(c > 0.0) || !c.is_finite() {
            return Err(FepllError::InvalidInput(format!("regularization weight must be positive and finite, got {c}")));
        }
        cg.validate()?;
        let aty = self.adjoint_raw(y.as_slice());
        let rhs: Vec<f64> = aty.iter().zip(x_tilde.as_slice()).map(|(a, x)| a + c * x).collect();
        let normal = |v: &[f64]| -> Vec<f64> { self.normal_raw(v).iter().zip(v).map(|(n, x)| n + c * x).collect() };
        let (x, report) = match self.solve_strategy() {
            SolveStrategy::PixelDiagonal => {
                let x: Vec<f64> = match self.pixel_weights() {
                    Some(m) => rhs.iter().zip(m).map(|(r, m)| r / (m * m + c)).collect(),
                    None => rhs.iter().map(|r| r / (1.0 + c)).collect(),
                };
                let report = direct_report(&normal, &rhs, &x, cg);
                (x, report)
            }
            SolveStrategy::FrequencyDiagonal => {
                let spec = self.spectrum.as_ref().unwrap();
                let x = self.fourier_solve(&rhs, |i| spec[i].norm_sqr() + c)?;
                let report = direct_report(&normal, &rhs, &x, cg);
                (x, report)
            }
            SolveStrategy::Iterative => {
                let mut x = x_tilde.as_slice().to_vec();
                let report = conjugate_gradient(normal, &rhs, &mut x, cg);
                (x, report)
            }
        };
        Ok((Image::new(self.height, self.width, x)?, report))
    }

    fn fourier_solve(&self, rhs: &[f64], denom: impl Fn(usize) -> f64) -> Result<Vec<f64>> {
        let fft = self.fft.as_ref().unwrap();
        let mut buf = fft.forward_real(rhs);
        for (i, b) in buf.iter_mut().enumerate() {
            let d = denom(i);
            if d <= 0.0 {
                if b.norm() > 0.0 {
                    return Err(FepllError::Numerical(format!("singular frequency {i} in Fourier solve")));
                }
                continue;
            }
            *b /= d;
        }
        Ok(fft.inverse_real(buf))
    }

    /// Spectrum of `AᵗA` (identity, convolution) or of `A Aᵗ` (decimation, on
    /// the coarse grid), or the squared pixel weights. Its nonzero eigenvalues
    /// give both norms entering `λ`.
    fn gram_eigenvalues(&self) -> Vec<f64> {
        match &self.kind {
            OperatorKind::Identity => vec![1.0; self.height * self.width],
            OperatorKind::Mask(m) | OperatorKind::Gain(m) => m.iter().map(|v| v * v).collect(),
            OperatorKind::Convolution(_) => self.spectrum.as_ref().unwrap().iter().map(|k| k.norm_sqr()).collect(),
            OperatorKind::Decimate { factor, .. } => {
                // A Aᵗ is circulant on the coarse grid; its kernel is the kernel
                // autocorrelation sampled at multiples of the factor.
                let fft = self.fft.as_ref().unwrap();
                let spec = self.spectrum.as_ref().unwrap();
                let auto = fft.inverse_real(spec.iter().map(|k| Complex64::new(k.norm_sqr(), 0.0)).collect());
                let d = *factor;
                let (oh, ow) = self.output_dims();
                let coarse: Vec<f64> = (0..oh * ow).map(|i| auto[(i / ow) * d * self.width + (i % ow) * d]).collect();
                Fft2::new(oh, ow).forward_real(&coarse).iter().map(|c| c.re.max(0.0)).collect()
            }
        }
    }

    /// `N⁻¹ ‖AᵗA‖²_F / ‖A‖²₂` with `N` the number of unknowns.
    pub fn lambda_ratio(&self) -> Result<f64> {
        let eig = self.gram_eigenvalues();
        let max = eig.iter().copied().fold(0.0, f64::max);
        if !(max > 0.0) {
            return Err(FepllError::InvalidInput("operator is identically zero".into()));
        }
        let frob: f64 = eig.iter().map(|e| e * e).sum();
        Ok(frob / (self.height * self.width) as f64 / max)
    }

    /// `λ = min{N⁻¹ ‖AᵗA‖²_F ‖A‖₂⁻², 250 σ²}` for `σ` on the unit intensity scale.
    pub fn lambda(&self, sigma: f64) -> Result<f64> {
        if !(sigma > 0.0) {
            return Err(FepllError::InvalidInput(format!("noise level must be positive, got {sigma}")));
        }
        Ok(self.lambda_ratio()?.min(LAMBDA_CAP * sigma * sigma))
    }

    /// Initial estimate `(AᵗA + 0.2 σ²/λ L)⁻¹ Aᵗ y`, `L` the periodic
    /// 5-point negative Laplacian.
    pub fn init_estimate(&self, y: &Image, sigma: f64, lambda: f64, cg: &CgConfig) -> Result<(Image, SolveReport)> {
        self.check_output(y)?;
        if !(lambda > 0.0) {
            return Err(FepllError::InvalidInput(format!("lambda must be positive, got {lambda}")));
        }
        cg.validate()?;
        let mu = INIT_LAPLACIAN_WEIGHT * sigma * sigma / lambda;
        let (h, w) = (self.height, self.width);
        let rhs = self.adjoint_raw(y.as_slice());
        let normal = |v: &[f64]| -> Vec<f64> {
            let lap = neg_laplacian(v, h, w);
            self.normal_raw(v).iter().zip(&lap).map(|(n, l)| n + mu * l).collect()
        };
        let x = match &self.kind {
            OperatorKind::Identity | OperatorKind::Convolution(_) => {
                let gram = self.gram_eigenvalues();
                let lap = laplacian_symbol(h, w);
                let x = self.fourier_solve(&rhs, |i| gram[i] + mu * lap[i])?;
                let report = direct_report(&normal, &rhs, &x, cg);
                (x, report)
            }
            _ => {
                let mut x = vec![0.0; h * w];
                let report = conjugate_gradient(normal, &rhs, &mut x, cg);
                (x, report)
            }
        };
        Ok((Image::new(h, w, x.0)?, x.1))
    }
}

fn check_dims(expected: (usize, usize), actual: (usize, usize)) -> Result<()> {
    if expected != actual {
        return Err(FepllError::InvalidInput(format!(
            "expected a {}x{} image, got {}x{}",
            expected.0, expected.1, actual.0, actual.1
        )));
    }
    Ok(())
}

fn direct_report(normal: &impl Fn(&[f64]) -> Vec<f64>, rhs: &[f64], x: &[f64], cg: &CgConfig) -> SolveReport {
    let b = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mx = normal(x);
    let r = rhs.iter().zip(&mx).map(|(a, m)| (a - m) * (a - m)).sum::<f64>().sqrt();
    let residual = if b > 0.0 { r / b } else { r };
    SolveReport { iterations: 0, residual, converged: residual <= cg.tolerance.max(1e-9) }
}

/// `-Δ x` with the periodic 5-point stencil.
pub fn neg_laplacian(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        let up = (i + h - 1) % h;
        let down = (i + 1) % h;
        for j in 0..w {
            let left = (j + w - 1) % w;
            let right = (j + 1) % w;
            out[i * w + j] =
                4.0 * x[i * w + j] - x[up * w + j] - x[down * w + j] - x[i * w + left] - x[i * w + right];
        }
    }
    out
}

/// Eigenvalues of the periodic negative Laplacian on the FFT grid.
fn laplacian_symbol(h: usize, w: usize) -> Vec<f64> {
    let tau = 2.0 * std::f64::consts::PI;
    (0..h * w)
        .map(|i| {
            let (u, v) = ((i / w) as f64, (i % w) as f64);
            4.0 - 2.0 * (tau * u / h as f64).cos() - 2.0 * (tau * v / w as f64).cos()
        })
        .collect()
}

/// Radial attenuation `g(r) = 1 - strength · (r / r_max)²` about the image center.
pub fn radial_gain(height: usize, width: usize, strength: f64) -> Image {
    let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    let r_max2 = (cy * cy + cx * cx).max(f64::MIN_POSITIVE);
    Image::from_fn(height, width, |r, c| {
        let (dy, dx) = (r as f64 - cy, c as f64 - cx);
        1.0 - strength * (dy * dy + dx * dx) / r_max2
    })
}
