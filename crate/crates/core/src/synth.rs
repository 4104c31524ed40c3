//! Seeded synthetic scenes and noise, for tests and benchmarks without an
//! image corpus.
//!
//! Scenes are piecewise smooth: a shaded background with overlapping discs,
//! rectangles and striped regions, lightly blurred so that edges are not
//! perfectly sharp.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{FepllError, Result};
use crate::image::Image;
use crate::operators::{DegradationOperator, Kernel};

enum Shape {
    Disc { cy: f64, cx: f64, r: f64 },
    Rect { top: f64, left: f64, bottom: f64, right: f64 },
}

struct Layer {
    shape: Shape,
    base: f64,
    grad: (f64, f64),
    /// Stripe amplitude, angle and period (pixels); amplitude 0 for flat fill.
    stripes: (f64, f64, f64),
}

impl Layer {
    fn random(rng: &mut ChaCha8Rng, h: f64, w: f64) -> Self {
        let size = h.min(w);
        let shape = if rng.random_bool(0.5) {
            Shape::Disc { cy: rng.random_range(0.0..h), cx: rng.random_range(0.0..w), r: rng.random_range(0.08..0.3) * size }
        } else {
            let (top, left) = (rng.random_range(-0.1 * h..h), rng.random_range(-0.1 * w..w));
            Shape::Rect {
                top,
                left,
                bottom: top + rng.random_range(0.1..0.5) * h,
                right: left + rng.random_range(0.1..0.5) * w,
            }
        };
        let stripes = if rng.random_bool(0.3) {
            (rng.random_range(0.05..0.2), rng.random_range(0.0..std::f64::consts::PI), rng.random_range(3.0..9.0))
        } else {
            (0.0, 0.0, 1.0)
        };
        Self {
            shape,
            base: rng.random_range(0.1..0.9),
            grad: (rng.random_range(-0.3..0.3) / h, rng.random_range(-0.3..0.3) / w),
            stripes,
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match self.shape {
            Shape::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Rect { top, left, bottom, right } => y >= top && y < bottom && x >= left && x < right,
        }
    }

    fn value(&self, y: f64, x: f64) -> f64 {
        let (amp, angle, period) = self.stripes;
        let phase = (y * angle.sin() + x * angle.cos()) * std::f64::consts::TAU / period;
        self.base + self.grad.0 * y + self.grad.1 * x + amp * phase.sin()
    }
}

/// Piecewise-smooth test scene with values in `[0, 1]`.
pub fn scene(height: usize, width: usize, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f64, width as f64);
    let background = Layer {
        shape: Shape::Rect { top: -1.0, left: -1.0, bottom: h + 1.0, right: w + 1.0 },
        base: rng.random_range(0.3..0.7),
        grad: (rng.random_range(-0.4..0.4) / h, rng.random_range(-0.4..0.4) / w),
        stripes: (0.0, 0.0, 1.0),
    };
    let count = rng.random_range(6..12);
    let layers: Vec<Layer> = std::iter::once(background).chain((0..count).map(|_| Layer::random(&mut rng, h, w))).collect();
    let sharp = Image::from_fn(height, width, |r, c| {
        let (y, x) = (r as f64, c as f64);
        let top = layers.iter().rev().find(|l| l.contains(y, x)).expect("background covers everything");
        top.value(y, x)
    });
    let blur = DegradationOperator::convolution(height, width, Kernel::gaussian(0.6)?)?;
    Ok(blur.apply(&sharp)?.clamped())
}

/// Adds white Gaussian noise with standard deviation `sigma` on the 0–255 scale.
pub fn add_noise(image: &Image, sigma: f64, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma / 255.0).expect("finite noise level");
    Image::from_fn(image.height(), image.width(), |r, c| image.get(r, c) + normal.sample(&mut rng))
}

/// Inpainting mask with each pixel missing (0) with probability `missing`,
/// observed (1) otherwise.
pub fn random_mask(height: usize, width: usize, missing: f64, seed: u64) -> Result<Image> {
    if !(0.0..=1.0).contains(&missing) {
        return Err(FepllError::InvalidInput(format!("missing fraction must be in [0, 1], got {missing}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Image::from_fn(height, width, |_, _| if rng.random_bool(missing) { 0.0 } else { 1.0 }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_reproducible_and_bounded() {
        let a = scene(40, 30, 5).unwrap();
        assert_eq!(a, scene(40, 30, 5).unwrap());
        assert_ne!(a, scene(40, 30, 6).unwrap());
        assert!(a.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn noise_has_requested_level() {
        let img = Image::filled(100, 100, 0.5);
        let noisy = add_noise(&img, 20.0, 1);
        let var = noisy.as_slice().iter().map(|v| (v - 0.5).powi(2)).sum::<f64>() / 1e4;
        assert!((var.sqrt() * 255.0 - 20.0).abs() < 0.5);
    }

    #[test]
    fn masks_drop_the_requested_fraction() {
        let m = random_mask(100, 100, 0.5, 3).unwrap();
        let kept = m.as_slice().iter().filter(|&&v| v == 1.0).count();
        assert!((4800..5200).contains(&kept));
        assert!(m.as_slice().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(random_mask(4, 4, 1.5, 0).is_err());
    }
}
