//! Patch sampling grids, extraction and reprojection.
//!
//! A grid is a list of top-left anchors of `side x side` patches. The regular
//! grid uses a fixed stride; the jittered grid shifts a stride-`s` lattice by
//! a random global offset, moves every lattice point independently by up to
//! `⌊(side - s) / 2⌋` pixels, then repairs coverage so every pixel lies in at
//! least one patch. Jitter is redrawn every outer iteration from a
//! counter-based stream, so runs are reproducible for a given seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{FepllError, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridMode {
    Regular,
    Jittered,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid {
    /// Top-left anchors `(row, col)`.
    pub anchors: Vec<(usize, usize)>,
    pub height: usize,
    pub width: usize,
    pub side: usize,
    pub spacing: usize,
    pub mode: GridMode,
}

impl SampleGrid {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Number of patches covering each pixel, row-major.
    pub fn coverage(&self) -> Vec<u32> {
        coverage_counts(&self.anchors, self.height, self.width, self.side)
    }

    pub fn is_covering(&self) -> bool {
        self.coverage().iter().all(|&c| c > 0)
    }

    /// Mean coverage over all pixels.
    pub fn mean_coverage(&self) -> f64 {
        (self.len() * self.side * self.side) as f64 / (self.height * self.width) as f64
    }
}

fn check_geometry(height: usize, width: usize, side: usize, spacing: usize) -> Result<()> {
    if side == 0 {
        return Err(FepllError::InvalidInput("patch side must be positive".into()));
    }
    if spacing == 0 || spacing > side {
        return Err(FepllError::InvalidInput(format!("spacing {spacing} must be in 1..={side}")));
    }
    if height < side || width < side {
        return Err(FepllError::InvalidInput(format!(
            "image {height}x{width} is smaller than the {side}x{side} patch"
        )));
    }
    Ok(())
}

/// Positions `0, s, 2s, …` up to `last`, plus `last` itself if missed.
fn regular_axis(last: usize, spacing: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..=last).step_by(spacing).collect();
    if *v.last().unwrap() != last {
        v.push(last);
    }
    v
}

/// Stride-`spacing` grid with the last row and column snapped to the border.
pub fn regular_grid(height: usize, width: usize, side: usize, spacing: usize) -> Result<SampleGrid> {
    check_geometry(height, width, side, spacing)?;
    let rows = regular_axis(height - side, spacing);
    let cols = regular_axis(width - side, spacing);
    let anchors = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
    Ok(SampleGrid { anchors, height, width, side, spacing, mode: GridMode::Regular })
}

pub fn coverage_counts(anchors: &[(usize, usize)], height: usize, width: usize, side: usize) -> Vec<u32> {
    let mut cov = vec![0u32; height * width];
    for &(r, c) in anchors {
        for i in r..r + side {
            for v in &mut cov[i * width + c..i * width + c + side] {
                *v += 1;
            }
        }
    }
    cov
}

/// Maximum per-axis jitter for a patch side and spacing.
pub fn jitter_radius(side: usize, spacing: usize) -> usize {
    side.saturating_sub(spacing) / 2
}

/// Jittered stride-`spacing` grid for outer iteration `iteration`.
pub fn jittered_grid(
    height: usize,
    width: usize,
    side: usize,
    spacing: usize,
    seed: u64,
    iteration: u64,
) -> Result<SampleGrid> {
    check_geometry(height, width, side, spacing)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    let (last_r, last_c) = ((height - side) as i64, (width - side) as i64);
    let s = spacing as i64;
    let j = jitter_radius(side, spacing) as i64;
    let shift_r = rng.random_range(0..s);
    let shift_c = rng.random_range(0..s);
    // the lattice extends `j` beyond each border so clamped points still reach it
    let axis = |shift: i64, last: i64| -> Vec<i64> {
        let mut v = Vec::new();
        let mut x = -j + shift;
        while x <= last + j {
            v.push(x);
            x += s;
        }
        v
    };
    let base_r = axis(shift_r, last_r);
    let base_c = axis(shift_c, last_c);

    let mut seen = vec![false; (height - side + 1) * (width - side + 1)];
    let stride = width - side + 1;
    let mut anchors = Vec::with_capacity(base_r.len() * base_c.len());
    for &br in &base_r {
        for &bc in &base_c {
            let (dr, dc) = if j > 0 { (rng.random_range(-j..=j), rng.random_range(-j..=j)) } else { (0, 0) };
            let r = (br + dr).clamp(0, last_r) as usize;
            let c = (bc + dc).clamp(0, last_c) as usize;
            if !std::mem::replace(&mut seen[r * stride + c], true) {
                anchors.push((r, c));
            }
        }
    }

    let mut cov = coverage_counts(&anchors, height, width, side);
    snap_to_border(&mut anchors, &mut cov, &mut seen, height, width, side, spacing);
    repair_coverage(&mut anchors, &mut cov, &mut seen, height, width, side);
    Ok(SampleGrid { anchors, height, width, side, spacing, mode: GridMode::Jittered })
}

/// Moves anchors within `spacing` of a border onto it when no pixel loses its
/// last covering patch, which keeps the borders covered cheaply.
fn snap_to_border(
    anchors: &mut [(usize, usize)],
    cov: &mut [u32],
    seen: &mut [bool],
    height: usize,
    width: usize,
    side: usize,
    spacing: usize,
) {
    let (last_r, last_c) = (height - side, width - side);
    let stride = last_c + 1;
    let snap = |x: usize, last: usize| {
        if x < spacing {
            0
        } else if x + spacing > last {
            last
        } else {
            x
        }
    };
    for a in anchors.iter_mut() {
        let target = (snap(a.0, last_r), snap(a.1, last_c));
        if target == *a || seen[target.0 * stride + target.1] {
            continue;
        }
        add_patch(cov, width, side, *a, -1);
        add_patch(cov, width, side, target, 1);
        let uncovered = patch_pixels(*a, side).any(|(i, k)| cov[i * width + k] == 0);
        if uncovered {
            add_patch(cov, width, side, target, -1);
            add_patch(cov, width, side, *a, 1);
        } else {
            seen[a.0 * stride + a.1] = false;
            seen[target.0 * stride + target.1] = true;
            *a = target;
        }
    }
}

/// Adds patches for any pixel left uncovered, scanning in raster order.
fn repair_coverage(
    anchors: &mut Vec<(usize, usize)>,
    cov: &mut [u32],
    seen: &mut [bool],
    height: usize,
    width: usize,
    side: usize,
) {
    let (last_r, last_c) = (height - side, width - side);
    for i in 0..height {
        for k in 0..width {
            if cov[i * width + k] == 0 {
                let a = (i.min(last_r), k.min(last_c));
                seen[a.0 * (last_c + 1) + a.1] = true;
                add_patch(cov, width, side, a, 1);
                anchors.push(a);
            }
        }
    }
}

fn patch_pixels((r, c): (usize, usize), side: usize) -> impl Iterator<Item = (usize, usize)> {
    (r..r + side).flat_map(move |i| (c..c + side).map(move |k| (i, k)))
}

fn add_patch(cov: &mut [u32], width: usize, side: usize, (r, c): (usize, usize), delta: i32) {
    for i in r..r + side {
        for v in &mut cov[i * width + c..i * width + c + side] {
            *v = v.wrapping_add_signed(delta);
        }
    }
}

/// Builds the grid for one outer iteration.
pub fn sample_grid(
    mode: GridMode,
    height: usize,
    width: usize,
    side: usize,
    spacing: usize,
    seed: u64,
    iteration: u64,
) -> Result<SampleGrid> {
    match mode {
        GridMode::Regular => regular_grid(height, width, side, spacing),
        GridMode::Jittered => jittered_grid(height, width, side, spacing, seed, iteration),
    }
}

/// Patches extracted at the anchors of a grid, with their means removed.
#[derive(Debug, Clone)]
pub struct PatchBatch {
    pub side: usize,
    /// `len * side²` values, patch after patch, row-major within a patch.
    pub values: Vec<f64>,
    pub means: Vec<f64>,
}

impl PatchBatch {
    pub fn patch_dim(&self) -> usize {
        self.side * self.side
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        let p = self.patch_dim();
        &self.values[i * p..(i + 1) * p]
    }
}

/// Extracts every patch of `grid` from `image` and removes its mean.
pub fn extract_patches(image: &Image, grid: &SampleGrid) -> Result<PatchBatch> {
    if image.dims() != (grid.height, grid.width) {
        return Err(FepllError::InvalidInput(format!(
            "grid built for {}x{} but image is {}x{}",
            grid.height,
            grid.width,
            image.height(),
            image.width()
        )));
    }
    let side = grid.side;
    let p = side * side;
    let w = image.width();
    let data = image.as_slice();
    let mut values = vec![0.0; grid.len() * p];
    let means: Vec<f64> = values
        .par_chunks_mut(p)
        .zip(grid.anchors.par_iter())
        .map(|(out, &(r, c))| {
            for i in 0..side {
                out[i * side..(i + 1) * side].copy_from_slice(&data[(r + i) * w + c..(r + i) * w + c + side]);
            }
            let mean = out.iter().sum::<f64>() / p as f64;
            for v in out.iter_mut() {
                *v -= mean;
            }
            mean
        })
        .collect();
    Ok(PatchBatch { side, values, means })
}

/// Averages overlapping patches back into an image: every pixel becomes the
/// mean of the patch values covering it. Means in `batch.means` are added
/// back. Fails if some pixel is not covered.
pub fn reproject(batch: &PatchBatch, grid: &SampleGrid) -> Result<Image> {
    if batch.len() != grid.len() || batch.side != grid.side {
        return Err(FepllError::InvalidInput("patch batch does not match grid".into()));
    }
    let (h, w, side) = (grid.height, grid.width, grid.side);
    let mut acc = vec![0.0; h * w];
    let cov = grid.coverage();
    for (n, &(r, c)) in grid.anchors.iter().enumerate() {
        let patch = batch.patch(n);
        let mean = batch.means[n];
        for i in 0..side {
            let row = &mut acc[(r + i) * w + c..(r + i) * w + c + side];
            for (a, v) in row.iter_mut().zip(&patch[i * side..(i + 1) * side]) {
                *a += v + mean;
            }
        }
    }
    if let Some(idx) = cov.iter().position(|&c| c == 0) {
        return Err(FepllError::InvalidInput(format!("pixel ({}, {}) is not covered by any patch", idx / w, idx % w)));
    }
    for (a, &c) in acc.iter_mut().zip(&cov) {
        *a /= c as f64;
    }
    Image::new(h, w, acc)
}
