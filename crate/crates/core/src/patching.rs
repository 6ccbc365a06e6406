//! Sliding-window patch extraction and overlap combination.
//!
//! A [`PatchGrid`] enumerates `K x K x T` windows at spatial stride `w`.
//! Per-patch probabilities are folded into an [`OverlapAccumulator`] which
//! yields the per-cell mean (the fused probability) and the per-cell
//! population standard deviation (the disagreement map) without storing
//! the individual patch outputs.
//!
//! The accumulator keeps sums of `p - c`, where `c` is the first value seen
//! at the cell. This is the shifted-data variance formula: cells where every
//! patch agrees produce exactly zero spread, and cancellation stays small
//! when probabilities cluster near 0 or 1.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::{Dims, DynamicVolume, VolumeKind};

/// Origins of the sliding window along one axis.
///
/// Multiples of `stride` that keep the window inside the axis, plus the
/// flush-to-border origin `len - patch` when the stride does not land on it.
pub fn axis_origins(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    debug_assert!(patch <= len && stride > 0);
    let last = len - patch;
    let mut origins: Vec<usize> = (0..=last).step_by(stride).collect();
    if origins.last() != Some(&last) {
        origins.push(last);
    }
    origins
}

/// The set of patch origins for one `(K, w)` combination.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    dims: Dims,
    patch: usize,
    stride: usize,
    row_origins: Vec<usize>,
    col_origins: Vec<usize>,
}

impl PatchGrid {
    pub fn new(dims: Dims, patch: usize, stride: usize) -> Result<Self> {
        if patch == 0 || stride == 0 {
            return Err(Error::Config("patch size and stride must be positive".into()));
        }
        if patch > dims.rows.min(dims.cols) {
            return Err(Error::Config(format!(
                "patch size {patch} exceeds the smaller image side of {dims}"
            )));
        }
        if stride > patch {
            return Err(Error::Config(format!(
                "stride {stride} larger than patch size {patch} leaves coverage holes"
            )));
        }
        Ok(Self {
            dims,
            patch,
            stride,
            row_origins: axis_origins(dims.rows, patch, stride),
            col_origins: axis_origins(dims.cols, patch, stride),
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn row_origins(&self) -> &[usize] {
        &self.row_origins
    }

    pub fn col_origins(&self) -> &[usize] {
        &self.col_origins
    }

    pub fn len(&self) -> usize {
        self.row_origins.len() * self.col_origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Dimensions of each patch volume.
    pub fn patch_dims(&self) -> Dims {
        Dims::new(self.patch, self.patch, self.dims.frames)
    }

    /// Top-left corner of patch `i`; patches are ordered row-major.
    pub fn origin(&self, i: usize) -> Result<(usize, usize)> {
        if i >= self.len() {
            return Err(Error::Bounds(format!(
                "patch index {i} outside grid of {} patches",
                self.len()
            )));
        }
        let per_row = self.col_origins.len();
        Ok((self.row_origins[i / per_row], self.col_origins[i % per_row]))
    }

    pub fn origins(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.row_origins
            .iter()
            .flat_map(move |&r| self.col_origins.iter().map(move |&c| (r, c)))
    }

    /// Number of patches whose footprint contains `(m, n)`, from the origin lists.
    pub fn coverage(&self, m: usize, n: usize) -> usize {
        let k = self.patch;
        let rows = self
            .row_origins
            .iter()
            .filter(|&&r| r <= m && m < r + k)
            .count();
        let cols = self
            .col_origins
            .iter()
            .filter(|&&c| c <= n && n < c + k)
            .count();
        rows * cols
    }
}

/// Builds the grid for `dims`, patch edge `patch` and stride `stride`.
pub fn build_grid(dims: Dims, patch: usize, stride: usize) -> Result<PatchGrid> {
    PatchGrid::new(dims, patch, stride)
}

/// Copies patch `i` (all frames) out of `image`.
pub fn extract_patch(image: &DynamicVolume, grid: &PatchGrid, i: usize) -> Result<DynamicVolume> {
    if image.dims() != grid.dims() {
        return Err(Error::Shape(format!(
            "image {} does not match grid {}",
            image.dims(),
            grid.dims()
        )));
    }
    let (r0, c0) = grid.origin(i)?;
    let k = grid.patch_size();
    let dims = image.dims();
    let mut data = Vec::with_capacity(k * k * dims.frames);
    for t in 0..dims.frames {
        let frame = image.frame(t);
        for r in r0..r0 + k {
            let start = r * dims.cols + c0;
            data.extend_from_slice(&frame[start..start + k]);
        }
    }
    Ok(DynamicVolume::from_parts_unchecked(
        grid.patch_dims(),
        image.kind(),
        data,
    ))
}

/// Running per-cell statistics over overlapping patches.
#[derive(Debug, Clone)]
pub struct OverlapAccumulator {
    dims: Dims,
    shift: Vec<f32>,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
    count: Vec<u32>,
}

impl OverlapAccumulator {
    pub fn new(dims: Dims) -> Self {
        Self {
            dims,
            shift: vec![0.0; dims.len()],
            sum: vec![0.0; dims.len()],
            sumsq: vec![0.0; dims.len()],
            count: vec![0; dims.frame_len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Coverage count of spatial location `(m, n)`.
    pub fn count(&self, m: usize, n: usize) -> u32 {
        self.count[m * self.dims.cols + n]
    }

    /// Running `sum p` at a cell.
    pub fn sum(&self, m: usize, n: usize, t: usize) -> f64 {
        let i = self.dims.index(m, n, t);
        self.sum[i] + f64::from(self.count(m, n)) * f64::from(self.shift[i])
    }

    /// Running `sum p^2` at a cell.
    pub fn sumsq(&self, m: usize, n: usize, t: usize) -> f64 {
        let i = self.dims.index(m, n, t);
        let c = f64::from(self.shift[i]);
        let k = f64::from(self.count(m, n));
        self.sumsq[i] + 2.0 * c * self.sum[i] + k * c * c
    }

    /// Adds patch `i` of `grid` with per-pixel probabilities `probs`.
    pub fn fold_patch(&mut self, grid: &PatchGrid, i: usize, probs: &DynamicVolume) -> Result<()> {
        if grid.dims() != self.dims {
            return Err(Error::Shape(format!(
                "grid {} does not match accumulator {}",
                grid.dims(),
                self.dims
            )));
        }
        if probs.dims() != grid.patch_dims() {
            return Err(Error::Shape(format!(
                "patch probabilities are {}, expected {}",
                probs.dims(),
                grid.patch_dims()
            )));
        }
        let (r0, c0) = grid.origin(i)?;
        let k = grid.patch_size();
        let cols = self.dims.cols;
        let frame_len = self.dims.frame_len();
        let src = probs.data();
        for r in 0..k {
            let row_base = (r0 + r) * cols + c0;
            let fresh: Vec<bool> = self.count[row_base..row_base + k]
                .iter()
                .map(|&c| c == 0)
                .collect();
            for t in 0..self.dims.frames {
                let dst = t * frame_len + row_base;
                let src_row = &src[(t * k + r) * k..(t * k + r + 1) * k];
                let shift = &mut self.shift[dst..dst + k];
                let sum = &mut self.sum[dst..dst + k];
                let sumsq = &mut self.sumsq[dst..dst + k];
                for c in 0..k {
                    let p = src_row[c];
                    if fresh[c] {
                        shift[c] = p;
                        continue;
                    }
                    let d = f64::from(p) - f64::from(shift[c]);
                    sum[c] += d;
                    sumsq[c] += d * d;
                }
            }
            for c in &mut self.count[row_base..row_base + k] {
                *c += 1;
            }
        }
        Ok(())
    }

    fn check_coverage(&self) -> Result<()> {
        match self.count.iter().position(|&c| c == 0) {
            Some(pos) => Err(Error::Coverage(format!(
                "pixel ({}, {}) is not covered by any patch",
                pos / self.dims.cols,
                pos % self.dims.cols
            ))),
            None => Ok(()),
        }
    }

    fn mean_of(&self, i: usize) -> f64 {
        let k = f64::from(self.count[i % self.dims.frame_len()]);
        f64::from(self.shift[i]) + self.sum[i] / k
    }

    fn std_of(&self, i: usize) -> f64 {
        let k = f64::from(self.count[i % self.dims.frame_len()]);
        let mean = self.sum[i] / k;
        (self.sumsq[i] / k - mean * mean).max(0.0).sqrt()
    }

    fn covered_index(&self, m: usize, n: usize, t: usize) -> Result<usize> {
        let Dims { rows, cols, frames } = self.dims;
        if m >= rows || n >= cols || t >= frames {
            return Err(Error::Bounds(format!("cell ({m}, {n}, {t}) outside {}", self.dims)));
        }
        if self.count(m, n) == 0 {
            return Err(Error::Coverage(format!("pixel ({m}, {n}) is not covered by any patch")));
        }
        Ok(self.dims.index(m, n, t))
    }

    /// Unclamped mean at one cell, before rounding to `f32`.
    pub fn mean_at(&self, m: usize, n: usize, t: usize) -> Result<f64> {
        Ok(self.mean_of(self.covered_index(m, n, t)?))
    }

    /// Population std at one cell, before rounding to `f32`.
    pub fn std_at(&self, m: usize, n: usize, t: usize) -> Result<f64> {
        Ok(self.std_of(self.covered_index(m, n, t)?))
    }

    /// Mean probability over the covering patches, clamped to `[0, 1]`.
    pub fn finalize_mean(&self) -> Result<DynamicVolume> {
        self.check_coverage()?;
        let data = (0..self.dims.len())
            .map(|i| self.mean_of(i).clamp(0.0, 1.0) as f32)
            .collect();
        Ok(DynamicVolume::from_parts_unchecked(
            self.dims,
            VolumeKind::Probability,
            data,
        ))
    }

    /// Population standard deviation over the covering patches.
    pub fn finalize_std(&self) -> Result<DynamicVolume> {
        self.check_coverage()?;
        let data = (0..self.dims.len()).map(|i| self.std_of(i) as f32).collect();
        Ok(DynamicVolume::from_parts_unchecked(
            self.dims,
            VolumeKind::Dqc,
            data,
        ))
    }
}

/// Patches evaluated concurrently before being folded; bounds peak memory.
const FOLD_CHUNK: usize = 32;

/// Evaluates `infer` for every patch of `grid` and folds the results in grid order.
///
/// `infer` may run concurrently on several patches, but folding always happens
/// sequentially in patch-index order, so the result does not depend on scheduling.
pub fn accumulate<F>(grid: &PatchGrid, infer: F) -> Result<OverlapAccumulator>
where
    F: Fn(usize) -> Result<DynamicVolume> + Sync,
{
    let mut acc = OverlapAccumulator::new(grid.dims());
    let indices: Vec<usize> = (0..grid.len()).collect();
    for chunk in indices.chunks(FOLD_CHUNK) {
        let outputs: Vec<Result<DynamicVolume>> = chunk.par_iter().map(|&i| infer(i)).collect();
        for (&i, probs) in chunk.iter().zip(outputs) {
            acc.fold_patch(grid, i, &probs?)?;
        }
    }
    Ok(acc)
}
