//! Fused segmentation, disagreement map and the derived quality scores.
//!
//! * `S(m,n,t) = 1` iff the mean patch probability at `(m,n,t)` is `>= 0.5`.
//! * `M(m,n,t)` is the population std of the patch probabilities there.
//! * `q_pixel = M(m,n,t) / area(t)`, `q_frame(t) = ||M(t)||_F / area(t)` and
//!   `q_slice` is the mean of `q_frame` over time.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::backends::{PatchContext, SegmenterBackend};
use crate::connectivity::{count_components, Connectivity};
use crate::error::{Error, Result};
use crate::patching::{accumulate, extract_patch, PatchGrid};
use crate::volumes::{DynamicVolume, SegmentationMask, SliceRecord, VolumeKind};

/// Score given to frames with an empty segmentation; sorts above every real score.
pub const SENTINEL_MAX: f64 = f64::MAX;

/// Binarization threshold on the fused probability (inclusive).
pub const FUSION_THRESHOLD: f32 = 0.5;

/// Patch geometry for the two combination passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub patch: usize,
    /// Stride of the grid that produces the segmentation.
    pub stride_seg: usize,
    /// Stride of the grid that produces the disagreement map.
    pub stride_map: usize,
    /// Permit `stride_map == stride_seg`.
    pub allow_equal_strides: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            patch: 64,
            stride_seg: 16,
            stride_map: 2,
            allow_equal_strides: false,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.stride_map < self.stride_seg
            || (self.allow_equal_strides && self.stride_map == self.stride_seg);
        if !ok {
            return Err(Error::Config(format!(
                "map stride {} must be smaller than segmentation stride {}",
                self.stride_map, self.stride_seg
            )));
        }
        if self.stride_seg > self.patch {
            return Err(Error::Config(format!(
                "segmentation stride {} exceeds patch size {}",
                self.stride_seg, self.patch
            )));
        }
        Ok(())
    }
}

/// `1` where the fused probability is at least 0.5.
pub fn binarize(mean_probs: &DynamicVolume) -> SegmentationMask {
    debug_assert_eq!(mean_probs.kind(), VolumeKind::Probability);
    let bits = mean_probs
        .data()
        .iter()
        .map(|&p| u8::from(p >= FUSION_THRESHOLD))
        .collect();
    SegmentationMask::new(mean_probs.dims(), bits).expect("binary data with matching length")
}

/// Output of [`compute_dqc_map`].
#[derive(Debug, Clone)]
pub struct DqcOutput {
    pub mask: SegmentationMask,
    pub map: DynamicVolume,
    /// Number of backend invocations over both grids.
    pub backend_calls: usize,
}

fn run_grid(
    slice: &SliceRecord,
    backend: &dyn SegmenterBackend,
    grid: &PatchGrid,
    seed: u64,
    calls: &AtomicUsize,
) -> Result<crate::patching::OverlapAccumulator> {
    accumulate(grid, |i| {
        let patch = extract_patch(&slice.image, grid, i)?;
        let ctx = PatchContext {
            slice_id: &slice.slice_id,
            patch_index: i,
            origin: grid.origin(i)?,
            stride: grid.stride(),
            seed,
            truth: slice.truth.as_ref(),
        };
        calls.fetch_add(1, Ordering::Relaxed);
        let probs = backend.infer(&patch, &ctx)?;
        if probs.dims() != patch.dims() || probs.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Shape(format!(
                "backend {} returned an invalid probability patch for patch {i}",
                backend.name()
            )));
        }
        Ok(probs)
    })
}

/// Fused segmentation from the coarse grid and disagreement map from the fine grid.
pub fn compute_dqc_map(
    slice: &SliceRecord,
    backend: &dyn SegmenterBackend,
    config: &GridConfig,
    seed: u64,
) -> Result<DqcOutput> {
    config.validate()?;
    let dims = slice.dims();
    let seg_grid = PatchGrid::new(dims, config.patch, config.stride_seg)?;
    let map_grid = PatchGrid::new(dims, config.patch, config.stride_map)?;
    let calls = AtomicUsize::new(0);
    let mask = binarize(&run_grid(slice, backend, &seg_grid, seed, &calls)?.finalize_mean()?);
    let map = run_grid(slice, backend, &map_grid, seed, &calls)?.finalize_std()?;
    Ok(DqcOutput {
        mask,
        map,
        backend_calls: calls.into_inner(),
    })
}

fn check_pair(map: &DynamicVolume, mask: &SegmentationMask) -> Result<()> {
    if map.dims() != mask.dims() {
        return Err(Error::Shape(format!(
            "map {} and mask {} differ",
            map.dims(),
            mask.dims()
        )));
    }
    Ok(())
}

/// Disagreement at one location normalized by the segmented area of its frame.
pub fn q_pixel(map: &DynamicVolume, mask: &SegmentationMask, m: usize, n: usize, t: usize) -> Result<f64> {
    check_pair(map, mask)?;
    let dims = map.dims();
    if m >= dims.rows || n >= dims.cols || t >= dims.frames {
        return Err(Error::Bounds(format!("({m},{n},{t}) outside {dims}")));
    }
    let area = mask.area(t);
    if area == 0 {
        return Err(Error::EmptySegmentation(format!("frame {t} has no segmented pixels")));
    }
    Ok(f64::from(map.get(m, n, t)) / area as f64)
}

/// Per-pixel normalized map for frame `t` (visualization).
pub fn q_pixel_frame(map: &DynamicVolume, mask: &SegmentationMask, t: usize) -> Result<Vec<f64>> {
    check_pair(map, mask)?;
    let area = mask.area(t);
    if area == 0 {
        return Err(Error::EmptySegmentation(format!("frame {t} has no segmented pixels")));
    }
    Ok(map.frame(t).iter().map(|&v| f64::from(v) / area as f64).collect())
}

/// Frobenius norm of one frame, accumulated in f64.
pub fn frobenius(frame: &[f32]) -> f64 {
    frame
        .iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt()
}

/// Per-frame and per-slice uncertainty for one slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcSeries {
    pub slice_id: String,
    /// Per-frame score; [`SENTINEL_MAX`] marks an empty segmentation.
    pub q_frame: Vec<f64>,
    /// Mean of the finite per-frame scores; `None` when every frame is empty.
    pub q_slice: Option<f64>,
    pub sentinel_count: usize,
    pub area: Vec<usize>,
}

impl QcSeries {
    pub fn frames(&self) -> usize {
        self.q_frame.len()
    }
}

pub fn is_sentinel(q: f64) -> bool {
    q == SENTINEL_MAX
}

/// `||M(t)||_F / area(t)` for every frame, plus the slice summary.
pub fn q_frame(slice_id: &str, map: &DynamicVolume, mask: &SegmentationMask) -> Result<QcSeries> {
    check_pair(map, mask)?;
    let area = mask.areas();
    let q: Vec<f64> = area
        .iter()
        .enumerate()
        .map(|(t, &a)| {
            if a == 0 {
                SENTINEL_MAX
            } else {
                frobenius(map.frame(t)) / a as f64
            }
        })
        .collect();
    let mut series = QcSeries {
        slice_id: slice_id.to_string(),
        sentinel_count: q.iter().filter(|&&v| is_sentinel(v)).count(),
        q_frame: q,
        q_slice: None,
        area,
    };
    series.q_slice = q_slice(&series).ok();
    Ok(series)
}

/// Mean of the non-sentinel per-frame scores.
pub fn q_slice(series: &QcSeries) -> Result<f64> {
    let finite: Vec<f64> = series
        .q_frame
        .iter()
        .copied()
        .filter(|&q| !is_sentinel(q))
        .collect();
    if finite.is_empty() {
        return Err(Error::EmptySegmentation(format!(
            "slice {} has no non-empty frame",
            series.slice_id
        )));
    }
    Ok(finite.iter().sum::<f64>() / finite.len() as f64)
}

/// Contiguity check of one segmented frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameDiagnostics {
    pub t: usize,
    pub area: usize,
    pub component_count: usize,
    /// True unless the frame is exactly one connected component.
    pub failed: bool,
}

pub fn diagnose_frame(frame: &[u8], rows: usize, cols: usize, t: usize, connectivity: Connectivity) -> FrameDiagnostics {
    let component_count = count_components(frame, rows, cols, connectivity);
    FrameDiagnostics {
        t,
        area: frame.iter().filter(|&&b| b != 0).count(),
        component_count,
        failed: component_count != 1,
    }
}

pub fn frame_diagnostics(mask: &SegmentationMask, connectivity: Connectivity) -> Vec<FrameDiagnostics> {
    let dims = mask.dims();
    (0..dims.frames)
        .map(|t| diagnose_frame(mask.frame(t), dims.rows, dims.cols, t, connectivity))
        .collect()
}

/// Fraction of frames marked failed.
pub fn failure_prevalence(diagnostics: &[FrameDiagnostics]) -> f64 {
    if diagnostics.is_empty() {
        return 0.0;
    }
    diagnostics.iter().filter(|d| d.failed).count() as f64 / diagnostics.len() as f64
}

/// `2|a & b| / (|a| + |b|)`, with two empty inputs scoring 1.
pub fn dice(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "dice inputs have {} and {} pixels",
            a.len(),
            b.len()
        )));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x != 0, y != 0);
        inter += usize::from(x && y);
        total += usize::from(x) + usize::from(y);
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// 2D+time Dice over whole volumes.
pub fn dice_volume(a: &SegmentationMask, b: &SegmentationMask) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("masks {} and {} differ", a.dims(), b.dims())));
    }
    dice(a.bits(), b.bits())
}

/// Per-frame 2D Dice.
pub fn dice_frames(a: &SegmentationMask, b: &SegmentationMask) -> Result<Vec<f64>> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("masks {} and {} differ", a.dims(), b.dims())));
    }
    (0..a.dims().frames).map(|t| dice(a.frame(t), b.frame(t))).collect()
}
