//! Per-patch segmenters.
//!
//! The engine is model-agnostic: anything that maps a `K x K x T` intensity
//! patch to a probability patch of the same shape can drive it. Three
//! implementations are provided:
//!
//! * [`NoisyOracle`]: perturbs the reference mask in logit space with
//!   per-patch noise, so overlapping patches disagree in a controlled way;
//!   selected frames can be corrupted to produce failed segmentations.
//! * [`IntensityBand`]: a classical band-pass on per-patch normalized intensity.
//! * [`ExternalProbs`]: reads probabilities produced by an external model.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patching::PatchGrid;
use crate::seed;
use crate::volumes::{read_volume, write_volume, DynamicVolume, SegmentationMask, VolumeKind};

/// Where a patch sits and how its randomness is keyed.
#[derive(Debug, Clone, Copy)]
pub struct PatchContext<'a> {
    pub slice_id: &'a str,
    pub patch_index: usize,
    pub origin: (usize, usize),
    /// Stride of the grid the patch belongs to.
    pub stride: usize,
    pub seed: u64,
    /// Full-slice reference mask, for oracle backends only.
    pub truth: Option<&'a SegmentationMask>,
}

/// A per-patch segmenter. Must be a pure function of `(patch, ctx)`.
pub trait SegmenterBackend: Send + Sync {
    fn name(&self) -> &str;

    fn infer(&self, patch: &DynamicVolume, ctx: &PatchContext<'_>) -> Result<DynamicVolume>;
}

#[inline]
fn logistic(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn logit(p: f32) -> f32 {
    (p / (1.0 - p)).ln()
}

/// Clamp applied to the reference mask before moving to logit space.
pub const ORACLE_EPS: f32 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptMode {
    /// Zero the probabilities on one half of the patch (top, bottom, left or right).
    EraseHalf,
    /// Push a dilated band around the reference mask towards foreground.
    Inflate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameCorruption {
    pub frame: usize,
    pub mode: CorruptMode,
}

/// Controls the disagreement injected by [`NoisyOracle`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseProfile {
    /// Std of the scalar logit offset drawn once per patch.
    pub bias_sigma: f64,
    /// Std of the smooth spatial logit field drawn once per patch.
    pub field_sigma: f64,
    /// Lattice spacing of the spatial field, in pixels.
    pub field_scale: f64,
    pub corrupt_frames: Vec<FrameCorruption>,
    pub seed: u64,
    /// Amplifies the patch noise on frames whose estimated image noise exceeds
    /// the patch median, emulating a model that is less certain on poor frames.
    /// Zero disables the coupling.
    pub snr_gain: f64,
    /// Logit shift applied by [`CorruptMode::Inflate`].
    pub inflate_logit: f64,
    /// Dilation radius (pixels) of the inflated band.
    pub inflate_radius: usize,
    /// Fraction of patches that apply the inflate corruption on a corrupted frame.
    pub inflate_fraction: f64,
}

impl Default for NoiseProfile {
    fn default() -> Self {
        Self {
            bias_sigma: 0.5,
            field_sigma: 0.5,
            field_scale: 16.0,
            corrupt_frames: Vec::new(),
            seed: 0,
            snr_gain: 0.0,
            inflate_logit: 9.0,
            inflate_radius: 3,
            inflate_fraction: 0.5,
        }
    }
}

impl NoiseProfile {
    /// No perturbation at all: fused output reproduces the reference mask.
    pub fn noiseless() -> Self {
        Self {
            bias_sigma: 0.0,
            field_sigma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self, frames: usize) -> Result<()> {
        if !(self.bias_sigma >= 0.0 && self.field_sigma >= 0.0 && self.snr_gain >= 0.0) {
            return Err(Error::Config("noise sigmas and gain must be non-negative".into()));
        }
        if !(self.field_scale > 0.0) {
            return Err(Error::Config("field_scale must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.inflate_fraction) {
            return Err(Error::Config("inflate_fraction must lie in [0, 1]".into()));
        }
        if let Some(c) = self.corrupt_frames.iter().find(|c| c.frame >= frames) {
            return Err(Error::Config(format!(
                "corrupted frame {} outside 0..{frames}",
                c.frame
            )));
        }
        Ok(())
    }

    fn corruption(&self, t: usize) -> Option<CorruptMode> {
        self.corrupt_frames
            .iter()
            .find(|c| c.frame == t)
            .map(|c| c.mode)
    }
}

/// Smooth random field on a `k x k` patch: bilinear interpolation of an i.i.d.
/// standard normal lattice with spacing `scale`.
fn smooth_field(rng: &mut seed::Rng, k: usize, scale: f64) -> Vec<f32> {
    let nodes = (k as f64 / scale).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..nodes * nodes)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut out = Vec::with_capacity(k * k);
    for r in 0..k {
        let y = r as f64 / scale;
        let (y0, fy) = (y.floor() as usize, y.fract());
        for c in 0..k {
            let x = c as f64 / scale;
            let (x0, fx) = (x.floor() as usize, x.fract());
            let at = |i: usize, j: usize| lattice[i * nodes + j];
            let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
            out.push(v as f32);
        }
    }
    out
}

/// Robust per-frame noise level: scaled median absolute horizontal difference.
fn frame_noise_levels(patch: &DynamicVolume) -> Vec<f64> {
    let dims = patch.dims();
    (0..dims.frames)
        .map(|t| {
            let frame = patch.frame(t);
            let mut diffs: Vec<f32> = Vec::with_capacity(dims.rows * dims.cols);
            for row in frame.chunks_exact(dims.cols) {
                diffs.extend(row.windows(2).map(|w| (w[1] - w[0]).abs()));
            }
            if diffs.is_empty() {
                return 0.0;
            }
            let mid = diffs.len() / 2;
            let (_, median, _) = diffs.select_nth_unstable_by(mid, f32::total_cmp);
            1.4826 * f64::from(*median) / std::f64::consts::SQRT_2
        })
        .collect()
}

fn noise_gains(patch: &DynamicVolume, gain: f64) -> Vec<f32> {
    let frames = patch.dims().frames;
    if gain == 0.0 {
        return vec![1.0; frames];
    }
    let levels = frame_noise_levels(patch);
    let mut sorted = levels.clone();
    sorted.sort_by(f64::total_cmp);
    let reference = sorted[sorted.len() / 2];
    if reference <= f64::EPSILON {
        return vec![1.0; frames];
    }
    levels
        .iter()
        .map(|&l| (1.0 + gain * (l / reference - 1.0).max(0.0)) as f32)
        .collect()
}

/// Reference mask perturbed in logit space; see [`NoiseProfile`].
#[derive(Debug, Clone)]
pub struct NoisyOracle {
    profile: NoiseProfile,
}

impl NoisyOracle {
    pub fn new(profile: NoiseProfile) -> Self {
        Self { profile }
    }

    pub fn profile(&self) -> &NoiseProfile {
        &self.profile
    }
}

impl SegmenterBackend for NoisyOracle {
    fn name(&self) -> &str {
        "oracle-noise"
    }

    fn infer(&self, patch: &DynamicVolume, ctx: &PatchContext<'_>) -> Result<DynamicVolume> {
        let truth = ctx.truth.ok_or_else(|| {
            Error::Config(format!(
                "oracle backend needs a reference mask for slice {}",
                ctx.slice_id
            ))
        })?;
        noisy_oracle_infer(patch, truth, &self.profile, ctx)
    }
}

/// Perturbs the reference mask under the patch footprint.
///
/// `p = logistic(logit(clamp(truth, eps, 1 - eps)) + g_t * (b + f(m, n)))` where
/// `b` is a per-patch scalar, `f` a per-patch smooth field and `g_t` the
/// optional noise-coupled gain of frame `t`. Corrupted frames are modified
/// afterwards.
pub fn noisy_oracle_infer(
    patch: &DynamicVolume,
    truth: &SegmentationMask,
    profile: &NoiseProfile,
    ctx: &PatchContext<'_>,
) -> Result<DynamicVolume> {
    let pdims = patch.dims();
    let fdims = truth.dims();
    let k = pdims.rows;
    let (r0, c0) = ctx.origin;
    if pdims.cols != k || pdims.frames != fdims.frames || r0 + k > fdims.rows || c0 + k > fdims.cols {
        return Err(Error::Shape(format!(
            "patch {pdims} at ({r0},{c0}) does not fit reference {fdims}"
        )));
    }
    profile.validate(fdims.frames)?;

    let mut rng = seed::rng(
        profile.seed,
        &[
            ctx.seed,
            seed::hash_str(ctx.slice_id),
            ctx.stride as u64,
            ctx.patch_index as u64,
        ],
    );
    let bias = if profile.bias_sigma > 0.0 {
        (profile.bias_sigma * rng.sample::<f64, _>(StandardNormal)) as f32
    } else {
        0.0
    };
    let mut noise = vec![bias; k * k];
    if profile.field_sigma > 0.0 {
        let field = smooth_field(&mut rng, k, profile.field_scale);
        for (n, f) in noise.iter_mut().zip(field) {
            *n += profile.field_sigma as f32 * f;
        }
    }
    let quiet = noise.iter().all(|&n| n == 0.0);
    let gains = noise_gains(patch, profile.snr_gain);

    let hi = logit(1.0 - ORACLE_EPS);
    let lo = -hi;
    let (p_hi, p_lo) = (logistic(hi), logistic(lo));
    let mut out = Vec::with_capacity(pdims.len());
    let mut logits = vec![0.0f32; k * k];
    for t in 0..pdims.frames {
        let truth_frame = truth.frame(t);
        let corruption = profile.corruption(t);
        // Draws happen for every frame so streams stay aligned across profiles.
        let half: u32 = rng.random_range(0..4);
        let inflate_here = rng.random::<f64>() < profile.inflate_fraction;

        if quiet && corruption.is_none() {
            for r in 0..k {
                let row = &truth_frame[(r0 + r) * fdims.cols + c0..][..k];
                out.extend(row.iter().map(|&b| if b != 0 { p_hi } else { p_lo }));
            }
            continue;
        }

        let g = gains[t];
        for r in 0..k {
            let row = &truth_frame[(r0 + r) * fdims.cols + c0..][..k];
            for c in 0..k {
                let base = if row[c] != 0 { hi } else { lo };
                logits[r * k + c] = base + g * noise[r * k + c];
            }
        }
        if corruption == Some(CorruptMode::Inflate) && inflate_here {
            let radius = profile.inflate_radius as isize;
            let shift = profile.inflate_logit as f32;
            for r in 0..k {
                for c in 0..k {
                    if dilated_contains(truth_frame, fdims.rows, fdims.cols, r0 + r, c0 + c, radius) {
                        logits[r * k + c] += shift;
                    }
                }
            }
        }
        let start = out.len();
        out.extend(logits.iter().map(|&l| logistic(l)));
        if corruption == Some(CorruptMode::EraseHalf) {
            let frame = &mut out[start..];
            let h = k / 2;
            for r in 0..k {
                for c in 0..k {
                    let erased = match half {
                        0 => r < h,
                        1 => r >= h,
                        2 => c < h,
                        _ => c >= h,
                    };
                    if erased {
                        frame[r * k + c] = 0.0;
                    }
                }
            }
        }
    }
    Ok(DynamicVolume::from_parts_unchecked(
        pdims,
        VolumeKind::Probability,
        out,
    ))
}

/// Whether `(m, n)` lies within Euclidean distance `radius` of a foreground pixel.
fn dilated_contains(frame: &[u8], rows: usize, cols: usize, m: usize, n: usize, radius: isize) -> bool {
    let r2 = radius * radius;
    for dm in -radius..=radius {
        let mm = m as isize + dm;
        if mm < 0 || mm >= rows as isize {
            continue;
        }
        for dn in -radius..=radius {
            if dm * dm + dn * dn > r2 {
                continue;
            }
            let nn = n as isize + dn;
            if nn >= 0 && nn < cols as isize && frame[mm as usize * cols + nn as usize] != 0 {
                return true;
            }
        }
    }
    false
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandParams {
    pub lo: f64,
    pub hi: f64,
    pub tau: f64,
}

impl Default for BandParams {
    fn default() -> Self {
        Self {
            lo: 0.25,
            hi: 0.6,
            tau: 0.05,
        }
    }
}

/// Soft band-pass on patch-normalized intensity.
#[derive(Debug, Clone)]
pub struct IntensityBand {
    params: BandParams,
}

impl IntensityBand {
    pub fn new(params: BandParams) -> Result<Self> {
        if !(params.tau > 0.0) {
            return Err(Error::Config("band tau must be positive".into()));
        }
        Ok(Self { params })
    }
}

impl SegmenterBackend for IntensityBand {
    fn name(&self) -> &str {
        "intensity"
    }

    fn infer(&self, patch: &DynamicVolume, _ctx: &PatchContext<'_>) -> Result<DynamicVolume> {
        Ok(intensity_band_infer(patch, &self.params))
    }
}

/// `p = logistic((x - lo) / tau) * logistic((hi - x) / tau)` with `x` the patch
/// intensity rescaled to `[0, 1]` by the patch min and max.
pub fn intensity_band_infer(patch: &DynamicVolume, params: &BandParams) -> DynamicVolume {
    let (min, max) = patch
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = f64::from(max - min);
    let data = patch
        .data()
        .iter()
        .map(|&v| {
            let x = if range > 0.0 {
                f64::from(v - min) / range
            } else {
                0.0
            };
            let p = 1.0 / (1.0 + (-(x - params.lo) / params.tau).exp())
                * (1.0 / (1.0 + (-(params.hi - x) / params.tau).exp()));
            p as f32
        })
        .collect();
    DynamicVolume::from_parts_unchecked(patch.dims(), VolumeKind::Probability, data)
}

/// Directory holding externally computed probabilities for one slice and grid.
pub fn external_patch_dir(root: &Path, slice_id: &str, stride: usize) -> PathBuf {
    root.join(slice_id).join(format!("stride_{stride}"))
}

pub fn external_patch_path(root: &Path, slice_id: &str, stride: usize, index: usize) -> PathBuf {
    external_patch_dir(root, slice_id, stride).join(format!("probs_{index}.f32"))
}

fn load_external_patch(path: &Path, grid: &PatchGrid, index: usize) -> Result<DynamicVolume> {
    if !path.is_file() {
        return Err(Error::Format(format!(
            "missing probabilities for patch {index} ({})",
            path.display()
        )));
    }
    read_volume(path, grid.patch_dims(), VolumeKind::Probability).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("patch {index}: {msg}")),
        other => other,
    })
}

/// Loads `probs_<i>.f32` for every patch of `grid`, in grid order.
pub fn external_probs_load(root: &Path, slice_id: &str, grid: &PatchGrid) -> Result<Vec<DynamicVolume>> {
    (0..grid.len())
        .map(|i| load_external_patch(&external_patch_path(root, slice_id, grid.stride(), i), grid, i))
        .collect()
}

/// Writes patch probabilities in the layout read by [`external_probs_load`].
pub fn external_probs_write(
    root: &Path,
    slice_id: &str,
    grid: &PatchGrid,
    patches: &[DynamicVolume],
) -> Result<()> {
    if patches.len() != grid.len() {
        return Err(Error::Shape(format!(
            "{} patches for a grid of {}",
            patches.len(),
            grid.len()
        )));
    }
    for (i, p) in patches.iter().enumerate() {
        write_volume(p, external_patch_path(root, slice_id, grid.stride(), i))?;
    }
    Ok(())
}

/// Serves probabilities produced by another program.
#[derive(Debug, Clone)]
pub struct ExternalProbs {
    root: PathBuf,
}

impl ExternalProbs {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
}

impl SegmenterBackend for ExternalProbs {
    fn name(&self) -> &str {
        "external"
    }

    fn infer(&self, patch: &DynamicVolume, ctx: &PatchContext<'_>) -> Result<DynamicVolume> {
        let path = external_patch_path(&self.root, ctx.slice_id, ctx.stride, ctx.patch_index);
        if !path.is_file() {
            return Err(Error::Format(format!(
                "missing probabilities for patch {} ({})",
                ctx.patch_index,
                path.display()
            )));
        }
        read_volume(&path, patch.dims(), VolumeKind::Probability)
            .map_err(|e| Error::Format(format!("patch {}: {e}", ctx.patch_index)))
    }
}

/// Serializable backend selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendConfig {
    OracleNoise(NoiseProfile),
    Intensity(BandParams),
    External { dir: PathBuf },
}

impl BackendConfig {
    pub fn build(&self) -> Result<Box<dyn SegmenterBackend>> {
        Ok(match self {
            BackendConfig::OracleNoise(p) => Box::new(NoisyOracle::new(p.clone())),
            BackendConfig::Intensity(b) => Box::new(IntensityBand::new(*b)?),
            BackendConfig::External { dir } => Box::new(ExternalProbs::new(dir.clone())),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patching::{build_grid, extract_patch};
    use crate::volumes::Dims;

    fn disk_truth(dims: Dims) -> SegmentationMask {
        SegmentationMask::from_fn(dims, |m, n, _| {
            let (dy, dx) = (m as f64 - 15.5, n as f64 - 15.5);
            let r = (dy * dy + dx * dx).sqrt();
            (5.0..=10.0).contains(&r)
        })
    }

    fn ctx<'a>(truth: &'a SegmentationMask, i: usize, origin: (usize, usize)) -> PatchContext<'a> {
        PatchContext {
            slice_id: "s",
            patch_index: i,
            origin,
            stride: 4,
            seed: 11,
            truth: Some(truth),
        }
    }

    #[test]
    fn noiseless_oracle_reproduces_truth() {
        let dims = Dims::new(32, 32, 3);
        let truth = disk_truth(dims);
        let image = DynamicVolume::zeros(dims, VolumeKind::Intensity);
        let grid = build_grid(dims, 16, 8).unwrap();
        let oracle = NoisyOracle::new(NoiseProfile::noiseless());
        for i in 0..grid.len() {
            let origin = grid.origin(i).unwrap();
            let patch = extract_patch(&image, &grid, i).unwrap();
            let p = oracle.infer(&patch, &ctx(&truth, i, origin)).unwrap();
            for t in 0..3 {
                for r in 0..16 {
                    for c in 0..16 {
                        let fg = p.get(r, c, t) >= 0.5;
                        assert_eq!(fg, truth.get(origin.0 + r, origin.1 + c, t));
                    }
                }
            }
        }
    }

    #[test]
    fn oracle_is_deterministic_and_requires_truth() {
        let dims = Dims::new(32, 32, 2);
        let truth = disk_truth(dims);
        let image = DynamicVolume::zeros(dims, VolumeKind::Intensity);
        let grid = build_grid(dims, 16, 8).unwrap();
        let profile = NoiseProfile {
            bias_sigma: 1.0,
            field_sigma: 1.0,
            ..NoiseProfile::default()
        };
        let oracle = NoisyOracle::new(profile);
        let patch = extract_patch(&image, &grid, 3).unwrap();
        let c = ctx(&truth, 3, grid.origin(3).unwrap());
        assert_eq!(oracle.infer(&patch, &c).unwrap(), oracle.infer(&patch, &c).unwrap());
        let no_truth = PatchContext { truth: None, ..c };
        assert!(matches!(oracle.infer(&patch, &no_truth), Err(Error::Config(_))));
    }

    #[test]
    fn erase_half_zeroes_half_the_patch() {
        let dims = Dims::new(32, 32, 2);
        let truth = SegmentationMask::from_fn(dims, |_, _, _| true);
        let image = DynamicVolume::zeros(dims, VolumeKind::Intensity);
        let grid = build_grid(dims, 16, 8).unwrap();
        let profile = NoiseProfile {
            corrupt_frames: vec![FrameCorruption {
                frame: 1,
                mode: CorruptMode::EraseHalf,
            }],
            ..NoiseProfile::noiseless()
        };
        let patch = extract_patch(&image, &grid, 0).unwrap();
        let p = noisy_oracle_infer(&patch, &truth, &profile, &ctx(&truth, 0, (0, 0))).unwrap();
        let zeros = |t: usize| p.frame(t).iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros(0), 0);
        assert_eq!(zeros(1), 16 * 8);
    }

    #[test]
    fn inflate_pushes_band_to_foreground() {
        let dims = Dims::new(32, 32, 1);
        let truth = disk_truth(dims);
        let image = DynamicVolume::zeros(dims, VolumeKind::Intensity);
        let grid = build_grid(dims, 32, 32).unwrap();
        let profile = NoiseProfile {
            corrupt_frames: vec![FrameCorruption {
                frame: 0,
                mode: CorruptMode::Inflate,
            }],
            inflate_fraction: 1.0,
            ..NoiseProfile::noiseless()
        };
        let patch = extract_patch(&image, &grid, 0).unwrap();
        let p = noisy_oracle_infer(&patch, &truth, &profile, &ctx(&truth, 0, (0, 0))).unwrap();
        // (15, 15+12) is 2 pixels outside the outer radius 10.5
        assert!(!truth.get(15, 27, 0));
        assert!(p.get(15, 27, 0) > 0.5);
        assert!(p.get(0, 0, 0) < 0.01);
    }

    #[test]
    fn bias_noise_creates_disagreement() {
        // Monte Carlo over 100 patches at a fixed interior pixel.
        let dims = Dims::new(16, 16, 1);
        let truth = SegmentationMask::from_fn(dims, |_, _, _| true);
        let patch = DynamicVolume::zeros(dims, VolumeKind::Intensity);
        let profile = NoiseProfile {
            bias_sigma: 1.0,
            field_sigma: 0.0,
            ..NoiseProfile::default()
        };
        let values: Vec<f64> = (0..100)
            .map(|i| {
                let c = ctx(&truth, i, (0, 0));
                f64::from(noisy_oracle_infer(&patch, &truth, &profile, &c).unwrap().get(8, 8, 0))
            })
            .collect();
        let mean = values.iter().sum::<f64>() / 100.0;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 99.0).sqrt();
        let distinct = values.iter().filter(|&&v| v != values[0]).count();
        assert!(sd > 0.0 && distinct > 90, "sd={sd} distinct={distinct}");
    }

    #[test]
    fn snr_gain_amplifies_noisy_frames() {
        let dims = Dims::new(16, 16, 5);
        let mut rng = seed::rng(3, &[]);
        let patch = DynamicVolume::from_fn(dims, VolumeKind::Intensity, |_, _, t| {
            let sigma = if t == 2 { 0.3 } else { 0.1 };
            sigma * rng.sample::<f32, _>(StandardNormal)
        })
        .unwrap();
        let gains = noise_gains(&patch, 1.0);
        assert!((gains[2] - 3.0).abs() < 0.6, "{gains:?}");
        assert!(gains.iter().enumerate().all(|(t, &g)| t == 2 || g < 1.3));
        assert_eq!(noise_gains(&patch, 0.0), vec![1.0; 5]);
    }

    #[test]
    fn band_limits_and_constant_patch() {
        let dims = Dims::new(1, 3, 1);
        let patch = DynamicVolume::new(dims, VolumeKind::Intensity, vec![0.0, 0.5, 1.0]).unwrap();
        let p = intensity_band_infer(&patch, &BandParams { lo: 0.3, hi: 0.7, tau: 0.02 });
        assert!(p.get(0, 1, 0) > 0.95);
        assert!(p.get(0, 2, 0) < 0.05);
        let flat = DynamicVolume::new(dims, VolumeKind::Intensity, vec![4.0; 3]).unwrap();
        let p = intensity_band_infer(&flat, &BandParams { lo: 0.3, hi: 0.7, tau: 0.02 });
        assert!(p.data().iter().all(|&v| v < 0.01));
    }

    #[test]
    fn band_prefers_mid_band() {
        let mut rng = seed::rng(5, &[]);
        for _ in 0..200 {
            let lo: f64 = rng.random_range(0.0..0.9);
            let hi: f64 = rng.random_range(lo + 0.01..1.0);
            let tau: f64 = rng.random_range(0.001..0.5);
            let mid = ((lo + hi) / 2.0) as f32;
            let out = if rng.random::<bool>() { 1.0f32 } else { 0.0 };
            // anchors 0 and 1 pin the normalization
            let patch = DynamicVolume::new(
                Dims::new(1, 4, 1),
                VolumeKind::Intensity,
                vec![0.0, 1.0, mid, out],
            )
            .unwrap();
            let p = intensity_band_infer(&patch, &BandParams { lo, hi, tau });
            assert!(p.get(0, 2, 0) > p.get(0, 3, 0), "lo={lo} hi={hi} tau={tau} out={out}");
        }
    }

    #[test]
    fn external_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let dims = Dims::new(8, 8, 2);
        let grid = build_grid(dims, 4, 4).unwrap();
        let patches: Vec<DynamicVolume> = (0..grid.len())
            .map(|i| {
                DynamicVolume::from_fn(grid.patch_dims(), VolumeKind::Probability, |m, n, t| {
                    ((i + m + n + t) % 10) as f32 / 10.0
                })
                .unwrap()
            })
            .collect();
        external_probs_write(dir.path(), "a", &grid, &patches).unwrap();
        assert_eq!(external_probs_load(dir.path(), "a", &grid).unwrap(), patches);

        std::fs::remove_file(external_patch_path(dir.path(), "a", 4, 2)).unwrap();
        match external_probs_load(dir.path(), "a", &grid) {
            Err(Error::Format(msg)) => assert!(msg.contains("patch 2"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }

        let mut bad = patches[2].clone().into_data();
        bad[0] = 1.5;
        std::fs::write(
            external_patch_path(dir.path(), "a", 4, 2),
            bad.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>(),
        )
        .unwrap();
        assert!(matches!(external_probs_load(dir.path(), "a", &grid), Err(Error::Format(_))));
    }

    #[test]
    fn backend_config_parses_from_json() {
        let cfg: BackendConfig = serde_json::from_str(
            r#"{"kind":"oracle-noise","bias_sigma":1.0,"corrupt_frames":[{"frame":3,"mode":"erase-half"}]}"#,
        )
        .unwrap();
        match &cfg {
            BackendConfig::OracleNoise(p) => {
                assert_eq!(p.bias_sigma, 1.0);
                assert_eq!(p.corrupt_frames[0].mode, CorruptMode::EraseHalf);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(cfg.build().unwrap().name(), "oracle-noise");
    }
}
