//! Independent reference implementations used by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::VecDeque;

use dqc_core::backends::{PatchContext, SegmenterBackend};
use dqc_core::{Dims, DynamicVolume, Result, VolumeKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Origins along one axis by exhaustive scan: every multiple of `w` that fits,
/// plus the border-flush origin.
pub fn origins_by_scan(len: usize, k: usize, w: usize) -> Vec<usize> {
    (0..=len - k).filter(|&o| o % w == 0 || o == len - k).collect()
}

/// Row-major patch origins.
pub fn grid_by_scan(dims: Dims, k: usize, w: usize) -> Vec<(usize, usize)> {
    let rows = origins_by_scan(dims.rows, k, w);
    let cols = origins_by_scan(dims.cols, k, w);
    rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect()
}

/// Mean and population std at every cell, gathering the values of all
/// covering patches and using a two-pass formula.
pub fn gather(dims: Dims, k: usize, origins: &[(usize, usize)], patches: &[DynamicVolume]) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![f64::NAN; dims.len()];
    let mut std = vec![f64::NAN; dims.len()];
    for t in 0..dims.frames {
        for m in 0..dims.rows {
            for n in 0..dims.cols {
                let values: Vec<f64> = origins
                    .iter()
                    .zip(patches)
                    .filter(|((r, c), _)| *r <= m && m < r + k && *c <= n && n < c + k)
                    .map(|((r, c), p)| f64::from(p.get(m - r, n - c, t)))
                    .collect();
                if values.is_empty() {
                    continue;
                }
                let mu = values.iter().sum::<f64>() / values.len() as f64;
                let var = values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / values.len() as f64;
                let i = dims.index(m, n, t);
                mean[i] = mu;
                std[i] = var.sqrt();
            }
        }
    }
    (mean, std)
}

pub fn random_patch(rng: &mut ChaCha8Rng, k: usize, frames: usize) -> DynamicVolume {
    let dims = Dims::new(k, k, frames);
    let data = (0..dims.len()).map(|_| rng.random::<f32>()).collect();
    DynamicVolume::new(dims, VolumeKind::Probability, data).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Component count by breadth-first flood fill.
pub fn flood_fill_count(frame: &[u8], rows: usize, cols: usize, eight: bool) -> usize {
    let mut seen = vec![false; frame.len()];
    let mut count = 0;
    for start in 0..frame.len() {
        if frame[start] == 0 || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let (m, n) = ((i / cols) as isize, (i % cols) as isize);
            for dm in -1isize..=1 {
                for dn in -1isize..=1 {
                    if (dm == 0 && dn == 0) || (!eight && dm != 0 && dn != 0) {
                        continue;
                    }
                    let (mm, nn) = (m + dm, n + dn);
                    if mm < 0 || nn < 0 || mm >= rows as isize || nn >= cols as isize {
                        continue;
                    }
                    let j = mm as usize * cols + nn as usize;
                    if frame[j] != 0 && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    count
}

/// Dice with two empty masks counting as perfect agreement.
pub fn dice_by_sets(a: &[u8], b: &[u8]) -> f64 {
    let sa: Vec<usize> = (0..a.len()).filter(|&i| a[i] != 0).collect();
    let sb: Vec<usize> = (0..b.len()).filter(|&i| b[i] != 0).collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    let inter = sa.iter().filter(|i| sb.binary_search(i).is_ok()).count();
    2.0 * inter as f64 / (sa.len() + sb.len()) as f64
}

/// Deterministic test segmenter: each patch gets its own reproducible random
/// probabilities, independent of the image content.
pub struct HashBackend {
    pub salt: u64,
}

impl HashBackend {
    pub fn patch(&self, ctx_stride: usize, index: usize, dims: Dims) -> DynamicVolume {
        let mut r = rng(self.salt ^ ((ctx_stride as u64) << 32) ^ index as u64);
        let data = (0..dims.len())
            .map(|_| {
                // keep clear of the 0.5 decision boundary
                let v: f32 = r.random_range(0.0..0.45);
                if r.random::<bool>() { 1.0 - v } else { v }
            })
            .collect();
        DynamicVolume::new(dims, VolumeKind::Probability, data).unwrap()
    }
}

impl SegmenterBackend for HashBackend {
    fn name(&self) -> &str {
        "hash"
    }

    fn infer(&self, patch: &DynamicVolume, ctx: &PatchContext<'_>) -> Result<DynamicVolume> {
        Ok(self.patch(ctx.stride, ctx.patch_index, patch.dims()))
    }
}
