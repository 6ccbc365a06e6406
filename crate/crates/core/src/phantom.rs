//! Synthetic free-breathing first-pass perfusion phantom.
//!
//! Each slice is a short-axis view with a blood pool disk surrounded by a
//! myocardial annulus on a background. The annulus moves with a sinusoidal
//! breathing displacement, and every tissue follows its own gamma-variate
//! contrast curve. Selected "hard" frames get extra noise and reduced
//! myocardium/background contrast; they are the frames graded difficult.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::connectivity::{count_components, Connectivity};
use crate::error::{Error, Result};
use crate::seed;
use crate::volumes::{write_dataset, Dims, DynamicVolume, Manifest, SegmentationMask, SliceRecord, VolumeKind};

/// Gamma-variate bolus curve, zero before `t0` and equal to `peak` at its maximum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastCurve {
    pub t0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub peak: f64,
}

impl ContrastCurve {
    pub fn at(&self, t: f64) -> f64 {
        let s = t - self.t0;
        if s <= 0.0 {
            return 0.0;
        }
        let t_peak = self.alpha * self.beta;
        self.peak * (s / t_peak).powf(self.alpha) * (self.alpha - s / self.beta).exp()
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.t0 >= 0.0 && self.alpha > 0.0 && self.beta > 0.0 && self.peak >= 0.0) {
            return Err(Error::Config(format!(
                "{name} curve needs t0 >= 0, alpha > 0, beta > 0, peak >= 0"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Breathing {
    /// Peak displacement along the row axis, pixels.
    pub amplitude: f64,
    /// Period in frames.
    pub period: f64,
    /// Phase offset in radians.
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: Dims,
    /// Annulus center (row, col) at zero displacement.
    pub center: (f64, f64),
    pub inner_radius: f64,
    pub outer_radius: f64,
    pub breathing: Breathing,
    pub blood_pool: ContrastCurve,
    pub myocardium: ContrastCurve,
    pub background: ContrastCurve,
    /// Pre-contrast signal shared by all tissues.
    pub baseline: f64,
    pub noise_sigma: f64,
    pub hard_frames: Vec<usize>,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: Dims::new(128, 128, 25),
            center: (64.0, 64.0),
            inner_radius: 14.0,
            outer_radius: 22.0,
            breathing: Breathing {
                amplitude: 2.5,
                period: 7.0,
                phase: 0.0,
            },
            // blood pool peaks first, then myocardium; background enhances weakly
            blood_pool: ContrastCurve {
                t0: 2.0,
                alpha: 3.0,
                beta: 1.0,
                peak: 0.9,
            },
            myocardium: ContrastCurve {
                t0: 4.0,
                alpha: 3.0,
                beta: 1.8,
                peak: 0.35,
            },
            background: ContrastCurve {
                t0: 3.0,
                alpha: 2.0,
                beta: 3.0,
                peak: 0.12,
            },
            baseline: 0.08,
            noise_sigma: 0.02,
            hard_frames: vec![3, 9, 15, 21],
            seed: 0,
        }
    }
}

/// Multiplier on the noise level of hard frames.
const HARD_NOISE_FACTOR: f64 = 3.0;

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let Dims { rows, cols, frames } = self.dims;
        if rows == 0 || cols == 0 || frames == 0 {
            return Err(Error::Config(format!("phantom dims {} must be non-empty", self.dims)));
        }
        let half = rows.min(cols) as f64 / 2.0;
        if !(0.0 < self.inner_radius && self.inner_radius < self.outer_radius && self.outer_radius < half) {
            return Err(Error::Config(format!(
                "radii must satisfy 0 < inner ({}) < outer ({}) < {half}",
                self.inner_radius, self.outer_radius
            )));
        }
        let reach = self.outer_radius + self.breathing.amplitude.abs();
        let (cm, cn) = self.center;
        if cm - reach < 0.0 || cm + reach > (rows - 1) as f64 || cn - reach < 0.0 || cn + reach > (cols - 1) as f64 {
            return Err(Error::Config("moving annulus leaves the field of view".into()));
        }
        if !(self.breathing.period > 0.0) {
            return Err(Error::Config("breathing period must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise sigma must be non-negative".into()));
        }
        if let Some(t) = self.hard_frames.iter().find(|&&t| t >= frames) {
            return Err(Error::Config(format!("hard frame {t} outside 0..{frames}")));
        }
        self.blood_pool.validate("blood pool")?;
        self.myocardium.validate("myocardium")?;
        self.background.validate("background")?;
        Ok(())
    }

    /// Annulus center at frame `t`.
    pub fn center_at(&self, t: usize) -> (f64, f64) {
        let b = &self.breathing;
        let shift = b.amplitude * (2.0 * PI * t as f64 / b.period + b.phase).sin();
        (self.center.0 + shift, self.center.1)
    }

    pub fn is_hard(&self, t: usize) -> bool {
        self.hard_frames.contains(&t)
    }
}

/// Renders one slice: image, reference mask and difficulty grades.
pub fn generate_slice(spec: &PhantomSpec, slice_id: &str) -> Result<SliceRecord> {
    spec.validate()?;
    let dims = spec.dims;
    let mut rng = seed::rng(spec.seed, &[seed::hash_str("phantom-noise")]);
    let mut image = Vec::with_capacity(dims.len());
    let mut truth = Vec::with_capacity(dims.len());
    for t in 0..dims.frames {
        let (cm, cn) = spec.center_at(t);
        let tf = t as f64;
        let hard = spec.is_hard(t);
        let blood = spec.baseline + spec.blood_pool.at(tf);
        let bg = spec.baseline + spec.background.at(tf);
        let mut myo = spec.baseline + spec.myocardium.at(tf);
        let mut sigma = spec.noise_sigma;
        if hard {
            myo = bg + (myo - bg) / 2.0;
            sigma *= HARD_NOISE_FACTOR;
        }
        for m in 0..dims.rows {
            for n in 0..dims.cols {
                let d = ((m as f64 - cm).powi(2) + (n as f64 - cn).powi(2)).sqrt();
                let in_myo = d >= spec.inner_radius && d <= spec.outer_radius;
                let level = if d < spec.inner_radius {
                    blood
                } else if in_myo {
                    myo
                } else {
                    bg
                };
                let noise: f64 = rng.sample(StandardNormal);
                image.push((level + sigma * noise) as f32);
                truth.push(u8::from(in_myo));
            }
        }
    }
    let truth = SegmentationMask::new(dims, truth)?;
    for t in 0..dims.frames {
        let parts = count_components(truth.frame(t), dims.rows, dims.cols, Connectivity::Eight);
        if parts != 1 {
            return Err(Error::Config(format!(
                "reference myocardium of frame {t} has {parts} components"
            )));
        }
    }
    let grades = (0..dims.frames).map(|t| u8::from(spec.is_hard(t))).collect();
    SliceRecord::new(
        slice_id,
        DynamicVolume::new(dims, VolumeKind::Intensity, image)?,
        Some(truth),
        Some(grades),
    )
}

/// Per-slice random variation of the base geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Jitter {
    /// Max center offset per axis, pixels.
    pub center: f64,
    /// Max change of each radius, pixels.
    pub radius: f64,
    /// Randomize the breathing phase over a full cycle.
    pub phase: bool,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            center: 4.0,
            radius: 1.5,
            phase: true,
        }
    }
}

pub fn slice_id(i: usize) -> String {
    format!("s{i:03}")
}

/// Specs for `n_slices` jittered copies of `base`.
pub fn cohort_specs(n_slices: usize, base: &PhantomSpec, seed: u64, jitter: &Jitter) -> Result<Vec<PhantomSpec>> {
    if n_slices == 0 {
        return Err(Error::Config("need at least one slice".into()));
    }
    (0..n_slices)
        .map(|i| {
            let mut rng = seed::rng(seed, &[seed::hash_str("phantom-jitter"), i as u64]);
            let mut spec = base.clone();
            let mut u = |w: f64| if w > 0.0 { rng.random_range(-w..=w) } else { 0.0 };
            spec.center.0 += u(jitter.center);
            spec.center.1 += u(jitter.center);
            spec.inner_radius += u(jitter.radius);
            spec.outer_radius += u(jitter.radius);
            if jitter.phase {
                spec.breathing.phase = u(PI) + PI;
            }
            spec.seed = seed::mix(seed, &[i as u64]);
            spec.validate()?;
            Ok(spec)
        })
        .collect()
}

/// Generates the slices of a cohort in memory.
pub fn generate_cohort(n_slices: usize, base: &PhantomSpec, seed: u64, jitter: &Jitter) -> Result<Vec<SliceRecord>> {
    use rayon::prelude::*;
    cohort_specs(n_slices, base, seed, jitter)?
        .par_iter()
        .enumerate()
        .map(|(i, spec)| generate_slice(spec, &slice_id(i)))
        .collect()
}

/// Generates a cohort and writes it as a dataset directory.
pub fn generate_dataset(
    n_slices: usize,
    base: &PhantomSpec,
    seed: u64,
    jitter: &Jitter,
    dir: impl AsRef<Path>,
) -> Result<Manifest> {
    let slices = generate_cohort(n_slices, base, seed, jitter)?;
    write_dataset(dir, &slices)
}
