//! Budgeted referral of uncertain frames and their correction.
//!
//! A [`ReferralPlan`] picks a fixed fraction of all frames, either the most
//! uncertain ones by `q_frame` or a uniform random sample. Referred frames
//! are then reviewed: the oracle corrector replaces a frame by its reference
//! only when it is non-contiguous or overlaps the reference poorly, and
//! leaves acceptable frames untouched.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::connectivity::Connectivity;
use crate::dqc::{dice, diagnose_frame, QcSeries};
use crate::error::{Error, Result};
use crate::rle::MaskRle;
use crate::seed;
use crate::stats::{summarize, Summary};
use crate::volumes::SegmentationMask;

/// Default fraction of frames referred for review.
pub const DEFAULT_BUDGET: f64 = 0.10;
/// Default number of random-referral Monte Carlo runs.
pub const DEFAULT_MC_RUNS: usize = 100;
/// Default Dice below which the oracle treats a frame as containing wrong regions.
pub const DEFAULT_DICE_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Dqc,
    Random,
}

/// Whether the budget is spent over the pooled dataset or per slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferralScope {
    #[default]
    Pooled,
    PerSlice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Referral {
    #[serde(rename = "slice")]
    pub slice_id: String,
    pub t: usize,
    pub q_frame: f64,
    /// 1-based position in the review queue.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferralPlan {
    pub strategy: Strategy,
    pub budget: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub scope: ReferralScope,
    pub selected: Vec<Referral>,
}

/// `round(budget * total)`, ties away from zero.
pub fn budget_count(budget: f64, total: usize) -> usize {
    ((budget * total as f64).round() as usize).min(total)
}

struct Candidate<'a> {
    slice_id: &'a str,
    t: usize,
    q: f64,
}

fn select(cands: &[Candidate<'_>], k: usize, strategy: Strategy, rng: &mut seed::Rng) -> Vec<usize> {
    match strategy {
        Strategy::Dqc => {
            let mut order: Vec<usize> = (0..cands.len()).collect();
            order.sort_by(|&a, &b| {
                let (x, y) = (&cands[a], &cands[b]);
                y.q.total_cmp(&x.q)
                    .then_with(|| x.slice_id.cmp(y.slice_id))
                    .then_with(|| x.t.cmp(&y.t))
            });
            order.truncate(k);
            order
        }
        Strategy::Random => sample(rng, cands.len(), k).into_vec(),
    }
}

/// Chooses which frames go to review.
///
/// Candidates are considered in `(slice_id, t)` order. The dqc strategy takes
/// the highest `q_frame` values (ties broken by `(slice_id, t)` ascending);
/// the random strategy draws a uniform sample without replacement from `seed`.
pub fn plan_referrals(
    qc: &[QcSeries],
    strategy: Strategy,
    budget: f64,
    seed: u64,
    scope: ReferralScope,
) -> Result<ReferralPlan> {
    if !(budget > 0.0 && budget <= 1.0) {
        return Err(Error::Config(format!("budget {budget} outside (0, 1]")));
    }
    let mut series: Vec<&QcSeries> = qc.iter().collect();
    series.sort_by(|a, b| a.slice_id.cmp(&b.slice_id));
    if let Some(w) = series.windows(2).find(|w| w[0].slice_id == w[1].slice_id) {
        return Err(Error::Config(format!("duplicate slice id {}", w[0].slice_id)));
    }
    let groups: Vec<Vec<Candidate<'_>>> = match scope {
        ReferralScope::Pooled => vec![series
            .iter()
            .flat_map(|s| {
                s.q_frame.iter().enumerate().map(|(t, &q)| Candidate {
                    slice_id: &s.slice_id,
                    t,
                    q,
                })
            })
            .collect()],
        ReferralScope::PerSlice => series
            .iter()
            .map(|s| {
                s.q_frame
                    .iter()
                    .enumerate()
                    .map(|(t, &q)| Candidate {
                        slice_id: &s.slice_id,
                        t,
                        q,
                    })
                    .collect()
            })
            .collect(),
    };
    if groups.iter().all(|g| g.is_empty()) {
        return Err(Error::Config("no frames to refer".into()));
    }

    let mut rng = seed::rng(seed, &[0x7265_6665_72]);
    let mut chosen: Vec<(&Candidate<'_>, usize)> = Vec::new();
    for group in &groups {
        let k = budget_count(budget, group.len());
        for (pos, idx) in select(group, k, strategy, &mut rng).into_iter().enumerate() {
            chosen.push((&group[idx], pos));
        }
    }
    if scope == ReferralScope::PerSlice && strategy == Strategy::Dqc {
        // interleave slices into one queue by uncertainty
        chosen.sort_by(|(x, _), (y, _)| {
            y.q.total_cmp(&x.q)
                .then_with(|| x.slice_id.cmp(y.slice_id))
                .then_with(|| x.t.cmp(&y.t))
        });
    }
    let selected = chosen
        .into_iter()
        .enumerate()
        .map(|(rank, (c, _))| Referral {
            slice_id: c.slice_id.to_string(),
            t: c.t,
            q_frame: c.q,
            rank: rank + 1,
        })
        .collect();
    Ok(ReferralPlan {
        strategy,
        budget,
        seed: (strategy == Strategy::Random).then_some(seed),
        scope,
        selected,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrectionSource {
    Oracle,
    HumanUi,
}

/// Outcome of reviewing one referred frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRecord {
    pub slice_id: String,
    pub t: usize,
    /// False when the reviewer accepted the frame as is.
    pub corrected: bool,
    pub mask_before: MaskRle,
    pub mask_after: MaskRle,
    pub source: CorrectionSource,
    /// Unix milliseconds; oracle records carry none so runs stay reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub dice_threshold: f64,
    pub connectivity: Connectivity,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            dice_threshold: DEFAULT_DICE_THRESHOLD,
            connectivity: Connectivity::Eight,
        }
    }
}

/// Segmentation and reference of one slice.
#[derive(Debug, Clone, Copy)]
pub struct CohortSlice<'a> {
    pub slice_id: &'a str,
    pub mask: &'a SegmentationMask,
    pub truth: Option<&'a SegmentationMask>,
}

/// Whether the oracle would edit a frame: non-contiguous, or Dice below threshold.
pub fn oracle_wants_correction(frame: &[u8], truth: &[u8], rows: usize, cols: usize, cfg: &OracleConfig) -> bool {
    let diag = diagnose_frame(frame, rows, cols, 0, cfg.connectivity);
    diag.failed || dice(frame, truth).unwrap_or(0.0) < cfg.dice_threshold
}

fn cohort_index<'a>(cohort: &'a [CohortSlice<'a>]) -> HashMap<&'a str, &'a CohortSlice<'a>> {
    cohort.iter().map(|c| (c.slice_id, c)).collect()
}

/// Oracle review of every referred frame.
pub fn oracle_records(plan: &ReferralPlan, cohort: &[CohortSlice<'_>], cfg: &OracleConfig) -> Result<Vec<CorrectionRecord>> {
    let index = cohort_index(cohort);
    plan.selected
        .iter()
        .map(|r| {
            let slice = index
                .get(r.slice_id.as_str())
                .ok_or_else(|| Error::Config(format!("referral names unknown slice {}", r.slice_id)))?;
            let truth = slice
                .truth
                .ok_or_else(|| Error::Config(format!("slice {} has no reference mask", r.slice_id)))?;
            let dims = slice.mask.dims();
            if r.t >= dims.frames {
                return Err(Error::Bounds(format!("frame {} of slice {}", r.t, r.slice_id)));
            }
            let before = slice.mask.frame(r.t);
            let corrected = oracle_wants_correction(before, truth.frame(r.t), dims.rows, dims.cols, cfg);
            let after = if corrected { truth.frame(r.t) } else { before };
            Ok(CorrectionRecord {
                slice_id: r.slice_id.clone(),
                t: r.t,
                corrected,
                mask_before: MaskRle::encode(before, dims.rows, dims.cols)?,
                mask_after: MaskRle::encode(after, dims.rows, dims.cols)?,
                source: CorrectionSource::Oracle,
                timestamp: None,
            })
        })
        .collect()
}

/// Oracle review plus the corrected masks of every slice in the cohort.
pub fn oracle_correct(
    plan: &ReferralPlan,
    cohort: &[CohortSlice<'_>],
    cfg: &OracleConfig,
) -> Result<(Vec<CorrectionRecord>, BTreeMap<String, SegmentationMask>)> {
    let records = oracle_records(plan, cohort, cfg)?;
    let masks = cohort
        .iter()
        .map(|c| Ok((c.slice_id.to_string(), apply_corrections(c.mask, c.slice_id, &records)?)))
        .collect::<Result<_>>()?;
    Ok((records, masks))
}

/// Replaces the frames of `slice_id` named in `records` by their `mask_after`.
pub fn apply_corrections(mask: &SegmentationMask, slice_id: &str, records: &[CorrectionRecord]) -> Result<SegmentationMask> {
    let dims = mask.dims();
    let mut seen: BTreeMap<usize, &MaskRle> = BTreeMap::new();
    for r in records.iter().filter(|r| r.slice_id == slice_id) {
        if r.t >= dims.frames {
            return Err(Error::Bounds(format!("frame {} of slice {slice_id}", r.t)));
        }
        if (r.mask_after.rows, r.mask_after.cols) != (dims.rows, dims.cols) {
            return Err(Error::Shape(format!(
                "correction for {slice_id}:{} is {}x{}, mask is {}x{}",
                r.t, r.mask_after.rows, r.mask_after.cols, dims.rows, dims.cols
            )));
        }
        if let Some(prev) = seen.insert(r.t, &r.mask_after) {
            if prev != &r.mask_after {
                return Err(Error::Conflict(format!(
                    "different corrections for frame {} of slice {slice_id}",
                    r.t
                )));
            }
        }
    }
    let mut out = mask.clone();
    for (t, rle) in seen {
        out.set_frame(t, &rle.decode()?)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
struct FrameEval {
    inter: usize,
    total: usize,
    dice: f64,
    failed: bool,
    fix: bool,
    truth_area: usize,
    truth_failed: bool,
}

#[derive(Debug, Clone)]
struct SliceEval {
    slice_id: String,
    frames: Vec<FrameEval>,
}

/// Cohort metrics under oracle correction, computed from per-frame tallies.
#[derive(Debug, Clone)]
pub struct Evaluator {
    slices: Vec<SliceEval>,
    index: HashMap<String, usize>,
}

/// Metrics of a cohort after a set of referrals has been reviewed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    /// 2D+time Dice per slice, in slice-id order.
    pub slice_dice: Vec<f64>,
    pub dice: Summary,
    pub failure_prevalence: f64,
    pub selected: usize,
    pub selected_failure_prevalence: Option<f64>,
    pub selected_dice_before: Option<Summary>,
    pub selected_dice_after: Option<Summary>,
    pub correction_rate: Option<f64>,
}

impl Evaluator {
    pub fn new(cohort: &[CohortSlice<'_>], cfg: &OracleConfig) -> Result<Self> {
        let mut sorted: Vec<&CohortSlice<'_>> = cohort.iter().collect();
        sorted.sort_by(|a, b| a.slice_id.cmp(b.slice_id));
        let slices: Vec<SliceEval> = sorted
            .into_iter()
            .map(|c| {
                let truth = c
                    .truth
                    .ok_or_else(|| Error::Config(format!("slice {} has no reference mask", c.slice_id)))?;
                if truth.dims() != c.mask.dims() {
                    return Err(Error::Shape(format!("slice {} reference dims differ", c.slice_id)));
                }
                let dims = c.mask.dims();
                let frames = (0..dims.frames)
                    .map(|t| {
                        let (a, b) = (c.mask.frame(t), truth.frame(t));
                        let inter = a.iter().zip(b).filter(|(x, y)| **x != 0 && **y != 0).count();
                        let area_a = a.iter().filter(|&&x| x != 0).count();
                        let truth_area = b.iter().filter(|&&x| x != 0).count();
                        let diag = diagnose_frame(a, dims.rows, dims.cols, t, cfg.connectivity);
                        let tdiag = diagnose_frame(b, dims.rows, dims.cols, t, cfg.connectivity);
                        let d = dice(a, b)?;
                        Ok(FrameEval {
                            inter,
                            total: area_a + truth_area,
                            dice: d,
                            failed: diag.failed,
                            fix: diag.failed || d < cfg.dice_threshold,
                            truth_area,
                            truth_failed: tdiag.failed,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(SliceEval {
                    slice_id: c.slice_id.to_string(),
                    frames,
                })
            })
            .collect::<Result<_>>()?;
        let index = slices
            .iter()
            .enumerate()
            .map(|(i, s)| (s.slice_id.clone(), i))
            .collect();
        Ok(Self { slices, index })
    }

    pub fn slice_ids(&self) -> Vec<&str> {
        self.slices.iter().map(|s| s.slice_id.as_str()).collect()
    }

    pub fn total_frames(&self) -> usize {
        self.slices.iter().map(|s| s.frames.len()).sum()
    }

    /// Metrics after the oracle reviews every frame of `plan` (`None` = baseline).
    pub fn evaluate(&self, plan: Option<&ReferralPlan>) -> Result<Outcome> {
        let mut frames: Vec<Vec<FrameEval>> = self.slices.iter().map(|s| s.frames.clone()).collect();
        let mut before = Vec::new();
        let mut after = Vec::new();
        let (mut sel_failed, mut fixed) = (0usize, 0usize);
        let selected = plan.map_or(&[][..], |p| p.selected.as_slice());
        for r in selected {
            let si = *self
                .index
                .get(&r.slice_id)
                .ok_or_else(|| Error::Config(format!("referral names unknown slice {}", r.slice_id)))?;
            let f = frames[si]
                .get_mut(r.t)
                .ok_or_else(|| Error::Bounds(format!("frame {} of slice {}", r.t, r.slice_id)))?;
            before.push(f.dice);
            sel_failed += usize::from(f.failed);
            if f.fix {
                fixed += 1;
                *f = FrameEval {
                    inter: f.truth_area,
                    total: 2 * f.truth_area,
                    dice: 1.0,
                    failed: f.truth_failed,
                    fix: false,
                    ..*f
                };
            }
            after.push(f.dice);
        }
        let slice_dice: Vec<f64> = frames
            .iter()
            .map(|fs| {
                let (inter, total) = fs.iter().fold((0, 0), |(i, t), f| (i + f.inter, t + f.total));
                if total == 0 {
                    1.0
                } else {
                    2.0 * inter as f64 / total as f64
                }
            })
            .collect();
        let n_frames: usize = frames.iter().map(Vec::len).sum();
        let n_failed: usize = frames.iter().flatten().filter(|f| f.failed).count();
        let n_sel = selected.len();
        Ok(Outcome {
            dice: summarize(&slice_dice)?,
            slice_dice,
            failure_prevalence: n_failed as f64 / n_frames.max(1) as f64,
            selected: n_sel,
            selected_failure_prevalence: (n_sel > 0).then(|| sel_failed as f64 / n_sel as f64),
            selected_dice_before: summarize(&before).ok(),
            selected_dice_after: summarize(&after).ok(),
            correction_rate: (n_sel > 0).then(|| fixed as f64 / n_sel as f64),
        })
    }
}

/// Spread of random-referral outcomes over Monte Carlo runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub runs: usize,
    pub seed0: u64,
    /// Mean per-slice Dice of each run, summarized over runs.
    pub dice: Summary,
    pub failure_prevalence: Summary,
    pub selected_failure_prevalence: Summary,
    pub selected_dice_before: Summary,
    pub selected_dice_after: Summary,
    pub correction_rate: Summary,
    /// Per-slice Dice averaged over runs, in slice-id order.
    pub mean_slice_dice: Vec<f64>,
    #[serde(skip)]
    pub outcomes: Vec<Outcome>,
}

/// Random referral repeated `n_runs` times with seeds `seed0 + r`.
pub fn monte_carlo_random(
    qc: &[QcSeries],
    evaluator: &Evaluator,
    budget: f64,
    n_runs: usize,
    seed0: u64,
) -> Result<MonteCarloSummary> {
    if n_runs == 0 {
        return Err(Error::Config("at least one Monte Carlo run is required".into()));
    }
    let outcomes: Vec<Outcome> = (0..n_runs as u64)
        .into_par_iter()
        .map(|r| {
            let plan = plan_referrals(qc, Strategy::Random, budget, seed0.wrapping_add(r), ReferralScope::Pooled)?;
            evaluator.evaluate(Some(&plan))
        })
        .collect::<Result<_>>()?;
    let pick = |f: &dyn Fn(&Outcome) -> Option<f64>| -> Result<Summary> {
        summarize(&outcomes.iter().filter_map(f).collect::<Vec<_>>())
    };
    let n_slices = outcomes[0].slice_dice.len();
    let mean_slice_dice = (0..n_slices)
        .map(|i| outcomes.iter().map(|o| o.slice_dice[i]).sum::<f64>() / n_runs as f64)
        .collect();
    Ok(MonteCarloSummary {
        runs: n_runs,
        seed0,
        dice: pick(&|o| Some(o.dice.mean))?,
        failure_prevalence: pick(&|o| Some(o.failure_prevalence))?,
        selected_failure_prevalence: pick(&|o| o.selected_failure_prevalence)?,
        selected_dice_before: pick(&|o| o.selected_dice_before.map(|s| s.mean))?,
        selected_dice_after: pick(&|o| o.selected_dice_after.map(|s| s.mean))?,
        correction_rate: pick(&|o| o.correction_rate)?,
        mean_slice_dice,
        outcomes,
    })
}
