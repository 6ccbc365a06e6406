//! End-to-end studies over a dataset: baseline segmentation with QC scores,
//! budgeted referral with oracle correction against a random-referral Monte
//! Carlo baseline, and agreement between per-frame scores and difficulty grades.
//!
//! A run directory holds everything later steps need:
//!
//! ```text
//! run.json                      configuration, including the dataset path
//! qc.json                       per-slice QcSeries
//! diagnostics.json              per-slice frame diagnostics
//! slices/<id>/mask.u8, dqc.f32  fused segmentation and disagreement map
//! report.json, report.txt       baseline report
//! ```
//!
//! Reports never contain absolute paths or timestamps, so reruns with the
//! same inputs and seeds produce byte-identical `report.json` files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::BackendConfig;
use crate::connectivity::Connectivity;
use crate::dqc::{compute_dqc_map, dice_volume, frame_diagnostics, q_frame, FrameDiagnostics, GridConfig, QcSeries};
use crate::error::{Error, Result};
use crate::hitl::{
    apply_corrections, monte_carlo_random, oracle_records, plan_referrals, CohortSlice, CorrectionRecord, Evaluator,
    MonteCarloSummary, OracleConfig, ReferralPlan, ReferralScope, Strategy, DEFAULT_BUDGET, DEFAULT_MC_RUNS,
};
use crate::render::overlay_png;
use crate::seed;
use crate::stats::{auc, paired_permutation_test, summarize, Summary, DEFAULT_PERMUTATIONS};
use crate::volumes::{
    read_dataset, read_json, read_mask, read_volume, write_atomic, write_json, write_volume, Dims, DynamicVolume,
    SegmentationMask, SliceRecord, VolumeKind,
};

/// Version of every JSON document written by this module.
pub const SCHEMA_VERSION: u32 = 1;

pub const RUN_FILE: &str = "run.json";
pub const QC_FILE: &str = "qc.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const REFERRALS_FILE: &str = "referrals.json";
pub const CORRECTIONS_FILE: &str = "corrections.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema_version: u32,
    pub dataset: PathBuf,
    pub backend: BackendConfig,
    pub grid: GridConfig,
    pub seed: u64,
    #[serde(default)]
    pub connectivity: Connectivity,
}

impl RunConfig {
    pub fn new(dataset: impl Into<PathBuf>, backend: BackendConfig, grid: GridConfig, seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            dataset: dataset.into(),
            backend,
            grid,
            seed,
            connectivity: Connectivity::Eight,
        }
    }
}

/// Baseline outputs for one slice.
#[derive(Debug, Clone)]
pub struct SliceResult {
    pub slice: SliceRecord,
    pub mask: SegmentationMask,
    pub map: DynamicVolume,
    pub qc: QcSeries,
    pub diagnostics: Vec<FrameDiagnostics>,
    /// 2D+time Dice against the reference, when there is one.
    pub dice: Option<f64>,
    pub backend_calls: usize,
}

/// A baseline run: every slice segmented and scored, in slice-id order.
#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub config: RunConfig,
    pub slices: Vec<SliceResult>,
}

impl BaselineRun {
    pub fn qc(&self) -> Vec<QcSeries> {
        self.slices.iter().map(|s| s.qc.clone()).collect()
    }

    pub fn slice(&self, slice_id: &str) -> Option<&SliceResult> {
        self.slices.iter().find(|s| s.slice.slice_id == slice_id)
    }

    pub fn cohort(&self) -> Vec<CohortSlice<'_>> {
        self.slices
            .iter()
            .map(|s| CohortSlice {
                slice_id: &s.slice.slice_id,
                mask: &s.mask,
                truth: s.slice.truth.as_ref(),
            })
            .collect()
    }

    pub fn report(&self) -> Result<BaselineReport> {
        baseline_report(self)
    }
}

fn slice_dir(run_dir: &Path, slice_id: &str) -> PathBuf {
    run_dir.join("slices").join(slice_id)
}

/// Segments and scores every slice; nothing is written to disk.
pub fn compute_baseline(slices: Vec<SliceRecord>, config: RunConfig) -> Result<BaselineRun> {
    config.grid.validate()?;
    let backend = config.backend.build()?;
    let mut slices = slices;
    slices.sort_by(|a, b| a.slice_id.cmp(&b.slice_id));
    if let Some(w) = slices.windows(2).find(|w| w[0].slice_id == w[1].slice_id) {
        return Err(Error::Config(format!("duplicate slice id {}", w[0].slice_id)));
    }
    let results = slices
        .into_par_iter()
        .map(|slice| {
            let out = compute_dqc_map(&slice, backend.as_ref(), &config.grid, config.seed)?;
            let qc = q_frame(&slice.slice_id, &out.map, &out.mask)?;
            let diagnostics = frame_diagnostics(&out.mask, config.connectivity);
            let dice = slice.truth.as_ref().map(|t| dice_volume(&out.mask, t)).transpose()?;
            Ok(SliceResult {
                slice,
                mask: out.mask,
                map: out.map,
                qc,
                diagnostics,
                dice,
                backend_calls: out.backend_calls,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BaselineRun {
        config,
        slices: results,
    })
}

/// Baseline over the dataset named in `config`, written to `out_dir`.
pub fn run_baseline(config: RunConfig, out_dir: impl AsRef<Path>) -> Result<BaselineRun> {
    let slices = read_dataset(&config.dataset)?;
    let run = compute_baseline(slices, config)?;
    write_run(&run, out_dir)?;
    Ok(run)
}

/// Writes the run files and the baseline report.
pub fn write_run(run: &BaselineRun, out_dir: impl AsRef<Path>) -> Result<BaselineReport> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in &run.slices {
        let sd = slice_dir(dir, &s.slice.slice_id);
        write_volume(&s.mask, sd.join("mask.u8"))?;
        write_volume(&s.map, sd.join("dqc.f32"))?;
    }
    write_json(dir.join(QC_FILE), &run.qc())?;
    let diagnostics: BTreeMap<&str, &Vec<FrameDiagnostics>> = run
        .slices
        .iter()
        .map(|s| (s.slice.slice_id.as_str(), &s.diagnostics))
        .collect();
    write_json(dir.join(DIAGNOSTICS_FILE), &diagnostics)?;
    let report = baseline_report(run)?;
    write_report(dir, &report, &report.to_text())?;
    // last, so a directory with run.json is complete
    write_json(dir.join(RUN_FILE), &run.config)?;
    Ok(report)
}

/// Reloads a run written by [`write_run`], re-reading its dataset.
pub fn load_run(run_dir: impl AsRef<Path>) -> Result<BaselineRun> {
    let dir = run_dir.as_ref();
    let run_file = dir.join(RUN_FILE);
    if !run_file.is_file() {
        return Err(Error::Config(format!("{} is not a run directory", dir.display())));
    }
    let config: RunConfig = read_json(&run_file)?;
    if config.schema_version != SCHEMA_VERSION {
        return Err(Error::Format(format!("unsupported run schema {}", config.schema_version)));
    }
    let qc: Vec<QcSeries> = read_json(dir.join(QC_FILE))?;
    let mut diagnostics: BTreeMap<String, Vec<FrameDiagnostics>> = read_json(dir.join(DIAGNOSTICS_FILE))?;
    let mut dataset: BTreeMap<String, SliceRecord> = read_dataset(&config.dataset)?
        .into_iter()
        .map(|s| (s.slice_id.clone(), s))
        .collect();
    let slices = qc
        .into_iter()
        .map(|qc| {
            let slice = dataset
                .remove(&qc.slice_id)
                .ok_or_else(|| Error::Format(format!("slice {} missing from dataset", qc.slice_id)))?;
            let dims = slice.dims();
            let sd = slice_dir(dir, &slice.slice_id);
            let mask = read_mask(sd.join("mask.u8"), dims)?;
            let map = read_volume(sd.join("dqc.f32"), dims, VolumeKind::Dqc)?;
            let diag = diagnostics
                .remove(&slice.slice_id)
                .ok_or_else(|| Error::Format(format!("no diagnostics for slice {}", slice.slice_id)))?;
            let dice = slice.truth.as_ref().map(|t| dice_volume(&mask, t)).transpose()?;
            Ok(SliceResult {
                slice,
                mask,
                map,
                qc,
                diagnostics: diag,
                dice,
                backend_calls: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BaselineRun { config, slices })
}

fn write_report<T: Serialize>(dir: &Path, report: &T, text: &str) -> Result<()> {
    write_json(dir.join(REPORT_JSON), report)?;
    write_atomic(dir.join(REPORT_TXT), text.as_bytes())
}

/// Dice and failure prevalence of one configuration (one column of the comparison table).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub dice: Summary,
    pub failure_prevalence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRow {
    pub slice_id: String,
    pub dice: Option<f64>,
    pub failed_frames: usize,
    pub q_slice: Option<f64>,
    pub sentinel_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub schema_version: u32,
    pub experiment: String,
    pub backend: BackendConfig,
    pub grid: GridConfig,
    pub seed: u64,
    pub slices: usize,
    pub frames: usize,
    pub failed_frames: usize,
    pub failure_prevalence: f64,
    /// Mean ± std of per-slice 2D+time Dice; absent without references.
    pub dice: Option<Summary>,
    pub sentinel_frames: usize,
    pub per_slice: Vec<SliceRow>,
}

fn baseline_report(run: &BaselineRun) -> Result<BaselineReport> {
    let frames: usize = run.slices.iter().map(|s| s.diagnostics.len()).sum();
    let failed: usize = run
        .slices
        .iter()
        .map(|s| s.diagnostics.iter().filter(|d| d.failed).count())
        .sum();
    let dices: Vec<f64> = run.slices.iter().filter_map(|s| s.dice).collect();
    let dice = if dices.len() == run.slices.len() {
        Some(summarize(&dices)?)
    } else {
        None
    };
    Ok(BaselineReport {
        schema_version: SCHEMA_VERSION,
        experiment: "baseline".into(),
        backend: run.config.backend.clone(),
        grid: run.config.grid,
        seed: run.config.seed,
        slices: run.slices.len(),
        frames,
        failed_frames: failed,
        failure_prevalence: failed as f64 / frames.max(1) as f64,
        dice,
        sentinel_frames: run.slices.iter().map(|s| s.qc.sentinel_count).sum(),
        per_slice: run
            .slices
            .iter()
            .map(|s| SliceRow {
                slice_id: s.slice.slice_id.clone(),
                dice: s.dice,
                failed_frames: s.diagnostics.iter().filter(|d| d.failed).count(),
                q_slice: s.qc.q_slice,
                sentinel_frames: s.qc.sentinel_count,
            })
            .collect(),
    })
}

fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

fn opt3(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.3}"))
}

impl BaselineReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Baseline ({} slices, {} frames)", self.slices, self.frames);
        let _ = writeln!(
            s,
            "  Dice score          {}",
            self.dice.map_or_else(|| "-".into(), |d| d.display())
        );
        let _ = writeln!(
            s,
            "  Failure prevalence  {} ({} frames)",
            pct(self.failure_prevalence),
            self.failed_frames
        );
        let _ = writeln!(s, "  Empty frames        {}", self.sentinel_frames);
        let _ = writeln!(s);
        let _ = writeln!(s, "  {:<12} {:>7} {:>7} {:>12}", "slice", "dice", "failed", "q_slice");
        for r in &self.per_slice {
            let _ = writeln!(
                s,
                "  {:<12} {:>7} {:>7} {:>12}",
                r.slice_id,
                opt3(r.dice),
                r.failed_frames,
                r.q_slice.map_or_else(|| "-".into(), |q| format!("{q:.4e}"))
            );
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HitlOptions {
    pub budget: f64,
    pub mc_runs: usize,
    pub seed: u64,
    pub permutations: usize,
    pub oracle: OracleConfig,
}

impl Default for HitlOptions {
    fn default() -> Self {
        Self {
            budget: DEFAULT_BUDGET,
            mc_runs: DEFAULT_MC_RUNS,
            seed: 0,
            permutations: DEFAULT_PERMUTATIONS,
            oracle: OracleConfig::default(),
        }
    }
}

/// Review statistics restricted to the referred frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedFrames {
    pub failure_prevalence: f64,
    pub dice_before: f64,
    pub dice_after: f64,
    pub correction_rate: f64,
}

/// Random-referral statistics as mean ± std over Monte Carlo runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedFramesMc {
    pub failure_prevalence: Summary,
    pub dice_before: Summary,
    pub dice_after: Summary,
    pub correction_rate: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomColumn {
    /// Per-slice Dice averaged over runs, then summarized across slices.
    pub dice: Summary,
    /// Cohort mean Dice of each run, summarized across runs.
    pub dice_over_runs: Summary,
    pub failure_prevalence: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PValues {
    pub dqc_vs_baseline: f64,
    pub random_vs_baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitlReport {
    pub schema_version: u32,
    pub experiment: String,
    pub budget: f64,
    pub mc_runs: usize,
    pub seed: u64,
    pub permutations: usize,
    pub frames: usize,
    pub referred_frames: usize,
    pub baseline: Column,
    pub random: RandomColumn,
    pub dqc: Column,
    pub dice_gain_dqc: f64,
    pub dice_gain_random: f64,
    pub selected_dqc: SelectedFrames,
    pub selected_random: SelectedFramesMc,
    pub p_values: PValues,
}

/// Full output of [`run_hitl_comparison`].
#[derive(Debug, Clone)]
pub struct HitlComparison {
    pub report: HitlReport,
    pub plan: ReferralPlan,
    pub records: Vec<CorrectionRecord>,
    pub random: MonteCarloSummary,
}

fn column(dice: Summary, prevalence: f64) -> Column {
    Column {
        dice,
        failure_prevalence: prevalence,
    }
}

/// dQC-guided referral against the baseline and the random-referral Monte Carlo.
pub fn run_hitl_comparison(run: &BaselineRun, opts: &HitlOptions) -> Result<HitlComparison> {
    let cohort = run.cohort();
    let evaluator = Evaluator::new(&cohort, &opts.oracle)?;
    let qc = run.qc();
    let base = evaluator.evaluate(None)?;
    let plan = plan_referrals(&qc, Strategy::Dqc, opts.budget, opts.seed, ReferralScope::Pooled)?;
    let guided = evaluator.evaluate(Some(&plan))?;
    let records = oracle_records(&plan, &cohort, &opts.oracle)?;
    let mc = monte_carlo_random(&qc, &evaluator, opts.budget, opts.mc_runs, opts.seed)?;

    let p_dqc = paired_permutation_test(&guided.slice_dice, &base.slice_dice, opts.permutations, opts.seed)?;
    let p_random = paired_permutation_test(&mc.mean_slice_dice, &base.slice_dice, opts.permutations, opts.seed)?;
    let random_dice = summarize(&mc.mean_slice_dice)?;
    let missing = || Error::Degenerate("no frames were referred".into());
    let report = HitlReport {
        schema_version: SCHEMA_VERSION,
        experiment: "hitl".into(),
        budget: opts.budget,
        mc_runs: opts.mc_runs,
        seed: opts.seed,
        permutations: opts.permutations,
        frames: evaluator.total_frames(),
        referred_frames: plan.selected.len(),
        dice_gain_dqc: guided.dice.mean - base.dice.mean,
        dice_gain_random: random_dice.mean - base.dice.mean,
        baseline: column(base.dice, base.failure_prevalence),
        random: RandomColumn {
            dice: random_dice,
            dice_over_runs: mc.dice,
            failure_prevalence: mc.failure_prevalence,
        },
        dqc: column(guided.dice, guided.failure_prevalence),
        selected_dqc: SelectedFrames {
            failure_prevalence: guided.selected_failure_prevalence.ok_or_else(missing)?,
            dice_before: guided.selected_dice_before.ok_or_else(missing)?.mean,
            dice_after: guided.selected_dice_after.ok_or_else(missing)?.mean,
            correction_rate: guided.correction_rate.ok_or_else(missing)?,
        },
        selected_random: SelectedFramesMc {
            failure_prevalence: mc.selected_failure_prevalence,
            dice_before: mc.selected_dice_before,
            dice_after: mc.selected_dice_after,
            correction_rate: mc.correction_rate,
        },
        p_values: PValues {
            dqc_vs_baseline: p_dqc,
            random_vs_baseline: p_random,
        },
    };
    Ok(HitlComparison {
        report,
        plan,
        records,
        random: mc,
    })
}

/// Writes the comparison report, the dQC referral queue, oracle records and
/// one overlay PNG per referred frame into `out_dir`.
pub fn write_hitl(run: &BaselineRun, cmp: &HitlComparison, out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    write_report(dir, &cmp.report, &cmp.report.to_text())?;
    write_json(dir.join(REFERRALS_FILE), &cmp.plan)?;
    write_json(dir.join(CORRECTIONS_FILE), &cmp.records)?;
    write_overlays(run, &cmp.plan, dir.join("overlays"))
}

/// Image, mask contour and disagreement heatmap for each referred frame.
pub fn write_overlays(run: &BaselineRun, plan: &ReferralPlan, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for r in &plan.selected {
        let s = run
            .slice(&r.slice_id)
            .ok_or_else(|| Error::Config(format!("referral names unknown slice {}", r.slice_id)))?;
        let Dims { rows, cols, frames } = s.slice.dims();
        if r.t >= frames {
            return Err(Error::Bounds(format!("frame {} of slice {}", r.t, r.slice_id)));
        }
        let png = overlay_png(s.slice.image.frame(r.t), s.mask.frame(r.t), s.map.frame(r.t), rows, cols, 0.6)?;
        write_atomic(dir.join(format!("rank{:03}_{}_t{:02}.png", r.rank, r.slice_id, r.t)), &png)?;
    }
    Ok(())
}

impl HitlReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "Referral of {:.0}% of frames ({} of {}), {} random runs",
            100.0 * self.budget,
            self.referred_frames,
            self.frames,
            self.mc_runs
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "  {:<20} {:>16} {:>16} {:>16}", "", "Baseline", "Random", "dQC-guided");
        let _ = writeln!(
            s,
            "  {:<20} {:>16} {:>16} {:>16}",
            "Dice score",
            self.baseline.dice.display(),
            self.random.dice.display(),
            self.dqc.dice.display()
        );
        let _ = writeln!(
            s,
            "  {:<20} {:>16} {:>16} {:>16}",
            "Failure prevalence",
            pct(self.baseline.failure_prevalence),
            self.random.failure_prevalence.display_percent(),
            pct(self.dqc.failure_prevalence)
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "  Referred frames only     {:>16} {:>16}", "Random", "dQC-guided");
        let _ = writeln!(
            s,
            "  Failure prevalence       {:>16} {:>16}",
            self.selected_random.failure_prevalence.display_percent(),
            pct(self.selected_dqc.failure_prevalence)
        );
        let _ = writeln!(
            s,
            "  Dice before              {:>16} {:>16}",
            self.selected_random.dice_before.display(),
            format!("{:.3}", self.selected_dqc.dice_before)
        );
        let _ = writeln!(
            s,
            "  Dice after               {:>16} {:>16}",
            self.selected_random.dice_after.display(),
            format!("{:.3}", self.selected_dqc.dice_after)
        );
        let _ = writeln!(
            s,
            "  Correction rate          {:>16} {:>16}",
            self.selected_random.correction_rate.display_percent(),
            pct(self.selected_dqc.correction_rate)
        );
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "  Dice gain: dQC-guided {:+.4}, random {:+.4}",
            self.dice_gain_dqc, self.dice_gain_random
        );
        let _ = writeln!(
            s,
            "  Paired permutation p ({} permutations): dQC vs baseline {:.4}, random vs baseline {:.4}",
            self.permutations, self.p_values.dqc_vs_baseline, self.p_values.random_vs_baseline
        );
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceAuc {
    pub slice_id: String,
    pub auc: Option<f64>,
    pub hard_frames: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucSummary {
    pub auc: Summary,
    pub valid_slices: usize,
    pub skipped_slices: usize,
    pub per_slice: Vec<SliceAuc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyReport {
    pub schema_version: u32,
    pub experiment: String,
    pub seed: u64,
    pub graded: AucSummary,
    /// Same scores against grades shuffled within each slice.
    pub shuffled: AucSummary,
}

/// Per-slice AUC of `q_frame` as a detector of hard frames. Slices whose
/// grades are single-class are skipped and counted.
pub fn difficulty_auc(qc: &[QcSeries], grades: &BTreeMap<String, Vec<u8>>) -> Result<AucSummary> {
    let mut series: Vec<&QcSeries> = qc.iter().collect();
    series.sort_by(|a, b| a.slice_id.cmp(&b.slice_id));
    let mut per_slice = Vec::with_capacity(series.len());
    for s in series {
        let g = grades
            .get(&s.slice_id)
            .ok_or_else(|| Error::Config(format!("no grades for slice {}", s.slice_id)))?;
        let value = match auc(&s.q_frame, g) {
            Ok(r) => Some(r.auc),
            Err(Error::Degenerate(_)) => None,
            Err(e) => return Err(e),
        };
        per_slice.push(SliceAuc {
            slice_id: s.slice_id.clone(),
            auc: value,
            hard_frames: g.iter().filter(|&&x| x != 0).count(),
            frames: g.len(),
        });
    }
    let values: Vec<f64> = per_slice.iter().filter_map(|s| s.auc).collect();
    if values.is_empty() {
        return Err(Error::Degenerate("no slice has both easy and hard frames".into()));
    }
    Ok(AucSummary {
        auc: summarize(&values)?,
        valid_slices: values.len(),
        skipped_slices: per_slice.len() - values.len(),
        per_slice,
    })
}

/// Grades permuted within each slice, keyed by `seed` and the slice id.
pub fn shuffle_grades(grades: &BTreeMap<String, Vec<u8>>, seed: u64) -> BTreeMap<String, Vec<u8>> {
    grades
        .iter()
        .map(|(id, g)| {
            let mut rng = seed::rng(seed, &[seed::hash_str("shuffle"), seed::hash_str(id)]);
            let mut g = g.clone();
            g.shuffle(&mut rng);
            (id.clone(), g)
        })
        .collect()
}

pub fn run_grades(run: &BaselineRun) -> Result<BTreeMap<String, Vec<u8>>> {
    run.slices
        .iter()
        .map(|s| {
            let g = s
                .slice
                .grades
                .clone()
                .ok_or_else(|| Error::Config(format!("slice {} has no difficulty grades", s.slice.slice_id)))?;
            Ok((s.slice.slice_id.clone(), g))
        })
        .collect()
}

pub fn run_difficulty_auc(run: &BaselineRun, grades: &BTreeMap<String, Vec<u8>>, seed: u64) -> Result<DifficultyReport> {
    let qc = run.qc();
    Ok(DifficultyReport {
        schema_version: SCHEMA_VERSION,
        experiment: "difficulty".into(),
        seed,
        graded: difficulty_auc(&qc, grades)?,
        shuffled: difficulty_auc(&qc, &shuffle_grades(grades, seed))?,
    })
}

pub fn write_difficulty(report: &DifficultyReport, out_dir: impl AsRef<Path>) -> Result<()> {
    write_report(out_dir.as_ref(), report, &report.to_text())
}

impl DifficultyReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Frame difficulty vs per-frame dQC score");
        let _ = writeln!(
            s,
            "  AUC (grades)    {}  over {} slices, {} skipped",
            self.graded.auc.display(),
            self.graded.valid_slices,
            self.graded.skipped_slices
        );
        let _ = writeln!(
            s,
            "  AUC (shuffled)  {}  over {} slices, {} skipped",
            self.shuffled.auc.display(),
            self.shuffled.valid_slices,
            self.shuffled.skipped_slices
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "  {:<12} {:>7} {:>6} {:>9}", "slice", "auc", "hard", "shuffled");
        for (g, sh) in self.graded.per_slice.iter().zip(&self.shuffled.per_slice) {
            let _ = writeln!(
                s,
                "  {:<12} {:>7} {:>6} {:>9}",
                g.slice_id,
                opt3(g.auc),
                g.hard_frames,
                opt3(sh.auc)
            );
        }
        s
    }
}

/// Metrics of a run after applying review records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub experiment: String,
    pub records: usize,
    pub corrected_frames: usize,
    pub accepted_frames: usize,
    pub frames: usize,
    pub baseline: Column,
    pub corrected: Column,
    pub per_slice_dice: Vec<(String, f64)>,
}

/// Applies `records` to the run's masks and recomputes Dice and failure prevalence.
pub fn evaluate_corrections(run: &BaselineRun, records: &[CorrectionRecord]) -> Result<EvaluationReport> {
    if let Some(r) = records.iter().find(|r| run.slice(&r.slice_id).is_none()) {
        return Err(Error::Config(format!("record names unknown slice {}", r.slice_id)));
    }
    let mut base_dice = Vec::new();
    let mut new_dice = Vec::new();
    let mut per_slice = Vec::new();
    let (mut frames, mut base_failed, mut new_failed) = (0usize, 0usize, 0usize);
    for s in &run.slices {
        let id = &s.slice.slice_id;
        let truth = s
            .slice
            .truth
            .as_ref()
            .ok_or_else(|| Error::Config(format!("slice {id} has no reference mask")))?;
        let fixed = apply_corrections(&s.mask, id, records)?;
        let d = dice_volume(&fixed, truth)?;
        base_dice.push(dice_volume(&s.mask, truth)?);
        new_dice.push(d);
        per_slice.push((id.clone(), d));
        frames += s.diagnostics.len();
        base_failed += s.diagnostics.iter().filter(|d| d.failed).count();
        new_failed += frame_diagnostics(&fixed, run.config.connectivity)
            .iter()
            .filter(|d| d.failed)
            .count();
    }
    let corrected = records.iter().filter(|r| r.corrected).count();
    Ok(EvaluationReport {
        schema_version: SCHEMA_VERSION,
        experiment: "evaluate".into(),
        records: records.len(),
        corrected_frames: corrected,
        accepted_frames: records.len() - corrected,
        frames,
        baseline: column(summarize(&base_dice)?, base_failed as f64 / frames.max(1) as f64),
        corrected: column(summarize(&new_dice)?, new_failed as f64 / frames.max(1) as f64),
        per_slice_dice: per_slice,
    })
}

impl EvaluationReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} review records: {} corrected, {} accepted",
            self.records, self.corrected_frames, self.accepted_frames
        );
        let _ = writeln!(s, "  {:<20} {:>16} {:>16}", "", "Baseline", "Corrected");
        let _ = writeln!(
            s,
            "  {:<20} {:>16} {:>16}",
            "Dice score",
            self.baseline.dice.display(),
            self.corrected.dice.display()
        );
        let _ = writeln!(
            s,
            "  {:<20} {:>16} {:>16}",
            "Failure prevalence",
            pct(self.baseline.failure_prevalence),
            pct(self.corrected.failure_prevalence)
        );
        s
    }
}

pub fn write_evaluation(report: &EvaluationReport, out_dir: impl AsRef<Path>) -> Result<()> {
    write_report(out_dir.as_ref(), report, &report.to_text())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::NoiseProfile;
    use crate::phantom::{generate_cohort, Jitter, PhantomSpec};

    fn tiny_config() -> RunConfig {
        RunConfig::new(
            "unused",
            BackendConfig::OracleNoise(NoiseProfile::noiseless()),
            GridConfig {
                patch: 16,
                stride_seg: 8,
                stride_map: 4,
                allow_equal_strides: false,
            },
            3,
        )
    }

    fn tiny_slices() -> Vec<SliceRecord> {
        let base = PhantomSpec {
            dims: Dims::new(32, 32, 6),
            center: (16.0, 16.0),
            inner_radius: 4.0,
            outer_radius: 8.0,
            hard_frames: vec![1, 4],
            breathing: crate::phantom::Breathing {
                amplitude: 1.0,
                period: 6.0,
                phase: 0.0,
            },
            ..PhantomSpec::default()
        };
        let jitter = Jitter {
            center: 1.0,
            radius: 0.5,
            phase: true,
        };
        generate_cohort(3, &base, 11, &jitter).unwrap()
    }

    #[test]
    fn noiseless_baseline_is_perfect() {
        let run = compute_baseline(tiny_slices(), tiny_config()).unwrap();
        let report = run.report().unwrap();
        assert_eq!(report.dice.unwrap().mean, 1.0);
        assert_eq!(report.failure_prevalence, 0.0);
        assert!(run.slices.iter().all(|s| s.qc.q_frame.iter().all(|&q| q == 0.0)));
        assert!(report.to_text().contains("Dice score"));
    }

    #[test]
    fn run_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        crate::volumes::write_dataset(&data, &tiny_slices()).unwrap();
        let mut cfg = tiny_config();
        cfg.dataset = data;
        let out = dir.path().join("run");
        let run = run_baseline(cfg, &out).unwrap();
        let again = load_run(&out).unwrap();
        assert_eq!(again.config, run.config);
        for (a, b) in run.slices.iter().zip(&again.slices) {
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.map, b.map);
            assert_eq!(a.qc, b.qc);
            assert_eq!(a.dice, b.dice);
        }
        assert!(matches!(load_run(dir.path()), Err(Error::Config(_))));
    }

    #[test]
    fn difficulty_of_consistent_grades_is_one() {
        let qc = vec![QcSeries {
            slice_id: "a".into(),
            q_frame: vec![0.1, 0.9, 0.2, 0.8],
            q_slice: None,
            sentinel_count: 0,
            area: vec![1; 4],
        }];
        let mut grades = BTreeMap::new();
        grades.insert("a".to_string(), vec![0, 1, 0, 1]);
        let s = difficulty_auc(&qc, &grades).unwrap();
        assert_eq!(s.auc.mean, 1.0);
        grades.insert("a".to_string(), vec![0, 0, 0, 0]);
        assert!(matches!(difficulty_auc(&qc, &grades), Err(Error::Degenerate(_))));
    }

    #[test]
    fn shuffle_keeps_grade_counts() {
        let mut grades = BTreeMap::new();
        grades.insert("a".to_string(), vec![0, 1, 0, 1, 0, 0, 1]);
        let s = shuffle_grades(&grades, 4);
        assert_eq!(s["a"].iter().filter(|&&g| g == 1).count(), 3);
        assert_eq!(s, shuffle_grades(&grades, 4));
    }
}
