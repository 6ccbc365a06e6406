//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any failed. Run with `cargo test -p dqc-core --test acceptance`.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use common::{gather, random_patch, rng};
use dqc_core::backends::{BackendConfig, CorruptMode, FrameCorruption, NoiseProfile};
use dqc_core::dqc::{binarize, is_sentinel, q_frame, GridConfig};
use dqc_core::experiments::{
    compute_baseline, run_difficulty_auc, run_grades, run_hitl_comparison, write_difficulty, write_hitl, write_run,
    BaselineRun, HitlOptions, RunConfig, REPORT_JSON,
};
use dqc_core::patching::{accumulate, build_grid, extract_patch, OverlapAccumulator};
use dqc_core::phantom::{generate_cohort, Jitter, PhantomSpec};
use dqc_core::{Dims, DynamicVolume, SegmentationMask, VolumeKind};
use rand::Rng;

const COHORT: usize = 20;
const COHORT_SEED: u64 = 7;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report(name: &str, outcome: Result<Outcome, String>, failures: &mut usize) {
    let (pass, detail) = match outcome {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    if !pass {
        *failures += 1;
    }
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn peak_rss_mb() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb / 1024.0)
}

fn corrupted_profile() -> NoiseProfile {
    let c = |frame, mode| FrameCorruption { frame, mode };
    NoiseProfile {
        corrupt_frames: vec![
            c(5, CorruptMode::EraseHalf),
            c(11, CorruptMode::Inflate),
            c(17, CorruptMode::EraseHalf),
            c(23, CorruptMode::Inflate),
        ],
        ..NoiseProfile::default()
    }
}

fn baseline(n: usize, profile: NoiseProfile) -> Result<BaselineRun, String> {
    let slices = generate_cohort(n, &PhantomSpec::default(), COHORT_SEED, &Jitter::default()).map_err(err)?;
    let config = RunConfig::new(
        "phantom",
        BackendConfig::OracleNoise(profile),
        GridConfig::default(),
        COHORT_SEED,
    );
    compute_baseline(slices, config).map_err(err)
}

// Fold + finalize only; every patch is a clone of one of a few templates so
// that no inference cost is measured.
fn performance() -> Result<Outcome, String> {
    let dims = Dims::new(128, 128, 25);
    let grid = build_grid(dims, 64, 2).map_err(err)?;
    let mut r = rng(1);
    let templates: Vec<DynamicVolume> = (0..4).map(|_| random_patch(&mut r, 64, 25)).collect();
    let start = Instant::now();
    let acc = accumulate(&grid, |i| Ok(templates[i % templates.len()].clone())).map_err(err)?;
    let mean = acc.finalize_mean().map_err(err)?;
    let std = acc.finalize_std().map_err(err)?;
    let elapsed = start.elapsed();
    std::hint::black_box((mean, std));
    let rss = peak_rss_mb().ok_or("VmHWM unavailable")?;
    Ok(check(
        grid.len() == 1089 && elapsed < Duration::from_secs(10) && rss < 500.0,
        format!(
            "{} patches folded+finalized in {:.2}s (< 10s), peak RSS {rss:.1} MB (< 500 MB)",
            grid.len(),
            elapsed.as_secs_f64()
        ),
    ))
}

fn oracle_equivalence() -> Result<Outcome, String> {
    let start = Instant::now();
    let mut r = rng(2026);
    let (mut worst_mean, mut worst_std) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let k = r.random_range(1..=8);
        let w = r.random_range(1..=k);
        let dims = Dims::new(r.random_range(k..=32), r.random_range(k..=32), r.random_range(1..=5));
        let grid = build_grid(dims, k, w).map_err(err)?;
        let patches: Vec<DynamicVolume> = (0..grid.len()).map(|_| random_patch(&mut r, k, dims.frames)).collect();
        let acc = accumulate(&grid, |i| Ok(patches[i].clone())).map_err(err)?;
        let mean = acc.finalize_mean().map_err(err)?;
        let std = acc.finalize_std().map_err(err)?;
        let origins: Vec<_> = grid.origins().collect();
        let (om, os) = gather(dims, k, &origins, &patches);
        for i in 0..dims.len() {
            worst_mean = worst_mean.max((f64::from(mean.data()[i]) - om[i]).abs());
            worst_std = worst_std.max((f64::from(std.data()[i]) - os[i]).abs());
        }
    }
    let elapsed = start.elapsed();
    Ok(check(
        worst_mean <= 1e-6 && worst_std <= 1e-5 && elapsed < Duration::from_secs(10),
        format!(
            "200 instances, max |Δmean| {worst_mean:.2e} (≤ 1e-6), max |Δstd| {worst_std:.2e} (≤ 1e-5), {:.2}s (< 10s)",
            elapsed.as_secs_f64()
        ),
    ))
}

fn fusion_laws() -> Result<Outcome, String> {
    let dims = Dims::new(3, 3, 1);
    let probs = DynamicVolume::new(dims, VolumeKind::Probability, vec![0.5, 0.4999999, 0.5000001, 0.0, 1.0, 0.5, 0.2, 0.8, 0.5])
        .map_err(err)?;
    let tie_ok = binarize(&probs).bits() == [1, 0, 1, 0, 1, 1, 0, 1, 1];

    // agreeing patches: every patch is cut from one shared field
    let dims = Dims::new(40, 40, 5);
    let mut r = rng(3);
    let field = DynamicVolume::from_fn(dims, VolumeKind::Probability, |_, _, _| r.random::<f32>()).map_err(err)?;
    let grid = build_grid(dims, 8, 3).map_err(err)?;
    let acc = accumulate(&grid, |i| extract_patch(&field, &grid, i)).map_err(err)?;
    let agree_max = acc.finalize_std().map_err(err)?.data().iter().fold(0.0f32, |a, &v| a.max(v));

    // one cell covered by two patches holding 0.2 and 0.8
    let two = |lo: f32, hi: f32| -> Result<f64, String> {
        let mut acc = OverlapAccumulator::new(Dims::new(1, 1, 1));
        let g = build_grid(Dims::new(1, 1, 1), 1, 1).map_err(err)?;
        for v in [lo, hi] {
            let p = DynamicVolume::new(Dims::new(1, 1, 1), VolumeKind::Probability, vec![v]).map_err(err)?;
            acc.fold_patch(&g, 0, &p).map_err(err)?;
        }
        acc.std_at(0, 0, 0).map_err(err)
    };
    let s = two(0.2, 0.8)?;
    // 0.2 and 0.8 are not exact in f32; the exact spread of the stored inputs
    let stored = (f64::from(0.8f32) - f64::from(0.2f32)) / 2.0;
    let s_exact = two(0.25, 0.75)?;
    let std_ok = (s - stored).abs() <= 1e-9 && (s - 0.3).abs() <= 1e-7 && s_exact == 0.25;

    Ok(check(
        tie_ok && agree_max == 0.0 && std_ok,
        format!(
            "tie 0.5→1: {tie_ok}; agreeing patches max M = {agree_max}; std{{0.2,0.8}} = {s:.12} \
             (stored-input spread {stored:.12}, |Δ| {:.1e} ≤ 1e-9); std{{0.25,0.75}} = {s_exact}",
            (s - stored).abs()
        ),
    ))
}

/// Largest |q(cM) − c·q(M)| over all finite frames, or an error if a sentinel
/// frame changes status.
fn scale_error(slice_id: &str, map: &DynamicVolume, mask: &SegmentationMask, c: f32) -> Result<(f64, usize), String> {
    let base = q_frame(slice_id, map, mask).map_err(err)?.q_frame;
    let scaled = q_frame(slice_id, &map.scaled(c).map_err(err)?, mask).map_err(err)?.q_frame;
    let (mut worst, mut finite) = (0.0f64, 0);
    for (q, qc) in base.iter().zip(&scaled) {
        if is_sentinel(*q) != is_sentinel(*qc) {
            return Err(format!("{slice_id}: sentinel status changed under scaling"));
        }
        if !is_sentinel(*q) {
            finite += 1;
            worst = worst.max((qc - f64::from(c) * q).abs());
        }
    }
    Ok((worst, finite))
}

// Maps are stored in f32, so c·M is rounded unless c is a power of two or the
// map values carry few enough significant bits. The law is checked on the raw
// maps for c ∈ {0.5, 2} and on the same maps snapped to a 2^-20 grid for every
// c; the raw c = 10 deviation is reported for information.
fn scale_law(run: &BaselineRun) -> Result<Outcome, String> {
    const GRID: f32 = 1048576.0;
    let (mut worst, mut finite, mut raw10) = (0.0f64, 0usize, 0.0f64);
    for s in &run.slices {
        let id = &s.slice.slice_id;
        let snapped = DynamicVolume::new(
            s.map.dims(),
            VolumeKind::Dqc,
            s.map.data().iter().map(|v| (v * GRID).round() / GRID).collect(),
        )
        .map_err(err)?;
        for c in [0.5f32, 2.0] {
            let (w, n) = scale_error(id, &s.map, &s.mask, c)?;
            worst = worst.max(w);
            finite += n;
        }
        for c in [0.5f32, 2.0, 10.0] {
            let (w, n) = scale_error(id, &snapped, &s.mask, c)?;
            worst = worst.max(w);
            finite += n;
        }
        raw10 = raw10.max(scale_error(id, &s.map, &s.mask, 10.0)?.0);
    }
    Ok(check(
        worst <= 1e-9,
        format!(
            "{finite} finite q_frame comparisons over c ∈ {{0.5, 2, 10}}, max |q(cM) − c·q(M)| {worst:.2e} (≤ 1e-9); \
             unsnapped c = 10 with f32 rounding of cM: {raw10:.2e}"
        ),
    ))
}

fn zero_noise() -> Result<Outcome, String> {
    let run = baseline(COHORT, NoiseProfile::noiseless())?;
    let report = run.report().map_err(err)?;
    let dice: Vec<f64> = run.slices.iter().map(|s| s.dice.unwrap_or(f64::NAN)).collect();
    let all_one = dice.iter().all(|&d| d == 1.0);
    let finite: Vec<f64> = run
        .slices
        .iter()
        .flat_map(|s| s.qc.q_frame.iter().copied())
        .filter(|q| !is_sentinel(*q))
        .collect();
    let q_zero = finite.iter().all(|&q| q == 0.0);
    Ok(check(
        all_one && report.failure_prevalence == 0.0 && q_zero && run.slices.len() == COHORT,
        format!(
            "{} slices, per-slice Dice min {:.6}, failure prevalence {:.1}%, {} finite q_frame all zero: {q_zero}",
            run.slices.len(),
            dice.iter().copied().fold(f64::INFINITY, f64::min),
            100.0 * report.failure_prevalence,
            finite.len()
        ),
    ))
}

fn dir_bytes(dir: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(dir.join(REPORT_JSON)).map_err(err)
}

fn determinism() -> Result<Outcome, String> {
    let tmp = tempfile::tempdir().map_err(err)?;
    let opts = HitlOptions {
        mc_runs: 20,
        permutations: 2000,
        ..HitlOptions::default()
    };
    let mut outputs = Vec::new();
    for rep in 0..2 {
        let dir = tmp.path().join(format!("rep{rep}"));
        let run = baseline(4, corrupted_profile())?;
        write_run(&run, &dir).map_err(err)?;
        let cmp = run_hitl_comparison(&run, &opts).map_err(err)?;
        write_hitl(&run, &cmp, dir.join("hitl")).map_err(err)?;
        let grades = run_grades(&run).map_err(err)?;
        let diff = run_difficulty_auc(&run, &grades, 11).map_err(err)?;
        write_difficulty(&diff, dir.join("difficulty")).map_err(err)?;
        outputs.push([
            dir_bytes(&dir)?,
            dir_bytes(&dir.join("hitl"))?,
            dir_bytes(&dir.join("difficulty"))?,
        ]);
    }
    let same: Vec<bool> = (0..3).map(|i| outputs[0][i] == outputs[1][i]).collect();
    Ok(check(
        same.iter().all(|&b| b),
        format!("report.json identical across reruns — baseline: {}, hitl: {}, difficulty: {}", same[0], same[1], same[2]),
    ))
}

fn main() {
    let mut failures = 0;

    // first, so the peak-RSS reading is not inflated by the other checks
    report("performance", performance(), &mut failures);
    report("oracle equivalence", oracle_equivalence(), &mut failures);
    report("fusion and disagreement laws", fusion_laws(), &mut failures);
    report("zero-noise end-to-end", zero_noise(), &mut failures);

    let start = Instant::now();
    let corrupted = baseline(COHORT, corrupted_profile());
    let hitl = corrupted
        .as_ref()
        .map_err(Clone::clone)
        .and_then(|run| run_hitl_comparison(run, &HitlOptions::default()).map_err(err));
    let hitl_time = start.elapsed();

    report(
        "scale law",
        corrupted.as_ref().map_err(Clone::clone).and_then(scale_law),
        &mut failures,
    );
    report(
        "HITL direction",
        hitl.as_ref().map_err(Clone::clone).map(|cmp| {
            let r = &cmp.report;
            let p = r.p_values.dqc_vs_baseline;
            let (b, rnd, d) = (
                r.baseline.failure_prevalence,
                r.random.failure_prevalence.mean,
                r.dqc.failure_prevalence,
            );
            check(
                p < 0.05 && r.dice_gain_dqc > r.dice_gain_random && d < rnd && rnd < b && hitl_time < Duration::from_secs(300),
                format!(
                    "Dice {:.4} → dqc {:.4} / random {:.4}; gain dqc {:+.4} > random {:+.4}; p = {p:.4} (< 0.05); \
                     prevalence dqc {:.2}% < random {:.2}% < baseline {:.2}%; {:.1}s (< 300s)",
                    r.baseline.dice.mean,
                    r.dqc.dice.mean,
                    r.random.dice.mean,
                    r.dice_gain_dqc,
                    r.dice_gain_random,
                    100.0 * d,
                    100.0 * rnd,
                    100.0 * b,
                    hitl_time.as_secs_f64()
                ),
            )
        }),
        &mut failures,
    );
    report(
        "selected-frame enrichment",
        hitl.as_ref().map_err(Clone::clone).map(|cmp| {
            let d = cmp.report.selected_dqc.failure_prevalence;
            let rnd = cmp.report.selected_random.failure_prevalence.mean;
            check(
                d > rnd,
                format!("failure prevalence among referred frames: dqc {:.1}% > random {:.1}%", 100.0 * d, 100.0 * rnd),
            )
        }),
        &mut failures,
    );
    drop((corrupted, hitl));

    let difficulty = baseline(
        COHORT,
        NoiseProfile {
            snr_gain: 1.0,
            ..NoiseProfile::default()
        },
    )
    .and_then(|run| {
        let grades = run_grades(&run).map_err(err)?;
        run_difficulty_auc(&run, &grades, COHORT_SEED).map_err(err)
    });
    report(
        "difficulty AUC",
        difficulty.map(|d| {
            let (g, s) = (d.graded.auc.mean, d.shuffled.auc.mean);
            check(
                g > 0.8 && (0.35..=0.65).contains(&s),
                format!(
                    "graded mean AUC {g:.3} ± {:.3} over {} slices (> 0.8); shuffled {s:.3} (in [0.35, 0.65])",
                    d.graded.auc.std, d.graded.valid_slices
                ),
            )
        }),
        &mut failures,
    );
    report("determinism", determinism(), &mut failures);

    if failures > 0 {
        println!("{failures} criterion(s) failed");
        std::process::exit(1);
    }
}
