//! `dqc`: phantom generation, segmentation with QC maps, referral, oracle
//! correction, evaluation, the evaluation experiments and the review service.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

mod serve;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dqc_core::backends::{BackendConfig, BandParams, CorruptMode, FrameCorruption, NoiseProfile};
use dqc_core::dqc::GridConfig;
use dqc_core::experiments::{
    evaluate_corrections, load_run, run_baseline, run_difficulty_auc, run_grades, run_hitl_comparison,
    write_difficulty, write_evaluation, write_hitl, HitlOptions, RunConfig, CORRECTIONS_FILE, REFERRALS_FILE,
};
use dqc_core::hitl::{
    oracle_records, plan_referrals, CorrectionRecord, OracleConfig, ReferralPlan, ReferralScope, Strategy,
    DEFAULT_DICE_THRESHOLD, DEFAULT_MC_RUNS,
};
use dqc_core::phantom::{generate_dataset, Jitter, PhantomSpec};
use dqc_core::stats::DEFAULT_PERMUTATIONS;
use dqc_core::volumes::{read_json, write_json, Dims};
use dqc_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "dqc", version, about = "Patch-disagreement quality control for 2D+time segmentation")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Patch edge length K.
    #[arg(long, global = true, default_value_t = 64)]
    patch: usize,
    /// Stride of the grid that produces the segmentation.
    #[arg(long, global = true, default_value_t = 16)]
    stride_seg: usize,
    /// Stride of the grid that produces the disagreement map.
    #[arg(long, global = true, default_value_t = 2)]
    stride_map: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthetic perfusion phantoms.
    Phantom {
        #[command(subcommand)]
        command: PhantomCommand,
    },
    /// Segment a dataset and compute dQC maps and scores into a run directory.
    Segment(SegmentArgs),
    /// Select frames for review.
    Refer(ReferArgs),
    /// Review the referred frames.
    Correct(CorrectArgs),
    /// Dice and failure prevalence after applying the review records.
    Evaluate(EvaluateArgs),
    /// Reproduce the evaluation studies.
    Experiment {
        #[command(subcommand)]
        command: ExperimentCommand,
    },
    /// HTTP service backing the review UI.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
enum PhantomCommand {
    /// Generate a phantom dataset directory.
    Gen(PhantomArgs),
}

#[derive(Debug, Args)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    slices: usize,
    /// Image rows and columns; geometry scales with it.
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 25)]
    frames: usize,
    /// Comma-separated hard frame indices (default: 3,9,15,21 when they fit).
    #[arg(long, value_delimiter = ',')]
    hard_frames: Option<Vec<usize>>,
    /// Image noise std.
    #[arg(long)]
    noise: Option<f64>,
    /// Full phantom specification (TOML); overrides the geometry flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Identical geometry for every slice.
    #[arg(long)]
    no_jitter: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    OracleNoise,
    Intensity,
    External,
}

#[derive(Debug, Args)]
struct BackendArgs {
    #[arg(long, value_enum, default_value_t = BackendKind::OracleNoise)]
    backend: BackendKind,
    /// Backend configuration (TOML with a `kind` key); overrides the other backend flags.
    #[arg(long)]
    backend_config: Option<PathBuf>,
    /// Oracle backend without any perturbation.
    #[arg(long)]
    noiseless: bool,
    #[arg(long)]
    bias_sigma: Option<f64>,
    #[arg(long)]
    field_sigma: Option<f64>,
    #[arg(long)]
    snr_gain: Option<f64>,
    /// Corrupted frames as `t:mode`, mode one of erase-half, inflate.
    #[arg(long, value_delimiter = ',', value_parser = parse_corruption)]
    corrupt: Vec<FrameCorruption>,
    #[arg(long)]
    noise_seed: Option<u64>,
    #[arg(long)]
    band_lo: Option<f64>,
    #[arg(long)]
    band_hi: Option<f64>,
    #[arg(long)]
    band_tau: Option<f64>,
    /// Root of precomputed patch probabilities.
    #[arg(long)]
    external_dir: Option<PathBuf>,
    /// Permit equal segmentation and map strides.
    #[arg(long)]
    allow_equal_strides: bool,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Dqc,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScopeArg {
    Pooled,
    PerSlice,
}

#[derive(Debug, Args)]
struct ReferArgs {
    #[arg(long)]
    run: PathBuf,
    /// Fraction of frames to refer, in (0, 1].
    #[arg(long, default_value_t = 0.10, value_parser = parse_budget)]
    budget: f64,
    #[arg(long, value_enum, default_value_t = StrategyArg::Dqc)]
    strategy: StrategyArg,
    #[arg(long, value_enum, default_value_t = ScopeArg::Pooled)]
    scope: ScopeArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CorrectMode {
    /// Replace failed or inaccurate frames by the reference.
    Oracle,
}

#[derive(Debug, Args)]
struct CorrectArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_enum)]
    mode: CorrectMode,
    #[arg(long, default_value_t = DEFAULT_DICE_THRESHOLD)]
    dice_threshold: f64,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    run: PathBuf,
    /// Report directory (default: <run>/evaluation).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum ExperimentCommand {
    /// Baseline segmentation quality; same as `segment`.
    Baseline(SegmentArgs),
    /// dQC-guided vs random referral with oracle correction.
    Hitl(HitlArgs),
    /// Per-slice AUC of per-frame scores against difficulty grades.
    Difficulty(DifficultyArgs),
}

#[derive(Debug, Args)]
struct HitlArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value_t = 0.10, value_parser = parse_budget)]
    budget: f64,
    #[arg(long, default_value_t = DEFAULT_MC_RUNS as u64, value_parser = clap::value_parser!(u64).range(1..))]
    mc_runs: u64,
    #[arg(long, default_value_t = DEFAULT_PERMUTATIONS)]
    permutations: usize,
    #[arg(long, default_value_t = DEFAULT_DICE_THRESHOLD)]
    dice_threshold: f64,
    /// Report directory (default: <run>/hitl).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DifficultyArgs {
    #[arg(long)]
    run: PathBuf,
    /// Report directory (default: <run>/difficulty).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    bind: std::net::IpAddr,
    /// Directory with the review UI build; a minimal page is served otherwise.
    #[arg(long)]
    static_dir: Option<PathBuf>,
}

fn parse_budget(s: &str) -> std::result::Result<f64, String> {
    let b: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if b > 0.0 && b <= 1.0 {
        Ok(b)
    } else {
        Err(format!("budget must lie in (0, 1], got {b}"))
    }
}

fn parse_corruption(s: &str) -> std::result::Result<FrameCorruption, String> {
    let (t, mode) = s.split_once(':').ok_or("expected t:mode")?;
    let frame = t.trim().parse().map_err(|e| format!("frame index: {e}"))?;
    let mode = match mode.trim() {
        "erase-half" => CorruptMode::EraseHalf,
        "inflate" => CorruptMode::Inflate,
        other => return Err(format!("unknown corruption mode {other}")),
    };
    Ok(FrameCorruption { frame, mode })
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

impl BackendArgs {
    fn config(&self) -> Result<BackendConfig> {
        if let Some(path) = &self.backend_config {
            return read_toml(path);
        }
        Ok(match self.backend {
            BackendKind::OracleNoise => {
                let mut p = if self.noiseless {
                    NoiseProfile::noiseless()
                } else {
                    NoiseProfile::default()
                };
                if let Some(v) = self.bias_sigma {
                    p.bias_sigma = v;
                }
                if let Some(v) = self.field_sigma {
                    p.field_sigma = v;
                }
                if let Some(v) = self.snr_gain {
                    p.snr_gain = v;
                }
                if let Some(v) = self.noise_seed {
                    p.seed = v;
                }
                p.corrupt_frames = self.corrupt.clone();
                BackendConfig::OracleNoise(p)
            }
            BackendKind::Intensity => {
                let mut b = BandParams::default();
                if let Some(v) = self.band_lo {
                    b.lo = v;
                }
                if let Some(v) = self.band_hi {
                    b.hi = v;
                }
                if let Some(v) = self.band_tau {
                    b.tau = v;
                }
                BackendConfig::Intensity(b)
            }
            BackendKind::External => BackendConfig::External {
                dir: self
                    .external_dir
                    .clone()
                    .ok_or_else(|| Error::Config("--external-dir is required for the external backend".into()))?,
            },
        })
    }
}

impl Cli {
    fn grid(&self, allow_equal_strides: bool) -> GridConfig {
        GridConfig {
            patch: self.patch,
            stride_seg: self.stride_seg,
            stride_map: self.stride_map,
            allow_equal_strides,
        }
    }
}

fn phantom_spec(args: &PhantomArgs, seed: u64) -> Result<PhantomSpec> {
    let mut spec = if let Some(path) = &args.config {
        read_toml::<PhantomSpec>(path)?
    } else {
        let base = PhantomSpec::default();
        let scale = args.size as f64 / base.dims.rows as f64;
        let hard = base.hard_frames.iter().copied().filter(|&t| t < args.frames).collect();
        PhantomSpec {
            dims: Dims::new(args.size, args.size, args.frames),
            center: (base.center.0 * scale, base.center.1 * scale),
            inner_radius: base.inner_radius * scale,
            outer_radius: base.outer_radius * scale,
            hard_frames: hard,
            ..base
        }
    };
    if let Some(h) = &args.hard_frames {
        spec.hard_frames = h.clone();
    }
    if let Some(n) = args.noise {
        spec.noise_sigma = n;
    }
    spec.seed = seed;
    Ok(spec)
}

fn run_dir_file(run: &Path, name: &str) -> Result<PathBuf> {
    let path = run.join(name);
    if !path.is_file() {
        return Err(Error::Config(format!("{} not found; run the previous step first", path.display())));
    }
    Ok(path)
}

fn segment(cli: &Cli, args: &SegmentArgs) -> Result<()> {
    let config = RunConfig::new(
        std::path::absolute(&args.dataset).map_err(|e| Error::Config(format!("dataset path: {e}")))?,
        args.backend.config()?,
        cli.grid(args.backend.allow_equal_strides),
        cli.seed,
    );
    let run = run_baseline(config, &args.out)?;
    print!("{}", run.report()?.to_text());
    println!("run written to {}", args.out.display());
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Phantom {
            command: PhantomCommand::Gen(args),
        } => {
            let spec = phantom_spec(args, cli.seed)?;
            let jitter = if args.no_jitter {
                Jitter {
                    center: 0.0,
                    radius: 0.0,
                    phase: false,
                }
            } else {
                Jitter::default()
            };
            let manifest = generate_dataset(args.slices, &spec, cli.seed, &jitter, &args.out)?;
            println!(
                "wrote {} slices of {} to {}",
                manifest.slices.len(),
                spec.dims,
                args.out.display()
            );
        }
        Command::Segment(args)
        | Command::Experiment {
            command: ExperimentCommand::Baseline(args),
        } => segment(cli, args)?,
        Command::Refer(args) => {
            let run = load_run(&args.run)?;
            let strategy = match args.strategy {
                StrategyArg::Dqc => Strategy::Dqc,
                StrategyArg::Random => Strategy::Random,
            };
            let scope = match args.scope {
                ScopeArg::Pooled => ReferralScope::Pooled,
                ScopeArg::PerSlice => ReferralScope::PerSlice,
            };
            let plan = plan_referrals(&run.qc(), strategy, args.budget, cli.seed, scope)?;
            write_json(args.run.join(REFERRALS_FILE), &plan)?;
            println!("referred {} frames", plan.selected.len());
        }
        Command::Correct(args) => {
            let CorrectMode::Oracle = args.mode;
            let run = load_run(&args.run)?;
            let plan: ReferralPlan = read_json(run_dir_file(&args.run, REFERRALS_FILE)?)?;
            let cfg = OracleConfig {
                dice_threshold: args.dice_threshold,
                connectivity: run.config.connectivity,
            };
            let records = oracle_records(&plan, &run.cohort(), &cfg)?;
            write_json(args.run.join(CORRECTIONS_FILE), &records)?;
            let corrected = records.iter().filter(|r| r.corrected).count();
            println!(
                "reviewed {} frames: {corrected} corrected, {} accepted",
                records.len(),
                records.len() - corrected
            );
        }
        Command::Evaluate(args) => {
            let run = load_run(&args.run)?;
            let path = args.run.join(CORRECTIONS_FILE);
            let records: Vec<CorrectionRecord> = if path.is_file() { read_json(&path)? } else { Vec::new() };
            let report = evaluate_corrections(&run, &records)?;
            let out = args.out.clone().unwrap_or_else(|| args.run.join("evaluation"));
            write_evaluation(&report, &out)?;
            print!("{}", report.to_text());
        }
        Command::Experiment {
            command: ExperimentCommand::Hitl(args),
        } => {
            let run = load_run(&args.run)?;
            let opts = HitlOptions {
                budget: args.budget,
                mc_runs: args.mc_runs as usize,
                seed: cli.seed,
                permutations: args.permutations,
                oracle: OracleConfig {
                    dice_threshold: args.dice_threshold,
                    connectivity: run.config.connectivity,
                },
            };
            let cmp = run_hitl_comparison(&run, &opts)?;
            let out = args.out.clone().unwrap_or_else(|| args.run.join("hitl"));
            write_hitl(&run, &cmp, &out)?;
            print!("{}", cmp.report.to_text());
        }
        Command::Experiment {
            command: ExperimentCommand::Difficulty(args),
        } => {
            let run = load_run(&args.run)?;
            let report = run_difficulty_auc(&run, &run_grades(&run)?, cli.seed)?;
            let out = args.out.clone().unwrap_or_else(|| args.run.join("difficulty"));
            write_difficulty(&report, &out)?;
            print!("{}", report.to_text());
        }
        Command::Serve(args) => serve::serve(&args.run, args.bind, args.port, args.static_dir.clone())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // help and version exit 0, usage errors 2
        Err(e) => e.exit(),
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
