//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 verification
//! failure.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use vtprune_core::calibration::{
    calibrate_all, CalSample, CalibrationConfig, EarlyRejection, Scorer, SyntheticScorer,
};
use vtprune_core::complexity::{complexity_estimate, ComplexityEstimate, Shape};
use vtprune_core::pruner::prepare_features;
use vtprune_core::verify::{run_check, ProbeConfig, SuiteReport, CHECK_NAMES};
use vtprune_core::{
    route, run_schedule_with, CategoryId, OpCounts, ProfileTable, PruneOptions, RuleTable, SeedRule, Stage,
    StageSchedule, UpsampleMode,
};

use crate::dump::{self, ClsPolicy, Sample};
use crate::error::{exit, Error, Result};
use crate::output::{self, RetainedOutput, RunConfig, ENGINE_VERSION};
use crate::profiles::{self, profiles_to_toml, resolve_profiles};
use crate::rules::{resolve_category, resolve_rules, CategorySource};
use crate::scorer::{serve_synthetic, ExternalScorer};
use crate::synth::{self, SynthConfig};

#[derive(Debug, Parser)]
#[command(name = "vtprune", version, about = "Class-adaptive visual token pruning over recorded dumps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Route a prompt to a category.
    Route(RouteArgs),
    /// Fuse and project a dump's layers into one feature tensor.
    Fuse(FuseArgs),
    /// Prune a dump (or a directory of dumps) and write the retained sets.
    Prune(PruneArgs),
    /// Search layer sets and split ratios per category.
    Calibrate(CalibrateArgs),
    /// Run the property checks.
    Verify(VerifyArgs),
    /// Time pruning runs and compare operation counters with the estimates.
    Bench(BenchArgs),
    /// Write synthetic dumps with planted evidence tokens.
    GenSynth(GenSynthArgs),
    /// Serve the built-in synthetic score over the external scorer protocol.
    #[command(hide = true)]
    SynthScorer,
}

#[derive(Debug, Args)]
pub struct RouteArgs {
    pub prompt: String,
    /// Rule file; defaults to the shipped rules.
    #[arg(long)]
    pub rules: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    /// Profile table: a file or a built-in name (llava, qwen25vl).
    /// Defaults to $VTPRUNE_PROFILES, then llava.
    #[arg(long)]
    pub profiles: Option<String>,
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// Category override, 0..=8.
    #[arg(long, value_parser = clap::value_parser!(u32).range(0..=8))]
    pub category: Option<u32>,
    #[arg(long, value_enum, default_value_t = ClsPolicy::Drop)]
    pub cls: ClsPolicy,
    #[arg(long, value_enum, default_value_t = Upsample::Bilinear)]
    pub upsample: Upsample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Upsample {
    Bilinear,
    Nearest,
}

impl From<Upsample> for UpsampleMode {
    fn from(u: Upsample) -> Self {
        match u {
            Upsample::Bilinear => UpsampleMode::Bilinear,
            Upsample::Nearest => UpsampleMode::Nearest,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SeedRuleArg {
    BottomK,
    TopK,
}

impl From<SeedRuleArg> for SeedRule {
    fn from(s: SeedRuleArg) -> Self {
        match s {
            SeedRuleArg::BottomK => SeedRule::BottomK,
            SeedRuleArg::TopK => SeedRule::TopK,
        }
    }
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    /// Effective budget preset: 192, 128 or 64.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Stage budgets, e.g. 300,200,110. Takes precedence over --budget.
    #[arg(long, value_delimiter = ',')]
    pub schedule: Option<Vec<usize>>,
    /// Decoder layer tag of each stage.
    #[arg(long, value_delimiter = ',', default_value = "2,6,15")]
    pub layers: Vec<u32>,
    /// Spherical k-means iterations.
    #[arg(long, default_value_t = vtprune_core::pruner::DEFAULT_ITERATIONS)]
    pub iters: usize,
    #[arg(long, value_enum, default_value_t = SeedRuleArg::BottomK, hide = true)]
    pub seed_rule: SeedRuleArg,
}

impl ScheduleArgs {
    pub fn resolve(&self) -> Result<(StageSchedule, Option<usize>)> {
        let budgets: Vec<usize> = match (&self.schedule, self.budget) {
            (Some(s), _) => s.clone(),
            (None, Some(b)) => match StageSchedule::preset(b) {
                Some(p) => p.stages().iter().map(|s| s.budget).collect(),
                None => {
                    return Err(Error::Usage(format!(
                        "no preset for --budget {b}; presets are {:?}, or pass --schedule",
                        StageSchedule::PRESETS
                    )))
                }
            },
            (None, None) => StageSchedule::preset(192).expect("preset").stages().iter().map(|s| s.budget).collect(),
        };
        if budgets.len() > self.layers.len() {
            return Err(Error::Usage(format!(
                "{} stage budgets but only {} stage layers; pass --layers",
                budgets.len(),
                self.layers.len()
            )));
        }
        let stages = budgets.iter().zip(&self.layers).map(|(&budget, &layer)| Stage { layer, budget }).collect();
        let schedule = StageSchedule::new(stages).map_err(|e| Error::Usage(e.to_string()))?;
        let effective = self.budget.or_else(|| {
            StageSchedule::PRESETS.into_iter().find(|&p| StageSchedule::preset(p).as_ref() == Some(&schedule))
        });
        Ok((schedule, effective))
    }

    pub fn options(&self) -> PruneOptions {
        PruneOptions { iterations: self.iters, seed_rule: self.seed_rule.into() }
    }
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    pub dump: PathBuf,
    /// Output tensor (little-endian f32, row-major).
    #[arg(long)]
    pub out: PathBuf,
    /// Skip the dump's projection.
    #[arg(long)]
    pub no_project: bool,
    #[command(flatten)]
    pub profile: ProfileArgs,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    /// A dump directory, a manifest file, or a directory of dump directories.
    pub input: PathBuf,
    /// Output file (single dump) or directory (several dumps). Single-dump
    /// results go to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Add a `generated_at` field.
    #[arg(long)]
    pub timestamp: bool,
    /// Worker threads for directory input; 0 picks a default.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[command(flatten)]
    pub profile: ProfileArgs,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Directory of labeled dump directories.
    pub dataset: PathBuf,
    /// Candidate space (TOML).
    #[arg(long)]
    pub space: PathBuf,
    /// `builtin` or `exec:<command>`.
    #[arg(long, default_value = "builtin")]
    pub scorer: String,
    /// Seconds to wait for each external score.
    #[arg(long, default_value_t = 30.0)]
    pub timeout: f64,
    /// Score all candidates on this fraction of samples first.
    #[arg(long, requires = "early_keep")]
    pub early_fraction: Option<f64>,
    /// Candidates kept for the full pass.
    #[arg(long, requires = "early_fraction")]
    pub early_keep: Option<usize>,
    /// Profiles for categories with no samples when category 8 has none
    /// either.
    #[arg(long)]
    pub fallback_profiles: Option<String>,
    #[arg(long)]
    pub out_profiles: PathBuf,
    #[arg(long)]
    pub out_report: PathBuf,
    #[arg(long)]
    pub rules: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ClsPolicy::Drop)]
    pub cls: ClsPolicy,
    #[arg(long, value_enum, default_value_t = Upsample::Bilinear)]
    pub upsample: Upsample,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Probe seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Divide every trial count by this factor.
    #[arg(long, default_value_t = 1)]
    pub scale: usize,
    /// Run only these checks.
    #[arg(long = "check", value_parser = clap::builder::PossibleValuesParser::new(CHECK_NAMES))]
    pub checks: Vec<String>,
    /// Write the JSON report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Profile table for the misrouting pairs.
    #[arg(long)]
    pub profiles: Option<String>,
    #[arg(long, value_enum, default_value_t = SeedRuleArg::BottomK, hide = true)]
    pub seed_rule: SeedRuleArg,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    pub dump: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub repeat: usize,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[command(flatten)]
    pub profile: ProfileArgs,
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Grid side; samples have grid*grid tokens.
    #[arg(long, default_value_t = 24)]
    pub grid: usize,
    #[arg(long, default_value_t = 32)]
    pub d_v: usize,
    /// Vision layer ids; defaults to every layer the llava profiles use.
    #[arg(long, value_delimiter = ',')]
    pub layer_ids: Option<Vec<u32>>,
    #[arg(long, value_delimiter = ',', default_value = "2,6,15")]
    pub stages: Vec<u32>,
    #[arg(long, default_value_t = 24)]
    pub evidence: usize,
    /// Fixed category; cycles through all nine when omitted.
    #[arg(long, value_parser = clap::value_parser!(u32).range(0..=8))]
    pub category: Option<u32>,
    /// Leave the category out of the manifests.
    #[arg(long)]
    pub unlabeled: bool,
    #[arg(long)]
    pub planted_layer: Option<u32>,
    #[arg(long)]
    pub with_cls: bool,
    #[arg(long)]
    pub projection_dim: Option<usize>,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Route(a) => cmd_route(a),
        Command::Fuse(a) => cmd_fuse(a),
        Command::Prune(a) => cmd_prune(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Bench(a) => cmd_bench(a),
        Command::GenSynth(a) => cmd_gen_synth(a),
        Command::SynthScorer => serve_synthetic(io::stdin().lock(), io::stdout().lock()),
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v).expect("serializable");
    writeln!(out).map_err(|e| Error::io("stdout", e))
}

fn cmd_route(a: RouteArgs) -> Result<()> {
    let rules = resolve_rules(a.rules.as_deref())?;
    let c = route(&a.prompt, &rules);
    println!("{} {}", c, c.name());
    Ok(())
}

fn category_flag(c: Option<u32>) -> Result<Option<CategoryId>> {
    c.map(CategoryId::new).transpose().map_err(|e| Error::Usage(e.to_string()))
}

struct Context {
    table: ProfileTable,
    rules: RuleTable,
    flag: Option<CategoryId>,
    cls: ClsPolicy,
    upsample: UpsampleMode,
}

impl Context {
    fn new(p: &ProfileArgs) -> Result<Self> {
        Ok(Context {
            table: resolve_profiles(p.profiles.as_deref())?,
            rules: resolve_rules(p.rules.as_deref())?,
            flag: category_flag(p.category)?,
            cls: p.cls,
            upsample: p.upsample.into(),
        })
    }

    fn load(&self, path: &Path) -> Result<(Sample, CategoryId, CategorySource)> {
        let sample = dump::read_raw(path)?.into_sample(self.cls, self.upsample)?;
        let (c, src) = resolve_category(self.flag, sample.category, &sample.prompt, &self.rules);
        Ok((sample, c, src))
    }
}

#[derive(Serialize)]
struct FuseSummary {
    sample_id: String,
    category: CategoryId,
    rows: usize,
    cols: usize,
    mixture: Vec<(u32, f64)>,
    aligned: bool,
    out: PathBuf,
}

fn cmd_fuse(a: FuseArgs) -> Result<()> {
    let ctx = Context::new(&a.profile)?;
    let (sample, c, _) = ctx.load(&a.dump)?;
    let profile = ctx.table.get(c);
    let alpha = profile.mixture(&sample.stack.layer_ids)?;
    let projection = if a.no_project { vtprune_core::Projection::Identity } else { sample.projection.clone() };
    let (feats, _, aligned) = prepare_features(&sample.stack, &alpha, &projection, ctx.upsample)?;
    dump::write_tensor(&a.out, feats.data())?;
    print_json(&FuseSummary {
        sample_id: sample.sample_id,
        category: c,
        rows: feats.rows(),
        cols: feats.cols(),
        mixture: sample.stack.layer_ids.iter().copied().zip(alpha.as_slice().iter().copied()).collect(),
        aligned,
        out: a.out,
    })
}

fn prune_one(
    path: &Path,
    ctx: &Context,
    schedule: &StageSchedule,
    effective: Option<usize>,
    opts: &PruneOptions,
    timestamp: bool,
) -> Result<RetainedOutput> {
    let (sample, c, src) = ctx.load(path)?;
    let profile = ctx.table.get(c);
    let trace = run_schedule_with(&sample.stack, &sample.records, profile, &sample.projection, schedule, opts, ctx.upsample)?;
    let config = RunConfig {
        engine: ENGINE_VERSION,
        profile,
        schedule,
        effective_budget: effective,
        options: *opts,
        upsample: ctx.upsample,
        cls: ctx.cls,
    };
    let mut out = RetainedOutput::from_trace(&sample.sample_id, &trace, src, &config);
    if timestamp {
        out.generated_at = Some(output::timestamp());
    }
    Ok(out)
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Usage(format!("thread pool: {e}")))
}

fn cmd_prune(a: PruneArgs) -> Result<()> {
    let ctx = Context::new(&a.profile)?;
    let (schedule, effective) = a.schedule.resolve()?;
    let opts = a.schedule.options();

    if dump::is_dump(&a.input) {
        let out = prune_one(&a.input, &ctx, &schedule, effective, &opts, a.timestamp)?;
        return match &a.out {
            Some(p) => output::save_result(&out, p),
            None => io::stdout().write_all(out.to_json().as_bytes()).map_err(|e| Error::io("stdout", e)),
        };
    }

    let inputs = dump::list_dumps(&a.input)?;
    if inputs.is_empty() {
        return Err(Error::Usage(format!("{} holds no dumps", a.input.display())));
    }
    let out_dir = a.out.ok_or_else(|| Error::Usage("--out <dir> is required for directory input".into()))?;
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let pool = thread_pool(a.jobs)?;
    let results: Vec<(PathBuf, Result<()>)> = pool.install(|| {
        inputs
            .par_iter()
            .map(|p| {
                let name = p.file_name().map_or_else(|| "dump".into(), |n| n.to_string_lossy().into_owned());
                let r = prune_one(p, &ctx, &schedule, effective, &opts, a.timestamp)
                    .and_then(|o| output::save_result(&o, &out_dir.join(format!("{name}.json"))));
                (p.clone(), r)
            })
            .collect()
    });
    let failed: Vec<_> = results.iter().filter(|(_, r)| r.is_err()).collect();
    for (p, r) in &failed {
        if let Err(e) = r {
            eprintln!("{}: {e}", p.display());
        }
    }
    eprintln!("pruned {} of {} dumps", results.len() - failed.len(), results.len());
    match failed.first() {
        None => Ok(()),
        Some(_) => Err(Error::ShapeInconsistency(format!("{} dumps failed", failed.len()))),
    }
}

/// Loads every labeled dump under `dir`; unlabeled ones are routed.
pub fn load_dataset(dir: &Path, cls: ClsPolicy, upsample: UpsampleMode, rules: &RuleTable) -> Result<Vec<CalSample>> {
    let paths = dump::list_dumps(dir)?;
    if paths.is_empty() {
        return Err(Error::Usage(format!("{} holds no dumps", dir.display())));
    }
    paths
        .par_iter()
        .map(|p| {
            let s = dump::read_raw(p)?.into_sample(cls, upsample)?;
            let (c, _) = resolve_category(None, s.category, &s.prompt, rules);
            Ok(s.into_cal_sample(c))
        })
        .collect()
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<()> {
    let rules = resolve_rules(a.rules.as_deref())?;
    let space = profiles::load_space(&a.space)?;
    let (schedule, _) = a.schedule.resolve()?;
    let samples = load_dataset(&a.dataset, a.cls, a.upsample.into(), &rules)?;
    let fallback = a.fallback_profiles.as_deref().map(|s| resolve_profiles(Some(s))).transpose()?;

    let mut cfg = CalibrationConfig::new(schedule);
    cfg.options = a.schedule.options();
    cfg.upsample = a.upsample.into();
    if let (Some(fraction), Some(keep)) = (a.early_fraction, a.early_keep) {
        cfg.early_rejection = Some(EarlyRejection { fraction, keep });
    }

    let mut scorer: Box<dyn Scorer> = match a.scorer.as_str() {
        "builtin" => Box::new(SyntheticScorer),
        s => match s.strip_prefix("exec:") {
            Some(cmd) if !cmd.trim().is_empty() => {
                if !(a.timeout.is_finite() && a.timeout > 0.0) {
                    return Err(Error::Usage("--timeout must be positive".into()));
                }
                Box::new(ExternalScorer::spawn(cmd, Duration::from_secs_f64(a.timeout))?)
            }
            _ => return Err(Error::Usage(format!("unknown scorer {s:?}; use builtin or exec:<command>"))),
        },
    };
    let (table, report) = calibrate_all(&samples, &space, &cfg, scorer.as_mut(), fallback.as_ref())?;
    fs::write(&a.out_profiles, profiles_to_toml(&table, None)).map_err(|e| Error::io(&a.out_profiles, e))?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    fs::write(&a.out_report, json).map_err(|e| Error::io(&a.out_report, e))?;
    print!("{}", report.to_summary());
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<()> {
    let mut cfg = ProbeConfig::default().scaled_down(a.scale);
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.seed_rule = a.seed_rule.into();
    let table = resolve_profiles(a.profiles.as_deref())?;
    let names: Vec<&str> = if a.checks.is_empty() {
        CHECK_NAMES.to_vec()
    } else {
        CHECK_NAMES.iter().copied().filter(|n| a.checks.iter().any(|c| c == n)).collect()
    };
    let checks: Vec<_> = names
        .par_iter()
        .map(|n| run_check(n, &cfg, Some(&table)).expect("known check name"))
        .collect();
    let passed = checks.iter().all(|c| c.passed);
    let report = SuiteReport { seed: cfg.seed, checks, passed };
    for c in &report.checks {
        println!(
            "{:<4} {:<22} trials={:<7} violations={:<4} worst_slack={:.3e}",
            if c.passed { "ok" } else { "FAIL" },
            c.name,
            c.trials,
            c.violations,
            c.worst_slack
        );
        for ex in &c.exemplars {
            println!("       {ex}");
        }
    }
    println!("seed {:#x}: {}", report.seed, if passed { "all checks passed" } else { "violations found" });
    if let Some(p) = &a.report {
        let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
        fs::write(p, json).map_err(|e| Error::io(p, e))?;
    }
    if passed {
        Ok(())
    } else {
        let failed: Vec<_> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(Error::Verification(failed.join(", ")))
    }
}

#[derive(Serialize)]
struct BenchStage {
    stage_layer: u32,
    tokens_in: usize,
    pivots: usize,
    completion: usize,
    counted: OpCounts,
    estimate: ComplexityEstimate,
    matches: bool,
}

#[derive(Serialize)]
struct BenchReport {
    sample_id: String,
    category: CategoryId,
    repeat: usize,
    mean_ms: f64,
    samples_per_sec: f64,
    fusion_counted: u64,
    fusion_estimate: u64,
    stages: Vec<BenchStage>,
    all_match: bool,
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let ctx = Context::new(&a.profile)?;
    let (schedule, _) = a.schedule.resolve()?;
    let opts = a.schedule.options();
    let (sample, c, _) = ctx.load(&a.dump)?;
    let profile = ctx.table.get(c);
    let run = || {
        run_schedule_with(&sample.stack, &sample.records, profile, &sample.projection, &schedule, &opts, ctx.upsample)
    };
    let trace = run()?;
    let repeat = a.repeat.max(1);
    let start = Instant::now();
    for _ in 0..repeat {
        run()?;
    }
    let secs = start.elapsed().as_secs_f64() / repeat as f64;

    let layers = sample.stack.num_layers() as u64;
    let d_v = sample.stack.d_v as u64;
    let d = sample.projection.output_dim(sample.stack.d_v) as u64;
    let tokens = sample.stack.aligned_tokens().unwrap_or(0) as u64;
    let stages: Vec<BenchStage> = trace
        .stages
        .iter()
        .map(|s| {
            let estimate = complexity_estimate(&Shape {
                tokens: s.survivors.len() as u64,
                layers,
                vision_dim: d_v,
                decoder_dim: d,
                pivots: s.split.pivots as u64,
                completion: s.split.completion as u64,
                iterations: opts.iterations as u64,
            });
            BenchStage {
                stage_layer: s.stage_layer,
                tokens_in: s.survivors.len(),
                pivots: s.split.pivots,
                completion: s.split.completion,
                counted: s.ops,
                estimate,
                matches: estimate.matches_stage(&s.ops),
            }
        })
        .collect();
    let fusion_estimate = layers * tokens * d_v;
    let all_match = stages.iter().all(|s| s.matches) && trace.fusion_ops.fusion_madds == fusion_estimate;
    let report = BenchReport {
        sample_id: sample.sample_id,
        category: c,
        repeat,
        mean_ms: secs * 1e3,
        samples_per_sec: 1.0 / secs.max(f64::MIN_POSITIVE),
        fusion_counted: trace.fusion_ops.fusion_madds,
        fusion_estimate,
        stages,
        all_match,
    };
    if a.json {
        print_json(&report)?;
    } else {
        println!("{}: {:.3} ms/run, {:.1} runs/s", report.sample_id, report.mean_ms, report.samples_per_sec);
        println!("fusion madds counted={} estimate={}", report.fusion_counted, report.fusion_estimate);
        println!("stage  in    K1    K2    redundancy   assign        update      medoid      match");
        for s in &report.stages {
            println!(
                "{:<6} {:<5} {:<5} {:<5} {:<12} {:<13} {:<11} {:<11} {}",
                s.stage_layer,
                s.tokens_in,
                s.pivots,
                s.completion,
                s.counted.redundancy_madds,
                s.counted.kmeans_assign_madds,
                s.counted.kmeans_update_madds,
                s.counted.medoid_madds,
                if s.matches { "yes" } else { "NO" }
            );
        }
    }
    if report.all_match {
        Ok(())
    } else {
        Err(Error::Verification("operation counters differ from the estimates".into()))
    }
}

fn cmd_gen_synth(a: GenSynthArgs) -> Result<()> {
    let layer_ids = match a.layer_ids {
        Some(ids) => ids,
        None => profiles::builtin(profiles::DEFAULT_BUILTIN).expect("builtin").layer_union(),
    };
    if layer_ids.is_empty() || a.stages.is_empty() {
        return Err(Error::Usage("need at least one layer and one stage".into()));
    }
    let cfg = SynthConfig {
        seed: a.seed,
        grid: a.grid,
        d_v: a.d_v,
        layer_ids,
        stage_layers: a.stages,
        reference_rows: 4,
        evidence: a.evidence,
        category: category_flag(a.category)?,
        label: !a.unlabeled,
        planted_layer: a.planted_layer,
        with_cls: a.with_cls,
        projection_dim: a.projection_dim,
    };
    let paths = synth::write_dataset(&a.out, &cfg, a.count)?;
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(args: &[&str]) -> Result<(StageSchedule, Option<usize>)> {
        let mut v = vec!["vtprune", "prune", "x"];
        v.extend_from_slice(args);
        match Cli::try_parse_from(v).unwrap().command {
            Command::Prune(p) => p.schedule.resolve(),
            _ => unreachable!(),
        }
    }

    fn budgets(s: &StageSchedule) -> Vec<usize> {
        s.stages().iter().map(|s| s.budget).collect()
    }

    #[test]
    fn schedule_flags() {
        let (s, e) = sched(&[]).unwrap();
        assert_eq!((budgets(&s), e), (vec![300, 200, 110], Some(192)));
        let (s, e) = sched(&["--budget", "128"]).unwrap();
        assert_eq!((budgets(&s), e), (vec![303, 110, 36], Some(128)));
        let (s, e) = sched(&["--budget", "64", "--schedule", "66,30,17"]).unwrap();
        assert_eq!((budgets(&s), e), (vec![66, 30, 17], Some(64)));
        let (s, e) = sched(&["--schedule", "40,20"]).unwrap();
        assert_eq!((budgets(&s), e), (vec![40, 20], None));
        assert_eq!(s.stages()[1].layer, 6);
        assert!(matches!(sched(&["--budget", "100"]), Err(Error::Usage(_))));
        assert!(matches!(sched(&["--schedule", "5,10"]), Err(Error::Usage(_))));
        assert!(matches!(sched(&["--schedule", "9,8,7,6"]), Err(Error::Usage(_))));
        let (s, _) = sched(&["--schedule", "9,8,7,6", "--layers", "1,2,3,4"]).unwrap();
        assert_eq!(s.stages().len(), 4);
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["vtprune", "frobnicate"]), exit::USAGE);
        assert_eq!(run(["vtprune", "prune"]), exit::USAGE);
        assert_eq!(run(["vtprune", "route", "x", "--category", "3"]), exit::USAGE);
        assert_eq!(run(["vtprune", "--help"]), exit::OK);
    }

    #[test]
    fn missing_dump_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope");
        assert_eq!(run(["vtprune".as_ref(), "prune".as_ref(), missing.as_os_str()]), exit::DATA);
    }
}
