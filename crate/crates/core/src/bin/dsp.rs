use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dsp_core::config::{RunConfig, SEED_ENV};
use dsp_core::dataset::{self, PerturbConfig, DEMO_SEED_STRIDE};
use dsp_core::diffusion::NoiseSchedule;
use dsp_core::envs::{TaskKind, TaskSpec};
use dsp_core::eval::{self, compare_runs, EvalConfig};
use dsp_core::policy::{DiffusionPolicy, PolicyParams};
use dsp_core::run::{self, RunData};
use dsp_core::trainer::{filter_dataset, ThresholdMode};
use dsp_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dsp",
    version,
    about = "Two-stage diffusion policy training with prediction-error filtering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record scripted-expert demonstrations.
    GenDemos(GenDemosArgs),
    /// Corrupt a fraction of the actions in every trajectory.
    Perturb(PerturbArgs),
    /// Run stage 1 and stage 2 and write a run directory.
    Train(TrainArgs),
    /// Roll out a checkpoint on held-out seeds.
    Eval(EvalArgs),
    /// Compare run directories in one table.
    Report(ReportArgs),
    /// Score a dataset with a checkpoint and apply the threshold once.
    Filter(FilterArgs),
}

#[derive(Args)]
struct SeedArg {
    /// Master seed; falls back to DSP_SEED, then 0.
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenDemosArgs {
    #[arg(long)]
    task: TaskKind,
    #[arg(short = 'n', long = "episodes")]
    n: usize,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(short = 'o', long)]
    out: PathBuf,
}

#[derive(Args)]
struct PerturbArgs {
    #[arg(short = 'i', long)]
    input: PathBuf,
    #[arg(long, default_value_t = PerturbConfig::default().frac)]
    frac: f64,
    #[arg(long, default_value_t = PerturbConfig::default().eta)]
    eta: f64,
    #[arg(long, default_value_t = PerturbConfig::default().sigma_sq)]
    sigma_sq: f64,
    #[arg(long, default_value_t = PerturbConfig::default().flip_prob)]
    flip_prob: f64,
    /// Keep the recorded observations and only corrupt the actions.
    #[arg(long, conflicts_with = "replay_perturbed")]
    open_loop: bool,
    /// Re-execute each disturbed episode (the default).
    #[arg(long)]
    replay_perturbed: bool,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(short = 'o', long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration.
    #[arg(short = 'c', long)]
    config: Option<PathBuf>,
    /// `section.key=value` overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(short = 'o', long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long, default_value_t = 0.1)]
    beta_start: f64,
    #[arg(long, default_value_t = 0.9)]
    beta_end: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    task: TaskKind,
    #[arg(short = 'n', long = "episodes", default_value_t = EvalConfig::default().n_episodes)]
    n: usize,
    /// First evaluation seed.
    #[arg(long, default_value_t = eval::EVAL_SEED_BASE)]
    seed: u64,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(short = 'o', long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories, each holding a summary.json.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, value_parser = ["task"])]
    group_by: Option<String>,
    /// Write the table here; the JSON rows go next to it with a .jsonl suffix.
    #[arg(short = 'o', long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "mean")]
    threshold: ThresholdMode,
    #[arg(long, default_value_t = 1)]
    samples: usize,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[command(flatten)]
    seed: SeedArg,
    /// Write the per-transition report as JSON.
    #[arg(short = 'o', long)]
    out: Option<PathBuf>,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn json<T: serde::Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::State(e.to_string()))
}

fn load_policy(checkpoint: &Path, schedule: &ScheduleArgs) -> Result<DiffusionPolicy> {
    let params = PolicyParams::load(checkpoint)?;
    let schedule = NoiseSchedule::vp_linear(params.diffusion_steps(), schedule.beta_start, schedule.beta_end)?;
    DiffusionPolicy::new(params, schedule)
}

fn gen_demos(a: GenDemosArgs) -> Result<()> {
    let base = a
        .seed
        .seed
        .checked_mul(DEMO_SEED_STRIDE)
        .ok_or_else(|| Error::Config(format!("seed {} is too large for demo generation", a.seed.seed)))?;
    let demos = dataset::generate_demos(a.task, a.n, base)?;
    dataset::save_dataset(&a.out, &demos)?;
    let ok = demos.iter().filter(|t| t.success).count();
    println!(
        "{ok}/{} successful {} demonstrations written to {}",
        demos.len(),
        a.task,
        a.out.display()
    );
    Ok(())
}

fn perturb(a: PerturbArgs) -> Result<()> {
    let clean = dataset::load_dataset(&a.input)?;
    let config = PerturbConfig {
        frac: a.frac,
        eta: a.eta,
        sigma_sq: a.sigma_sq,
        flip_prob: a.flip_prob,
        closed_loop: !a.open_loop,
    };
    let out = dataset::perturb_all(&clean, &config, a.seed.seed)?;
    dataset::save_dataset(&a.out, &out)?;
    let before = clean.iter().filter(|t| t.success).count();
    let after = out.iter().filter(|t| t.success).count();
    let masked: usize = out.iter().map(|t| t.num_perturbed()).sum();
    println!(
        "{masked} actions perturbed in {} trajectories; successes {before} -> {after}; written to {}",
        out.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let text = match &a.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    let env_seed = match std::env::var(SEED_ENV) {
        Ok(v) => Some(
            v.parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
        ),
        Err(_) => None,
    };
    let config = RunConfig::resolve(&text, &a.overrides, env_seed)?;
    let data = RunData::load(&config)?;
    let output = run::execute(&config, &data)?;
    run::write_run_dir(&a.out, &config, &output)?;
    for w in &output.summary.warnings {
        eprintln!("warning: {w}");
    }
    println!("{}", json(&output.summary)?);
    Ok(())
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let policy = load_policy(&a.checkpoint, &a.schedule)?;
    let spec = TaskSpec::new(a.task);
    let (obs, act) = (policy.params.obs_dim(), policy.params.act_dim());
    if obs != spec.obs_dim() || act != spec.action_dim {
        return Err(Error::Shape(format!(
            "checkpoint has observation/action widths {obs}/{act}, {} needs {}/{}",
            a.task,
            spec.obs_dim(),
            spec.action_dim
        )));
    }
    let config = EvalConfig {
        n_episodes: a.n,
        base_seed: a.seed,
        ..EvalConfig::default()
    };
    let summary = eval::evaluate_policy(&policy, &spec, &config)?;
    let line = json(&summary)?;
    if let Some(out) = &a.out {
        write(out, format!("{line}\n").as_bytes())?;
    }
    println!("{line}");
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let mut summaries = Vec::new();
    let mut missing = Vec::new();
    for dir in &a.runs {
        match run::read_summary(dir) {
            Ok(s) => summaries.push(s),
            Err(Error::Io { .. }) => missing.push(dir.display().to_string()),
            Err(e) => return Err(e),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "no {} in: {}",
            run::SUMMARY_FILE,
            missing.join(", ")
        )));
    }
    let report = compare_runs(&summaries, a.group_by.is_some())?;
    let table = report.to_table();
    if let Some(out) = &a.out {
        write(out, table.as_bytes())?;
        write(&out.with_extension("jsonl"), report.to_jsonl().as_bytes())?;
    }
    print!("{table}");
    Ok(())
}

fn filter(a: FilterArgs) -> Result<()> {
    let policy = load_policy(&a.checkpoint, &a.schedule)?;
    let trajs = dataset::load_dataset(&a.data)?;
    let data = dataset::mix(&trajs, &[])?;
    let report = filter_dataset(&policy, &data, a.threshold, a.seed.seed, a.samples)?;
    if let Some(out) = &a.out {
        write(out, format!("{}\n", json(&report)?).as_bytes())?;
    }
    println!(
        "gamma {} kept {}/{} recall {} accuracy {}",
        report.gamma,
        report.kept(),
        report.keep_mask.len(),
        report.recall,
        report.accuracy
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenDemos(a) => gen_demos(a),
        Command::Perturb(a) => perturb(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => evaluate(a),
        Command::Report(a) => report(a),
        Command::Filter(a) => filter(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
