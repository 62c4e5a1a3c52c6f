//! End-to-end training runs and their on-disk layout.
//!
//! A run directory holds `config.toml` (the resolved configuration),
//! `stage1.ckpt`, `final.ckpt` (absent when stage 2 is skipped),
//! `metrics.log` (one JSON metric record per line) and `summary.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::dataset::{self, MixedDataset, Trajectory, DEMO_SEED_STRIDE};
use crate::envs::TaskKind;
use crate::error::{Error, Result};
use crate::eval::{evaluate_policy, RunSummary};
use crate::policy::{DiffusionPolicy, PolicyParams};
use crate::trainer::{self, Stage2Mode, StageOutput};

pub const CONFIG_FILE: &str = "config.toml";
pub const STAGE1_CHECKPOINT: &str = "stage1.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const METRICS_FILE: &str = "metrics.log";
pub const SUMMARY_FILE: &str = "summary.json";

/// Clean and perturbed demonstrations feeding one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunData {
    pub clean: Vec<Trajectory>,
    pub perturbed: Vec<Trajectory>,
}

impl RunData {
    /// Truncates to the requested counts and checks every trajectory
    /// belongs to `task`.
    pub fn new(
        task: TaskKind,
        mut clean: Vec<Trajectory>,
        mut perturbed: Vec<Trajectory>,
        n_clean: Option<usize>,
        n_perturbed: Option<usize>,
    ) -> Result<Self> {
        for (name, set, n) in [
            ("clean", &mut clean, n_clean),
            ("perturbed", &mut perturbed, n_perturbed),
        ] {
            if let Some(n) = n {
                if n > set.len() {
                    return Err(Error::Validation(format!(
                        "{n} {name} trajectories requested but only {} available",
                        set.len()
                    )));
                }
                set.truncate(n);
            }
            if let Some(t) = set.iter().find(|t| t.task != task) {
                return Err(Error::Validation(format!(
                    "{name} trajectory (seed {}) is for {}, run is for {task}",
                    t.seed, t.task
                )));
            }
        }
        if clean.is_empty() {
            return Err(Error::Validation("a run needs at least one clean trajectory".into()));
        }
        Ok(RunData { clean, perturbed })
    }

    /// Loads the datasets named in `config.data`. A missing clean set is
    /// generated from the expert (`n_clean` episodes from the run seed's
    /// demonstration block); a missing perturbed set with a positive
    /// `n_perturbed` is generated from the following seeds and perturbed
    /// with `config.perturb`.
    pub fn load(config: &RunConfig) -> Result<Self> {
        let task = config.run.task;
        let base = config
            .run
            .seed
            .checked_mul(DEMO_SEED_STRIDE)
            .ok_or_else(|| Error::Config(format!("seed {} is too large for demo generation", config.run.seed)))?;
        let clean = match &config.data.clean {
            Some(p) => dataset::load_dataset(p)?,
            None => {
                let n = config
                    .data
                    .n_clean
                    .ok_or_else(|| Error::Config("data.clean or data.n_clean must be set".into()))?;
                dataset::generate_demos(task, n, base)?
            }
        };
        let perturbed = match (&config.data.perturbed, config.data.n_perturbed) {
            (Some(p), _) => dataset::load_dataset(p)?,
            (None, Some(n)) if n > 0 => {
                let raw = dataset::generate_demos(task, n, base + clean.len() as u64)?;
                dataset::perturb_all(&raw, &config.perturb, config.run.seed)?
            }
            (None, _) => Vec::new(),
        };
        RunData::new(task, clean, perturbed, config.data.n_clean, config.data.n_perturbed)
    }

    pub fn clean_dataset(&self) -> Result<MixedDataset> {
        dataset::mix(&self.clean, &[])
    }

    pub fn mixed_dataset(&self) -> Result<MixedDataset> {
        dataset::mix(&self.clean, &self.perturbed)
    }
}

/// Everything a finished run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub stage1: StageOutput,
    pub stage2: Option<StageOutput>,
    pub summary: RunSummary,
}

impl RunOutput {
    pub fn final_params(&self) -> &PolicyParams {
        self.stage2.as_ref().map_or(&self.stage1.params, |s| &s.params)
    }
}

pub fn train_stage1(config: &RunConfig, data: &RunData) -> Result<StageOutput> {
    let params = PolicyParams::build(&config.policy_config())?;
    trainer::train_stage1(
        params,
        &config.schedule()?,
        &data.clean_dataset()?,
        &config.train_config(),
    )
}

/// Continues from a finished stage 1. Returns `None` when the configured
/// mode skips stage 2.
pub fn train_stage2(config: &RunConfig, data: &RunData, stage1: &StageOutput) -> Result<Option<StageOutput>> {
    if config.train.stage2_mode == Stage2Mode::None {
        return Ok(None);
    }
    let out = trainer::train_stage2(
        stage1.params.clone(),
        &config.schedule()?,
        &data.mixed_dataset()?,
        &config.train_config(),
    )?;
    Ok(Some(out))
}

/// Evaluates the final policy and assembles the run summary.
pub fn summarize(
    config: &RunConfig,
    data: &RunData,
    stage1: StageOutput,
    stage2: Option<StageOutput>,
) -> Result<RunOutput> {
    let last = stage2.as_ref().unwrap_or(&stage1);
    let policy = DiffusionPolicy::new(last.params.clone(), config.schedule()?)?;
    let eval = evaluate_policy(&policy, &config.spec(), &config.eval_config())?;
    let mut warnings = stage1.warnings.clone();
    warnings.extend(stage2.iter().flat_map(|s| s.warnings.iter().cloned()));
    let summary = RunSummary {
        task: config.run.task,
        n_clean: data.clean.len(),
        n_perturbed: data.perturbed.len(),
        stage2_mode: config.train.stage2_mode,
        threshold_mode: config.train.threshold_mode,
        seed: config.run.seed,
        stage1_steps: config.train.stage1_steps,
        stage2_steps: if stage2.is_some() { config.train.stage2_steps } else { 0 },
        final_loss: last.final_loss().or_else(|| stage1.final_loss()),
        skipped_steps: stage2.as_ref().map_or(0, |s| s.skipped_steps),
        warnings,
        eval,
    };
    Ok(RunOutput {
        stage1,
        stage2,
        summary,
    })
}

pub fn execute(config: &RunConfig, data: &RunData) -> Result<RunOutput> {
    let stage1 = train_stage1(config, data)?;
    let stage2 = train_stage2(config, data, &stage1)?;
    summarize(config, data, stage1, stage2)
}

/// Copy of `config` with absolute data paths.
pub fn absolute_paths(config: &RunConfig) -> Result<RunConfig> {
    let mut out = config.clone();
    for p in [&mut out.data.clean, &mut out.data.perturbed].into_iter().flatten() {
        *p = std::path::absolute(&*p).map_err(|e| Error::io(p.as_path(), e))?;
    }
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the resolved configuration, checkpoints, metrics log and summary.
pub fn write_run_dir(dir: &Path, config: &RunConfig, output: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(CONFIG_FILE), absolute_paths(config)?.to_toml().as_bytes())?;
    output.stage1.params.save(&dir.join(STAGE1_CHECKPOINT))?;
    if let Some(s2) = &output.stage2 {
        s2.params.save(&dir.join(FINAL_CHECKPOINT))?;
    }
    let mut log = Vec::new();
    for m in output
        .stage1
        .metrics
        .iter()
        .chain(output.stage2.iter().flat_map(|s| &s.metrics))
    {
        serde_json::to_writer(&mut log, m).map_err(|e| Error::State(e.to_string()))?;
        log.write_all(b"\n").map_err(|e| Error::io(dir, e))?;
    }
    write_file(&dir.join(METRICS_FILE), &log)?;
    let summary = serde_json::to_string_pretty(&output.summary).map_err(|e| Error::State(e.to_string()))?;
    write_file(&dir.join(SUMMARY_FILE), format!("{summary}\n").as_bytes())
}

pub fn read_summary(dir: &Path) -> Result<RunSummary> {
    let path: PathBuf = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path,
        line: e.line(),
        message: e.to_string(),
    })
}
