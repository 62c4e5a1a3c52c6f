//! Run configuration: a TOML file with `[run]`, `[data]`, `[policy]`,
//! `[train]`, `[perturb]` and `[eval]` sections, layered over a preset and
//! then over `section.key=value` overrides.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::PerturbConfig;
use crate::diffusion::{NoiseSchedule, ScheduleConfig};
use crate::envs::{TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::nn::AdamWConfig;
use crate::policy::{PolicyConfig, DEFAULT_EMBED_DIM, DESK_HIDDEN_DIM, FULL_HIDDEN_DIM};
use crate::trainer::{Stage2Mode, ThresholdMode, TrainConfig};

/// Environment variable consulted when no seed is configured.
pub const SEED_ENV: &str = "DSP_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Full,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            _ => Err(Error::Config(format!("unknown preset {s:?}; expected desk or full"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub task: TaskKind,
    pub seed: u64,
    pub preset: Preset,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Clean demonstrations; recorded from the expert when absent.
    pub clean: Option<PathBuf>,
    /// Perturbed demonstrations; fresh expert episodes are perturbed when absent.
    pub perturbed: Option<PathBuf>,
    /// Use only the first `n_clean` clean trajectories.
    pub n_clean: Option<usize>,
    /// Use only the first `n_perturbed` perturbed trajectories.
    pub n_perturbed: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub threshold_mode: ThresholdMode,
    pub stage2_mode: Stage2Mode,
    pub eval_every: usize,
    pub filter_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub n_episodes: usize,
    pub base_seed: u64,
    pub n_resamples: usize,
    pub level: f64,
}

/// Fully resolved configuration of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub policy: PolicySection,
    pub train: TrainSection,
    pub perturb: PerturbConfig,
    pub eval: EvalSection,
}

fn defaults(preset: Preset) -> toml::Table {
    let train = match preset {
        Preset::Desk => TrainConfig::desk(),
        Preset::Full => TrainConfig::full(),
    };
    let hidden = match preset {
        Preset::Desk => DESK_HIDDEN_DIM,
        Preset::Full => FULL_HIDDEN_DIM,
    };
    let schedule = ScheduleConfig::default();
    let eval = EvalConfig::default();
    #[derive(Serialize)]
    struct Defaults {
        run: RunDefaults,
        data: DataSection,
        policy: PolicySection,
        train: TrainSection,
        perturb: PerturbConfig,
        eval: EvalSection,
    }
    #[derive(Serialize)]
    struct RunDefaults {
        preset: Preset,
    }
    let d = Defaults {
        run: RunDefaults { preset },
        data: DataSection::default(),
        policy: PolicySection {
            hidden_dim: hidden,
            embed_dim: DEFAULT_EMBED_DIM,
            diffusion_steps: schedule.steps,
            beta_start: schedule.beta_start,
            beta_end: schedule.beta_end,
        },
        train: TrainSection {
            stage1_steps: train.stage1_steps,
            stage2_steps: train.stage2_steps,
            batch_size: train.batch_size,
            lr: train.optimizer.lr,
            beta1: train.optimizer.beta1,
            beta2: train.optimizer.beta2,
            eps: train.optimizer.eps,
            weight_decay: train.optimizer.weight_decay,
            threshold_mode: train.threshold_mode,
            stage2_mode: train.stage2_mode,
            eval_every: train.eval_every,
            filter_samples: train.filter_samples,
        },
        perturb: PerturbConfig::default(),
        eval: EvalSection {
            n_episodes: eval.n_episodes,
            base_seed: eval.base_seed,
            n_resamples: eval.n_resamples,
            level: eval.level,
        },
    };
    toml::Table::try_from(d).expect("defaults serialize")
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `section.key=value`. The value is read as a TOML literal and
/// falls back to a plain string.
pub fn parse_override(spec: &str) -> Result<(Vec<String>, toml::Value)> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not of the form section.key=value")))?;
    let path: Vec<String> = path.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("override {spec:?} has an empty key")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

fn apply_override(table: &mut toml::Table, path: &[String], value: toml::Value) {
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        if !entry.is_table() {
            *entry = toml::Value::Table(toml::Table::new());
        }
        cur = entry.as_table_mut().expect("just ensured a table");
    }
    cur.insert(last.clone(), value);
}

impl RunConfig {
    /// Layers `file` (may be empty), then `overrides`, over the preset the
    /// result names. A missing seed falls back to `env_seed`, then 0.
    pub fn resolve(file: &str, overrides: &[String], env_seed: Option<u64>) -> Result<Self> {
        let mut user: toml::Table =
            toml::from_str(file).map_err(|e| Error::Config(format!("invalid config file: {e}")))?;
        for o in overrides {
            let (path, value) = parse_override(o)?;
            apply_override(&mut user, &path, value);
        }
        let preset = match user.get("run").and_then(|r| r.get("preset")) {
            None => Preset::Desk,
            Some(toml::Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::Config(format!("run.preset must be a string, got {other}"))),
        };
        let mut table = defaults(preset);
        let has_seed = user.get("run").and_then(|r| r.get("seed")).is_some();
        merge(&mut table, user);
        if !has_seed {
            apply_override(
                &mut table,
                &["run".into(), "seed".into()],
                toml::Value::Integer(env_seed.unwrap_or(0) as i64),
            );
        }
        let config: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid configuration: {}", e.message())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String], env_seed: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::resolve(&text, overrides, env_seed)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.policy_config().validate()?;
        self.schedule()?;
        self.train_config().validate()?;
        self.perturb.validate()?;
        if self.eval.n_episodes == 0 {
            return Err(Error::Config("eval.n_episodes must be positive".into()));
        }
        if !(self.eval.level > 0.0 && self.eval.level < 1.0) || self.eval.n_resamples == 0 {
            return Err(Error::Config(
                "eval.level must lie in (0, 1) and eval.n_resamples must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn spec(&self) -> TaskSpec {
        TaskSpec::new(self.run.task)
    }

    pub fn policy_config(&self) -> PolicyConfig {
        let spec = self.spec();
        PolicyConfig {
            obs_dim: spec.obs_dim(),
            act_dim: spec.action_dim,
            hidden_dim: self.policy.hidden_dim,
            embed_dim: self.policy.embed_dim,
            diffusion_steps: self.policy.diffusion_steps,
            seed: self.run.seed,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::vp_linear(
            self.policy.diffusion_steps,
            self.policy.beta_start,
            self.policy.beta_end,
        )
        .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            stage1_steps: t.stage1_steps,
            stage2_steps: t.stage2_steps,
            batch_size: t.batch_size,
            optimizer: AdamWConfig {
                lr: t.lr,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
                weight_decay: t.weight_decay,
            },
            threshold_mode: t.threshold_mode,
            stage2_mode: t.stage2_mode,
            seed: self.run.seed,
            eval_every: t.eval_every,
            filter_samples: t.filter_samples,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            n_episodes: self.eval.n_episodes,
            base_seed: self.eval.base_seed,
            n_resamples: self.eval.n_resamples,
            level: self.eval.level,
        }
    }
}
