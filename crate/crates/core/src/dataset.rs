//! Demonstration trajectories, the perturbation model, mixing and files.
//!
//! Files hold one JSON object per line:
//!
//! ```text
//! {"v":1,"task":"point_reach","seed":0,"observations":[[..],..],
//!  "actions":[[..],..],"perturbed_mask":[false,..],"success":true}
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::envs::{self, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::rng;

pub const FORMAT_VERSION: u32 = 1;

/// Demonstration sets for master seed `s` start at env seed
/// `s · DEMO_SEED_STRIDE`.
pub const DEMO_SEED_STRIDE: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task: TaskKind,
    pub seed: u64,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub perturbed_mask: Vec<bool>,
    pub success: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn num_perturbed(&self) -> usize {
        self.perturbed_mask.iter().filter(|m| **m).count()
    }

    pub fn validate(&self) -> Result<()> {
        let spec = TaskSpec::new(self.task);
        let k = self.actions.len();
        if self.observations.len() != k + 1 {
            return Err(Error::Validation(format!(
                "trajectory (seed {}) has {k} actions but {} observations",
                self.seed,
                self.observations.len()
            )));
        }
        if self.perturbed_mask.len() != k {
            return Err(Error::Validation(format!(
                "trajectory (seed {}) has {k} actions but a mask of length {}",
                self.seed,
                self.perturbed_mask.len()
            )));
        }
        if let Some(i) = self.observations.iter().position(|o| o.len() != spec.obs_dim()) {
            return Err(Error::Validation(format!(
                "trajectory (seed {}): observation {i} has width {}, {} expects {}",
                self.seed,
                self.observations[i].len(),
                self.task,
                spec.obs_dim()
            )));
        }
        if let Some(i) = self.actions.iter().position(|a| a.len() != spec.action_dim) {
            return Err(Error::Validation(format!(
                "trajectory (seed {}): action {i} has width {}, {} expects {}",
                self.seed,
                self.actions[i].len(),
                self.task,
                spec.action_dim
            )));
        }
        Ok(())
    }
}

/// Perturbation recipe for one batch of trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    /// Fraction of a trajectory's steps that are disturbed.
    pub frac: f64,
    /// Magnitude of the offset mean.
    pub eta: f64,
    /// Variance of each offset coordinate.
    pub sigma_sq: f64,
    /// Probability that a disturbed step's offset mean is `+eta`.
    pub flip_prob: f64,
    /// Re-execute the disturbed actions in the environment.
    pub closed_loop: bool,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            frac: 0.2,
            eta: 0.2,
            sigma_sq: 0.05,
            flip_prob: 0.5,
            closed_loop: true,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.frac) {
            return Err(Error::Config(format!(
                "perturbation fraction {} is outside [0, 1]",
                self.frac
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!(
                "flip probability {} is outside [0, 1]",
                self.flip_prob
            )));
        }
        if !(self.sigma_sq >= 0.0 && self.sigma_sq.is_finite()) || !self.eta.is_finite() {
            return Err(Error::Config(format!(
                "perturbation needs finite eta and a non-negative variance, got eta={} sigma_sq={}",
                self.eta, self.sigma_sq
            )));
        }
        Ok(())
    }
}

/// Draws the disturbance for a trajectory of `k` steps: `round(frac·k)`
/// distinct steps, one sign per step, then per-coordinate Gaussian offsets.
pub fn draw_offsets<R: Rng + ?Sized>(
    k: usize,
    action_dim: usize,
    config: &PerturbConfig,
    rng: &mut R,
) -> Result<Vec<Option<Vec<f64>>>> {
    config.validate()?;
    let count = ((config.frac * k as f64).round() as usize).min(k);
    let mut picked = index::sample(rng, k, count).into_vec();
    picked.sort_unstable();
    let mut offsets = vec![None; k];
    for step in picked {
        offsets[step] = Some(draw_step_offset(action_dim, config, rng).1);
    }
    Ok(offsets)
}

/// One disturbed step: the sign of the offset mean and the offset itself.
pub fn draw_step_offset<R: Rng + ?Sized>(action_dim: usize, config: &PerturbConfig, rng: &mut R) -> (f64, Vec<f64>) {
    let sign = if rng.random_bool(config.flip_prob) { 1.0 } else { -1.0 };
    let noise = Normal::new(sign * config.eta, config.sigma_sq.sqrt()).expect("variance validated");
    (sign, (0..action_dim).map(|_| noise.sample(rng)).collect())
}

/// Adds `offsets` to the recorded actions without touching observations.
pub fn apply_offsets(traj: &Trajectory, offsets: &[Option<Vec<f64>>]) -> Result<Trajectory> {
    if offsets.len() != traj.len() {
        return Err(Error::Shape(format!(
            "{} offsets for a trajectory of {} steps",
            offsets.len(),
            traj.len()
        )));
    }
    let mut out = traj.clone();
    for (k, offset) in offsets.iter().enumerate() {
        if let Some(offset) = offset {
            if offset.len() != out.actions[k].len() {
                return Err(Error::Shape(format!(
                    "offset at step {k} has {} entries, expected {}",
                    offset.len(),
                    out.actions[k].len()
                )));
            }
            out.actions[k].iter_mut().zip(offset).for_each(|(a, o)| *a += o);
            out.perturbed_mask[k] = true;
        }
    }
    Ok(out)
}

fn ensure_clean(traj: &Trajectory) -> Result<()> {
    if traj.perturbed_mask.iter().any(|m| *m) {
        return Err(Error::Validation(format!(
            "trajectory (seed {}) is already perturbed",
            traj.seed
        )));
    }
    Ok(())
}

/// Corrupts the recorded actions of a clean trajectory. Disturbed actions are
/// stored unclamped, so every masked action differs from the original.
pub fn perturb_trajectory<R: Rng + ?Sized>(
    traj: &Trajectory,
    config: &PerturbConfig,
    rng: &mut R,
) -> Result<Trajectory> {
    ensure_clean(traj)?;
    let act_dim = TaskSpec::new(traj.task).action_dim;
    let offsets = draw_offsets(traj.len(), act_dim, config, rng)?;
    apply_offsets(traj, &offsets)
}

/// Re-runs the expert over the trajectory's horizon from its seed, adding
/// offsets drawn as in [`perturb_trajectory`]. Later observations, later
/// expert actions and the success flag all reflect the disturbance.
pub fn perturb_closed_loop<R: Rng + ?Sized>(
    traj: &Trajectory,
    config: &PerturbConfig,
    rng: &mut R,
) -> Result<Trajectory> {
    ensure_clean(traj)?;
    let spec = TaskSpec::new(traj.task);
    let offsets = draw_offsets(traj.len(), spec.action_dim, config, rng)?;
    envs::replay_with_offsets(&spec, traj.seed, &offsets)
}

/// Perturbs every trajectory with its own stream keyed by `(seed, index)`.
pub fn perturb_all(trajs: &[Trajectory], config: &PerturbConfig, seed: u64) -> Result<Vec<Trajectory>> {
    trajs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut rng = rng::stream(seed, rng::tag::PERTURB, i as u64);
            if config.closed_loop {
                perturb_closed_loop(t, config, &mut rng)
            } else {
                perturb_trajectory(t, config, &mut rng)
            }
        })
        .collect()
}

/// Expert demonstrations on env seeds `base_seed..base_seed + n`.
pub fn generate_demos(task: TaskKind, n: usize, base_seed: u64) -> Result<Vec<Trajectory>> {
    let spec = TaskSpec::new(task);
    let seeds: Vec<u64> = (0..n as u64).map(|i| base_seed + i).collect();
    let trajs = envs::rollout_many(&envs::ScriptedExpert, &spec, &seeds, spec.max_steps)?;
    if let Some(t) = trajs.iter().find(|t| !t.success) {
        return Err(Error::Validation(format!(
            "scripted expert failed {task} from seed {}",
            t.seed
        )));
    }
    Ok(trajs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Clean,
    Perturbed,
}

/// Flattened `(observation, action)` pairs with ground truth and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedDataset {
    pub observations: Array2<f64>,
    pub actions: Array2<f64>,
    pub is_perturbed: Vec<bool>,
    pub sources: Vec<Source>,
}

/// Rows drawn from a [`MixedDataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub observations: Array2<f64>,
    pub actions: Array2<f64>,
    pub is_perturbed: Vec<bool>,
}

impl MixedDataset {
    pub fn len(&self) -> usize {
        self.is_perturbed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.is_perturbed.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.observations.ncols()
    }

    pub fn act_dim(&self) -> usize {
        self.actions.ncols()
    }

    pub fn count_source(&self, source: Source) -> usize {
        self.sources.iter().filter(|s| **s == source).count()
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        Batch {
            indices: indices.to_vec(),
            observations: self.observations.select(ndarray::Axis(0), indices),
            actions: self.actions.select(ndarray::Axis(0), indices),
            is_perturbed: indices.iter().map(|&i| self.is_perturbed[i]).collect(),
        }
    }

    /// Keeps the rows where `keep` is true.
    pub fn subset(&self, keep: &[bool]) -> MixedDataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep[i]).collect();
        let b = self.gather(&idx);
        MixedDataset {
            observations: b.observations,
            actions: b.actions,
            is_perturbed: b.is_perturbed,
            sources: idx.iter().map(|&i| self.sources[i]).collect(),
        }
    }

    /// Uniform draws with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Batch> {
        if self.is_empty() {
            return Err(Error::State("cannot sample a batch from an empty dataset".into()));
        }
        let idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..self.len())).collect();
        Ok(self.gather(&idx))
    }
}

/// The mixture of clean and perturbed trajectories, flattened step by step.
pub fn mix(clean: &[Trajectory], perturbed: &[Trajectory]) -> Result<MixedDataset> {
    let all = clean
        .iter()
        .map(|t| (t, Source::Clean))
        .chain(perturbed.iter().map(|t| (t, Source::Perturbed)));
    let first = clean.first().or(perturbed.first());
    let spec = first.map(|t| TaskSpec::new(t.task));
    let (obs_dim, act_dim) = spec.map_or((0, 0), |s| (s.obs_dim(), s.action_dim));
    let total: usize = clean.iter().chain(perturbed).map(Trajectory::len).sum();
    let mut obs = Vec::with_capacity(total * obs_dim);
    let mut act = Vec::with_capacity(total * act_dim);
    let mut is_perturbed = Vec::with_capacity(total);
    let mut sources = Vec::with_capacity(total);
    for (t, source) in all {
        t.validate()?;
        if Some(t.task) != first.map(|f| f.task) {
            return Err(Error::Validation(format!(
                "cannot mix {} with {} trajectories",
                t.task,
                first.map(|f| f.task).expect("nonempty")
            )));
        }
        for k in 0..t.len() {
            obs.extend_from_slice(&t.observations[k]);
            act.extend_from_slice(&t.actions[k]);
            is_perturbed.push(t.perturbed_mask[k]);
            sources.push(source);
        }
    }
    Ok(MixedDataset {
        observations: Array2::from_shape_vec((total, obs_dim), obs).expect("sizes counted"),
        actions: Array2::from_shape_vec((total, act_dim), act).expect("sizes counted"),
        is_perturbed,
        sources,
    })
}

#[derive(Serialize)]
struct RecordRef<'a> {
    v: u32,
    #[serde(flatten)]
    traj: &'a Trajectory,
}

#[derive(Deserialize)]
struct Record {
    v: u32,
    #[serde(flatten)]
    traj: Trajectory,
}

pub fn write_dataset<W: Write>(mut out: W, trajs: &[Trajectory]) -> std::io::Result<()> {
    for traj in trajs {
        serde_json::to_writer(
            &mut out,
            &RecordRef {
                v: FORMAT_VERSION,
                traj,
            },
        )?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn to_jsonl(trajs: &[Trajectory]) -> String {
    let mut buf = Vec::new();
    write_dataset(&mut buf, trajs).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("JSON is UTF-8")
}

pub fn parse_dataset(text: &str, origin: &str) -> Result<Vec<Trajectory>> {
    let mut trajs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: origin.into(),
            line: i + 1,
            message,
        };
        let record: Record = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        if record.v != FORMAT_VERSION {
            return Err(parse_err(format!("unsupported record version {}", record.v)));
        }
        record
            .traj
            .validate()
            .map_err(|e| Error::Validation(format!("{origin}, line {}: {e}", i + 1)))?;
        trajs.push(record.traj);
    }
    Ok(trajs)
}

pub fn save_dataset(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(std::io::BufWriter::new(file), trajs).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Vec<Trajectory>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(|e| Error::io(path, e))?);
        text.push('\n');
    }
    parse_dataset(&text, &path.display().to_string())
}
