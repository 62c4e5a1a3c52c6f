//! Kinematic manipulation tasks with scripted experts.
//!
//! End effectors move by `0.05·Δ` per step inside the `[−1, 1]³` workspace.
//! Each arm takes four action coordinates: a Cartesian displacement and a
//! gripper command (`> 0` opens, `≤ 0` closes). Closing an open gripper
//! within [`GRASP_TOL`] of a free object attaches it; a held object follows
//! its arm exactly until that gripper opens.
//!
//! Observation layout: every arm's end-effector position, then every arm's
//! gripper state, then object position, goal position and object − goal.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Trajectory;
use crate::error::{Error, Result};
use crate::policy::DiffusionPolicy;
use crate::rng::{self, DspRng};

pub const STEP_SIZE: f64 = 0.05;
pub const GRASP_TOL: f64 = 0.03;
pub const SUCCESS_TOL: f64 = 0.025;
pub const MAX_STEPS: usize = 50;
pub const GRIPPER_OPEN: f64 = 1.0;
pub const GRIPPER_CLOSED: f64 = -1.0;

/// Both arms count as met at the handover point within this distance.
const ALIGN_TOL: f64 = 0.01;
/// Where the bimanual expert passes the object from arm 0 to arm 1.
const HANDOVER_POINT: [f64; 3] = [0.0, 0.0, 0.0];
/// Minimum distance between the start and the target of a reset.
const MIN_SEPARATION: f64 = 0.2;
/// Block-transfer objects and goals lie on the `z = 0` plane within this
/// half-width.
const TABLE_HALF_WIDTH: f64 = 0.4;
/// Block-transfer end-effector start height above the table.
const HOVER_HEIGHT: f64 = 0.1;

pub type Vec3 = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    PointReach,
    BlockTransfer,
    BiHandover,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::PointReach, TaskKind::BlockTransfer, TaskKind::BiHandover];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::PointReach => "point_reach",
            TaskKind::BlockTransfer => "block_transfer",
            TaskKind::BiHandover => "bi_handover",
        }
    }

    fn index(self) -> u64 {
        match self {
            TaskKind::PointReach => 0,
            TaskKind::BlockTransfer => 1,
            TaskKind::BiHandover => 2,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let normalized = s.to_ascii_lowercase().replace('-', "_");
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == normalized || k.name().replace('_', "") == normalized)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown task {s:?}; expected one of point_reach, block_transfer, bi_handover"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub arms: usize,
    pub max_steps: usize,
    pub success_tol: f64,
    pub action_dim: usize,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        let arms = if kind == TaskKind::BiHandover { 2 } else { 1 };
        Self {
            kind,
            arms,
            max_steps: MAX_STEPS,
            success_tol: SUCCESS_TOL,
            action_dim: 4 * arms,
        }
    }

    pub fn obs_dim(&self) -> usize {
        4 * self.arms + 9
    }

    fn has_object(&self) -> bool {
        self.kind != TaskKind::PointReach
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub ee_pos: Vec<Vec3>,
    pub gripper: Vec<f64>,
    pub obj_pos: Vec3,
    pub goal_pos: Vec3,
    pub held_by: Option<usize>,
    /// Whether each arm has held the object at some point in the episode.
    pub has_held: Vec<bool>,
    pub step_count: usize,
}

fn dist(a: &Vec3, b: &Vec3) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn uniform_in<R: Rng>(rng: &mut R, lo: Vec3, hi: Vec3) -> Vec3 {
    [0, 1, 2].map(|i| rng.random_range(lo[i]..hi[i]))
}

fn on_table<R: Rng>(rng: &mut R) -> Vec3 {
    [
        rng.random_range(-TABLE_HALF_WIDTH..=TABLE_HALF_WIDTH),
        rng.random_range(-TABLE_HALF_WIDTH..=TABLE_HALF_WIDTH),
        0.0,
    ]
}

fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(-1.0, 1.0)
    }
}

impl EnvState {
    pub fn observation(&self) -> Vec<f64> {
        let mut obs = Vec::with_capacity(4 * self.ee_pos.len() + 9);
        for p in &self.ee_pos {
            obs.extend_from_slice(p);
        }
        obs.extend_from_slice(&self.gripper);
        obs.extend_from_slice(&self.obj_pos);
        obs.extend_from_slice(&self.goal_pos);
        obs.extend((0..3).map(|i| self.obj_pos[i] - self.goal_pos[i]));
        obs
    }

    pub fn is_success(&self, spec: &TaskSpec) -> bool {
        let tol = spec.success_tol;
        match spec.kind {
            TaskKind::PointReach => dist(&self.ee_pos[0], &self.goal_pos) <= tol,
            TaskKind::BlockTransfer => self.held_by.is_none() && dist(&self.obj_pos, &self.goal_pos) <= tol,
            TaskKind::BiHandover => {
                self.has_held[0] && self.held_by == Some(1) && dist(&self.obj_pos, &self.goal_pos) <= tol
            }
        }
    }
}

/// Result of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub observation: Vec<f64>,
    pub done: bool,
    pub success: bool,
}

pub fn reset(spec: &TaskSpec, seed: u64) -> (EnvState, Vec<f64>) {
    let mut rng = rng::stream(seed, rng::tag::RESET, spec.kind.index());
    let state = match spec.kind {
        TaskKind::PointReach => {
            let start = [0.0; 3];
            let goal = loop {
                let g = uniform_in(&mut rng, [-0.5; 3], [0.5; 3]);
                if dist(&g, &start) >= MIN_SEPARATION {
                    break g;
                }
            };
            EnvState {
                ee_pos: vec![start],
                gripper: vec![GRIPPER_CLOSED],
                obj_pos: goal,
                goal_pos: goal,
                held_by: None,
                has_held: vec![false],
                step_count: 0,
            }
        }
        TaskKind::BlockTransfer => {
            let obj = on_table(&mut rng);
            let goal = loop {
                let g = on_table(&mut rng);
                if dist(&g, &obj) >= MIN_SEPARATION {
                    break g;
                }
            };
            EnvState {
                ee_pos: vec![[0.0, 0.0, HOVER_HEIGHT]],
                gripper: vec![GRIPPER_CLOSED],
                obj_pos: obj,
                goal_pos: goal,
                held_by: None,
                has_held: vec![false],
                step_count: 0,
            }
        }
        TaskKind::BiHandover => {
            let obj = uniform_in(&mut rng, [-0.6, -0.3, -0.3], [-0.2, 0.3, 0.3]);
            let goal = uniform_in(&mut rng, [0.2, -0.3, -0.3], [0.6, 0.3, 0.3]);
            EnvState {
                ee_pos: vec![[-0.4, 0.0, 0.0], [0.4, 0.0, 0.0]],
                gripper: vec![GRIPPER_CLOSED; 2],
                obj_pos: obj,
                goal_pos: goal,
                held_by: None,
                has_held: vec![false; 2],
                step_count: 0,
            }
        }
    };
    let obs = state.observation();
    (state, obs)
}

pub fn step(spec: &TaskSpec, state: &EnvState, action: &[f64]) -> Result<StepOutcome> {
    if action.len() != spec.action_dim {
        return Err(Error::Shape(format!(
            "{} expects {} action coordinates, got {}",
            spec.kind,
            spec.action_dim,
            action.len()
        )));
    }
    let action: Vec<f64> = action.iter().copied().map(clamp_unit).collect();
    let mut next = state.clone();

    for arm in 0..spec.arms {
        for i in 0..3 {
            let p = &mut next.ee_pos[arm][i];
            *p = (*p + STEP_SIZE * action[4 * arm + i]).clamp(-1.0, 1.0);
        }
    }
    if let Some(arm) = next.held_by {
        next.obj_pos = next.ee_pos[arm];
    }

    // Releases are applied before grasps so one arm can take the object the
    // moment the other lets go.
    for arm in 0..spec.arms {
        if action[4 * arm + 3] > 0.0 {
            if next.held_by == Some(arm) {
                next.held_by = None;
            }
            next.gripper[arm] = GRIPPER_OPEN;
        }
    }
    for arm in 0..spec.arms {
        if action[4 * arm + 3] <= 0.0 {
            let was_open = state.gripper[arm] > 0.0;
            if was_open
                && spec.has_object()
                && next.held_by.is_none()
                && dist(&next.ee_pos[arm], &next.obj_pos) <= GRASP_TOL
            {
                next.held_by = Some(arm);
                next.has_held[arm] = true;
                next.obj_pos = next.ee_pos[arm];
            }
            next.gripper[arm] = GRIPPER_CLOSED;
        }
    }

    next.step_count += 1;
    let success = next.is_success(spec);
    let done = success || next.step_count >= spec.max_steps;
    let observation = next.observation();
    Ok(StepOutcome {
        state: next,
        observation,
        done,
        success,
    })
}

/// Dead-beat move toward `target`, saturated to the unit action box.
fn move_toward(from: &Vec3, to: &Vec3) -> Vec3 {
    [0, 1, 2].map(|i| ((to[i] - from[i]) / STEP_SIZE).clamp(-1.0, 1.0))
}

/// Whether one saturated step can land exactly on `to`.
fn within_one_step(from: &Vec3, to: &Vec3) -> bool {
    (0..3).all(|i| (to[i] - from[i]).abs() <= STEP_SIZE + 1e-12)
}

/// Approach `target` with the gripper open and close it on the step that
/// lands on the target.
fn approach_and_grasp(ee: &Vec3, gripper: f64, target: &Vec3) -> [f64; 4] {
    let m = move_toward(ee, target);
    let command = if gripper > 0.0 && within_one_step(ee, target) {
        GRIPPER_CLOSED
    } else {
        GRIPPER_OPEN
    };
    [m[0], m[1], m[2], command]
}

/// Carry a held object toward `target` and let go on the step that lands on it.
fn carry_and_release(ee: &Vec3, target: &Vec3) -> [f64; 4] {
    let m = move_toward(ee, target);
    let command = if within_one_step(ee, target) {
        GRIPPER_OPEN
    } else {
        GRIPPER_CLOSED
    };
    [m[0], m[1], m[2], command]
}

/// Phase-based proportional controller for every task.
pub fn scripted_expert(spec: &TaskSpec, state: &EnvState) -> Vec<f64> {
    match spec.kind {
        TaskKind::PointReach => {
            let m = move_toward(&state.ee_pos[0], &state.goal_pos);
            vec![m[0], m[1], m[2], GRIPPER_CLOSED]
        }
        TaskKind::BlockTransfer => {
            let ee = &state.ee_pos[0];
            let a = match state.held_by {
                Some(_) => carry_and_release(ee, &state.goal_pos),
                None if dist(&state.obj_pos, &state.goal_pos) <= spec.success_tol => [0.0, 0.0, 0.0, GRIPPER_OPEN],
                None => approach_and_grasp(ee, state.gripper[0], &state.obj_pos),
            };
            a.to_vec()
        }
        TaskKind::BiHandover => {
            let (left, right) = (&state.ee_pos[0], &state.ee_pos[1]);
            let idle_open = [0.0, 0.0, 0.0, GRIPPER_OPEN];
            let (a0, a1) = match state.held_by {
                Some(1) => {
                    let m = move_toward(right, &state.goal_pos);
                    (idle_open, [m[0], m[1], m[2], GRIPPER_CLOSED])
                }
                Some(_) => {
                    if dist(left, &HANDOVER_POINT) <= ALIGN_TOL
                        && dist(right, &HANDOVER_POINT) <= ALIGN_TOL
                        && state.gripper[1] > 0.0
                    {
                        // Arm 0 lets go and arm 1 closes in the same step.
                        (idle_open, [0.0, 0.0, 0.0, GRIPPER_CLOSED])
                    } else {
                        let m0 = move_toward(left, &HANDOVER_POINT);
                        let m1 = move_toward(right, &HANDOVER_POINT);
                        (
                            [m0[0], m0[1], m0[2], GRIPPER_CLOSED],
                            [m1[0], m1[1], m1[2], GRIPPER_OPEN],
                        )
                    }
                }
                None => {
                    // A free object past the midline belongs to arm 1.
                    if state.obj_pos[0] > -0.1 {
                        (idle_open, approach_and_grasp(right, state.gripper[1], &state.obj_pos))
                    } else {
                        let m1 = move_toward(right, &HANDOVER_POINT);
                        (
                            approach_and_grasp(left, state.gripper[0], &state.obj_pos),
                            [m1[0], m1[1], m1[2], GRIPPER_OPEN],
                        )
                    }
                }
            };
            a0.into_iter().chain(a1).collect()
        }
    }
}

/// Anything that maps environment observations to actions. Each episode
/// owns a random stream so batched and sequential rollouts agree.
pub trait Actor {
    fn act_batch(&self, spec: &TaskSpec, states: &[EnvState], rngs: &mut [DspRng]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedExpert;

impl Actor for ScriptedExpert {
    fn act_batch(&self, spec: &TaskSpec, states: &[EnvState], _: &mut [DspRng]) -> Result<Vec<Vec<f64>>> {
        Ok(states.iter().map(|s| scripted_expert(spec, s)).collect())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroActor;

impl Actor for ZeroActor {
    fn act_batch(&self, spec: &TaskSpec, states: &[EnvState], _: &mut [DspRng]) -> Result<Vec<Vec<f64>>> {
        Ok(vec![vec![0.0; spec.action_dim]; states.len()])
    }
}

/// Uniformly random actions, used as a chance-level baseline.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomActor;

impl Actor for RandomActor {
    fn act_batch(&self, spec: &TaskSpec, states: &[EnvState], rngs: &mut [DspRng]) -> Result<Vec<Vec<f64>>> {
        Ok(rngs
            .iter_mut()
            .take(states.len())
            .map(|r| (0..spec.action_dim).map(|_| r.random_range(-1.0..=1.0)).collect())
            .collect())
    }
}

impl Actor for DiffusionPolicy {
    fn act_batch(&self, spec: &TaskSpec, states: &[EnvState], rngs: &mut [DspRng]) -> Result<Vec<Vec<f64>>> {
        if self.params.obs_dim() != spec.obs_dim() || self.params.act_dim() != spec.action_dim {
            return Err(Error::Shape(format!(
                "policy has observation/action dims {}/{} but {} has {}/{}",
                self.params.obs_dim(),
                self.params.act_dim(),
                spec.kind,
                spec.obs_dim(),
                spec.action_dim
            )));
        }
        let mut obs = Array2::zeros((states.len(), spec.obs_dim()));
        for (i, s) in states.iter().enumerate() {
            obs.row_mut(i).assign(&ndarray::Array1::from(s.observation()));
        }
        let actions = self.sample_batch(&obs, rngs)?;
        Ok(actions.outer_iter().map(|r| r.to_vec()).collect())
    }
}

/// Random stream of the actor during the episode started from `seed`.
pub fn episode_rng(seed: u64) -> DspRng {
    rng::stream(seed, rng::tag::EPISODE, 0)
}

/// Runs one episode per seed in lockstep and records each as a clean
/// trajectory.
pub fn rollout_many<A: Actor + ?Sized>(
    actor: &A,
    spec: &TaskSpec,
    seeds: &[u64],
    max_steps: usize,
) -> Result<Vec<Trajectory>> {
    let mut states = Vec::with_capacity(seeds.len());
    let mut trajs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (state, obs) = reset(spec, seed);
        states.push(state);
        trajs.push(Trajectory {
            task: spec.kind,
            seed,
            observations: vec![obs],
            actions: Vec::new(),
            perturbed_mask: Vec::new(),
            success: false,
        });
    }
    let mut rngs: Vec<DspRng> = seeds.iter().map(|&s| episode_rng(s)).collect();
    let limit = max_steps.min(spec.max_steps);
    let mut active: Vec<usize> = if limit == 0 {
        Vec::new()
    } else {
        (0..seeds.len()).collect()
    };
    while !active.is_empty() {
        let batch_states: Vec<EnvState> = active.iter().map(|&i| states[i].clone()).collect();
        let mut batch_rngs: Vec<DspRng> = active.iter().map(|&i| rngs[i].clone()).collect();
        let actions = actor.act_batch(spec, &batch_states, &mut batch_rngs)?;
        let mut still = Vec::with_capacity(active.len());
        for (k, &i) in active.iter().enumerate() {
            rngs[i] = batch_rngs[k].clone();
            let out = step(spec, &states[i], &actions[k])?;
            let traj = &mut trajs[i];
            traj.actions.push(actions[k].clone());
            traj.perturbed_mask.push(false);
            traj.observations.push(out.observation);
            traj.success = out.success;
            states[i] = out.state;
            if !out.done && states[i].step_count < limit {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(trajs)
}

pub fn rollout<A: Actor + ?Sized>(actor: &A, spec: &TaskSpec, seed: u64, max_steps: usize) -> Result<Trajectory> {
    Ok(rollout_many(actor, spec, &[seed], max_steps)?.remove(0))
}

/// Re-runs the scripted expert from `reset(seed)` for `offsets.len()` steps,
/// adding the offset to the expert action wherever one is given. The expert
/// reacts to the disturbed states it reaches; masked steps are those that
/// carried an offset. Execution stops early when the episode ends.
pub fn replay_with_offsets(spec: &TaskSpec, seed: u64, offsets: &[Option<Vec<f64>>]) -> Result<Trajectory> {
    let (mut state, obs) = reset(spec, seed);
    let mut traj = Trajectory {
        task: spec.kind,
        seed,
        observations: vec![obs],
        actions: Vec::new(),
        perturbed_mask: Vec::new(),
        success: false,
    };
    for (k, offset) in offsets.iter().enumerate() {
        let mut action = scripted_expert(spec, &state);
        if let Some(offset) = offset {
            if offset.len() != action.len() {
                return Err(Error::Shape(format!(
                    "offset at step {k} has {} entries, expected {}",
                    offset.len(),
                    action.len()
                )));
            }
            action.iter_mut().zip(offset).for_each(|(a, o)| *a += o);
        }
        let out = step(spec, &state, &action)?;
        traj.actions.push(action);
        traj.perturbed_mask.push(offset.is_some());
        traj.observations.push(out.observation);
        traj.success = out.success;
        state = out.state;
        if out.done {
            break;
        }
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(kind: TaskKind) -> TaskSpec {
        TaskSpec::new(kind)
    }

    #[test]
    fn observation_dims() {
        assert_eq!(spec(TaskKind::PointReach).obs_dim(), 13);
        assert_eq!(spec(TaskKind::BlockTransfer).obs_dim(), 13);
        assert_eq!(spec(TaskKind::BiHandover).obs_dim(), 17);
        for kind in TaskKind::ALL {
            let s = spec(kind);
            let (_, obs) = reset(&s, 3);
            assert_eq!(obs.len(), s.obs_dim());
            assert_eq!(s.action_dim, 4 * s.arms);
            assert_eq!(s.max_steps, 50);
        }
    }

    #[test]
    fn reset_is_deterministic() {
        for kind in TaskKind::ALL {
            let s = spec(kind);
            assert_eq!(reset(&s, 42), reset(&s, 42));
            assert_ne!(reset(&s, 42).0, reset(&s, 43).0);
        }
    }

    #[test]
    fn task_names_parse() {
        for kind in TaskKind::ALL {
            assert_eq!(kind.name().parse::<TaskKind>().unwrap(), kind);
        }
        assert_eq!("BlockTransfer".parse::<TaskKind>().unwrap(), TaskKind::BlockTransfer);
        assert!("peg_transfer".parse::<TaskKind>().is_err());
    }

    #[test]
    fn zero_action_only_advances_the_clock() {
        for kind in TaskKind::ALL {
            let s = spec(kind);
            let (state, _) = reset(&s, 1);
            let out = step(&s, &state, &vec![0.0; s.action_dim]).unwrap();
            let mut expected = state.clone();
            expected.step_count = 1;
            assert_eq!(out.state, expected);
        }
    }

    #[test]
    fn unit_action_moves_one_step() {
        let s = spec(TaskKind::PointReach);
        let (state, _) = reset(&s, 0);
        assert_eq!(state.ee_pos[0], [0.0; 3]);
        let out = step(&s, &state, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(out.state.ee_pos[0], [0.05, 0.0, 0.0]);
        let out = step(&s, &state, &[7.0, -3.0, 0.0, 0.0]).unwrap();
        assert_eq!(out.state.ee_pos[0], [0.05, -0.05, 0.0]);
    }

    #[test]
    fn wrong_action_width_is_rejected() {
        let s = spec(TaskKind::BiHandover);
        let (state, _) = reset(&s, 0);
        assert!(matches!(step(&s, &state, &[0.0; 4]), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_policy_times_out() {
        let s = spec(TaskKind::PointReach);
        let traj = rollout(&ZeroActor, &s, 0, MAX_STEPS).unwrap();
        assert!(!traj.success);
        assert_eq!(traj.actions.len(), 50);
        assert_eq!(traj.observations.len(), 51);
    }

    #[test]
    fn expert_rollout_structure() {
        let s = spec(TaskKind::PointReach);
        let traj = rollout(&ScriptedExpert, &s, 0, MAX_STEPS).unwrap();
        assert!(traj.success);
        assert_eq!(traj.actions.len() + 1, traj.observations.len());
        assert!(traj.perturbed_mask.iter().all(|m| !m));
        assert_eq!(traj, rollout(&ScriptedExpert, &s, 0, MAX_STEPS).unwrap());
    }

    #[test]
    fn expert_is_idle_at_goal() {
        let s = spec(TaskKind::PointReach);
        let (mut state, _) = reset(&s, 5);
        state.ee_pos[0] = state.goal_pos;
        let a = scripted_expert(&s, &state);
        assert!(a[..3].iter().all(|v| v.abs() < 1e-9));
        let s = spec(TaskKind::BlockTransfer);
        let (mut state, _) = reset(&s, 5);
        state.obj_pos = state.goal_pos;
        let a = scripted_expert(&s, &state);
        assert!(a[..3].iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn block_transfer_grasp_and_release() {
        let s = spec(TaskKind::BlockTransfer);
        let (mut state, _) = reset(&s, 9);
        state.ee_pos[0] = state.obj_pos;
        // Closed gripper must open before it can grasp.
        let out = step(&s, &state, &[0.0, 0.0, 0.0, -1.0]).unwrap();
        assert_eq!(out.state.held_by, None);
        let out = step(&s, &out.state, &[0.0, 0.0, 0.0, 1.0]).unwrap();
        let out = step(&s, &out.state, &[0.0, 0.0, 0.0, -1.0]).unwrap();
        assert_eq!(out.state.held_by, Some(0));
        let out = step(&s, &out.state, &[1.0, 0.0, 0.0, -1.0]).unwrap();
        assert_eq!(out.state.obj_pos, out.state.ee_pos[0]);
        let out = step(&s, &out.state, &[0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(out.state.held_by, None);
        let before = out.state.obj_pos;
        let out = step(&s, &out.state, &[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(out.state.obj_pos, before);
    }

    #[test]
    fn experts_succeed_from_every_seed() {
        for kind in TaskKind::ALL {
            let s = spec(kind);
            let seeds: Vec<u64> = (0..1000).collect();
            let trajs = rollout_many(&ScriptedExpert, &s, &seeds, MAX_STEPS).unwrap();
            let failures: Vec<u64> = trajs.iter().filter(|t| !t.success).map(|t| t.seed).collect();
            assert!(failures.is_empty(), "{kind} failed on seeds {failures:?}");
            for t in &trajs {
                assert!(t.actions.iter().flatten().all(|a| a.abs() <= 1.0));
            }
        }
    }

    #[test]
    fn random_actions_rarely_succeed() {
        for kind in TaskKind::ALL {
            let s = spec(kind);
            let seeds: Vec<u64> = (0..1000).collect();
            let trajs = rollout_many(&RandomActor, &s, &seeds, MAX_STEPS).unwrap();
            let rate = trajs.iter().filter(|t| t.success).count() as f64 / 1000.0;
            assert!(rate < 0.01, "{kind}: random success rate {rate}");
        }
    }

    #[test]
    fn batched_rollouts_match_single_rollouts() {
        let s = spec(TaskKind::BlockTransfer);
        let seeds = [3, 1, 4, 1, 5];
        let batch = rollout_many(&RandomActor, &s, &seeds, MAX_STEPS).unwrap();
        for (t, &seed) in batch.iter().zip(&seeds) {
            assert_eq!(t, &rollout(&RandomActor, &s, seed, MAX_STEPS).unwrap());
        }
    }

    #[test]
    fn replaying_expert_actions_reproduces_the_episode() {
        for kind in TaskKind::ALL {
            let s = spec(kind);
            let clean = rollout(&ScriptedExpert, &s, 17, MAX_STEPS).unwrap();
            assert_eq!(replay_with_offsets(&s, 17, &vec![None; clean.len()]).unwrap(), clean);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn workspace_and_attachment_invariants(
            kind_idx in 0usize..3,
            seed in 0u64..1000,
            actions in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 8), 1..60),
        ) {
            let s = spec(TaskKind::ALL[kind_idx]);
            let (mut state, _) = reset(&s, seed);
            for a in &actions {
                let out = step(&s, &state, &a[..s.action_dim]).unwrap();
                state = out.state;
                for p in state.ee_pos.iter().chain([&state.obj_pos, &state.goal_pos]) {
                    prop_assert!(p.iter().all(|v| (-1.0..=1.0).contains(v)));
                }
                if let Some(arm) = state.held_by {
                    prop_assert_eq!(state.obj_pos, state.ee_pos[arm]);
                }
            }
        }
    }
}
