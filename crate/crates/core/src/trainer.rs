//! Two-stage training: plain denoising on clean demonstrations, then
//! continued training on the clean + perturbed mixture where each sample's
//! squared action error under the current policy decides whether it is used.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{Batch, MixedDataset};
use crate::diffusion::{denoise_loss_batch, NoiseDraw, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{adamw_step, AdamWConfig, AdamWState};
use crate::policy::{DiffusionPolicy, PolicyParams};
use crate::rng::{self, tag, DspRng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdMode {
    /// Batch mean of the errors.
    Mean,
    /// Batch mean minus the Bessel-corrected standard deviation.
    MeanMinusStd,
    /// A constant cutoff; `Fixed(f64::INFINITY)` keeps everything.
    Fixed(f64),
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdMode::Mean => f.write_str("mean"),
            ThresholdMode::MeanMinusStd => f.write_str("mean_minus_std"),
            ThresholdMode::Fixed(v) => write!(f, "fixed:{v}"),
        }
    }
}

impl FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(ThresholdMode::Mean),
            "mean_minus_std" | "strict" => Ok(ThresholdMode::MeanMinusStd),
            _ => s
                .strip_prefix("fixed:")
                .and_then(|v| v.parse::<f64>().ok())
                .filter(|v| !v.is_nan())
                .map(ThresholdMode::Fixed)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "unknown threshold mode {s:?}; expected mean, mean_minus_std or fixed:<value>"
                    ))
                }),
        }
    }
}

impl Serialize for ThresholdMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ThresholdMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Mode {
    /// Filter every batch with the policy being trained.
    Online,
    /// Filter the whole mixture once with the stage-1 policy.
    Offline,
    /// Train on the mixture without filtering.
    Naive,
    /// Stop after stage 1.
    None,
}

impl Stage2Mode {
    pub const ALL: [Stage2Mode; 4] = [
        Stage2Mode::None,
        Stage2Mode::Naive,
        Stage2Mode::Offline,
        Stage2Mode::Online,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage2Mode::Online => "online",
            Stage2Mode::Offline => "offline",
            Stage2Mode::Naive => "naive",
            Stage2Mode::None => "none",
        }
    }
}

impl fmt::Display for Stage2Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage2Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage2Mode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown stage-2 mode {s:?}; expected online, offline, naive or none"
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub threshold_mode: ThresholdMode,
    pub stage2_mode: Stage2Mode,
    pub seed: u64,
    pub eval_every: usize,
    /// Sampled actions averaged into each filtering error.
    pub filter_samples: usize,
}

impl TrainConfig {
    /// 20 000 steps split evenly, batch 128.
    pub fn desk() -> Self {
        Self {
            stage1_steps: 10_000,
            stage2_steps: 10_000,
            batch_size: 128,
            optimizer: AdamWConfig::default(),
            threshold_mode: ThresholdMode::Mean,
            stage2_mode: Stage2Mode::Online,
            seed: 0,
            eval_every: 500,
            filter_samples: 1,
        }
    }

    /// 100 000 steps split evenly, batch 256.
    pub fn full() -> Self {
        Self {
            stage1_steps: 50_000,
            stage2_steps: 50_000,
            batch_size: 256,
            eval_every: 1000,
            ..Self::desk()
        }
    }

    pub fn total_steps(&self) -> usize {
        self.stage1_steps + self.stage2_steps
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if self.filter_samples == 0 {
            return Err(Error::Config("filter_samples must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", o.lr)));
        }
        if !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
            || o.eps.is_nan()
            || o.eps <= 0.0
            || o.weight_decay.is_nan()
            || o.weight_decay < 0.0
        {
            return Err(Error::Config("invalid AdamW hyperparameters".into()));
        }
        Ok(())
    }
}

pub fn compute_threshold(deltas: &[f64], mode: ThresholdMode) -> Result<f64> {
    let m = deltas.len();
    match mode {
        ThresholdMode::Fixed(v) => Ok(v),
        ThresholdMode::Mean => {
            if m == 0 {
                return Err(Error::State("the mean threshold needs at least one error".into()));
            }
            Ok(deltas.iter().sum::<f64>() / m as f64)
        }
        ThresholdMode::MeanMinusStd => {
            if m < 2 {
                return Err(Error::State(format!(
                    "the mean-minus-std threshold needs at least two errors, got {m}"
                )));
            }
            let mean = deltas.iter().sum::<f64>() / m as f64;
            let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
            Ok(mean - var.sqrt())
        }
    }
}

/// Outcome of filtering one batch. A rejected sample counts as a positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub deltas: Vec<f64>,
    pub gamma: f64,
    pub keep_mask: Vec<bool>,
    pub truth_mask: Vec<bool>,
    pub recall: f64,
    pub accuracy: f64,
}

impl FilterReport {
    pub fn from_deltas(deltas: Vec<f64>, truth_mask: Vec<bool>, mode: ThresholdMode) -> Result<Self> {
        if deltas.len() != truth_mask.len() {
            return Err(Error::Shape(format!(
                "{} errors but {} ground-truth labels",
                deltas.len(),
                truth_mask.len()
            )));
        }
        if deltas.is_empty() {
            return Err(Error::State("cannot filter an empty batch".into()));
        }
        let gamma = compute_threshold(&deltas, mode)?;
        let keep_mask: Vec<bool> = deltas.iter().map(|d| *d <= gamma).collect();
        let (recall, accuracy) = classification_scores(&keep_mask, &truth_mask);
        Ok(Self {
            deltas,
            gamma,
            keep_mask,
            truth_mask,
            recall,
            accuracy,
        })
    }

    pub fn kept(&self) -> usize {
        self.keep_mask.iter().filter(|k| **k).count()
    }

    pub fn kept_fraction(&self) -> f64 {
        self.kept() as f64 / self.keep_mask.len() as f64
    }
}

/// Recall over truly perturbed samples (1 when there are none) and accuracy
/// over all samples, with "rejected" as the positive class.
pub fn classification_scores(keep_mask: &[bool], truth_mask: &[bool]) -> (f64, f64) {
    let (mut tp, mut fn_, mut correct) = (0usize, 0usize, 0usize);
    for (&keep, &perturbed) in keep_mask.iter().zip(truth_mask) {
        let rejected = !keep;
        match (rejected, perturbed) {
            (true, true) => tp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
        if rejected == perturbed {
            correct += 1;
        }
    }
    let recall = if tp + fn_ == 0 {
        1.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    (recall, correct as f64 / keep_mask.len().max(1) as f64)
}

/// Squared distance between one sampled action and each recorded action,
/// averaged over `samples` draws. Row `m` draws from `rngs[m]`.
pub fn prediction_errors(
    policy: &DiffusionPolicy,
    observations: &Array2<f64>,
    actions: &Array2<f64>,
    rngs: &mut [DspRng],
    samples: usize,
) -> Result<Vec<f64>> {
    if actions.nrows() != observations.nrows() || actions.ncols() != policy.params.act_dim() {
        return Err(Error::Shape(format!(
            "{} observations and {}×{} actions for a policy with action width {}",
            observations.nrows(),
            actions.nrows(),
            actions.ncols(),
            policy.params.act_dim()
        )));
    }
    let mut deltas = vec![0.0; actions.nrows()];
    for _ in 0..samples {
        let sampled = policy.sample_batch(observations, rngs)?;
        for (m, d) in deltas.iter_mut().enumerate() {
            *d += sampled
                .row(m)
                .iter()
                .zip(actions.row(m))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>();
        }
    }
    Ok(deltas.into_iter().map(|d| d / samples as f64).collect())
}

/// Error of a single transition under its own stream.
pub fn predict_filter_error(policy: &DiffusionPolicy, obs: &[f64], action: &[f64], rng: &mut DspRng) -> Result<f64> {
    if action.len() != policy.params.act_dim() {
        return Err(Error::Shape(format!(
            "action has {} coordinates, policy produces {}",
            action.len(),
            policy.params.act_dim()
        )));
    }
    let sampled = policy.sample(obs, rng)?;
    Ok(sampled.iter().zip(action).map(|(a, b)| (a - b).powi(2)).sum())
}

/// Streams for filtering the batch of stage-2 step `step`, one per sample.
pub fn filter_streams(seed: u64, step: u64, batch: usize) -> Vec<DspRng> {
    let step_seed = rng::derive_seed(seed, tag::FILTER, step);
    (0..batch as u64)
        .map(|m| rng::stream(step_seed, tag::FILTER, m))
        .collect()
}

pub fn filter_batch(
    policy: &DiffusionPolicy,
    batch: &Batch,
    mode: ThresholdMode,
    rngs: &mut [DspRng],
    samples: usize,
) -> Result<FilterReport> {
    let deltas = prediction_errors(policy, &batch.observations, &batch.actions, rngs, samples)?;
    FilterReport::from_deltas(deltas, batch.is_perturbed.clone(), mode)
}

/// Filters every row of a dataset at once, in chunks, with row `i` drawing
/// from the stream `(seed, i)`.
pub fn filter_dataset(
    policy: &DiffusionPolicy,
    data: &MixedDataset,
    mode: ThresholdMode,
    seed: u64,
    samples: usize,
) -> Result<FilterReport> {
    const CHUNK: usize = 512;
    let mut deltas = Vec::with_capacity(data.len());
    for start in (0..data.len()).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(data.len())).collect();
        let chunk = data.gather(&idx);
        let mut rngs: Vec<DspRng> = idx
            .iter()
            .map(|&i| rng::stream(seed, tag::OFFLINE_FILTER, i as u64))
            .collect();
        deltas.extend(prediction_errors(
            policy,
            &chunk.observations,
            &chunk.actions,
            &mut rngs,
            samples,
        )?);
    }
    FilterReport::from_deltas(deltas, data.is_perturbed.clone(), mode)
}

/// Per-batch filtering summary kept for the whole of stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterRecord {
    pub step: usize,
    pub gamma: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub kept_fraction: f64,
    pub perturbed_in_batch: usize,
}

/// One line of the metrics log: window means over `eval_every` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: u8,
    pub step: usize,
    pub loss: Option<f64>,
    pub gamma: Option<f64>,
    pub recall: Option<f64>,
    pub accuracy: Option<f64>,
    pub kept_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub params: PolicyParams,
    pub metrics: Vec<MetricRecord>,
    pub history: Vec<FilterRecord>,
    /// Steps whose batch was entirely rejected and therefore skipped.
    pub skipped_steps: usize,
    pub warnings: Vec<String>,
}

impl StageOutput {
    pub fn final_loss(&self) -> Option<f64> {
        self.metrics.iter().rev().find_map(|m| m.loss)
    }
}

#[derive(Default)]
struct Window {
    loss: Vec<f64>,
    gamma: Vec<f64>,
    recall: Vec<f64>,
    accuracy: Vec<f64>,
    kept: Vec<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl Window {
    fn flush(&mut self, stage: u8, step: usize) -> MetricRecord {
        let rec = MetricRecord {
            stage,
            step,
            loss: mean(&self.loss),
            gamma: mean(&self.gamma),
            recall: mean(&self.recall),
            accuracy: mean(&self.accuracy),
            kept_fraction: mean(&self.kept),
        };
        *self = Window::default();
        rec
    }
}

fn check_dims(params: &PolicyParams, data: &MixedDataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::State("training dataset is empty".into()));
    }
    if data.obs_dim() != params.obs_dim() || data.act_dim() != params.act_dim() {
        return Err(Error::Shape(format!(
            "dataset has observation/action widths {}/{}, policy expects {}/{}",
            data.obs_dim(),
            data.act_dim(),
            params.obs_dim(),
            params.act_dim()
        )));
    }
    Ok(())
}

fn draws_for(schedule: &NoiseSchedule, act_dim: usize, n: usize, rng: &mut DspRng) -> Vec<NoiseDraw> {
    (0..n).map(|_| NoiseDraw::sample(schedule, act_dim, rng)).collect()
}

fn gradient_step(
    params: &mut PolicyParams,
    state: &mut AdamWState<PolicyParams>,
    schedule: &NoiseSchedule,
    obs: &Array2<f64>,
    actions: &Array2<f64>,
    draws: &[NoiseDraw],
    step: usize,
) -> Result<f64> {
    let (loss, grads) = denoise_loss_batch(params, schedule, obs, actions, draws).map_err(|e| match e {
        Error::Numeric(msg) => Error::Numeric(format!("step {step}: {msg}")),
        other => other,
    })?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss at step {step}")));
    }
    adamw_step(params, &grads, state).map_err(|e| match e {
        Error::Numeric(msg) => Error::Numeric(format!("step {step}: {msg}")),
        other => other,
    })?;
    Ok(loss)
}

/// Denoising on clean data only. Step `s` draws its batch and noise from
/// streams keyed by `(seed, s)`.
pub fn train_stage1(
    params: PolicyParams,
    schedule: &NoiseSchedule,
    clean: &MixedDataset,
    config: &TrainConfig,
) -> Result<StageOutput> {
    config.validate()?;
    if clean.is_perturbed.iter().any(|p| *p) {
        return Err(Error::Validation("stage 1 expects clean data only".into()));
    }
    if config.stage1_steps > 0 {
        check_dims(&params, clean)?;
    }
    let mut params = params;
    let mut state = AdamWState::new(&params, config.optimizer);
    let mut metrics = Vec::new();
    let mut window = Window::default();
    for step in 0..config.stage1_steps {
        let batch = clean.sample_batch(
            config.batch_size,
            &mut rng::stream(config.seed, tag::STAGE1_BATCH, step as u64),
        )?;
        let mut noise_rng = rng::stream(config.seed, tag::STAGE1_NOISE, step as u64);
        let draws = draws_for(schedule, params.act_dim(), config.batch_size, &mut noise_rng);
        let loss = gradient_step(
            &mut params,
            &mut state,
            schedule,
            &batch.observations,
            &batch.actions,
            &draws,
            step,
        )?;
        window.loss.push(loss);
        if (step + 1) % config.eval_every == 0 || step + 1 == config.stage1_steps {
            metrics.push(window.flush(1, step + 1));
        }
    }
    Ok(StageOutput {
        params,
        metrics,
        history: Vec::new(),
        skipped_steps: 0,
        warnings: Vec::new(),
    })
}

/// Continued training on the mixture. The optimizer state starts fresh.
/// Step numbers in the log continue from `config.stage1_steps`.
pub fn train_stage2(
    stage1: PolicyParams,
    schedule: &NoiseSchedule,
    mixed: &MixedDataset,
    config: &TrainConfig,
) -> Result<StageOutput> {
    config.validate()?;
    let mut params = stage1;
    let mut out = StageOutput {
        params: params.clone(),
        metrics: Vec::new(),
        history: Vec::new(),
        skipped_steps: 0,
        warnings: Vec::new(),
    };
    if config.stage2_mode == Stage2Mode::None || config.stage2_steps == 0 {
        return Ok(out);
    }
    check_dims(&params, mixed)?;

    let offline_pool;
    let pool = match config.stage2_mode {
        Stage2Mode::Offline => {
            let policy = DiffusionPolicy::new(params.clone(), schedule.clone())?;
            let report = filter_dataset(
                &policy,
                mixed,
                config.threshold_mode,
                config.seed,
                config.filter_samples,
            )?;
            out.history.push(FilterRecord {
                step: config.stage1_steps,
                gamma: report.gamma,
                recall: report.recall,
                accuracy: report.accuracy,
                kept_fraction: report.kept_fraction(),
                perturbed_in_batch: report.truth_mask.iter().filter(|p| **p).count(),
            });
            if report.kept() == 0 {
                return Err(Error::State("offline filtering rejected every transition".into()));
            }
            offline_pool = mixed.subset(&report.keep_mask);
            &offline_pool
        }
        _ => mixed,
    };

    let mut state = AdamWState::new(&params, config.optimizer);
    let mut window = Window::default();
    for k in 0..config.stage2_steps {
        let step = config.stage1_steps + k;
        let batch = pool.sample_batch(
            config.batch_size,
            &mut rng::stream(config.seed, tag::STAGE2_BATCH, k as u64),
        )?;
        let mut noise_rng = rng::stream(config.seed, tag::STAGE2_NOISE, k as u64);
        let draws = draws_for(schedule, params.act_dim(), config.batch_size, &mut noise_rng);

        let keep = if config.stage2_mode == Stage2Mode::Online {
            let policy = DiffusionPolicy::new(params.clone(), schedule.clone())?;
            let mut rngs = filter_streams(config.seed, k as u64, config.batch_size);
            let report = filter_batch(&policy, &batch, config.threshold_mode, &mut rngs, config.filter_samples)?;
            let rec = FilterRecord {
                step: step + 1,
                gamma: report.gamma,
                recall: report.recall,
                accuracy: report.accuracy,
                kept_fraction: report.kept_fraction(),
                perturbed_in_batch: report.truth_mask.iter().filter(|p| **p).count(),
            };
            out.history.push(rec);
            window.gamma.push(rec.gamma);
            window.recall.push(rec.recall);
            window.accuracy.push(rec.accuracy);
            window.kept.push(rec.kept_fraction);
            Some(report.keep_mask)
        } else {
            None
        };

        match keep {
            Some(mask) if !mask.iter().all(|k| *k) => {
                let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
                if idx.is_empty() {
                    out.skipped_steps += 1;
                } else {
                    let obs = batch.observations.select(ndarray::Axis(0), &idx);
                    let act = batch.actions.select(ndarray::Axis(0), &idx);
                    let kept_draws: Vec<NoiseDraw> = idx.iter().map(|&i| draws[i].clone()).collect();
                    window.loss.push(gradient_step(
                        &mut params,
                        &mut state,
                        schedule,
                        &obs,
                        &act,
                        &kept_draws,
                        step,
                    )?);
                }
            }
            _ => {
                window.loss.push(gradient_step(
                    &mut params,
                    &mut state,
                    schedule,
                    &batch.observations,
                    &batch.actions,
                    &draws,
                    step,
                )?);
            }
        }
        if (k + 1) % config.eval_every == 0 || k + 1 == config.stage2_steps {
            out.metrics.push(window.flush(2, step + 1));
        }
    }
    if out.skipped_steps * 2 > config.stage2_steps {
        out.warnings.push(format!(
            "{} of {} stage-2 batches were rejected entirely",
            out.skipped_steps, config.stage2_steps
        ));
    }
    out.params = params;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_demos, mix, Source};
    use crate::envs::{TaskKind, TaskSpec};
    use crate::policy::PolicyConfig;
    use proptest::prelude::*;

    #[test]
    fn threshold_worked_examples() {
        let d = [0.1, 0.2, 0.9];
        assert!((compute_threshold(&d, ThresholdMode::Mean).unwrap() - 0.4).abs() < 1e-15);
        let strict = compute_threshold(&d, ThresholdMode::MeanMinusStd).unwrap();
        assert!((strict - (0.4 - 0.19f64.sqrt())).abs() < 1e-15);
        assert!((strict + 0.03589).abs() < 1e-5);
        assert_eq!(compute_threshold(&[0.3; 3], ThresholdMode::Mean).unwrap(), 0.3);
        assert!(matches!(
            compute_threshold(&[], ThresholdMode::Mean),
            Err(Error::State(_))
        ));
        assert!(matches!(
            compute_threshold(&[1.0], ThresholdMode::MeanMinusStd),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn filter_report_examples() {
        let r = FilterReport::from_deltas(vec![0.1, 0.2, 0.9], vec![false, false, true], ThresholdMode::Mean).unwrap();
        assert_eq!(r.keep_mask, vec![true, true, false]);
        assert_eq!((r.recall, r.accuracy), (1.0, 1.0));
        let r = FilterReport::from_deltas(vec![0.5; 3], vec![false, false, true], ThresholdMode::Mean).unwrap();
        assert_eq!(r.keep_mask, vec![true; 3]);
        assert_eq!(r.recall, 0.0);
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-15);
        let r = FilterReport::from_deltas(vec![0.0; 4], vec![false; 4], ThresholdMode::Mean).unwrap();
        assert_eq!((r.recall, r.accuracy, r.kept()), (1.0, 1.0, 4));
        let r = FilterReport::from_deltas(vec![0.1, 0.2, 0.9], vec![false; 3], ThresholdMode::MeanMinusStd).unwrap();
        assert_eq!(r.kept(), 0);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Stage2Mode::ALL {
            assert_eq!(m.name().parse::<Stage2Mode>().unwrap(), m);
        }
        for t in [
            ThresholdMode::Mean,
            ThresholdMode::MeanMinusStd,
            ThresholdMode::Fixed(f64::INFINITY),
            ThresholdMode::Fixed(0.5),
        ] {
            assert_eq!(t.to_string().parse::<ThresholdMode>().unwrap(), t);
        }
        assert!("median".parse::<ThresholdMode>().is_err());
        assert!("fixed:nan".parse::<ThresholdMode>().is_err());
    }

    #[test]
    fn presets() {
        let d = TrainConfig::desk();
        assert_eq!((d.total_steps(), d.batch_size, d.optimizer.lr), (20_000, 128, 2e-4));
        let p = TrainConfig::full();
        assert_eq!((p.total_steps(), p.batch_size, p.optimizer.lr), (100_000, 256, 2e-4));
    }

    proptest! {
        #[test]
        fn threshold_rule_holds(deltas in proptest::collection::vec(0.0f64..2.0, 2..64), strict in any::<bool>()) {
            let mode = if strict { ThresholdMode::MeanMinusStd } else { ThresholdMode::Mean };
            let truth: Vec<bool> = deltas.iter().map(|d| *d > 1.0).collect();
            let r = FilterReport::from_deltas(deltas.clone(), truth, mode).unwrap();
            for (d, k) in deltas.iter().zip(&r.keep_mask) {
                prop_assert_eq!(*k, *d <= r.gamma);
            }
            prop_assert!((0.0..=1.0).contains(&r.recall));
            prop_assert!((0.0..=1.0).contains(&r.accuracy));
        }
    }

    fn tiny_setup(n_demos: usize) -> (PolicyParams, NoiseSchedule, MixedDataset) {
        let spec = TaskSpec::new(TaskKind::PointReach);
        let mut cfg = PolicyConfig::new(spec.obs_dim(), spec.action_dim);
        cfg.hidden_dim = 16;
        cfg.embed_dim = 8;
        let params = PolicyParams::build(&cfg).unwrap();
        let demos = generate_demos(TaskKind::PointReach, n_demos, 0).unwrap();
        let mixed = mix(&demos, &[]).unwrap();
        (params, NoiseSchedule::vp_linear(5, 0.1, 0.9).unwrap(), mixed)
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            stage1_steps: 20,
            stage2_steps: 20,
            batch_size: 16,
            eval_every: 5,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn zero_steps_keep_initial_params() {
        let (params, schedule, data) = tiny_setup(2);
        let cfg = TrainConfig {
            stage1_steps: 0,
            ..quick_config()
        };
        assert_eq!(
            train_stage1(params.clone(), &schedule, &data, &cfg).unwrap().params,
            params
        );
        let cfg = TrainConfig {
            stage2_mode: Stage2Mode::None,
            ..quick_config()
        };
        assert_eq!(
            train_stage2(params.clone(), &schedule, &data, &cfg).unwrap().params,
            params
        );
    }

    #[test]
    fn stage1_is_deterministic_and_logs() {
        let (params, schedule, data) = tiny_setup(2);
        let cfg = quick_config();
        let a = train_stage1(params.clone(), &schedule, &data, &cfg).unwrap();
        let b = train_stage1(params.clone(), &schedule, &data, &cfg).unwrap();
        assert_eq!(a.params.to_bytes(), b.params.to_bytes());
        assert_ne!(a.params, params);
        let steps: Vec<usize> = a.metrics.iter().map(|m| m.step).collect();
        assert_eq!(steps, vec![5, 10, 15, 20]);
    }

    #[test]
    fn stage1_rejects_perturbed_rows() {
        let (params, schedule, mut data) = tiny_setup(1);
        data.is_perturbed[0] = true;
        assert!(matches!(
            train_stage1(params, &schedule, &data, &quick_config()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn online_with_infinite_threshold_matches_naive() {
        let (params, schedule, data) = tiny_setup(3);
        let naive = TrainConfig {
            stage2_mode: Stage2Mode::Naive,
            ..quick_config()
        };
        let online = TrainConfig {
            stage2_mode: Stage2Mode::Online,
            threshold_mode: ThresholdMode::Fixed(f64::INFINITY),
            ..quick_config()
        };
        let a = train_stage2(params.clone(), &schedule, &data, &naive).unwrap();
        let b = train_stage2(params, &schedule, &data, &online).unwrap();
        assert_eq!(a.params.to_bytes(), b.params.to_bytes());
        assert_eq!(b.history.len(), 20);
        assert!(b.history.iter().all(|r| r.kept_fraction == 1.0));
    }

    #[test]
    fn online_history_matches_a_recomputation() {
        let (params, schedule, data) = tiny_setup(3);
        let mut data = data;
        for (i, p) in data.is_perturbed.iter_mut().enumerate() {
            *p = i % 3 == 0;
        }
        data.sources = data
            .is_perturbed
            .iter()
            .map(|p| if *p { Source::Perturbed } else { Source::Clean })
            .collect();
        let cfg = TrainConfig {
            stage2_steps: 1,
            ..quick_config()
        };
        let out = train_stage2(params.clone(), &schedule, &data, &cfg).unwrap();
        let policy = DiffusionPolicy::new(params, schedule).unwrap();
        let batch = data
            .sample_batch(cfg.batch_size, &mut rng::stream(cfg.seed, tag::STAGE2_BATCH, 0))
            .unwrap();
        let mut rngs = filter_streams(cfg.seed, 0, cfg.batch_size);
        let deltas: Vec<f64> = (0..cfg.batch_size)
            .map(|m| {
                let obs: Vec<f64> = batch.observations.row(m).to_vec();
                let act: Vec<f64> = batch.actions.row(m).to_vec();
                predict_filter_error(&policy, &obs, &act, &mut rngs[m]).unwrap()
            })
            .collect();
        let gamma = deltas.iter().sum::<f64>() / deltas.len() as f64;
        let rec = out.history[0];
        assert!((rec.gamma - gamma).abs() < 1e-12);
        let kept = deltas.iter().filter(|d| **d <= gamma).count() as f64 / deltas.len() as f64;
        assert_eq!(rec.kept_fraction, kept);
    }

    #[test]
    fn offline_filters_once() {
        let (params, schedule, data) = tiny_setup(3);
        let cfg = TrainConfig {
            stage2_mode: Stage2Mode::Offline,
            ..quick_config()
        };
        let out = train_stage2(params, &schedule, &data, &cfg).unwrap();
        assert_eq!(out.history.len(), 1);
        assert!(out.history[0].kept_fraction > 0.0 && out.history[0].kept_fraction < 1.0);
    }

    #[test]
    fn strict_threshold_can_skip_batches() {
        let (params, schedule, data) = tiny_setup(2);
        let cfg = TrainConfig {
            threshold_mode: ThresholdMode::Fixed(-1.0),
            ..quick_config()
        };
        let out = train_stage2(params.clone(), &schedule, &data, &cfg).unwrap();
        assert_eq!(out.skipped_steps, 20);
        assert_eq!(out.params, params);
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn zero_error_for_a_matching_sample() {
        let (params, schedule, _) = tiny_setup(1);
        let policy = DiffusionPolicy::new(params, schedule).unwrap();
        let obs = vec![0.1; 13];
        let sampled = policy.sample(&obs, &mut rng::stream(1, 2, 3)).unwrap();
        let d = predict_filter_error(&policy, &obs, &sampled, &mut rng::stream(1, 2, 3)).unwrap();
        assert_eq!(d, 0.0);
        let shifted: Vec<f64> = sampled.iter().zip([0.3, -0.4, 0.0, 0.0]).map(|(a, o)| a + o).collect();
        let d = predict_filter_error(&policy, &obs, &shifted, &mut rng::stream(1, 2, 3)).unwrap();
        assert!((d - 0.25).abs() < 1e-12);
    }
}
