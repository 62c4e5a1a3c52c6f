//! Discrete variance-preserving diffusion over action vectors.
//!
//! The forward process noises a clean action `a0` in closed form,
//! `a_t = sqrt(ᾱ_t)·a0 + sqrt(1 − ᾱ_t)·ε`, a denoiser is trained to recover
//! `ε`, and actions are sampled by running the reverse chain
//! `a_{t−1} = (a_t − β_t/sqrt(1 − ᾱ_t)·ε̂) / sqrt(α_t) + sqrt(β̃_t)·z` from
//! `t = T` down to `1`, where `β̃_t = β_t·(1 − ᾱ_{t−1})/(1 − ᾱ_t)` vanishes at
//! `t = 1`.
//!
//! Diffusion steps are 1-based throughout.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensors;

/// Largest terminal `ᾱ_T` accepted; above it the chain does not start from
/// something close to a standard normal.
pub const MAX_TERMINAL_ALPHA_BAR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Constants of one reverse step: `a_{t−1} = scale·(a_t − noise_scale·ε̂) + N(0, variance)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReverseCoefficients {
    pub scale: f64,
    pub noise_scale: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            beta_start: 0.1,
            beta_end: 0.9,
        }
    }
}

impl NoiseSchedule {
    /// Linear β from `beta_start` to `beta_end` inclusive over `steps` steps.
    pub fn vp_linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("a schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|k| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * k as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let terminal = alpha_bars[steps - 1];
        if terminal >= MAX_TERMINAL_ALPHA_BAR {
            return Err(Error::Config(format!(
                "terminal alpha_bar {terminal} must be below {MAX_TERMINAL_ALPHA_BAR}"
            )));
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn from_config(config: &ScheduleConfig) -> Result<Self> {
        Self::vp_linear(config.steps, config.beta_start, config.beta_end)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Index {
                step: t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// `ᾱ_{t−1}` with `ᾱ_0 = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 1 {
            1.0
        } else {
            self.alpha_bars[t - 2]
        }
    }

    pub fn reverse_coefficients(&self, t: usize) -> Result<ReverseCoefficients> {
        self.check_step(t)?;
        let beta = self.beta(t);
        let alpha_bar = self.alpha_bar(t);
        Ok(ReverseCoefficients {
            scale: 1.0 / self.alpha(t).sqrt(),
            noise_scale: beta / (1.0 - alpha_bar).sqrt(),
            variance: beta * (1.0 - self.alpha_bar_prev(t)) / (1.0 - alpha_bar),
        })
    }
}

/// A network predicting the noise in `a_t` given the diffusion step and the
/// observation. Rows of `noisy` and `obs` are paired; `steps[i]` is the step
/// of row `i`.
pub trait Denoiser {
    fn action_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn predict_noise_batch(&self, noisy: &Array2<f64>, steps: &[usize], obs: &Array2<f64>) -> Result<Array2<f64>>;

    /// Observation features shared by every reverse step of one chain.
    fn condition(&self, obs: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(obs.clone())
    }

    /// [`Denoiser::predict_noise_batch`] on features from
    /// [`Denoiser::condition`].
    fn predict_noise_conditioned(
        &self,
        noisy: &Array2<f64>,
        steps: &[usize],
        cond: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        self.predict_noise_batch(noisy, steps, cond)
    }
}

pub trait TrainableDenoiser: Denoiser {
    type Grads: Tensors;
    type Cache;

    fn forward_train(
        &self,
        noisy: &Array2<f64>,
        steps: &[usize],
        obs: &Array2<f64>,
    ) -> Result<(Array2<f64>, Self::Cache)>;

    /// Parameter gradients of `sum(prediction ⊙ upstream)`.
    fn backward(&self, cache: &Self::Cache, upstream: &Array2<f64>) -> Result<Self::Grads>;
}

/// One training draw: a diffusion step and the noise added at it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub step: usize,
    pub noise: Vec<f64>,
}

impl NoiseDraw {
    /// `t` uniform over `1..=T`, then one standard normal per action dimension.
    pub fn sample<R: Rng + ?Sized>(schedule: &NoiseSchedule, action_dim: usize, rng: &mut R) -> Self {
        let step = rng.random_range(1..=schedule.steps());
        let noise = (0..action_dim).map(|_| rng.sample(StandardNormal)).collect();
        Self { step, noise }
    }
}

/// A clean action, its draw, and the resulting noised action.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSample {
    pub a0: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
    pub a_t: Vec<f64>,
}

impl DiffusionSample {
    pub fn draw<R: Rng + ?Sized>(a0: &[f64], schedule: &NoiseSchedule, rng: &mut R) -> Self {
        let NoiseDraw { step, noise } = NoiseDraw::sample(schedule, a0.len(), rng);
        let a_t = forward_noise(a0, step, &noise, schedule).expect("sampled step is in range");
        Self {
            a0: a0.to_vec(),
            t: step,
            eps: noise,
            a_t,
        }
    }
}

pub fn forward_noise(a0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    if a0.len() != eps.len() {
        return Err(Error::Shape(format!(
            "action has {} coordinates but noise has {}",
            a0.len(),
            eps.len()
        )));
    }
    let signal = schedule.alpha_bar(t).sqrt();
    let spread = (1.0 - schedule.alpha_bar(t)).sqrt();
    Ok(a0.iter().zip(eps).map(|(a, e)| signal * a + spread * e).collect())
}

fn row_matrix(rows: &[&[f64]], width: usize) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((rows.len(), width));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != width {
            return Err(Error::Shape(format!(
                "row {i} has {} entries, expected {width}",
                r.len()
            )));
        }
        m.row_mut(i).assign(&ndarray::ArrayView1::from(*r));
    }
    Ok(m)
}

/// Mean squared noise-prediction error over the batch and the action
/// dimensions, with exact parameter gradients.
pub fn denoise_loss_batch<M: TrainableDenoiser>(
    model: &M,
    schedule: &NoiseSchedule,
    obs: &Array2<f64>,
    actions: &Array2<f64>,
    draws: &[NoiseDraw],
) -> Result<(f64, M::Grads)> {
    let (batch, act_dim) = actions.dim();
    if batch == 0 {
        return Err(Error::State("cannot compute a loss on an empty batch".into()));
    }
    if obs.nrows() != batch || draws.len() != batch {
        return Err(Error::Shape(format!(
            "batch of {batch} actions paired with {} observations and {} noise draws",
            obs.nrows(),
            draws.len()
        )));
    }
    let mut noisy = Array2::zeros((batch, act_dim));
    let mut eps = Array2::zeros((batch, act_dim));
    let mut steps = Vec::with_capacity(batch);
    for (i, draw) in draws.iter().enumerate() {
        schedule.check_step(draw.step)?;
        if draw.noise.len() != act_dim {
            return Err(Error::Shape(format!(
                "noise draw {i} has {} entries, expected {act_dim}",
                draw.noise.len()
            )));
        }
        let signal = schedule.alpha_bar(draw.step).sqrt();
        let spread = (1.0 - schedule.alpha_bar(draw.step)).sqrt();
        for j in 0..act_dim {
            eps[[i, j]] = draw.noise[j];
            noisy[[i, j]] = signal * actions[[i, j]] + spread * draw.noise[j];
        }
        steps.push(draw.step);
    }
    let (pred, cache) = model.forward_train(&noisy, &steps, obs)?;
    let diff = pred - &eps;
    for (i, row) in diff.axis_iter(Axis(0)).enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite loss at batch index {i}")));
        }
    }
    let scale = 1.0 / (batch * act_dim) as f64;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() * scale;
    let upstream = diff * (2.0 * scale);
    let grads = model.backward(&cache, &upstream)?;
    Ok((loss, grads))
}

/// Single-transition loss: draws `t` and `ε` from `rng`.
pub fn denoise_loss<M: TrainableDenoiser, R: Rng + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    obs: &[f64],
    a0: &[f64],
    rng: &mut R,
) -> Result<(f64, M::Grads)> {
    let draw = NoiseDraw::sample(schedule, a0.len(), rng);
    let obs = row_matrix(&[obs], obs.len())?;
    let actions = row_matrix(&[a0], a0.len())?;
    denoise_loss_batch(model, schedule, &obs, &actions, &[draw])
}

/// One reverse step for a batch; row `i` takes its noise from `rngs[i]`.
/// No randomness is consumed at `t = 1`.
pub fn reverse_step_batch<M: Denoiser + ?Sized, R: Rng>(
    model: &M,
    noisy: &Array2<f64>,
    t: usize,
    obs: &Array2<f64>,
    schedule: &NoiseSchedule,
    rngs: &mut [R],
) -> Result<Array2<f64>> {
    let cond = model.condition(obs)?;
    reverse_step_conditioned(model, noisy, t, &cond, schedule, rngs)
}

fn reverse_step_conditioned<M: Denoiser + ?Sized, R: Rng>(
    model: &M,
    noisy: &Array2<f64>,
    t: usize,
    cond: &Array2<f64>,
    schedule: &NoiseSchedule,
    rngs: &mut [R],
) -> Result<Array2<f64>> {
    let coeff = schedule.reverse_coefficients(t)?;
    if rngs.len() != noisy.nrows() {
        return Err(Error::Shape(format!(
            "{} rows but {} random streams",
            noisy.nrows(),
            rngs.len()
        )));
    }
    let steps = vec![t; noisy.nrows()];
    let eps_hat = model.predict_noise_conditioned(noisy, &steps, cond)?;
    let mut next = (noisy - &(eps_hat * coeff.noise_scale)) * coeff.scale;
    if t > 1 {
        let std = coeff.variance.sqrt();
        for (mut row, rng) in next.axis_iter_mut(Axis(0)).zip(rngs.iter_mut()) {
            for v in row.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += std * z;
            }
        }
    }
    Ok(next)
}

pub fn reverse_step<M: Denoiser + ?Sized, R: Rng>(
    model: &M,
    a_t: &[f64],
    t: usize,
    obs: &[f64],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let noisy = row_matrix(&[a_t], a_t.len())?;
    let obs = row_matrix(&[obs], obs.len())?;
    let next = reverse_step_batch(model, &noisy, t, &obs, schedule, std::slice::from_mut(rng))?;
    Ok(next.into_raw_vec_and_offset().0)
}

/// Draws `a_T ~ N(0, I)` per row, runs the reverse chain down to `t = 1` and
/// clamps the result to `[−1, 1]`.
pub fn sample_actions<M: Denoiser + ?Sized, R: Rng>(
    model: &M,
    obs: &Array2<f64>,
    schedule: &NoiseSchedule,
    rngs: &mut [R],
) -> Result<Array2<f64>> {
    if obs.ncols() != model.obs_dim() {
        return Err(Error::Shape(format!(
            "model expects observations of width {}, got {}",
            model.obs_dim(),
            obs.ncols()
        )));
    }
    if rngs.len() != obs.nrows() {
        return Err(Error::Shape(format!(
            "{} observations but {} random streams",
            obs.nrows(),
            rngs.len()
        )));
    }
    let act_dim = model.action_dim();
    let mut a = Array2::zeros((obs.nrows(), act_dim));
    for (mut row, rng) in a.axis_iter_mut(Axis(0)).zip(rngs.iter_mut()) {
        for v in row.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
    }
    let cond = model.condition(obs)?;
    for t in (1..=schedule.steps()).rev() {
        a = reverse_step_conditioned(model, &a, t, &cond, schedule, rngs)?;
    }
    Ok(a.mapv_into(|v| v.clamp(-1.0, 1.0)))
}

pub fn sample_action<M: Denoiser + ?Sized, R: Rng>(
    model: &M,
    obs: &[f64],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let obs = row_matrix(&[obs], obs.len())?;
    let a = sample_actions(model, &obs, schedule, std::slice::from_mut(rng))?;
    Ok(a.into_raw_vec_and_offset().0)
}
