//! The conditional noise predictor `ε̂ = h(a_t, t, o)`.
//!
//! Noisy actions and observations each pass through a two-layer embedding
//! network, the diffusion step selects a row of a learned embedding table,
//! and the three embeddings are concatenated (action, step, observation) and
//! fed to a four-layer MLP that outputs one value per action dimension.

use std::path::Path;

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{denoise_loss_batch, Denoiser, NoiseDraw, NoiseSchedule, TrainableDenoiser};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{self, Section};
use crate::nn::{array_slice, array_slice_mut, Activation, DenseLayer, ForwardCache, MlpParams, Tensors};
use crate::rng::{self, DspRng};

pub const DEFAULT_EMBED_DIM: usize = 128;
pub const DESK_HIDDEN_DIM: usize = 128;
pub const FULL_HIDDEN_DIM: usize = 512;

const OBS_EMBED: &str = "obs_embed";
const ACT_EMBED: &str = "act_embed";
const TIME_EMBED: &str = "time_embed";
const DENOISER: &str = "denoiser";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub diffusion_steps: usize,
    pub seed: u64,
}

impl PolicyConfig {
    pub fn new(obs_dim: usize, act_dim: usize) -> Self {
        Self {
            obs_dim,
            act_dim,
            hidden_dim: DESK_HIDDEN_DIM,
            embed_dim: DEFAULT_EMBED_DIM,
            diffusion_steps: 5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("obs_dim", self.obs_dim),
            ("act_dim", self.act_dim),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("diffusion_steps", self.diffusion_steps),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub obs_embed: MlpParams,
    pub act_embed: MlpParams,
    /// One row per diffusion step, `T × embed_dim`.
    pub time_table: Array2<f64>,
    pub denoiser: MlpParams,
}

pub struct PolicyCache {
    act: ForwardCache,
    obs: ForwardCache,
    denoiser: ForwardCache,
    steps: Vec<usize>,
}

impl PolicyCache {
    /// Smallest `|z|` over every ReLU pre-activation, i.e. the distance of
    /// the evaluation point from the nearest kink.
    pub fn min_relu_margin(&self) -> f64 {
        [&self.act, &self.obs, &self.denoiser]
            .iter()
            .flat_map(|c| {
                let n = c.pre_activations.len();
                c.pre_activations[..n - 1].iter()
            })
            .flat_map(|z| z.iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }
}

impl PolicyParams {
    pub fn build(config: &PolicyConfig) -> Result<Self> {
        config.validate()?;
        let e = config.embed_dim;
        let h = config.hidden_dim;
        let obs_embed = MlpParams::init_with_rng(
            &[config.obs_dim, e, e],
            &mut rng::stream(config.seed, rng::tag::INIT, 0),
        )?;
        let act_embed = MlpParams::init_with_rng(
            &[config.act_dim, e, e],
            &mut rng::stream(config.seed, rng::tag::INIT, 1),
        )?;
        let denoiser = MlpParams::init_with_rng(
            &[3 * e, h, h, h, config.act_dim],
            &mut rng::stream(config.seed, rng::tag::INIT, 2),
        )?;
        // Uniform in ±1/√T, like a layer on one-hot step inputs.
        let mut table_rng = rng::stream(config.seed, rng::tag::INIT, 3);
        let bound = 1.0 / (config.diffusion_steps as f64).sqrt();
        let time_table =
            Array2::from_shape_simple_fn((config.diffusion_steps, e), || table_rng.random_range(-bound..=bound));
        Ok(Self {
            obs_embed,
            act_embed,
            time_table,
            denoiser,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_embed.in_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.act_embed.in_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.time_table.ncols()
    }

    pub fn diffusion_steps(&self) -> usize {
        self.time_table.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.denoiser.layers[0].out_dim()
    }

    fn check_obs(&self, obs: &Array2<f64>) -> Result<()> {
        if obs.ncols() != self.obs_dim() {
            return Err(Error::Shape(format!(
                "policy takes observations of width {}, got {}",
                self.obs_dim(),
                obs.ncols()
            )));
        }
        Ok(())
    }

    fn check_noisy(&self, noisy: &Array2<f64>, steps: &[usize], rows: usize) -> Result<()> {
        if noisy.ncols() != self.act_dim() {
            return Err(Error::Shape(format!(
                "policy takes actions of width {}, got {}",
                self.act_dim(),
                noisy.ncols()
            )));
        }
        if noisy.nrows() != rows || steps.len() != rows {
            return Err(Error::Shape(format!(
                "{} actions, {} steps and {rows} observations in one batch",
                noisy.nrows(),
                steps.len()
            )));
        }
        if let Some(&t) = steps.iter().find(|&&t| t == 0 || t > self.diffusion_steps()) {
            return Err(Error::Index {
                step: t,
                max: self.diffusion_steps(),
            });
        }
        Ok(())
    }

    fn gather_steps(&self, steps: &[usize]) -> Array2<f64> {
        let rows: Vec<usize> = steps.iter().map(|t| t - 1).collect();
        self.time_table.select(Axis(0), &rows)
    }

    /// Noise prediction for a single `(a_t, t, o)`.
    pub fn predict_noise(&self, a_t: &[f64], t: usize, obs: &[f64]) -> Result<Vec<f64>> {
        let noisy = Array2::from_shape_vec((1, a_t.len()), a_t.to_vec()).expect("single row");
        let obs = Array2::from_shape_vec((1, obs.len()), obs.to_vec()).expect("single row");
        Ok(self
            .predict_noise_batch(&noisy, &[t], &obs)?
            .into_raw_vec_and_offset()
            .0)
    }

    pub fn to_sections(&self) -> Vec<Section> {
        let t = self.diffusion_steps();
        let table = DenseLayer {
            weight: self.time_table.clone(),
            bias: ndarray::Array1::zeros(t),
            activation: Activation::Identity,
        };
        vec![
            Section {
                name: OBS_EMBED.into(),
                params: self.obs_embed.clone(),
            },
            Section {
                name: ACT_EMBED.into(),
                params: self.act_embed.clone(),
            },
            Section {
                name: TIME_EMBED.into(),
                params: MlpParams { layers: vec![table] },
            },
            Section {
                name: DENOISER.into(),
                params: self.denoiser.clone(),
            },
        ]
    }

    pub fn from_sections(sections: Vec<Section>) -> Result<Self> {
        let mut found: [Option<MlpParams>; 4] = Default::default();
        for s in sections {
            let slot = match s.name.as_str() {
                OBS_EMBED => 0,
                ACT_EMBED => 1,
                TIME_EMBED => 2,
                DENOISER => 3,
                other => return Err(Error::Checkpoint(format!("unexpected section {other}"))),
            };
            if found[slot].replace(s.params).is_some() {
                return Err(Error::Checkpoint(format!(
                    "duplicate section {}",
                    [OBS_EMBED, ACT_EMBED, TIME_EMBED, DENOISER][slot]
                )));
            }
        }
        let [obs_embed, act_embed, time, denoiser] = found;
        let missing = |name: &str| Error::Checkpoint(format!("missing section {name}"));
        let obs_embed = obs_embed.ok_or_else(|| missing(OBS_EMBED))?;
        let act_embed = act_embed.ok_or_else(|| missing(ACT_EMBED))?;
        let time = time.ok_or_else(|| missing(TIME_EMBED))?;
        let denoiser = denoiser.ok_or_else(|| missing(DENOISER))?;
        if time.layers.len() != 1 {
            return Err(Error::Checkpoint("time_embed must be a single table".into()));
        }
        let time_table = time.layers.into_iter().next().unwrap().weight;
        let e = time_table.ncols();
        let consistent = obs_embed.out_dim() == e
            && act_embed.out_dim() == e
            && denoiser.in_dim() == 3 * e
            && denoiser.out_dim() == act_embed.in_dim();
        if !consistent {
            return Err(Error::Checkpoint(format!(
                "inconsistent policy dimensions: obs_embed {:?}, act_embed {:?}, time table {:?}, denoiser {:?}",
                obs_embed.dims(),
                act_embed.dims(),
                time_table.dim(),
                denoiser.dims()
            )));
        }
        Ok(Self {
            obs_embed,
            act_embed,
            time_table,
            denoiser,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_checkpoint(path, &self.to_sections())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_sections(checkpoint::load_checkpoint(path)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        checkpoint::write_checkpoint(&mut buf, &self.to_sections()).expect("in-memory write");
        buf
    }
}

impl Denoiser for PolicyParams {
    fn action_dim(&self) -> usize {
        self.act_dim()
    }

    fn obs_dim(&self) -> usize {
        PolicyParams::obs_dim(self)
    }

    fn predict_noise_batch(&self, noisy: &Array2<f64>, steps: &[usize], obs: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_obs(obs)?;
        self.check_noisy(noisy, steps, obs.nrows())?;
        self.predict_noise_conditioned(noisy, steps, &self.obs_embed.predict(obs)?)
    }

    fn condition(&self, obs: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_obs(obs)?;
        self.obs_embed.predict(obs)
    }

    fn predict_noise_conditioned(&self, noisy: &Array2<f64>, steps: &[usize], o: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_noisy(noisy, steps, o.nrows())?;
        let a = self.act_embed.predict(noisy)?;
        let t = self.gather_steps(steps);
        let x = concatenate(Axis(1), &[a.view(), t.view(), o.view()]).expect("equal batch sizes");
        self.denoiser.predict(&x)
    }
}

impl TrainableDenoiser for PolicyParams {
    type Grads = PolicyParams;
    type Cache = PolicyCache;

    fn forward_train(
        &self,
        noisy: &Array2<f64>,
        steps: &[usize],
        obs: &Array2<f64>,
    ) -> Result<(Array2<f64>, PolicyCache)> {
        self.check_obs(obs)?;
        self.check_noisy(noisy, steps, obs.nrows())?;
        let (a, act) = self.act_embed.forward(noisy)?;
        let (o, obs_cache) = self.obs_embed.forward(obs)?;
        let t = self.gather_steps(steps);
        let x = concatenate(Axis(1), &[a.view(), t.view(), o.view()]).expect("equal batch sizes");
        let (y, denoiser) = self.denoiser.forward(&x)?;
        Ok((
            y,
            PolicyCache {
                act,
                obs: obs_cache,
                denoiser,
                steps: steps.to_vec(),
            },
        ))
    }

    fn backward(&self, cache: &PolicyCache, upstream: &Array2<f64>) -> Result<PolicyParams> {
        let e = self.embed_dim();
        let (denoiser, dx) = self.denoiser.backward(&cache.denoiser, upstream)?;
        let d_act = dx.slice(s![.., 0..e]).to_owned();
        let d_time = dx.slice(s![.., e..2 * e]);
        let d_obs = dx.slice(s![.., 2 * e..3 * e]).to_owned();
        let (act_embed, _) = self.act_embed.backward(&cache.act, &d_act)?;
        let (obs_embed, _) = self.obs_embed.backward(&cache.obs, &d_obs)?;
        let mut time_table = Array2::zeros(self.time_table.raw_dim());
        for (row, &t) in d_time.axis_iter(Axis(0)).zip(&cache.steps) {
            let mut target = time_table.row_mut(t - 1);
            target += &row;
        }
        Ok(PolicyParams {
            obs_embed,
            act_embed,
            time_table,
            denoiser,
        })
    }
}

impl Tensors for PolicyParams {
    fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.obs_embed.slices();
        v.extend(self.act_embed.slices());
        v.push(array_slice(&self.time_table));
        v.extend(self.denoiser.slices());
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.obs_embed.slices_mut();
        v.extend(self.act_embed.slices_mut());
        v.push(array_slice_mut(&mut self.time_table));
        v.extend(self.denoiser.slices_mut());
        v
    }

    fn zeros_like(&self) -> Self {
        Self {
            obs_embed: self.obs_embed.zeros_like(),
            act_embed: self.act_embed.zeros_like(),
            time_table: Array2::zeros(self.time_table.raw_dim()),
            denoiser: self.denoiser.zeros_like(),
        }
    }
}

/// Mean noise-prediction loss over a batch of `(obs, clean action)` rows and
/// its gradient. Draws `(t, ε)` for each row in order from `rng`.
pub fn policy_gradients<R: Rng + ?Sized>(
    params: &PolicyParams,
    schedule: &NoiseSchedule,
    obs: &Array2<f64>,
    actions: &Array2<f64>,
    rng: &mut R,
) -> Result<(f64, PolicyParams)> {
    if obs.nrows() == 0 {
        return Err(Error::State("empty training batch".into()));
    }
    let draws: Vec<NoiseDraw> = (0..obs.nrows())
        .map(|_| NoiseDraw::sample(schedule, params.act_dim(), rng))
        .collect();
    denoise_loss_batch(params, schedule, obs, actions, &draws)
}

/// A trained policy paired with the schedule it samples from.
#[derive(Debug, Clone)]
pub struct DiffusionPolicy {
    pub params: PolicyParams,
    pub schedule: NoiseSchedule,
}

impl DiffusionPolicy {
    pub fn new(params: PolicyParams, schedule: NoiseSchedule) -> Result<Self> {
        if params.diffusion_steps() != schedule.steps() {
            return Err(Error::Config(format!(
                "policy has {} step embeddings but the schedule has {} steps",
                params.diffusion_steps(),
                schedule.steps()
            )));
        }
        Ok(Self { params, schedule })
    }

    pub fn sample(&self, obs: &[f64], rng: &mut DspRng) -> Result<Vec<f64>> {
        crate::diffusion::sample_action(&self.params, obs, &self.schedule, rng)
    }

    pub fn sample_batch(&self, obs: &Array2<f64>, rngs: &mut [DspRng]) -> Result<Array2<f64>> {
        crate::diffusion::sample_actions(&self.params, obs, &self.schedule, rngs)
    }
}
