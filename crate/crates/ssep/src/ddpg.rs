//! DDPG with replay buffer, Gaussian exploration noise, soft-updated target
//! networks, and a domain-randomization training mode.

use crate::dynamics::{
    sample_initial, Action, DynamicsError, InitMode, ParamSpace, Pendulum, State, System,
    SystemParams,
};
use crate::nn::{adam_step, Activation, AdamState, DenseNet, NnError};
use ndarray::{concatenate, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DdpgError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch size {got} does not match configured {expected}")]
    BatchSize { expected: usize, got: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(&'static str),
    #[error("domain-randomization mode requires a parameter space")]
    MissingSpace,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// One transition. `xi` is stored only in informed DR mode, where the
/// networks condition on the episode's parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Experience {
    pub x: State,
    pub a: Action,
    pub x_next: State,
    pub r: f64,
    pub xi: Option<SystemParams>,
}

/// Fixed-capacity ring buffer with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Experience>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(4096)),
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, e: Experience) {
        if self.items.len() < self.capacity {
            self.items.push(e);
        } else {
            self.items[self.cursor] = e;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// Uniform sample with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Experience> {
        (0..n)
            .map(|_| self.items[rng.gen_range(0..self.items.len())])
            .collect()
    }
}

/// What the actor and critic observe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObsKind {
    /// State only.
    State,
    /// State concatenated with the true system parameters.
    StateParams,
}

impl ObsKind {
    pub fn dim(self) -> usize {
        match self {
            ObsKind::State => 2,
            ObsKind::StateParams => 4,
        }
    }

    pub fn build(self, x: State, xi: Option<SystemParams>) -> Array1<f64> {
        match self {
            ObsKind::State => Array1::from(vec![x.x1, x.x2]),
            ObsKind::StateParams => {
                let xi = xi.expect("informed observation requires params");
                Array1::from(vec![x.x1, x.x2, xi.xi1, xi.xi2])
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DrMode {
    Off,
    Blind,
    Informed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DdpgConfig {
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub buffer_capacity: usize,
    pub noise_sigma: f64,
    pub noise_decay: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub hidden: Vec<usize>,
    pub init_mode: InitMode,
    pub dr_mode: DrMode,
    pub seed: u64,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            batch_size: 128,
            episodes: 500,
            steps_per_episode: 200,
            buffer_capacity: 100_000,
            noise_sigma: 0.2,
            noise_decay: 0.995,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            hidden: vec![128, 128],
            init_mode: InitMode::UniformAngle { low: -PI, high: PI },
            dr_mode: DrMode::Off,
            seed: 0,
        }
    }
}

impl DdpgConfig {
    pub fn validate(&self) -> Result<(), DdpgError> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(DdpgError::InvalidConfig("gamma must be in (0,1)"));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(DdpgError::InvalidConfig("tau must be in (0,1)"));
        }
        if self.batch_size == 0 {
            return Err(DdpgError::InvalidConfig("batch_size must be >= 1"));
        }
        if self.actor_lr <= 0.0 || self.critic_lr <= 0.0 {
            return Err(DdpgError::InvalidConfig("learning rates must be positive"));
        }
        if self.buffer_capacity == 0 {
            return Err(DdpgError::InvalidConfig("buffer capacity must be >= 1"));
        }
        Ok(())
    }

    pub fn obs_kind(&self) -> ObsKind {
        match self.dr_mode {
            DrMode::Informed => ObsKind::StateParams,
            _ => ObsKind::State,
        }
    }
}

/// Actor, critic, their slowly updated targets, optimizers, and replay.
#[derive(Debug, Clone)]
pub struct DdpgAgent {
    pub actor: DenseNet,
    pub critic: DenseNet,
    pub target_actor: DenseNet,
    pub target_critic: DenseNet,
    pub actor_opt: AdamState,
    pub critic_opt: AdamState,
    pub buffer: ReplayBuffer,
    pub obs_kind: ObsKind,
}

impl DdpgAgent {
    pub fn new<R: Rng + ?Sized>(cfg: &DdpgConfig, rng: &mut R) -> Result<Self, DdpgError> {
        cfg.validate()?;
        let obs_kind = cfg.obs_kind();
        let mut actor_sizes = vec![obs_kind.dim()];
        actor_sizes.extend(&cfg.hidden);
        actor_sizes.push(1);
        let mut critic_sizes = vec![obs_kind.dim() + 1];
        critic_sizes.extend(&cfg.hidden);
        critic_sizes.push(1);

        let actor = DenseNet::init(&actor_sizes, Activation::Relu, Activation::Tanh, rng)?;
        let critic = DenseNet::init(&critic_sizes, Activation::Relu, Activation::Linear, rng)?;
        let actor_opt = AdamState::new(&actor, cfg.actor_lr);
        let critic_opt = AdamState::new(&critic, cfg.critic_lr);
        Ok(Self {
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor,
            critic,
            actor_opt,
            critic_opt,
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            obs_kind,
        })
    }

    /// Greedy action plus clamped Gaussian exploration noise.
    pub fn select_action<R: Rng + ?Sized>(
        &self,
        obs: &Array1<f64>,
        noise_scale: f64,
        rng: &mut R,
    ) -> Result<Action, DdpgError> {
        let mu = self.actor.infer(obs.view())?[0];
        let a = if noise_scale > 0.0 {
            let noise = Normal::new(0.0, noise_scale).expect("valid sigma").sample(rng);
            mu + noise
        } else {
            mu
        };
        Ok(Action::clamped(a))
    }

    fn obs_matrix(&self, batch: &[Experience], next: bool) -> Array2<f64> {
        let dim = self.obs_kind.dim();
        let mut m = Array2::zeros((batch.len(), dim));
        for (i, e) in batch.iter().enumerate() {
            let x = if next { e.x_next } else { e.x };
            let obs = self.obs_kind.build(x, e.xi);
            m.row_mut(i).assign(&obs);
        }
        m
    }

    /// TD targets from the target networks only.
    pub fn td_targets(&self, batch: &[Experience], gamma: f64) -> Result<Array1<f64>, DdpgError> {
        if batch.is_empty() {
            return Err(DdpgError::EmptyBatch);
        }
        let obs_next = self.obs_matrix(batch, true);
        let (a_next, _) = self.target_actor.forward_batch(&obs_next)?;
        let qin = concatenate![Axis(1), obs_next, a_next];
        let (q_next, _) = self.target_critic.forward_batch(&qin)?;
        let targets = batch
            .iter()
            .zip(q_next.column(0))
            .map(|(e, q)| e.r + gamma * q)
            .collect();
        Ok(targets)
    }

    /// One Adam step on the critic against the TD targets; returns the
    /// pre-update mean squared TD error.
    pub fn critic_update(&mut self, batch: &[Experience], gamma: f64) -> Result<f64, DdpgError> {
        if batch.is_empty() {
            return Err(DdpgError::EmptyBatch);
        }
        let n = batch.len() as f64;
        let y = self.td_targets(batch, gamma)?;
        let obs = self.obs_matrix(batch, false);
        let actions =
            Array2::from_shape_fn((batch.len(), 1), |(i, _)| batch[i].a.0);
        let qin = concatenate![Axis(1), obs, actions];
        let (q, cache) = self.critic.forward_batch(&qin)?;

        let mut loss = 0.0;
        let mut out_grad = Array2::zeros(q.dim());
        for (i, (&qi, &yi)) in q.column(0).iter().zip(y.iter()).enumerate() {
            let diff = yi - qi;
            loss += diff * diff;
            out_grad[[i, 0]] = -2.0 * diff / n;
        }
        loss /= n;
        let grads = self.critic.backward_params_batch(&cache, &out_grad)?;
        adam_step(&mut self.critic, &grads, &mut self.critic_opt)?;
        Ok(loss)
    }

    /// Deterministic policy-gradient ascent step on the actor; returns the
    /// norm of the applied gradient.
    pub fn actor_update(&mut self, batch: &[Experience]) -> Result<f64, DdpgError> {
        if batch.is_empty() {
            return Err(DdpgError::EmptyBatch);
        }
        let n = batch.len() as f64;
        let obs = self.obs_matrix(batch, false);
        let (a_mu, actor_cache) = self.actor.forward_batch(&obs)?;
        let qin = concatenate![Axis(1), obs.clone(), a_mu];
        let (_, critic_cache) = self.critic.forward_batch(&qin)?;

        // d(mean Q)/d input, rows [d/dobs | d/da]; only the action slice
        // flows back into the actor.
        let ones = Array2::from_elem((batch.len(), 1), 1.0 / n);
        let input_grad = self.critic.backward_input_batch(&critic_cache, &ones)?;
        let dq_da = input_grad
            .slice(ndarray::s![.., self.obs_kind.dim()..])
            .to_owned();

        // Ascent on Q: descend along the negated gradient.
        let out_grad = dq_da.mapv(|v| -v);
        let grads = self.actor.backward_params_batch(&actor_cache, &out_grad)?;
        let norm = grads.norm();
        adam_step(&mut self.actor, &grads, &mut self.actor_opt)?;
        Ok(norm)
    }

    /// Polyak averaging of target networks toward the online networks.
    pub fn soft_update(&mut self, tau: f64) {
        fn blend(target: &mut DenseNet, online: &DenseNet, tau: f64) {
            for (t, o) in target.weights.iter_mut().zip(&online.weights) {
                ndarray::Zip::from(t).and(o).for_each(|t, &o| {
                    *t = tau * o + (1.0 - tau) * *t;
                });
            }
            for (t, o) in target.biases.iter_mut().zip(&online.biases) {
                ndarray::Zip::from(t).and(o).for_each(|t, &o| {
                    *t = tau * o + (1.0 - tau) * *t;
                });
            }
        }
        blend(&mut self.target_actor, &self.actor, tau);
        blend(&mut self.target_critic, &self.critic, tau);
    }

    pub fn is_finite(&self) -> bool {
        self.actor.is_finite() && self.critic.is_finite()
    }
}

/// Which simulated system(s) the agent trains on.
#[derive(Debug, Clone)]
pub enum TrainTarget {
    Fixed(SystemParams),
    DomainRandomized(ParamSpace),
}

/// Full DDPG training run; returns the agent and the undiscounted return of
/// each episode.
pub fn train<R: Rng + ?Sized>(
    system: &Pendulum,
    target: &TrainTarget,
    cfg: &DdpgConfig,
    rng: &mut R,
) -> Result<(DdpgAgent, Vec<f64>), DdpgError> {
    cfg.validate()?;
    if matches!(cfg.dr_mode, DrMode::Blind | DrMode::Informed)
        && !matches!(target, TrainTarget::DomainRandomized(_))
    {
        return Err(DdpgError::MissingSpace);
    }
    let mut agent = DdpgAgent::new(cfg, rng)?;
    let mut returns = Vec::with_capacity(cfg.episodes);
    let store_xi = matches!(cfg.dr_mode, DrMode::Informed);

    for episode in 0..cfg.episodes {
        let xi = match target {
            TrainTarget::Fixed(p) => *p,
            TrainTarget::DomainRandomized(space) => {
                let s = space.sample_uniform(rng);
                SystemParams::new(s[0], s[1])
            }
        };
        let mut x = sample_initial(rng, cfg.init_mode)?;
        let noise = cfg.noise_sigma * cfg.noise_decay.powi(episode as i32);
        let mut episode_return = 0.0;

        for _ in 0..cfg.steps_per_episode {
            let obs = agent.obs_kind.build(x, store_xi.then_some(xi));
            let a = agent.select_action(&obs, noise, rng)?;
            let x_next = system.step(x, a, xi)?;
            let r = system.reward(x, a);
            agent.buffer.push(Experience {
                x,
                a,
                x_next,
                r,
                xi: store_xi.then_some(xi),
            });
            episode_return += r;
            x = x_next;

            if agent.buffer.len() >= cfg.batch_size {
                let batch = agent.buffer.sample(cfg.batch_size, rng);
                agent.critic_update(&batch, cfg.gamma)?;
                agent.actor_update(&batch)?;
                agent.soft_update(cfg.tau);
            }
        }
        returns.push(episode_return);
    }
    Ok((agent, returns))
}
