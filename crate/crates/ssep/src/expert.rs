//! Expert-policy bank: train one DDPG actor per representative parameter
//! point, score policies with the undiscounted H-step performance measure
//! G(mu | xi), and check grid coverage against the threshold d.

use crate::ddpg::{train, DdpgConfig, DdpgError, TrainTarget};
use crate::dynamics::{Action, Pendulum, State, System, SystemParams};
use crate::nn::DenseNet;
use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error("expert bank must contain at least one expert")]
    EmptyBank,
    #[error("representative points must be pairwise distinct")]
    DuplicatePoints,
    #[error("weight vector length {got} does not match bank size {expected}")]
    WeightLength { expected: usize, got: usize },
    #[error(transparent)]
    Ddpg(#[from] DdpgError),
}

/// Evaluation protocol for G: fixed initial state, horizon, and the
/// performance threshold d.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSpec {
    pub x_tilde: State,
    pub horizon: usize,
    pub threshold: f64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            x_tilde: State::new(std::f64::consts::PI, 0.0),
            horizon: 1000,
            threshold: -1500.0,
        }
    }
}

/// One trained expert and the representative point it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub point: SystemParams,
    pub actor: DenseNet,
    /// Free-form provenance note (training config digest).
    pub metadata: String,
}

/// Ordered bank of expert actors; index order is part of the contract
/// (weights refer to experts by position).
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank {
    experts: Vec<Expert>,
}

impl ExpertBank {
    pub fn new(experts: Vec<Expert>) -> Result<Self, ExpertError> {
        if experts.is_empty() {
            return Err(ExpertError::EmptyBank);
        }
        for i in 0..experts.len() {
            for j in (i + 1)..experts.len() {
                if experts[i].point == experts[j].point {
                    return Err(ExpertError::DuplicatePoints);
                }
            }
        }
        Ok(Self { experts })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn experts(&self) -> &[Expert] {
        &self.experts
    }

    pub fn points(&self) -> Vec<SystemParams> {
        self.experts.iter().map(|e| e.point).collect()
    }
}

/// A deterministic state-feedback policy.
pub trait Policy {
    fn action(&self, x: State) -> Action;
}

/// A single actor network reading the raw state.
impl Policy for DenseNet {
    fn action(&self, x: State) -> Action {
        let obs = Array1::from(vec![x.x1, x.x2]);
        Action::clamped(self.infer(obs.view()).expect("actor inference")[0])
    }
}

/// An informed actor that also reads the true system parameters.
pub struct InformedPolicy<'a> {
    pub actor: &'a DenseNet,
    pub xi: SystemParams,
}

impl Policy for InformedPolicy<'_> {
    fn action(&self, x: State) -> Action {
        let obs = Array1::from(vec![x.x1, x.x2, self.xi.xi1, self.xi.xi2]);
        Action::clamped(self.actor.infer(obs.view()).expect("actor inference")[0])
    }
}

impl<F: Fn(State) -> Action> Policy for F {
    fn action(&self, x: State) -> Action {
        self(x)
    }
}

/// Noiseless H-step rollout return from `spec.x_tilde` on the system with
/// parameters `xi`. A trajectory that leaves f64 range scores -inf.
pub fn evaluate<P: Policy>(
    system: &Pendulum,
    policy: &P,
    xi: SystemParams,
    spec: &EvalSpec,
) -> f64 {
    let mut x = spec.x_tilde;
    let mut total = 0.0;
    for _ in 0..spec.horizon {
        let a = policy.action(x);
        total += system.reward(x, a);
        x = match system.step(x, a, xi) {
            Ok(next) if next.is_finite() => next,
            _ => return f64::NEG_INFINITY,
        };
    }
    total
}

/// G at every grid point, order preserved.
pub fn eval_grid<P: Policy>(
    system: &Pendulum,
    policy: &P,
    grid: &[SystemParams],
    spec: &EvalSpec,
) -> Vec<(SystemParams, f64)> {
    grid.iter()
        .map(|&xi| (xi, evaluate(system, policy, xi, spec)))
        .collect()
}

/// Per-point scores of every expert in the bank, row-major over the grid.
pub fn eval_grid_bank(
    system: &Pendulum,
    bank: &ExpertBank,
    grid: &[SystemParams],
    spec: &EvalSpec,
) -> Vec<(SystemParams, Vec<f64>)> {
    grid.iter()
        .map(|&xi| {
            let scores = bank
                .experts()
                .iter()
                .map(|e| evaluate(system, &e.actor, xi, spec))
                .collect();
            (xi, scores)
        })
        .collect()
}

/// A grid point is covered when some expert scores at least `spec.threshold`
/// on it. Returns the uncovered points.
pub fn coverage_check(
    system: &Pendulum,
    bank: &ExpertBank,
    grid: &[SystemParams],
    spec: &EvalSpec,
) -> (bool, Vec<SystemParams>) {
    let uncovered: Vec<SystemParams> = grid
        .iter()
        .filter(|&&xi| {
            !bank
                .experts()
                .iter()
                .any(|e| evaluate(system, &e.actor, xi, spec) >= spec.threshold)
        })
        .copied()
        .collect();
    (uncovered.is_empty(), uncovered)
}

/// Outcome of a bank build; diverged experts are reported, not kept.
#[derive(Debug)]
pub struct BankBuild {
    pub bank: ExpertBank,
    pub failed_points: Vec<SystemParams>,
    pub training_returns: Vec<Vec<f64>>,
}

/// Train one expert per representative point on the fixed-parameter
/// simulator. Expert j uses the derived seed `base_seed + j`.
pub fn build_bank(
    system: &Pendulum,
    points: &[SystemParams],
    cfg: &DdpgConfig,
    base_seed: u64,
) -> Result<BankBuild, ExpertError> {
    if points.is_empty() {
        return Err(ExpertError::EmptyBank);
    }
    let mut experts = Vec::new();
    let mut failed = Vec::new();
    let mut returns = Vec::new();
    for (j, &point) in points.iter().enumerate() {
        let seed = base_seed.wrapping_add(j as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (agent, log) = train(system, &TrainTarget::Fixed(point), cfg, &mut rng)?;
        if agent.actor.is_finite() {
            experts.push(Expert {
                point,
                actor: agent.actor,
                metadata: format!("ddpg seed={seed} episodes={}", cfg.episodes),
            });
            returns.push(log);
        } else {
            failed.push(point);
        }
    }
    Ok(BankBuild {
        bank: ExpertBank::new(experts)?,
        failed_points: failed,
        training_returns: returns,
    })
}

/// The three representative points used for the pendulum bank.
pub fn default_representative_points() -> Vec<SystemParams> {
    vec![
        SystemParams::new(0.1, 1.0),
        SystemParams::new(2.0, 0.0),
        SystemParams::new(2.0, 2.0),
    ]
}
