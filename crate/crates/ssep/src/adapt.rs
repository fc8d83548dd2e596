//! Online adaptation stage: the adaptive policy as a normalized weighted sum
//! of experts, the one-step prediction loss and its gradient, FTRL and
//! discounted-FTRL weight updates on the probability simplex, and static
//! regret accounting.

use crate::dynamics::{Action, DynamicsError, ParamSchedule, Pendulum, State, System, SystemParams};
use crate::expert::{ExpertBank, ExpertError, Policy};
use ndarray::{Array1, Array2};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("weight vector must have at least one entry")]
    EmptyWeights,
    #[error("weights contain a negative or non-finite entry")]
    InvalidWeights,
    #[error("weight length {got} does not match expert count {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("adaptation needs at least one step")]
    NoSteps,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
}

/// Simplex-constrained mixing weights; renormalized on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityWeights {
    w: Vec<f64>,
}

impl SimilarityWeights {
    pub fn new(raw: Vec<f64>) -> Result<Self, AdaptError> {
        if raw.is_empty() {
            return Err(AdaptError::EmptyWeights);
        }
        if raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(AdaptError::InvalidWeights);
        }
        let sum: f64 = raw.iter().sum();
        if sum <= 0.0 {
            return Err(AdaptError::InvalidWeights);
        }
        Ok(Self {
            w: raw.into_iter().map(|v| v / sum).collect(),
        })
    }

    pub fn uniform(m: usize) -> Self {
        assert!(m > 0);
        Self {
            w: vec![1.0 / m as f64; m],
        }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn argmax(&self) -> usize {
        self.w
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap()
    }

    /// Nonnegative and summing to one within `tol`.
    pub fn satisfies_simplex(&self, tol: f64) -> bool {
        self.w.iter().all(|&v| v >= 0.0)
            && (self.w.iter().sum::<f64>() - 1.0).abs() <= tol
    }
}

/// Accumulated (possibly discounted) gradient sums driving the FTRL closed
/// form.
#[derive(Debug, Clone)]
pub struct OcoState {
    pub cumulative_gradient: Array1<f64>,
    pub eta: f64,
    pub beta: f64,
    pub update_period: u64,
}

impl OcoState {
    pub fn new(m: usize, eta: f64, beta: f64, update_period: u64) -> Self {
        assert!(m > 0 && eta > 0.0 && (0.0..=1.0).contains(&beta) && update_period >= 1);
        Self {
            cumulative_gradient: Array1::zeros(m),
            eta,
            beta,
            update_period,
        }
    }

    /// Plain FTRL (no discounting).
    pub fn ftrl(m: usize, eta: f64, update_period: u64) -> Self {
        Self::new(m, eta, 1.0, update_period)
    }
}

/// Normalized weighted sum of the expert actions; a convex combination of
/// tanh outputs, so it lies in [-1, 1] without clamping.
pub fn adaptive_action(
    bank: &ExpertBank,
    w: &SimilarityWeights,
    x: State,
) -> Result<Action, AdaptError> {
    if w.len() != bank.len() {
        return Err(AdaptError::LengthMismatch {
            expected: bank.len(),
            got: w.len(),
        });
    }
    let a = bank
        .experts()
        .iter()
        .zip(w.as_slice())
        .map(|(e, &wj)| wj * e.actor.action(x).0)
        .sum();
    Ok(Action(a))
}

/// Column j is the one-step prediction of the j-th representative system.
pub fn prediction_matrix(
    system: &Pendulum,
    x: State,
    a: Action,
    points: &[SystemParams],
) -> Result<Array2<f64>, AdaptError> {
    let mut f = Array2::zeros((2, points.len()));
    for (j, &xi) in points.iter().enumerate() {
        let next = system.step(x, a, xi)?;
        f[[0, j]] = next.x1;
        f[[1, j]] = next.x2;
    }
    Ok(f)
}

fn residual(w: &SimilarityWeights, f: &Array2<f64>, x_next: State) -> Array1<f64> {
    let wv = Array1::from(w.as_slice().to_vec());
    let pred = f.dot(&wv);
    Array1::from(vec![x_next.x1 - pred[0], x_next.x2 - pred[1]])
}

/// Squared prediction error of the mixed one-step model.
pub fn loss(w: &SimilarityWeights, f: &Array2<f64>, x_next: State) -> f64 {
    let r = residual(w, f, x_next);
    r.dot(&r)
}

/// Gradient of `loss` in w: -2 F^T (x_next - F w).
pub fn loss_gradient(w: &SimilarityWeights, f: &Array2<f64>, x_next: State) -> Array1<f64> {
    let r = residual(w, f, x_next);
    f.t().dot(&r).mapv(|v| -2.0 * v)
}

/// Discounted gradient accumulation: past gradients decay by beta, the new
/// one enters undamped. beta = 1 recovers the plain running sum.
pub fn accumulate(state: &mut OcoState, gradient: &Array1<f64>) {
    state.cumulative_gradient *= state.beta;
    state.cumulative_gradient += gradient;
}

/// Closed-form FTRL solution with the unnormalized-negentropy regularizer:
/// a softmax of the negated scaled gradient sums. Max-subtraction guards the
/// exponentials.
pub fn ftrl_weights(state: &OcoState) -> SimilarityWeights {
    let scaled = state.cumulative_gradient.mapv(|g| -state.eta * g);
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    SimilarityWeights::new(exps).expect("softmax output is a valid simplex point")
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_simplex(v: &Array1<f64>) -> Array1<f64> {
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut css = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        css += ui;
        let t = (css - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.mapv(|vi| (vi - theta).max(0.0))
}

/// Minimize the accumulated quadratic sum ||x'_t - F_t w||^2 over the
/// simplex by projected gradient descent. Returns (argmin, min value).
pub fn hindsight_optimum(terms: &[(Array2<f64>, State)]) -> (Array1<f64>, f64) {
    assert!(!terms.is_empty());
    let m = terms[0].0.ncols();
    let mut a = Array2::<f64>::zeros((m, m));
    let mut b = Array1::<f64>::zeros(m);
    let mut c = 0.0;
    for (f, x_next) in terms {
        let xv = Array1::from(vec![x_next.x1, x_next.x2]);
        a += &f.t().dot(f);
        b += &f.t().dot(&xv);
        c += xv.dot(&xv);
    }
    let objective = |w: &Array1<f64>| w.dot(&a.dot(w)) - 2.0 * b.dot(w) + c;

    // Step from a safe Lipschitz bound; trace(A) >= lambda_max(A).
    let lips = 2.0 * a.diag().sum().max(1e-12);
    let step = 1.0 / lips;
    let mut w = Array1::from_elem(m, 1.0 / m as f64);
    for _ in 0..2_000_000 {
        let grad = a.dot(&w).mapv(|v| 2.0 * v) - b.mapv(|v| 2.0 * v);
        let next = project_simplex(&(&w - &grad.mapv(|g| g * step)));
        let moved = (&next - &w).mapv(f64::abs).sum();
        w = next;
        if moved < 1e-14 {
            break;
        }
    }
    let val = objective(&w);
    (w, val)
}

/// Static regret of the played weight sequence against the best fixed
/// simplex point in hindsight.
pub fn static_regret(terms: &[(Array2<f64>, State)], played: &[SimilarityWeights]) -> f64 {
    assert_eq!(terms.len(), played.len());
    if terms.is_empty() {
        return 0.0;
    }
    let incurred: f64 = terms
        .iter()
        .zip(played)
        .map(|((f, xn), w)| loss(w, f, *xn))
        .sum();
    let (_, best) = hindsight_optimum(terms);
    incurred - best
}

/// Per-step record of one adaptation run.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: u64,
    pub x: State,
    pub a: Action,
    pub x_next: State,
    pub r: f64,
    /// Weights in effect when the action was chosen.
    pub w: SimilarityWeights,
    /// One-step predictions of the representative systems at (x, a).
    pub prediction: Array2<f64>,
    pub loss: f64,
}

/// Record of one weight recomputation.
#[derive(Debug, Clone)]
pub struct UpdateRecord {
    pub t: u64,
    pub loss: f64,
    pub gradient: Array1<f64>,
    pub w: SimilarityWeights,
}

#[derive(Debug, Clone, Default)]
pub struct AdaptationTrace {
    pub steps: Vec<StepRecord>,
    pub updates: Vec<UpdateRecord>,
}

impl AdaptationTrace {
    pub fn total_return(&self) -> f64 {
        self.steps.iter().map(|s| s.r).sum()
    }

    /// The (prediction matrix, observed next state) loss terms, in step order.
    pub fn loss_terms(&self) -> Vec<(Array2<f64>, State)> {
        self.steps
            .iter()
            .map(|s| (s.prediction.clone(), s.x_next))
            .collect()
    }

    pub fn played_weights(&self) -> Vec<SimilarityWeights> {
        self.steps.iter().map(|s| s.w.clone()).collect()
    }
}

/// Run settings beyond the OCO parameters: horizon, reset/initial state, and
/// an optional random-excitation warm-up during which actions are drawn
/// uniformly from [-1, 1] instead of from the adaptive policy.
#[derive(Debug, Clone, Copy)]
pub struct RunConfig {
    pub total_steps: u64,
    pub x1: State,
    pub excitation_steps: u64,
}

/// Online adaptation loop: act with the current weights, observe the real
/// transition, accumulate the loss gradient every step, and recompute the
/// weights every `update_period` steps.
pub fn run_adaptation<R: Rng + ?Sized>(
    system: &Pendulum,
    schedule: &ParamSchedule,
    bank: &ExpertBank,
    mut oco: OcoState,
    run: RunConfig,
    rng: &mut R,
) -> Result<AdaptationTrace, AdaptError> {
    if run.total_steps == 0 {
        return Err(AdaptError::NoSteps);
    }
    let points = bank.points();
    let mut trace = AdaptationTrace::default();
    let mut w = ftrl_weights(&oco);
    let mut x = run.x1;

    for t in 1..=run.total_steps {
        let (xi, reset) = schedule.params_at(t)?;
        if reset {
            x = run.x1;
        }
        let a = if t <= run.excitation_steps {
            Action(rng.gen_range(-1.0..=1.0))
        } else {
            adaptive_action(bank, &w, x)?
        };
        let prediction = prediction_matrix(system, x, a, &points)?;
        let x_next = system.step(x, a, xi)?;
        let r = system.reward(x, a);
        let step_loss = loss(&w, &prediction, x_next);
        let gradient = loss_gradient(&w, &prediction, x_next);
        accumulate(&mut oco, &gradient);

        trace.steps.push(StepRecord {
            t,
            x,
            a,
            x_next,
            r,
            w: w.clone(),
            prediction,
            loss: step_loss,
        });

        if t % oco.update_period == 0 {
            w = ftrl_weights(&oco);
            trace.updates.push(UpdateRecord {
                t,
                loss: step_loss,
                gradient,
                w: w.clone(),
            });
        }
        x = x_next;
    }
    Ok(trace)
}
