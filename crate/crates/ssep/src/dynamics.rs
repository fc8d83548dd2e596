//! Parametric discrete-time system model: a generic system trait, the
//! pendulum instance with its quadratic reward, parameter-space grids, and
//! piecewise-constant parameter schedules.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("action {0} outside [-1, 1]")]
    ActionOutOfRange(f64),
    #[error("invalid parameter space: lower[{index}] > upper[{index}]")]
    InvalidSpace { index: usize },
    #[error("grid progression for dimension {index} is empty")]
    EmptyProgression { index: usize },
    #[error("grid step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("grid offset {offset} outside [{lower}, {upper}] for dimension {index}")]
    OffsetOutOfRange {
        index: usize,
        offset: f64,
        lower: f64,
        upper: f64,
    },
    #[error("schedule segments must be contiguous from step 1")]
    MalformedSchedule,
    #[error("step {0} outside the schedule horizon")]
    OutsideHorizon(u64),
    #[error("empty initial-angle range")]
    EmptyRange,
}

/// The system parameter vector ξ = [ξ1, ξ2]: a mass-like and a friction-like
/// coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub xi1: f64,
    pub xi2: f64,
}

impl SystemParams {
    pub fn new(xi1: f64, xi2: f64) -> Self {
        Self { xi1, xi2 }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.xi1, self.xi2]
    }
}

/// Axis-aligned box of admissible parameter vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpace {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ParamSpace {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, DynamicsError> {
        assert_eq!(lower.len(), upper.len());
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if lo > hi {
                return Err(DynamicsError::InvalidSpace { index: i });
            }
        }
        Ok(Self { lower, upper })
    }

    /// The pendulum's parameter space: 0.1 ≤ ξ1 ≤ 2.0, 0.0 ≤ ξ2 ≤ 2.0.
    pub fn pendulum_default() -> Self {
        Self {
            lower: vec![0.1, 0.0],
            upper: vec![2.0, 2.0],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        point.len() == self.dim()
            && point
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(p, (lo, hi))| *p >= *lo && *p <= *hi)
    }

    /// Uniform sample from the box.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| if lo == hi { *lo } else { rng.gen_range(*lo..*hi) })
            .collect()
    }
}

/// Pendulum state: angle (radians, 0 = upright target) and angular velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub x1: f64,
    pub x2: f64,
}

impl State {
    pub fn new(x1: f64, x2: f64) -> Self {
        Self { x1, x2 }
    }

    pub fn is_finite(&self) -> bool {
        self.x1.is_finite() && self.x2.is_finite()
    }
}

/// Normalized torque command in [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action(pub f64);

impl Action {
    pub fn clamped(a: f64) -> Self {
        Self(a.clamp(-1.0, 1.0))
    }
}

/// Physical constants of the pendulum model, overridable via config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemConstants {
    pub gravity: f64,
    pub time_step: f64,
    pub length: f64,
    pub actuator_gain: f64,
}

impl Default for SystemConstants {
    fn default() -> Self {
        Self {
            gravity: 9.81,
            time_step: 0.05,
            length: 1.0,
            actuator_gain: 10.0,
        }
    }
}

/// A known parametric system: the transition map and immediate reward.
pub trait System {
    fn step(&self, x: State, a: Action, xi: SystemParams) -> Result<State, DynamicsError>;
    fn reward(&self, x: State, a: Action) -> f64;
}

/// The pendulum with explicit Euler discretization.
#[derive(Debug, Clone, Copy, Default)]
pub struct Pendulum {
    pub constants: SystemConstants,
}

impl Pendulum {
    pub fn new(constants: SystemConstants) -> Self {
        Self { constants }
    }
}

impl System for Pendulum {
    fn step(&self, x: State, a: Action, xi: SystemParams) -> Result<State, DynamicsError> {
        if !x.is_finite() {
            return Err(DynamicsError::NonFinite("state"));
        }
        if !a.0.is_finite() {
            return Err(DynamicsError::NonFinite("action"));
        }
        if !(xi.xi1.is_finite() && xi.xi2.is_finite()) {
            return Err(DynamicsError::NonFinite("params"));
        }
        if a.0 < -1.0 || a.0 > 1.0 {
            return Err(DynamicsError::ActionOutOfRange(a.0));
        }
        let c = &self.constants;
        let ml2 = xi.xi1 * c.length * c.length;
        let accel = c.gravity / c.length * x.x1.sin() - xi.xi2 * x.x2 / ml2
            + c.actuator_gain * a.0 / ml2;
        Ok(State {
            x1: x.x1 + c.time_step * x.x2,
            x2: x.x2 + c.time_step * accel,
        })
    }

    /// Quadratic stabilization cost around the upright fixed point.
    fn reward(&self, x: State, a: Action) -> f64 {
        -x.x1 * x.x1 - 0.1 * x.x2 * x.x2 - 10.0 * a.0 * a.0
    }
}

/// Cartesian grid of parameter points: per-dimension arithmetic progressions
/// `lower + offset, lower + offset + step, ...` capped at `upper`.
pub fn param_grid(
    space: &ParamSpace,
    offsets: &[f64],
    step: f64,
) -> Result<Vec<Vec<f64>>, DynamicsError> {
    if step <= 0.0 {
        return Err(DynamicsError::NonPositiveStep(step));
    }
    assert_eq!(offsets.len(), space.dim());
    let mut axes: Vec<Vec<f64>> = Vec::with_capacity(space.dim());
    for i in 0..space.dim() {
        let (lo, hi) = (space.lower[i], space.upper[i]);
        let start = lo + offsets[i];
        if start < lo || start > hi {
            return Err(DynamicsError::OffsetOutOfRange {
                index: i,
                offset: offsets[i],
                lower: lo,
                upper: hi,
            });
        }
        let mut axis = Vec::new();
        let mut k = 0u32;
        loop {
            let v = start + f64::from(k) * step;
            if v > hi + 1e-12 {
                break;
            }
            axis.push(v);
            k += 1;
        }
        if axis.is_empty() {
            return Err(DynamicsError::EmptyProgression { index: i });
        }
        axes.push(axis);
    }
    let mut points = vec![Vec::new()];
    for axis in &axes {
        let mut next = Vec::with_capacity(points.len() * axis.len());
        for p in &points {
            for v in axis {
                let mut q = p.clone();
                q.push(*v);
                next.push(q);
            }
        }
        points = next;
    }
    Ok(points)
}

/// Grid offsets reproducing Ξ_grid = {0.15, 0.25, ..., 1.95} x {0.05, 0.15, ..., 1.95}.
pub const DEFAULT_GRID_OFFSETS: [f64; 2] = [0.05, 0.05];
pub const DEFAULT_GRID_STEP: f64 = 0.1;

/// The evaluation grid as `SystemParams`, sorted lexicographically.
pub fn pendulum_grid(
    space: &ParamSpace,
    offsets: &[f64],
    step: f64,
) -> Result<Vec<SystemParams>, DynamicsError> {
    let points = param_grid(space, offsets, step)?;
    Ok(points
        .into_iter()
        .map(|p| SystemParams::new(p[0], p[1]))
        .collect())
}

/// One constant-parameter interval of a schedule; `reset` requests a state
/// reset at the segment's first step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: u64,
    pub end: u64,
    pub params: SystemParams,
    pub reset: bool,
}

/// Piecewise-constant parameter trajectory over contiguous step intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSchedule {
    segments: Vec<Segment>,
}

impl ParamSchedule {
    pub fn new(segments: Vec<Segment>) -> Result<Self, DynamicsError> {
        if segments.is_empty() || segments[0].start != 1 {
            return Err(DynamicsError::MalformedSchedule);
        }
        for w in segments.windows(2) {
            if w[1].start != w[0].end + 1 {
                return Err(DynamicsError::MalformedSchedule);
            }
        }
        if segments.iter().any(|s| s.end < s.start) {
            return Err(DynamicsError::MalformedSchedule);
        }
        Ok(Self { segments })
    }

    pub fn constant(params: SystemParams, horizon: u64) -> Self {
        Self {
            segments: vec![Segment {
                start: 1,
                end: horizon,
                params,
                reset: true,
            }],
        }
    }

    /// The three-interval schedule of the varying-parameter experiment:
    /// ξ = [1.2, 0.0] on [1, 100], [0.2, 1.0] on [101, 200], [1.8, 2.0] on
    /// [201, 500], with a state reset at each interval start.
    pub fn abrupt_switches_default() -> Self {
        Self {
            segments: vec![
                Segment {
                    start: 1,
                    end: 100,
                    params: SystemParams::new(1.2, 0.0),
                    reset: true,
                },
                Segment {
                    start: 101,
                    end: 200,
                    params: SystemParams::new(0.2, 1.0),
                    reset: true,
                },
                Segment {
                    start: 201,
                    end: 500,
                    params: SystemParams::new(1.8, 2.0),
                    reset: true,
                },
            ],
        }
    }

    pub fn horizon(&self) -> u64 {
        self.segments.last().map(|s| s.end).unwrap_or(0)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Parameters active at step `t` (1-based) and whether the state resets
    /// at exactly this step.
    pub fn params_at(&self, t: u64) -> Result<(SystemParams, bool), DynamicsError> {
        self.segments
            .iter()
            .find(|s| t >= s.start && t <= s.end)
            .map(|s| (s.params, s.reset && t == s.start))
            .ok_or(DynamicsError::OutsideHorizon(t))
    }
}

/// Initial-state distribution ρ1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum InitMode {
    Fixed { x1: f64, x2: f64 },
    UniformAngle { low: f64, high: f64 },
}

pub fn sample_initial<R: Rng + ?Sized>(
    rng: &mut R,
    mode: InitMode,
) -> Result<State, DynamicsError> {
    match mode {
        InitMode::Fixed { x1, x2 } => Ok(State::new(x1, x2)),
        InitMode::UniformAngle { low, high } => {
            if low > high {
                return Err(DynamicsError::EmptyRange);
            }
            let x1 = if low == high {
                low
            } else {
                rng.gen_range(low..high)
            };
            Ok(State::new(x1, 0.0))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn pend() -> Pendulum {
        Pendulum::default()
    }

    #[test]
    fn step_fixed_points() {
        let p = pend();
        let xi = SystemParams::new(1.0, 1.0);
        let origin = p.step(State::new(0.0, 0.0), Action(0.0), xi).unwrap();
        assert_eq!(origin, State::new(0.0, 0.0));
        let down = p.step(State::new(PI, 0.0), Action(0.0), xi).unwrap();
        assert_eq!(down.x1, PI);
        // sin(pi) is ~1.2e-16, not exactly zero in f64; the velocity update
        // picks up delta * g * sin(pi) which is below 1e-16.
        assert!(down.x2.abs() < 1e-15);
    }

    #[test]
    fn step_hand_example() {
        let p = pend();
        let x = p
            .step(
                State::new(PI / 2.0, 0.0),
                Action(0.5),
                SystemParams::new(1.0, 1.0),
            )
            .unwrap();
        assert!((x.x1 - 1.570_796_3).abs() < 1e-7);
        assert!((x.x2 - 0.7405).abs() < 1e-12);
    }

    #[test]
    fn step_rejects_bad_input() {
        let p = pend();
        let xi = SystemParams::new(1.0, 1.0);
        assert!(p.step(State::new(f64::NAN, 0.0), Action(0.0), xi).is_err());
        assert!(p.step(State::new(0.0, 0.0), Action(1.5), xi).is_err());
    }

    #[test]
    fn reward_values() {
        let p = pend();
        assert_eq!(p.reward(State::new(0.0, 0.0), Action(0.0)), 0.0);
        assert_eq!(p.reward(State::new(1.0, 1.0), Action(1.0)), -11.1);
        assert!((p.reward(State::new(PI, 0.0), Action(0.0)) + PI * PI).abs() < 1e-12);
    }

    #[test]
    fn reward_nonpositive() {
        let p = pend();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let x = State::new(rng.gen_range(-4.0..4.0), rng.gen_range(-8.0..8.0));
            let a = Action(rng.gen_range(-1.0..1.0));
            assert!(p.reward(x, a) <= 0.0);
        }
    }

    #[test]
    fn default_grid_is_paper_grid() {
        let space = ParamSpace::pendulum_default();
        let grid = pendulum_grid(&space, &DEFAULT_GRID_OFFSETS, DEFAULT_GRID_STEP).unwrap();
        assert_eq!(grid.len(), 19 * 20);
        assert!((grid[0].xi1 - 0.15).abs() < 1e-12);
        assert!((grid[0].xi2 - 0.05).abs() < 1e-12);
        let last = grid.last().unwrap();
        assert!((last.xi1 - 1.95).abs() < 1e-12);
        assert!((last.xi2 - 1.95).abs() < 1e-12);
        // Sorted, duplicate-free, inside the space.
        for w in grid.windows(2) {
            assert!((w[0].xi1, w[0].xi2) < (w[1].xi1, w[1].xi2));
        }
        for p in &grid {
            assert!(space.contains(&p.as_array()));
        }
    }

    #[test]
    fn grid_small_cases() {
        let line = ParamSpace::new(vec![0.0], vec![1.0]).unwrap();
        let pts = param_grid(&line, &[0.5], 2.0).unwrap();
        assert_eq!(pts, vec![vec![0.5]]);

        let square = ParamSpace::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let pts = param_grid(&square, &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(
            pts,
            vec![
                vec![0.0, 0.0],
                vec![0.0, 1.0],
                vec![1.0, 0.0],
                vec![1.0, 1.0]
            ]
        );
    }

    #[test]
    fn grid_rejects_bad_spec() {
        let line = ParamSpace::new(vec![0.0], vec![1.0]).unwrap();
        assert!(param_grid(&line, &[0.5], 0.0).is_err());
        assert!(param_grid(&line, &[1.5], 0.1).is_err());
    }

    #[test]
    fn schedule_paper_values() {
        let s = ParamSchedule::abrupt_switches_default();
        let (xi, reset) = s.params_at(150).unwrap();
        assert_eq!(xi, SystemParams::new(0.2, 1.0));
        assert!(!reset);
        let (xi, reset) = s.params_at(201).unwrap();
        assert_eq!(xi, SystemParams::new(1.8, 2.0));
        assert!(reset);
        assert!(s.params_at(501).is_err());
        assert!(s.params_at(0).is_err());

        let resets: Vec<u64> = (1..=500)
            .filter(|t| s.params_at(*t).unwrap().1)
            .collect();
        assert_eq!(resets, vec![1, 101, 201]);
    }

    #[test]
    fn schedule_validation() {
        let bad = vec![
            Segment {
                start: 1,
                end: 10,
                params: SystemParams::new(1.0, 1.0),
                reset: true,
            },
            Segment {
                start: 12,
                end: 20,
                params: SystemParams::new(1.0, 1.0),
                reset: false,
            },
        ];
        assert!(ParamSchedule::new(bad).is_err());

        let constant = ParamSchedule::constant(SystemParams::new(0.3, 0.7), 50);
        for t in 1..=50 {
            assert_eq!(constant.params_at(t).unwrap().0, SystemParams::new(0.3, 0.7));
        }
    }

    #[test]
    fn initial_state_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = sample_initial(&mut rng, InitMode::Fixed { x1: PI, x2: 0.0 }).unwrap();
        assert_eq!(x, State::new(PI, 0.0));
        let x = sample_initial(&mut rng, InitMode::UniformAngle { low: PI, high: PI }).unwrap();
        assert_eq!(x, State::new(PI, 0.0));

        let mut a = ChaCha8Rng::seed_from_u64(42);
        let mut b = ChaCha8Rng::seed_from_u64(42);
        let mode = InitMode::UniformAngle {
            low: -PI,
            high: PI,
        };
        assert_eq!(
            sample_initial(&mut a, mode).unwrap(),
            sample_initial(&mut b, mode).unwrap()
        );
        assert!(sample_initial(&mut a, InitMode::UniformAngle { low: 1.0, high: 0.0 }).is_err());
    }
}
