//! Deterministic desk-scale continuous-control environments.
//!
//! Environments are plain values: `step` is a pure function of the state
//! and action, and `reset` is a pure function of the seed. Both
//! environments report a ground-truth reward in `[0, 1]`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("unknown environment `{0}` (expected `point-mass` or `pendulum`)")]
    UnknownEnv(String),
    #[error("action has {actual} dimensions, environment expects {expected}")]
    ActionDim { expected: usize, actual: usize },
    #[error("state has {actual} dimensions, environment expects {expected}")]
    StateDim { expected: usize, actual: usize },
    #[error("non-finite action component {index}: {value}")]
    NonFiniteAction { index: usize, value: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    PointMass,
    Pendulum,
}

/// Static description of an environment, dumped into run manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub episode_len: usize,
    /// Control interval in seconds.
    pub dt: f64,
    /// Integration substeps per control interval.
    pub substeps: usize,
    pub constants: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    /// Ground-truth reward of the state the action was taken in.
    pub reward_true: f64,
    /// Whether the action had to be clamped into bounds.
    pub clamped: bool,
}

/// 2D drawing primitive in world coordinates (y up).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Circle {
        x: f64,
        y: f64,
        radius: f64,
        color: String,
    },
    Segment {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        width: f64,
        color: String,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Env {
    kind: EnvKind,
    spec: EnvSpec,
}

// Point mass: 2D double integrator with linear drag in the box [-1, 1]².
const PM_DT: f64 = 0.1;
const PM_FORCE: f64 = 1.0;
const PM_DRAG: f64 = 0.5;
const PM_GOAL: [f64; 2] = [0.5, 0.5];
const PM_HALF_WIDTH: f64 = 1.0;

// Pendulum: angle measured from upright, unit mass and length.
const PEND_DT: f64 = 0.05;
const PEND_SUBSTEPS: usize = 10;
const PEND_GRAVITY: f64 = 10.0;
const PEND_LENGTH: f64 = 1.0;
const PEND_MASS: f64 = 1.0;
const PEND_MAX_TORQUE: f64 = 2.0;
const PEND_MAX_SPEED: f64 = 8.0;

const EPISODE_LEN: usize = 200;

impl Env {
    pub fn point_mass() -> Self {
        let constants = BTreeMap::from([
            ("force".to_string(), PM_FORCE),
            ("drag".to_string(), PM_DRAG),
            ("goal_x".to_string(), PM_GOAL[0]),
            ("goal_y".to_string(), PM_GOAL[1]),
            ("half_width".to_string(), PM_HALF_WIDTH),
        ]);
        Self {
            kind: EnvKind::PointMass,
            spec: EnvSpec {
                name: "point-mass".into(),
                state_dim: 4,
                action_dim: 2,
                action_low: vec![-1.0; 2],
                action_high: vec![1.0; 2],
                episode_len: EPISODE_LEN,
                dt: PM_DT,
                substeps: 1,
                constants,
            },
        }
    }

    pub fn pendulum() -> Self {
        Self::pendulum_with_damping(0.0)
    }

    /// Pendulum with viscous damping `−damping·ω` added to the angular
    /// acceleration.
    pub fn pendulum_with_damping(damping: f64) -> Self {
        let constants = BTreeMap::from([
            ("gravity".to_string(), PEND_GRAVITY),
            ("length".to_string(), PEND_LENGTH),
            ("mass".to_string(), PEND_MASS),
            ("max_speed".to_string(), PEND_MAX_SPEED),
            ("damping".to_string(), damping),
        ]);
        Self {
            kind: EnvKind::Pendulum,
            spec: EnvSpec {
                name: "pendulum".into(),
                state_dim: 3,
                action_dim: 1,
                action_low: vec![-PEND_MAX_TORQUE],
                action_high: vec![PEND_MAX_TORQUE],
                episode_len: EPISODE_LEN,
                dt: PEND_DT,
                substeps: PEND_SUBSTEPS,
                constants,
            },
        }
    }

    pub fn from_name(name: &str) -> Result<Self, EnvError> {
        match name {
            "point-mass" => Ok(Self::point_mass()),
            "pendulum" => Ok(Self::pendulum()),
            other => Err(EnvError::UnknownEnv(other.to_string())),
        }
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    /// Overrides the episode length (in steps).
    pub fn with_episode_len(mut self, steps: usize) -> Self {
        self.spec.episode_len = steps;
        self
    }

    fn constant(&self, key: &str) -> f64 {
        self.spec.constants[key]
    }

    /// Initial state drawn from the environment's start distribution.
    pub fn reset(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self.kind {
            EnvKind::PointMass => {
                let w = self.constant("half_width");
                vec![rng.random_range(-w..=w), rng.random_range(-w..=w), 0.0, 0.0]
            }
            EnvKind::Pendulum => {
                let theta: f64 = rng.random_range(-PI..PI);
                let omega: f64 = rng.random_range(-1.0..1.0);
                vec![theta.cos(), theta.sin(), omega]
            }
        }
    }

    /// Ground-truth reward of a state, in `[0, 1]`.
    pub fn reward(&self, state: &[f64]) -> f64 {
        match self.kind {
            EnvKind::PointMass => {
                let goal = [self.constant("goal_x"), self.constant("goal_y")];
                let dist = ((state[0] - goal[0]).powi(2) + (state[1] - goal[1]).powi(2)).sqrt();
                // Largest possible distance inside the box is its diagonal.
                let max_dist = 2.0 * self.constant("half_width") * 2f64.sqrt();
                (1.0 - dist / max_dist).clamp(0.0, 1.0)
            }
            EnvKind::Pendulum => (1.0 + state[0]) / 2.0,
        }
    }

    /// Advances one control interval.
    pub fn step(&self, state: &[f64], action: &[f64]) -> Result<StepOutcome, EnvError> {
        if state.len() != self.spec.state_dim {
            return Err(EnvError::StateDim {
                expected: self.spec.state_dim,
                actual: state.len(),
            });
        }
        if action.len() != self.spec.action_dim {
            return Err(EnvError::ActionDim {
                expected: self.spec.action_dim,
                actual: action.len(),
            });
        }
        if let Some((index, &value)) = action.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(EnvError::NonFiniteAction { index, value });
        }
        let mut clamped = false;
        let action: Vec<f64> = action
            .iter()
            .zip(self.spec.action_low.iter().zip(&self.spec.action_high))
            .map(|(&a, (&lo, &hi))| {
                let c = a.clamp(lo, hi);
                clamped |= c != a;
                c
            })
            .collect();
        let reward_true = self.reward(state);
        let next_state = match self.kind {
            EnvKind::PointMass => self.point_mass_step(state, &action),
            EnvKind::Pendulum => self.pendulum_step(state, action[0]),
        };
        Ok(StepOutcome {
            next_state,
            reward_true,
            clamped,
        })
    }

    /// Semi-implicit Euler: velocity first, then position with the new
    /// velocity. Hitting a wall stops motion along that axis.
    fn point_mass_step(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        let (force, drag, w) = (
            self.constant("force"),
            self.constant("drag"),
            self.constant("half_width"),
        );
        let dt = self.spec.dt;
        let mut next = vec![0.0; 4];
        for axis in 0..2 {
            let mut v = state[2 + axis] + dt * (force * action[axis] - drag * state[2 + axis]);
            let mut p = state[axis] + dt * v;
            if p > w || p < -w {
                p = p.clamp(-w, w);
                v = 0.0;
            }
            next[axis] = p;
            next[2 + axis] = v;
        }
        next
    }

    /// Angular acceleration with θ measured from upright.
    fn pendulum_accel(&self, theta: f64, omega: f64, torque: f64) -> f64 {
        let (g, l, m) = (
            self.constant("gravity"),
            self.constant("length"),
            self.constant("mass"),
        );
        g / l * theta.sin() + torque / (m * l * l) - self.constant("damping") * omega
    }

    /// Fixed substeps of fourth-order Yoshida composition of
    /// Störmer–Verlet (kick-drift-kick); symplectic, so energy stays
    /// bounded without torque or damping.
    fn pendulum_step(&self, state: &[f64], torque: f64) -> Vec<f64> {
        let cbrt2 = 2f64.powf(1.0 / 3.0);
        let w1 = 1.0 / (2.0 - cbrt2);
        let w0 = -cbrt2 / (2.0 - cbrt2);
        let h = self.spec.dt / self.spec.substeps as f64;
        let mut theta = state[1].atan2(state[0]);
        let mut omega = state[2];
        for _ in 0..self.spec.substeps {
            for w in [w1, w0, w1] {
                let hh = w * h;
                omega += 0.5 * hh * self.pendulum_accel(theta, omega, torque);
                theta += hh * omega;
                omega += 0.5 * hh * self.pendulum_accel(theta, omega, torque);
            }
        }
        let max_speed = self.constant("max_speed");
        omega = omega.clamp(-max_speed, max_speed);
        vec![theta.cos(), theta.sin(), omega]
    }

    /// Total mechanical energy per unit `m·l²` for a pendulum state.
    pub fn pendulum_energy(&self, state: &[f64]) -> f64 {
        let g_over_l = self.constant("gravity") / self.constant("length");
        0.5 * state[2] * state[2] + g_over_l * state[0]
    }

    /// Drawing of a state for the labelling UI.
    pub fn render_frame(&self, state: &[f64]) -> Vec<Primitive> {
        match self.kind {
            EnvKind::PointMass => vec![
                Primitive::Circle {
                    x: self.constant("goal_x"),
                    y: self.constant("goal_y"),
                    radius: 0.08,
                    color: "#2ca02c".into(),
                },
                Primitive::Circle {
                    x: state[0],
                    y: state[1],
                    radius: 0.05,
                    color: "#1f77b4".into(),
                },
            ],
            EnvKind::Pendulum => {
                let l = self.constant("length");
                // state = (cos θ, sin θ, ω), θ = 0 points straight up.
                let (x1, y1) = (l * state[1], l * state[0]);
                vec![
                    Primitive::Segment {
                        x0: 0.0,
                        y0: 0.0,
                        x1,
                        y1,
                        width: 0.05,
                        color: "#444444".into(),
                    },
                    Primitive::Circle {
                        x: x1,
                        y: y1,
                        radius: 0.1,
                        color: "#d62728".into(),
                    },
                ]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_is_deterministic_per_seed() {
        for env in [Env::point_mass(), Env::pendulum()] {
            assert_eq!(env.reset(42), env.reset(42));
            assert_ne!(env.reset(42), env.reset(43));
        }
    }

    #[test]
    fn point_mass_reset_in_box_at_rest() {
        let env = Env::point_mass();
        for seed in 0..100 {
            let s = env.reset(seed);
            assert!(s[0].abs() <= 1.0 && s[1].abs() <= 1.0);
            assert_eq!(&s[2..], &[0.0, 0.0]);
        }
    }

    #[test]
    fn point_mass_reset_mean_near_origin() {
        let env = Env::point_mass();
        let n = 1000;
        let (mut sx, mut sy) = (0.0, 0.0);
        for seed in 0..n {
            let s = env.reset(seed);
            sx += s[0];
            sy += s[1];
        }
        assert!((sx / n as f64).abs() < 0.1);
        assert!((sy / n as f64).abs() < 0.1);
    }

    #[test]
    fn goal_with_zero_action_pays_one() {
        let env = Env::point_mass();
        let out = env.step(&[0.5, 0.5, 0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(out.reward_true, 1.0);
        assert_eq!(out.next_state, vec![0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn zero_action_from_rest_keeps_position() {
        let env = Env::point_mass();
        let s = [-0.3, 0.8, 0.0, 0.0];
        let out = env.step(&s, &[0.0, 0.0]).unwrap();
        assert_eq!(&out.next_state[..2], &s[..2]);
    }

    #[test]
    fn out_of_bounds_actions_are_clamped_and_flagged() {
        let env = Env::point_mass();
        let s = [0.0, 0.0, 0.0, 0.0];
        let a = env.step(&s, &[3.0, 0.0]).unwrap();
        let b = env.step(&s, &[1.0, 0.0]).unwrap();
        assert!(a.clamped && !b.clamped);
        assert_eq!(a.next_state, b.next_state);
    }

    #[test]
    fn non_finite_action_is_an_error() {
        let env = Env::pendulum();
        let err = env.step(&env.reset(0), &[f64::NAN]).unwrap_err();
        assert!(matches!(err, EnvError::NonFiniteAction { index: 0, .. }));
    }

    #[test]
    fn walls_stop_motion() {
        let env = Env::point_mass();
        let out = env.step(&[0.99, 0.0, 1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(out.next_state[0], 1.0);
        assert_eq!(out.next_state[2], 0.0);
    }

    #[test]
    fn rewards_stay_in_unit_interval() {
        let pm = Env::point_mass();
        for s in [[-1.0, -1.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0], [0.5, 0.5, 0.0, 0.0]] {
            let r = pm.reward(&s);
            assert!((0.0..=1.0).contains(&r));
        }
        let p = Env::pendulum();
        assert_eq!(p.reward(&[1.0, 0.0, 0.0]), 1.0);
        assert_eq!(p.reward(&[-1.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn render_shapes() {
        let pm = Env::point_mass();
        let frame = pm.render_frame(&[0.1, 0.2, 0.0, 0.0]);
        let circles = frame
            .iter()
            .filter(|p| matches!(p, Primitive::Circle { .. }))
            .count();
        assert_eq!((frame.len(), circles), (2, 2));
        assert_eq!(frame, pm.render_frame(&[0.1, 0.2, 0.0, 0.0]));

        let pend = Env::pendulum();
        let frame = pend.render_frame(&[1.0, 0.0, 0.0]);
        match &frame[0] {
            Primitive::Segment { x0, y0, x1, y1, .. } => {
                assert_eq!((*x0, *y0), (0.0, 0.0));
                assert_eq!((*x1, *y1), (0.0, 1.0));
            }
            other => panic!("expected rod segment, got {other:?}"),
        }
    }

    #[test]
    fn unknown_name_is_rejected() {
        assert!(Env::from_name("point-mass").is_ok());
        assert_eq!(
            Env::from_name("walker"),
            Err(EnvError::UnknownEnv("walker".into()))
        );
    }
}
