//! Toy continuous-control environments with seeded stochastic resets, early
//! termination, and an action-defect wrapper.
//!
//! Two tasks are provided. `pointmass2d` is a damped point mass on the plane
//! steered toward the goal (1, 1); leaving the ±3 box ends the episode with a
//! −100 penalty. `pendulum` is the classic torque-limited swing-up. Both use
//! dt = 0.05 and a fixed maximum episode length. The dynamics core is a pure
//! function of (state, action); all stochasticity lives in `reset`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Errors from environment misuse.
#[derive(Debug, Error)]
pub enum EnvError {
    /// `step` was called on an episode whose terminated flag is set.
    #[error("cannot step a terminated episode (step index {step_index})")]
    AlreadyTerminated {
        /// Step index at which the episode had terminated.
        step_index: usize,
    },
    /// A spec or argument violated an invariant.
    #[error("invalid environment usage: {0}")]
    Invalid(String),
}

/// Which toy task an `EnvSpec` describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvName {
    /// Damped point mass on the plane, goal at (1, 1).
    Pointmass2d,
    /// Torque-limited pendulum swing-up.
    Pendulum,
}

impl EnvName {
    /// Canonical lowercase name used in manifests and on the command line.
    pub fn as_str(self) -> &'static str {
        match self {
            EnvName::Pointmass2d => "pointmass2d",
            EnvName::Pendulum => "pendulum",
        }
    }

    /// Parses the canonical name.
    pub fn parse(s: &str) -> Result<Self, EnvError> {
        match s {
            "pointmass2d" => Ok(EnvName::Pointmass2d),
            "pendulum" => Ok(EnvName::Pendulum),
            other => Err(EnvError::Invalid(format!("unknown environment {other:?}"))),
        }
    }
}

impl std::fmt::Display for EnvName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Static description of an environment: dimensions, bounds, and timing.
#[derive(Debug, Clone)]
pub struct EnvSpec {
    /// Task identity.
    pub name: EnvName,
    /// State vector length.
    pub state_dim: usize,
    /// Action vector length.
    pub action_dim: usize,
    /// Per-dimension (low, high) action bounds.
    pub action_bounds: Vec<(f64, f64)>,
    /// Integration step in seconds.
    pub dt: f64,
    /// Episodes terminate after this many steps.
    pub max_episode_len: usize,
    /// True for state coordinates that are velocities.
    pub velocity_mask: Vec<bool>,
}

impl EnvSpec {
    /// The damped point mass task.
    pub fn pointmass2d() -> Self {
        EnvSpec {
            name: EnvName::Pointmass2d,
            state_dim: 4,
            action_dim: 2,
            action_bounds: vec![(-1.0, 1.0), (-1.0, 1.0)],
            dt: 0.05,
            max_episode_len: 200,
            velocity_mask: vec![false, false, true, true],
        }
    }

    /// The pendulum swing-up task.
    pub fn pendulum() -> Self {
        EnvSpec {
            name: EnvName::Pendulum,
            state_dim: 2,
            action_dim: 1,
            action_bounds: vec![(-2.0, 2.0)],
            dt: 0.05,
            max_episode_len: 200,
            velocity_mask: vec![false, true],
        }
    }

    /// Spec for a canonical name.
    pub fn for_name(name: EnvName) -> Self {
        match name {
            EnvName::Pointmass2d => EnvSpec::pointmass2d(),
            EnvName::Pendulum => EnvSpec::pendulum(),
        }
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.action_bounds.len() != self.action_dim {
            return Err(EnvError::Invalid(format!(
                "{} action bounds for action dim {}",
                self.action_bounds.len(),
                self.action_dim
            )));
        }
        for (i, (lo, hi)) in self.action_bounds.iter().enumerate() {
            if !(lo < hi) {
                return Err(EnvError::Invalid(format!("action bound {i} has low {lo} >= high {hi}")));
            }
        }
        if !(self.dt > 0.0) {
            return Err(EnvError::Invalid(format!("dt {} must be positive", self.dt)));
        }
        if self.velocity_mask.len() != self.state_dim {
            return Err(EnvError::Invalid(format!(
                "velocity mask length {} does not match state dim {}",
                self.velocity_mask.len(),
                self.state_dim
            )));
        }
        Ok(())
    }

    /// Clamps an action into the per-dimension bounds.
    pub fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(&self.action_bounds)
            .map(|(a, (lo, hi))| a.clamp(*lo, *hi))
            .collect()
    }
}

/// A single episode's mutable state.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    /// Current state vector.
    pub state: Vec<f64>,
    /// Number of steps taken so far.
    pub step_index: usize,
    /// Set when the episode has ended (boundary exit or max length).
    pub terminated: bool,
}

/// Everything `step` produces.
///
/// `reward` includes the −100 boundary penalty when `terminated_early` is
/// set; `raw_reward` never does. Dataset generation records `raw_reward`
/// alongside the early-termination flag so return computations can apply the
/// penalty themselves exactly once.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// State after the transition.
    pub state: EnvState,
    /// Reward for this step, penalty included.
    pub reward: f64,
    /// Reward before any termination penalty.
    pub raw_reward: f64,
    /// Episode over (either cause).
    pub terminated: bool,
    /// Episode ended by leaving the valid region, not by the step limit.
    pub terminated_early: bool,
}

const POINTMASS_DRAG: f64 = 0.1;
const POINTMASS_GOAL: (f64, f64) = (1.0, 1.0);
const POINTMASS_BOX: f64 = 3.0;
const TERMINATION_PENALTY: f64 = 100.0;
const RESET_NOISE: f64 = 5e-4;
const PENDULUM_G: f64 = 10.0;
const PENDULUM_M: f64 = 1.0;
const PENDULUM_L: f64 = 1.0;
const PENDULUM_MAX_SPEED: f64 = 8.0;

/// The deterministic pre-noise reset state.
fn reset_core(spec: &EnvSpec) -> Vec<f64> {
    match spec.name {
        EnvName::Pointmass2d => vec![0.0; 4],
        EnvName::Pendulum => vec![std::f64::consts::PI, 0.0],
    }
}

/// Starts a fresh episode. Deterministic per seed.
pub fn reset(spec: &EnvSpec, seed: u64) -> EnvState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = reset_core(spec);
    match spec.name {
        EnvName::Pointmass2d => {
            for v in state.iter_mut() {
                *v += rng.gen_range(-RESET_NOISE..=RESET_NOISE);
            }
        }
        EnvName::Pendulum => {
            state[0] += rng.gen_range(-0.1..=0.1);
        }
    }
    EnvState { state, step_index: 0, terminated: false }
}

/// Wraps an angle into [−π, π).
fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    (theta + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI
}

/// Advances one step. Out-of-bounds actions are clipped, not rejected.
/// Pure in (state, action): repeated calls give identical outcomes.
pub fn step(spec: &EnvSpec, state: &EnvState, action: &[f64]) -> Result<StepOutcome, EnvError> {
    if state.terminated {
        return Err(EnvError::AlreadyTerminated { step_index: state.step_index });
    }
    if action.len() != spec.action_dim {
        return Err(EnvError::Invalid(format!(
            "action has {} dims, expected {}",
            action.len(),
            spec.action_dim
        )));
    }
    let a = spec.clip_action(action);
    let dt = spec.dt;
    let (next, raw_reward, out_of_bounds) = match spec.name {
        EnvName::Pointmass2d => {
            let (px, py, vx, vy) = (state.state[0], state.state[1], state.state[2], state.state[3]);
            let vx2 = vx + dt * (a[0] - POINTMASS_DRAG * vx);
            let vy2 = vy + dt * (a[1] - POINTMASS_DRAG * vy);
            let px2 = px + dt * vx2;
            let py2 = py + dt * vy2;
            let d2 = (px2 - POINTMASS_GOAL.0).powi(2) + (py2 - POINTMASS_GOAL.1).powi(2);
            let reward = (-d2 / 0.5).exp();
            let out = px2.abs() > POINTMASS_BOX || py2.abs() > POINTMASS_BOX;
            (vec![px2, py2, vx2, vy2], reward, out)
        }
        EnvName::Pendulum => {
            let (theta, theta_dot) = (state.state[0], state.state[1]);
            let u = a[0];
            let accel = (3.0 * PENDULUM_G / (2.0 * PENDULUM_L)) * theta.sin()
                + (3.0 / (PENDULUM_M * PENDULUM_L * PENDULUM_L)) * u;
            let theta_dot2 =
                (theta_dot + dt * accel).clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
            let theta2 = theta + dt * theta_dot2;
            let w = wrap_angle(theta2);
            let reward = -(w * w + 0.1 * theta_dot2 * theta_dot2 + 0.001 * u * u);
            (vec![theta2, theta_dot2], reward, false)
        }
    };
    let step_index = state.step_index + 1;
    let timeout = step_index >= spec.max_episode_len;
    let terminated = out_of_bounds || timeout;
    let reward = if out_of_bounds { raw_reward - TERMINATION_PENALTY } else { raw_reward };
    Ok(StepOutcome {
        state: EnvState { state: next, step_index, terminated },
        reward,
        raw_reward,
        terminated,
        terminated_early: out_of_bounds,
    })
}

/// An action defect: one action dimension is clipped to a fraction of its
/// legal range before reaching the environment.
#[derive(Debug, Clone, Copy)]
pub struct DefectSpec {
    /// Index of the affected action dimension.
    pub dim: usize,
    /// Fraction ρ ∈ (0, 1] of the original range that survives.
    pub fraction: f64,
}

impl DefectSpec {
    /// Checks the defect against an environment.
    pub fn validate(&self, spec: &EnvSpec) -> Result<(), EnvError> {
        if self.dim >= spec.action_dim {
            return Err(EnvError::Invalid(format!(
                "defect dim {} out of range for action dim {}",
                self.dim, spec.action_dim
            )));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(EnvError::Invalid(format!(
                "defect fraction {} must lie in (0, 1]",
                self.fraction
            )));
        }
        Ok(())
    }
}

/// Clips dimension `j` of the action to ρ·[low_j, high_j]; other dims pass
/// through unchanged.
pub fn apply_defect(defect: &DefectSpec, spec: &EnvSpec, action: &[f64]) -> Vec<f64> {
    let mut out = action.to_vec();
    if let Some(&(lo, hi)) = spec.action_bounds.get(defect.dim) {
        out[defect.dim] = out[defect.dim].clamp(defect.fraction * lo, defect.fraction * hi);
    }
    out
}

/// An environment whose actuator is degraded by a `DefectSpec`.
#[derive(Debug, Clone)]
pub struct DefectiveEnv {
    /// The underlying task.
    pub spec: EnvSpec,
    /// The actuator defect.
    pub defect: DefectSpec,
}

impl DefectiveEnv {
    /// Steps the underlying environment through the defect.
    pub fn step(&self, state: &EnvState, action: &[f64]) -> Result<StepOutcome, EnvError> {
        let degraded = apply_defect(&self.defect, &self.spec, action);
        step(&self.spec, state, &degraded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reset_core_is_origin_for_pointmass() {
        assert_eq!(reset_core(&EnvSpec::pointmass2d()), vec![0.0; 4]);
    }

    #[test]
    fn reset_is_deterministic_and_noise_bounded() {
        let spec = EnvSpec::pointmass2d();
        let a = reset(&spec, 17);
        let b = reset(&spec, 17);
        assert_eq!(a, b);
        for v in &a.state {
            assert!(v.abs() <= RESET_NOISE, "reset coord {v} beyond noise bound");
        }
        let c = reset(&spec, 18);
        assert_ne!(a, c, "different seeds should perturb the reset");
    }

    #[test]
    fn pendulum_reset_angle_stays_near_pi() {
        let spec = EnvSpec::pendulum();
        for seed in 0..1000 {
            let s = reset(&spec, seed);
            let theta = s.state[0];
            assert!(
                (std::f64::consts::PI - 0.1..=std::f64::consts::PI + 0.1).contains(&theta),
                "seed {seed}: theta {theta}"
            );
            assert_eq!(s.state[1], 0.0);
        }
    }

    #[test]
    fn pointmass_rest_with_zero_action_stays_put() {
        let spec = EnvSpec::pointmass2d();
        let at_rest = EnvState { state: vec![0.0; 4], step_index: 0, terminated: false };
        let out = step(&spec, &at_rest, &[0.0, 0.0]).unwrap();
        assert_eq!(out.state.state, vec![0.0; 4]);
        assert!(!out.terminated);
    }

    #[test]
    fn pendulum_upright_equilibrium() {
        let spec = EnvSpec::pendulum();
        let s = EnvState {
            state: vec![std::f64::consts::PI, 0.0],
            step_index: 0,
            terminated: false,
        };
        let out = step(&spec, &s, &[0.0]).unwrap();
        // sin(pi) is ~1e-16, so the angle moves by at most dt²·(3g/2)·sin(pi).
        assert!((out.state.state[0] - std::f64::consts::PI).abs() < 1e-15);
    }

    #[test]
    fn pointmass_single_step_hand_evaluated() {
        let spec = EnvSpec::pointmass2d();
        let at_rest = EnvState { state: vec![0.0; 4], step_index: 0, terminated: false };
        let out = step(&spec, &at_rest, &[1.0, 0.0]).unwrap();
        assert_eq!(out.state.state[2], 0.05);
        assert_eq!(out.state.state[3], 0.0);
        assert!((out.state.state[0] - 0.0025).abs() < 1e-15);
        assert_eq!(out.state.state[1], 0.0);
    }

    #[test]
    fn stepping_terminated_episode_is_an_error() {
        let spec = EnvSpec::pointmass2d();
        let done = EnvState { state: vec![0.0; 4], step_index: 5, terminated: true };
        let err = step(&spec, &done, &[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, EnvError::AlreadyTerminated { step_index: 5 }));
    }

    #[test]
    fn boundary_exit_terminates_with_penalty() {
        let spec = EnvSpec::pointmass2d();
        // Moving fast enough that one step crosses the +3 wall.
        let s = EnvState { state: vec![2.999, 0.0, 80.0, 0.0], step_index: 0, terminated: false };
        let out = step(&spec, &s, &[0.0, 0.0]).unwrap();
        assert!(out.terminated && out.terminated_early);
        assert!(out.reward < -99.0, "penalised reward {}", out.reward);
        assert!(out.raw_reward > 0.0 && out.raw_reward <= 1.0);
        assert_eq!(out.reward, out.raw_reward - 100.0);
    }

    #[test]
    fn max_length_terminates_without_penalty() {
        let spec = EnvSpec::pendulum();
        let mut s = reset(&spec, 3);
        let mut last = None;
        while !s.terminated {
            let out = step(&spec, &s, &[0.0]).unwrap();
            s = out.state.clone();
            last = Some(out);
        }
        let last = last.unwrap();
        assert_eq!(s.step_index, spec.max_episode_len);
        assert!(!last.terminated_early);
        assert_eq!(last.reward, last.raw_reward);
    }

    #[test]
    fn defect_clips_only_the_chosen_dim() {
        let spec = EnvSpec::pointmass2d();
        let defect = DefectSpec { dim: 0, fraction: 0.5 };
        defect.validate(&spec).unwrap();
        assert_eq!(apply_defect(&defect, &spec, &[0.9, 0.9]), vec![0.5, 0.9]);
        assert_eq!(apply_defect(&defect, &spec, &[0.3, 0.9]), vec![0.3, 0.9]);
        assert_eq!(apply_defect(&defect, &spec, &[-0.9, 0.9]), vec![-0.5, 0.9]);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = EnvSpec::pointmass2d();
        spec.velocity_mask.pop();
        assert!(spec.validate().is_err());
        let spec = EnvSpec::pointmass2d();
        assert!(DefectSpec { dim: 2, fraction: 0.5 }.validate(&spec).is_err());
        assert!(DefectSpec { dim: 0, fraction: 0.0 }.validate(&spec).is_err());
        assert!(DefectSpec { dim: 0, fraction: 1.5 }.validate(&spec).is_err());
    }

    proptest! {
        #[test]
        fn zero_action_speed_non_increasing(
            px in -2.0f64..2.0, py in -2.0f64..2.0,
            vx in -3.0f64..3.0, vy in -3.0f64..3.0,
        ) {
            let spec = EnvSpec::pointmass2d();
            let s = EnvState { state: vec![px, py, vx, vy], step_index: 0, terminated: false };
            let out = step(&spec, &s, &[0.0, 0.0]).unwrap();
            let before = (vx * vx + vy * vy).sqrt();
            let after = (out.state.state[2].powi(2) + out.state.state[3].powi(2)).sqrt();
            prop_assert!(after <= before + 1e-12);
        }

        #[test]
        fn step_is_pure(
            px in -2.0f64..2.0, py in -2.0f64..2.0,
            vx in -3.0f64..3.0, vy in -3.0f64..3.0,
            ax in -1.0f64..1.0, ay in -1.0f64..1.0,
        ) {
            let spec = EnvSpec::pointmass2d();
            let s = EnvState { state: vec![px, py, vx, vy], step_index: 0, terminated: false };
            let a = step(&spec, &s, &[ax, ay]).unwrap();
            let b = step(&spec, &s, &[ax, ay]).unwrap();
            prop_assert_eq!(a.state.state, b.state.state);
            prop_assert_eq!(a.reward, b.reward);
        }

        #[test]
        fn defect_composes_with_step(
            ax in -1.5f64..1.5, ay in -1.5f64..1.5, frac in 0.1f64..1.0,
        ) {
            let spec = EnvSpec::pointmass2d();
            let defect = DefectSpec { dim: 1, fraction: frac };
            let s = reset(&spec, 9);
            let via_fn = step(&spec, &s, &apply_defect(&defect, &spec, &[ax, ay])).unwrap();
            let via_env = DefectiveEnv { spec: spec.clone(), defect }.step(&s, &[ax, ay]).unwrap();
            prop_assert_eq!(via_fn.state.state, via_env.state.state);
            prop_assert_eq!(via_fn.reward, via_env.reward);
        }

        #[test]
        fn identity_defect_changes_nothing(ax in -1.0f64..1.0, ay in -1.0f64..1.0) {
            let spec = EnvSpec::pointmass2d();
            let defect = DefectSpec { dim: 0, fraction: 1.0 };
            prop_assert_eq!(apply_defect(&defect, &spec, &[ax, ay]), vec![ax, ay]);
        }

        #[test]
        fn pointmass_reward_in_unit_interval_unless_penalised(
            px in -2.9f64..2.9, py in -2.9f64..2.9,
            vx in -1.0f64..1.0, vy in -1.0f64..1.0,
            ax in -1.0f64..1.0, ay in -1.0f64..1.0,
        ) {
            let spec = EnvSpec::pointmass2d();
            let s = EnvState { state: vec![px, py, vx, vy], step_index: 0, terminated: false };
            let out = step(&spec, &s, &[ax, ay]).unwrap();
            prop_assert!(out.raw_reward > 0.0 && out.raw_reward <= 1.0);
            if !out.terminated_early {
                prop_assert_eq!(out.reward, out.raw_reward);
            } else {
                prop_assert_eq!(out.reward, out.raw_reward - 100.0);
            }
        }

        #[test]
        fn pendulum_reward_non_positive(
            theta in -6.0f64..6.0, theta_dot in -8.0f64..8.0, u in -2.0f64..2.0,
        ) {
            let spec = EnvSpec::pendulum();
            let s = EnvState { state: vec![theta, theta_dot], step_index: 0, terminated: false };
            let out = step(&spec, &s, &[u]).unwrap();
            prop_assert!(out.reward <= 0.0);
        }

        #[test]
        fn out_of_bounds_actions_are_clipped(scale in 1.0f64..10.0) {
            let spec = EnvSpec::pointmass2d();
            let s = reset(&spec, 4);
            let big = step(&spec, &s, &[scale, -scale]).unwrap();
            let clipped = step(&spec, &s, &[1.0, -1.0]).unwrap();
            prop_assert_eq!(big.state.state, clipped.state.state);
        }
    }
}
