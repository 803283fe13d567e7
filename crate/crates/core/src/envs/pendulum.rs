use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{check_not_done, EnvSpec, Environment, Transition};
use crate::error::{Error, Result};
use crate::util::{derive_seed, rng, Rng as SimRng};

/// Torque-limited swing-up. The angle is measured from upright.
///
/// Observation `(cos θ, sin θ, θ̇)`; update (semi-implicit Euler):
///
/// - `θ̇' = clip(θ̇ + (3g/(2l)·sin θ + 3/(m l²)·u)·dt, ±max_speed)`
/// - `θ' = θ + θ̇'·dt`
///
/// Reward `-(norm(θ)² + 0.1 θ̇² + 0.001 u²)` on the pre-step state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PendulumConfig {
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
    pub dt: f64,
    pub max_speed: f64,
    pub max_torque: f64,
    pub init_speed: f64,
    pub noise_std: f64,
    pub horizon: usize,
}

impl Default for PendulumConfig {
    fn default() -> Self {
        Self {
            gravity: 10.0,
            mass: 1.0,
            length: 1.0,
            dt: 0.05,
            max_speed: 8.0,
            max_torque: 2.0,
            init_speed: 1.0,
            noise_std: 0.0,
            horizon: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PendulumEnv {
    spec: EnvSpec,
    cfg: PendulumConfig,
    theta: f64,
    theta_dot: f64,
    t: usize,
    noise_rng: SimRng,
}

/// Wraps an angle into `[-π, π)`.
pub fn normalize_angle(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

impl PendulumEnv {
    pub fn new(cfg: &PendulumConfig) -> Result<Self> {
        if !(cfg.dt > 0.0) || !(cfg.mass > 0.0) || !(cfg.length > 0.0) || !(cfg.max_speed > 0.0) {
            return Err(Error::Config(
                "pendulum: dt, mass, length and max_speed must be > 0".into(),
            ));
        }
        if !(cfg.noise_std >= 0.0) || !(cfg.init_speed >= 0.0) {
            return Err(Error::Config(
                "pendulum: init_speed and noise_std must be >= 0".into(),
            ));
        }
        let spec = EnvSpec {
            name: "pendulum".into(),
            state_dim: 3,
            action_dim: 1,
            action_low: vec![-cfg.max_torque],
            action_high: vec![cfg.max_torque],
            horizon: cfg.horizon,
        };
        spec.validate()?;
        Ok(Self {
            spec,
            cfg: cfg.clone(),
            theta: 0.0,
            theta_dot: 0.0,
            t: 0,
            noise_rng: rng(0),
        })
    }

    pub fn angle(&self) -> f64 {
        self.theta
    }

    pub fn angular_velocity(&self) -> f64 {
        self.theta_dot
    }

    /// Sets the internal `(θ, θ̇)` directly.
    pub fn set_physical_state(&mut self, theta: f64, theta_dot: f64) {
        self.theta = theta;
        self.theta_dot = theta_dot;
    }

    fn observe(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta_dot]
    }
}

impl Environment for PendulumEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut r = rng(seed);
        self.theta = r.random_range(-PI..=PI);
        let v = self.cfg.init_speed;
        self.theta_dot = if v > 0.0 { r.random_range(-v..=v) } else { 0.0 };
        self.noise_rng = rng(derive_seed(seed, 1));
        self.t = 0;
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<Transition> {
        check_not_done(&self.spec, self.t)?;
        let action = self.spec.clip_action(action)?;
        let c = &self.cfg;
        let u = action[0];
        let state = self.observe();
        let th = self.theta;
        let thdot = self.theta_dot;
        let reward = -(normalize_angle(th).powi(2) + 0.1 * thdot * thdot + 0.001 * u * u);
        let accel = 3.0 * c.gravity / (2.0 * c.length) * th.sin()
            + 3.0 / (c.mass * c.length * c.length) * u;
        let mut new_thdot = (thdot + accel * c.dt).clamp(-c.max_speed, c.max_speed);
        if c.noise_std > 0.0 {
            new_thdot += Normal::new(0.0, c.noise_std)
                .expect("valid std")
                .sample(&mut self.noise_rng);
        }
        self.theta = th + new_thdot * c.dt;
        self.theta_dot = new_thdot;
        self.t += 1;
        Ok(Transition {
            state,
            action,
            reward,
            next_state: self.observe(),
            done: self.t >= self.spec.horizon,
        })
    }

    fn state(&self) -> Vec<f64> {
        self.observe()
    }

    fn elapsed(&self) -> usize {
        self.t
    }
}
