use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{check_not_done, EnvSpec, Environment, Transition};
use crate::error::{Error, Result};
use crate::util::{derive_seed, rng, Rng as SimRng};

/// Goal reaching for a planar point mass inside a walled arena.
///
/// Semi-implicit Euler with linear drag; speed is capped per axis and
/// positions are clamped to the arena, which makes the dynamics piecewise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PointMassConfig {
    pub mass: f64,
    pub dt: f64,
    pub drag: f64,
    pub max_speed: f64,
    pub arena: f64,
    pub force_limit: f64,
    pub goal: [f64; 2],
    pub action_cost: f64,
    pub init_position: [f64; 2],
    pub init_spread: f64,
    pub noise_std: f64,
    pub horizon: usize,
}

impl Default for PointMassConfig {
    fn default() -> Self {
        Self {
            mass: 1.0,
            dt: 0.1,
            drag: 0.5,
            max_speed: 1.0,
            arena: 2.0,
            force_limit: 1.0,
            goal: [1.0, 0.5],
            action_cost: 0.01,
            init_position: [-1.0, -0.5],
            init_spread: 0.5,
            noise_std: 0.0,
            horizon: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PointMassEnv {
    spec: EnvSpec,
    cfg: PointMassConfig,
    state: [f64; 4],
    t: usize,
    noise_rng: SimRng,
}

impl PointMassEnv {
    pub fn new(cfg: &PointMassConfig) -> Result<Self> {
        if !(cfg.dt > 0.0) || !(cfg.mass > 0.0) || !(cfg.max_speed > 0.0) || !(cfg.arena > 0.0) {
            return Err(Error::Config(
                "point mass: dt, mass, max_speed and arena must be > 0".into(),
            ));
        }
        if !(cfg.init_spread >= 0.0) || !(cfg.noise_std >= 0.0) {
            return Err(Error::Config(
                "point mass: init_spread and noise_std must be >= 0".into(),
            ));
        }
        let spec = EnvSpec {
            name: "point_mass".into(),
            state_dim: 4,
            action_dim: 2,
            action_low: vec![-cfg.force_limit; 2],
            action_high: vec![cfg.force_limit; 2],
            horizon: cfg.horizon,
        };
        spec.validate()?;
        Ok(Self {
            spec,
            cfg: cfg.clone(),
            state: [0.0; 4],
            t: 0,
            noise_rng: rng(0),
        })
    }

    /// `-‖p - goal‖² - c‖a‖²` on the pre-step state.
    pub fn reward(&self, state: &[f64; 4], action: &[f64]) -> f64 {
        let dx = state[0] - self.cfg.goal[0];
        let dy = state[1] - self.cfg.goal[1];
        -(dx * dx + dy * dy) - self.cfg.action_cost * action.iter().map(|a| a * a).sum::<f64>()
    }
}

impl Environment for PointMassEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut r = rng(seed);
        let spread = self.cfg.init_spread;
        let mut jitter = || {
            if spread > 0.0 {
                r.random_range(-spread..spread)
            } else {
                0.0
            }
        };
        let px = self.cfg.init_position[0] + jitter();
        let py = self.cfg.init_position[1] + jitter();
        self.state = [px, py, 0.0, 0.0];
        self.noise_rng = rng(derive_seed(seed, 1));
        self.t = 0;
        self.state.to_vec()
    }

    fn step(&mut self, action: &[f64]) -> Result<Transition> {
        check_not_done(&self.spec, self.t)?;
        let action = self.spec.clip_action(action)?;
        let c = &self.cfg;
        let s = self.state;
        let reward = self.reward(&s, &action);
        let mut next = [0.0; 4];
        for axis in 0..2 {
            let accel = action[axis] / c.mass - c.drag * s[2 + axis];
            let v = (s[2 + axis] + c.dt * accel).clamp(-c.max_speed, c.max_speed);
            let p = (s[axis] + c.dt * v).clamp(-c.arena, c.arena);
            next[axis] = p;
            next[2 + axis] = v;
        }
        if c.noise_std > 0.0 {
            let normal = Normal::new(0.0, c.noise_std).expect("valid std");
            for v in next.iter_mut() {
                *v += normal.sample(&mut self.noise_rng);
            }
        }
        self.state = next;
        self.t += 1;
        Ok(Transition {
            state: s.to_vec(),
            action,
            reward,
            next_state: next.to_vec(),
            done: self.t >= self.spec.horizon,
        })
    }

    fn state(&self) -> Vec<f64> {
        self.state.to_vec()
    }

    fn elapsed(&self) -> usize {
        self.t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn at_rest_with_zero_action_stays_put() {
        let mut env = PointMassEnv::new(&PointMassConfig::default()).unwrap();
        let s0 = env.reset(4);
        let tr = env.step(&[0.0, 0.0]).unwrap();
        assert_eq!(tr.next_state, s0);
    }

    #[test]
    fn zero_spread_starts_at_documented_position() {
        let cfg = PointMassConfig {
            init_spread: 0.0,
            ..Default::default()
        };
        let mut env = PointMassEnv::new(&cfg).unwrap();
        assert_eq!(env.reset(1), vec![-1.0, -0.5, 0.0, 0.0]);
        assert_eq!(env.reset(99), vec![-1.0, -0.5, 0.0, 0.0]);
    }

    #[test]
    fn speed_and_position_are_capped() {
        let mut env = PointMassEnv::new(&PointMassConfig::default()).unwrap();
        env.reset(0);
        for _ in 0..200 {
            let tr = env.step(&[1.0, 1.0]).unwrap();
            assert!(tr.next_state[2] <= 1.0 && tr.next_state[0] <= 2.0);
        }
    }
}
