//! Closed-form, delay-free environments and their expert controllers.

mod expert;
pub(crate) mod linear;
pub mod lqr;
mod pendulum;
mod point_mass;

use serde::{Deserialize, Serialize};

pub use expert::ExpertPolicy;
pub use linear::{LinearSystemConfig, LinearSystemEnv};
pub use pendulum::{PendulumConfig, PendulumEnv};
pub use point_mass::{PointMassConfig, PointMassEnv};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub horizon: usize,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config(format!("{}: horizon must be > 0", self.name)));
        }
        if self.action_low.len() != self.action_dim || self.action_high.len() != self.action_dim {
            return Err(Error::Config(format!(
                "{}: action bounds length",
                self.name
            )));
        }
        for (lo, hi) in self.action_low.iter().zip(&self.action_high) {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::Config(format!(
                    "{}: bad action bound [{lo}, {hi}]",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// Midpoint of the action box.
    pub fn action_center(&self) -> Vec<f64> {
        self.action_low
            .iter()
            .zip(&self.action_high)
            .map(|(l, h)| 0.5 * (l + h))
            .collect()
    }

    /// Half-width of the action box.
    pub fn action_scale(&self) -> Vec<f64> {
        self.action_low
            .iter()
            .zip(&self.action_high)
            .map(|(l, h)| 0.5 * (h - l))
            .collect()
    }

    /// Validates length and finiteness, then clips into the box.
    pub fn clip_action(&self, action: &[f64]) -> Result<Vec<f64>> {
        if action.len() != self.action_dim {
            return Err(Error::Shape(format!(
                "{}: action length {} != {}",
                self.name,
                action.len(),
                self.action_dim
            )));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{}: action {action:?}",
                self.name
            )));
        }
        Ok(action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(a, (l, h))| a.clamp(*l, *h))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// A delay-free episodic environment. Episodes end only at the horizon.
pub trait Environment {
    fn spec(&self) -> &EnvSpec;

    /// Starts a new episode; the initial state is a pure function of `seed`.
    fn reset(&mut self, seed: u64) -> Vec<f64>;

    /// Advances one step with the (clipped) action.
    fn step(&mut self, action: &[f64]) -> Result<Transition>;

    fn state(&self) -> Vec<f64>;

    /// Steps taken in the current episode.
    fn elapsed(&self) -> usize;
}

/// Serializable environment selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    LinearSystem(LinearSystemConfig),
    PointMass(PointMassConfig),
    Pendulum(PendulumConfig),
}

impl EnvConfig {
    pub fn build(&self) -> Result<AnyEnv> {
        Ok(match self {
            EnvConfig::LinearSystem(c) => AnyEnv::LinearSystem(LinearSystemEnv::new(c)?),
            EnvConfig::PointMass(c) => AnyEnv::PointMass(PointMassEnv::new(c)?),
            EnvConfig::Pendulum(c) => AnyEnv::Pendulum(PendulumEnv::new(c)?),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::LinearSystem(_) => "linear_system",
            EnvConfig::PointMass(_) => "point_mass",
            EnvConfig::Pendulum(_) => "pendulum",
        }
    }
}

/// Any of the built-in environments.
#[derive(Debug, Clone)]
pub enum AnyEnv {
    LinearSystem(LinearSystemEnv),
    PointMass(PointMassEnv),
    Pendulum(PendulumEnv),
}

macro_rules! delegate {
    ($self:ident, $e:ident => $body:expr) => {
        match $self {
            AnyEnv::LinearSystem($e) => $body,
            AnyEnv::PointMass($e) => $body,
            AnyEnv::Pendulum($e) => $body,
        }
    };
}

impl Environment for AnyEnv {
    fn spec(&self) -> &EnvSpec {
        delegate!(self, e => e.spec())
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        delegate!(self, e => e.reset(seed))
    }

    fn step(&mut self, action: &[f64]) -> Result<Transition> {
        delegate!(self, e => e.step(action))
    }

    fn state(&self) -> Vec<f64> {
        delegate!(self, e => e.state())
    }

    fn elapsed(&self) -> usize {
        delegate!(self, e => e.elapsed())
    }
}

pub(crate) fn check_not_done(spec: &EnvSpec, t: usize) -> Result<()> {
    if t >= spec.horizon {
        return Err(Error::State(format!(
            "{}: step after horizon {}",
            spec.name, spec.horizon
        )));
    }
    Ok(())
}
