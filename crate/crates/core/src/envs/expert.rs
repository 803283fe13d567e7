use nalgebra::{DMatrix, DVector};

use super::{lqr, EnvSpec, LinearSystemEnv};
use crate::agent::Actor;
use crate::error::{Error, Result};

/// Behaviour policy used to produce expert trajectories.
#[derive(Debug, Clone)]
pub enum ExpertPolicy {
    /// Infinite-horizon LQR feedback `u = -K (x - goal)`, clipped to the action box.
    Lqr {
        gain: DMatrix<f64>,
        goal: DVector<f64>,
        spec: EnvSpec,
    },
    /// Deterministic action of a delay-free SAC actor.
    Sac {
        actor: Box<Actor>,
        spec: EnvSpec,
        threshold: f64,
        achieved_return: f64,
    },
}

impl ExpertPolicy {
    pub fn lqr(env: &LinearSystemEnv) -> Result<Self> {
        use super::Environment;
        let gain = lqr::lqr_gain(&env.a, &env.b, &env.q, &env.r)?;
        Ok(Self::Lqr {
            gain,
            goal: env.goal.clone(),
            spec: env.spec().clone(),
        })
    }

    pub fn sac(actor: Actor, spec: EnvSpec, threshold: f64, achieved_return: f64) -> Self {
        Self::Sac {
            actor: Box::new(actor),
            spec,
            threshold,
            achieved_return,
        }
    }

    pub fn is_trained(&self) -> bool {
        match self {
            Self::Lqr { .. } => true,
            Self::Sac {
                threshold,
                achieved_return,
                ..
            } => achieved_return >= threshold,
        }
    }

    pub fn ensure_trained(&self) -> Result<()> {
        match self {
            Self::Sac {
                threshold,
                achieved_return,
                spec,
                ..
            } if achieved_return < threshold => Err(Error::State(format!(
                "{}: SAC expert reached return {achieved_return:.3}, below threshold {threshold:.3}",
                spec.name
            ))),
            _ => Ok(()),
        }
    }

    pub fn expert_action(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.ensure_trained()?;
        match self {
            Self::Lqr { gain, goal, spec } => {
                if state.len() != goal.len() {
                    return Err(Error::Shape(format!(
                        "lqr expert: state length {} != {}",
                        state.len(),
                        goal.len()
                    )));
                }
                let e = DVector::from_column_slice(state) - goal;
                let u = -(gain * e);
                spec.clip_action(u.as_slice())
            }
            Self::Sac { actor, spec, .. } => {
                let unit = actor.deterministic_unit(state)?;
                let u: Vec<f64> = unit
                    .iter()
                    .zip(spec.action_center().iter().zip(spec.action_scale()))
                    .map(|(x, (c, s))| c + s * x)
                    .collect();
                spec.clip_action(&u)
            }
        }
    }
}
