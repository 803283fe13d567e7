use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{check_not_done, EnvSpec, Environment, Transition};
use crate::error::{Error, Result};
use crate::util::{derive_seed, rng, Rng as SimRng};

/// Planar damped double integrator: state `(px, py, vx, vy)`, action
/// acceleration `(ax, ay)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearSystemConfig {
    pub dt: f64,
    pub velocity_damping: f64,
    pub noise_std: f64,
    pub state_cost: f64,
    pub action_cost: f64,
    pub init_range: f64,
    pub action_limit: f64,
    pub horizon: usize,
}

impl Default for LinearSystemConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            velocity_damping: 0.95,
            noise_std: 0.0,
            state_cost: 0.01,
            action_cost: 0.001,
            init_range: 1.0,
            action_limit: 1.0,
            horizon: 200,
        }
    }
}

/// `x' = A x + B u + σ ε`, reward `-(x - g)ᵀ Q (x - g) - uᵀ R u`.
#[derive(Debug, Clone)]
pub struct LinearSystemEnv {
    spec: EnvSpec,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub goal: DVector<f64>,
    noise_std: f64,
    init_range: f64,
    state: DVector<f64>,
    t: usize,
    noise_rng: SimRng,
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

impl LinearSystemEnv {
    pub fn new(cfg: &LinearSystemConfig) -> Result<Self> {
        let dt = cfg.dt;
        let rho = cfg.velocity_damping;
        let a = DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, 0.0, dt, 0.0, //
                0.0, 1.0, 0.0, dt, //
                0.0, 0.0, rho, 0.0, //
                0.0, 0.0, 0.0, rho,
            ],
        );
        let h = 0.5 * dt * dt;
        let b = DMatrix::from_row_slice(4, 2, &[h, 0.0, 0.0, h, dt, 0.0, 0.0, dt]);
        let q = DMatrix::identity(4, 4) * cfg.state_cost;
        let r = DMatrix::identity(2, 2) * cfg.action_cost;
        let spec = EnvSpec {
            name: "linear_system".into(),
            state_dim: 4,
            action_dim: 2,
            action_low: vec![-cfg.action_limit; 2],
            action_high: vec![cfg.action_limit; 2],
            horizon: cfg.horizon,
        };
        Self::from_matrices(
            spec,
            a,
            b,
            q,
            r,
            DVector::zeros(4),
            cfg.noise_std,
            cfg.init_range,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_matrices(
        spec: EnvSpec,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        goal: DVector<f64>,
        noise_std: f64,
        init_range: f64,
    ) -> Result<Self> {
        spec.validate()?;
        let n = spec.state_dim;
        let m = spec.action_dim;
        if a.shape() != (n, n)
            || b.shape() != (n, m)
            || q.shape() != (n, n)
            || r.shape() != (m, m)
            || goal.len() != n
        {
            return Err(Error::Config("linear system: matrix shapes".into()));
        }
        if !(noise_std >= 0.0) || !(init_range >= 0.0) {
            return Err(Error::Config(
                "linear system: noise_std and init_range must be >= 0".into(),
            ));
        }
        let radius = spectral_radius(&a);
        if radius > 1.05 {
            return Err(Error::Config(format!(
                "linear system: spectral radius {radius} > 1.05"
            )));
        }
        Ok(Self {
            spec,
            a,
            b,
            q,
            r,
            goal,
            noise_std,
            init_range,
            state: DVector::zeros(n),
            t: 0,
            noise_rng: rng(0),
        })
    }

    pub fn reward(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let e = x - &self.goal;
        -((e.transpose() * &self.q * &e)[(0, 0)] + (u.transpose() * &self.r * u)[(0, 0)])
    }
}

impl Environment for LinearSystemEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut r = rng(seed);
        let range = self.init_range;
        self.state = DVector::from_fn(self.spec.state_dim, |_, _| {
            if range > 0.0 {
                r.random_range(-range..range)
            } else {
                0.0
            }
        });
        self.noise_rng = rng(derive_seed(seed, 1));
        self.t = 0;
        self.state.as_slice().to_vec()
    }

    fn step(&mut self, action: &[f64]) -> Result<Transition> {
        check_not_done(&self.spec, self.t)?;
        let action = self.spec.clip_action(action)?;
        let u = DVector::from_column_slice(&action);
        let reward = self.reward(&self.state, &u);
        let mut next = &self.a * &self.state + &self.b * &u;
        if self.noise_std > 0.0 {
            let normal = Normal::new(0.0, self.noise_std).expect("valid std");
            for v in next.iter_mut() {
                *v += normal.sample(&mut self.noise_rng);
            }
        }
        let state = std::mem::replace(&mut self.state, next);
        self.t += 1;
        Ok(Transition {
            state: state.as_slice().to_vec(),
            action,
            reward,
            next_state: self.state.as_slice().to_vec(),
            done: self.t >= self.spec.horizon,
        })
    }

    fn state(&self) -> Vec<f64> {
        self.state.as_slice().to_vec()
    }

    fn elapsed(&self) -> usize {
        self.t
    }
}
