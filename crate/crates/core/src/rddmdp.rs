//! Random-dropping delayed MDP wrapper.
//!
//! At every step the agent is scheduled to receive the state generated `d_I`
//! steps ago. With probability `μ` that delivery is dropped and the agent's
//! lag `z` grows by one, saturating at `d_I + d_M`. The agent acts on an
//! information state: the last delivered state plus every action issued since.
//! `μ = 0` gives a constant delay of `d_I`; `d_I = 0` (with `d_M = 0`, `μ = 0`)
//! is a pass-through with no delay at all.
//!
//! Time is counted in true environment steps. `reset` applies the configured
//! initial actions blind for the first `d_I` steps and returns the first
//! information state at time `t = d_I`, which always carries `s_0`. After the
//! wrapped environment reaches its horizon the wrapper keeps delivering the
//! queued states (never dropped) until `s_H` has been delivered, so an
//! episode always has exactly `H` agent decisions.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{Environment, Transition};
use crate::error::{Error, Result};
use crate::util::{derive_seed, rng, Rng as SimRng};

/// Actions applied blind before the first observation arrives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitialActions {
    #[default]
    Zeros,
    /// Uniform within the action bounds, from the process seed.
    Random,
    Explicit(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayConfig {
    /// `d_I`
    pub intrinsic: usize,
    /// `d_M`
    pub max_extra: usize,
    /// `μ`
    pub drop_prob: f64,
    #[serde(default)]
    pub initial_actions: InitialActions,
    #[serde(default)]
    pub seed: u64,
}

impl DelayConfig {
    pub fn constant(delay: usize) -> Self {
        Self {
            intrinsic: delay,
            max_extra: 0,
            drop_prob: 0.0,
            initial_actions: InitialActions::Zeros,
            seed: 0,
        }
    }

    pub fn random(intrinsic: usize, max_extra: usize, drop_prob: f64) -> Self {
        Self {
            intrinsic,
            max_extra,
            drop_prob,
            initial_actions: InitialActions::Zeros,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// `D = d_I + d_M`.
    pub fn max_delay(&self) -> usize {
        self.intrinsic + self.max_extra
    }

    pub fn is_passthrough(&self) -> bool {
        self.intrinsic == 0
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::Config(format!(
                "drop probability {} not in [0, 1)",
                self.drop_prob
            )));
        }
        if self.intrinsic == 0 && (self.max_extra != 0 || self.drop_prob != 0.0) {
            return Err(Error::Config(
                "intrinsic delay 0 is only valid as a pass-through (d_M = 0, μ = 0)".into(),
            ));
        }
        if let InitialActions::Explicit(list) = &self.initial_actions {
            if list.len() != self.intrinsic {
                return Err(Error::Config(format!(
                    "{} initial actions given for intrinsic delay {}",
                    list.len(),
                    self.intrinsic
                )));
            }
        }
        Ok(())
    }

    /// Short stable label, e.g. `const_d2` or `rand_di2_dm4_mu0.2`.
    pub fn tag(&self) -> String {
        if self.max_extra == 0 && self.drop_prob == 0.0 {
            format!("const_d{}", self.intrinsic)
        } else {
            format!(
                "rand_di{}_dm{}_mu{}",
                self.intrinsic, self.max_extra, self.drop_prob
            )
        }
    }
}

/// Latest delivered state plus the actions issued after it, oldest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InformationState {
    pub base_state: Vec<f64>,
    pub actions: Vec<Vec<f64>>,
    pub z: usize,
}

impl InformationState {
    /// `(s, a_1, …, a_z)` flattened, zero-padded to `max_actions` actions.
    pub fn flatten_padded(&self, max_actions: usize, action_dim: usize) -> Result<Vec<f64>> {
        if self.actions.len() > max_actions {
            return Err(Error::Shape(format!(
                "information state with {} actions exceeds capacity {max_actions}",
                self.actions.len()
            )));
        }
        let mut out = Vec::with_capacity(self.base_state.len() + max_actions * action_dim);
        out.extend_from_slice(&self.base_state);
        for a in &self.actions {
            if a.len() != action_dim {
                return Err(Error::Shape(format!(
                    "action length {} != {action_dim}",
                    a.len()
                )));
            }
            out.extend_from_slice(a);
        }
        out.resize(self.base_state.len() + max_actions * action_dim, 0.0);
        Ok(out)
    }
}

/// What reached the agent at the current step.
#[derive(Debug, Clone, PartialEq)]
pub enum Delivery {
    /// The scheduled state `s_{t - d_I}` arrived.
    Fresh(Vec<f64>),
    Dropped,
}

/// Next lag value given whether this step's delivery was dropped.
pub fn update_z(z_prev: usize, dropped: bool, cfg: &DelayConfig) -> Result<usize> {
    let cap = cfg.max_delay();
    if z_prev < cfg.intrinsic || z_prev > cap {
        return Err(Error::State(format!(
            "lag {z_prev} outside [{}, {cap}]",
            cfg.intrinsic
        )));
    }
    Ok(if !dropped {
        cfg.intrinsic
    } else if z_prev < cap {
        z_prev + 1
    } else {
        cap
    })
}

/// Next information state from the previous one and the action just taken.
///
/// - fresh delivery: the new state with the last `d_I` actions;
/// - dropped below the cap: previous state, `a_prev` appended;
/// - dropped at the cap: previous state, action window slid to the latest
///   `d_I + d_M` actions.
pub fn build_information_state(
    prev: &InformationState,
    a_prev: &[f64],
    delivery: Delivery,
    cfg: &DelayConfig,
) -> Result<InformationState> {
    if prev.actions.len() != prev.z {
        return Err(Error::State(format!(
            "information state has {} actions but lag {}",
            prev.actions.len(),
            prev.z
        )));
    }
    let dropped = matches!(delivery, Delivery::Dropped);
    let z = update_z(prev.z, dropped, cfg)?;
    let available = prev.actions.len() + 1;
    if available < z {
        return Err(Error::State(format!(
            "action history underflow: need {z}, have {available}"
        )));
    }
    let tail = |n: usize| -> Vec<Vec<f64>> {
        prev.actions
            .iter()
            .map(|a| a.as_slice())
            .chain(std::iter::once(a_prev))
            .skip(available - n)
            .map(|a| a.to_vec())
            .collect()
    };
    let (base_state, actions) = match delivery {
        Delivery::Fresh(state) => (state, tail(z)),
        Delivery::Dropped => (prev.base_state.clone(), tail(z)),
    };
    Ok(InformationState {
        base_state,
        actions,
        z,
    })
}

/// Source of the per-step drop indicators `ω_t`.
#[derive(Debug, Clone)]
pub enum DropSource {
    Bernoulli,
    /// `ω` indexed by true time step; missing entries mean "delivered".
    Scripted(Vec<bool>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub info: InformationState,
    pub reward: f64,
    pub done: bool,
    pub dropped: bool,
}

/// One line of the trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub omega: u8,
    pub z: usize,
    pub base_state: Vec<f64>,
    pub actions: Vec<Vec<f64>>,
    pub delivered_reward: f64,
}

pub fn write_trace<W: Write>(mut w: W, records: &[TraceRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace<R: BufRead>(r: R) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// A delay-free environment wrapped as a random-dropping delayed process.
#[derive(Debug, Clone)]
pub struct DelayProcess<E: Environment> {
    cfg: DelayConfig,
    env: E,
    drops: DropSource,
    drop_rng: SimRng,
    init_rng: SimRng,
    episode: u64,
    // True-time history of the current episode.
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    t: usize,
    info: Option<InformationState>,
    last_reward: f64,
    done: bool,
    delivered_return: f64,
    trace: Option<Vec<TraceRecord>>,
}

impl<E: Environment> DelayProcess<E> {
    pub fn new(env: E, cfg: DelayConfig, drops: DropSource) -> Result<Self> {
        cfg.validate()?;
        if let InitialActions::Explicit(list) = &cfg.initial_actions {
            if list.iter().any(|a| a.len() != env.spec().action_dim) {
                return Err(Error::Config("initial action length mismatch".into()));
            }
        }
        if cfg.max_delay() > env.spec().horizon {
            return Err(Error::Config(format!(
                "maximum delay {} exceeds horizon {}",
                cfg.max_delay(),
                env.spec().horizon
            )));
        }
        let drop_rng = rng(derive_seed(cfg.seed, 0xD50B));
        let init_rng = rng(derive_seed(cfg.seed, 0x1417));
        Ok(Self {
            cfg,
            env,
            drops,
            drop_rng,
            init_rng,
            episode: 0,
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            t: 0,
            info: None,
            last_reward: 0.0,
            done: false,
            delivered_return: 0.0,
            trace: None,
        })
    }

    pub fn bernoulli(env: E, cfg: DelayConfig) -> Result<Self> {
        Self::new(env, cfg, DropSource::Bernoulli)
    }

    pub fn config(&self) -> &DelayConfig {
        &self.cfg
    }

    pub fn env(&self) -> &E {
        &self.env
    }

    /// Starts recording [`TraceRecord`]s (cleared on every reset).
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn trace(&self) -> Option<&[TraceRecord]> {
        self.trace.as_deref()
    }

    /// Resets with the next episode seed derived from the process seed.
    pub fn reset(&mut self) -> Result<InformationState> {
        let seed = derive_seed(self.cfg.seed, self.episode);
        self.reset_with_seed(seed)
    }

    pub fn reset_with_seed(&mut self, env_seed: u64) -> Result<InformationState> {
        self.episode += 1;
        let s0 = self.env.reset(env_seed);
        self.states = vec![s0.clone()];
        self.actions.clear();
        self.rewards.clear();
        let spec = self.env.spec().clone();
        let initial: Vec<Vec<f64>> = match &self.cfg.initial_actions {
            InitialActions::Zeros => vec![vec![0.0; spec.action_dim]; self.cfg.intrinsic],
            InitialActions::Random => (0..self.cfg.intrinsic)
                .map(|_| {
                    (0..spec.action_dim)
                        .map(|i| {
                            self.init_rng
                                .random_range(spec.action_low[i]..spec.action_high[i])
                        })
                        .collect()
                })
                .collect(),
            InitialActions::Explicit(list) => list.clone(),
        };
        for c in &initial {
            let tr = self.env.step(c)?;
            self.record_env_step(tr);
        }
        self.t = self.cfg.intrinsic;
        let info = InformationState {
            base_state: s0,
            actions: self.actions.clone(),
            z: self.cfg.intrinsic,
        };
        self.info = Some(info.clone());
        self.last_reward = 0.0;
        self.done = false;
        self.delivered_return = 0.0;
        if let Some(trace) = &mut self.trace {
            trace.clear();
            trace.push(TraceRecord {
                t: self.t,
                omega: 0,
                z: info.z,
                base_state: info.base_state.clone(),
                actions: info.actions.clone(),
                delivered_reward: 0.0,
            });
        }
        Ok(info)
    }

    fn record_env_step(&mut self, tr: Transition) {
        self.actions.push(tr.action);
        self.rewards.push(tr.reward);
        self.states.push(tr.next_state);
    }

    fn next_drop(&mut self, t: usize) -> bool {
        match &self.drops {
            DropSource::Bernoulli => {
                let u: f64 = self.drop_rng.random();
                u < self.cfg.drop_prob
            }
            DropSource::Scripted(omega) => omega.get(t).copied().unwrap_or(false),
        }
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::State("step after episode end; call reset".into()));
        }
        let prev = self
            .info
            .take()
            .ok_or_else(|| Error::State("step before reset".into()))?;
        let horizon = self.env.spec().horizon;
        let action = self.env.spec().clip_action(action)?;
        if self.t < horizon {
            let tr = self.env.step(&action)?;
            self.record_env_step(tr);
        } else {
            self.actions.push(action.clone());
        }
        self.t += 1;
        let t = self.t;
        let d_i = self.cfg.intrinsic;
        let dropped = if t > horizon {
            false
        } else {
            self.next_drop(t)
        };
        let delivery = if dropped {
            Delivery::Dropped
        } else {
            Delivery::Fresh(self.states[t - d_i].clone())
        };
        let info = build_information_state(&prev, &action, delivery, &self.cfg)?;
        let reward = if dropped {
            self.last_reward
        } else {
            self.rewards[t - 1 - d_i]
        };
        self.last_reward = reward;
        self.delivered_return += reward;
        self.done = !dropped && t - d_i == horizon;
        if let Some(trace) = &mut self.trace {
            trace.push(TraceRecord {
                t,
                omega: dropped as u8,
                z: info.z,
                base_state: info.base_state.clone(),
                actions: info.actions.clone(),
                delivered_reward: reward,
            });
        }
        self.info = Some(info.clone());
        Ok(StepOutcome {
            info,
            reward,
            done: self.done,
            dropped,
        })
    }

    pub fn info(&self) -> Option<&InformationState> {
        self.info.as_ref()
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// True time (actions issued so far this episode, including blind ones).
    pub fn time(&self) -> usize {
        self.t
    }

    /// Sum of the wrapped environment's rewards so far this episode.
    pub fn true_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Sum of rewards delivered to the agent so far this episode.
    pub fn delivered_return(&self) -> f64 {
        self.delivered_return
    }

    /// True states `s_0 … s_t` of the current episode.
    pub fn true_states(&self) -> &[Vec<f64>] {
        &self.states
    }

    /// Every action issued this episode, by true time.
    pub fn issued_actions(&self) -> &[Vec<f64>] {
        &self.actions
    }

    /// Delay-free transitions actually executed by the environment.
    pub fn true_transitions(&self) -> Vec<Transition> {
        let horizon = self.env.spec().horizon;
        (0..self.rewards.len())
            .map(|i| Transition {
                state: self.states[i].clone(),
                action: self.actions[i].clone(),
                reward: self.rewards[i],
                next_state: self.states[i + 1].clone(),
                done: i + 1 == horizon,
            })
            .collect()
    }
}
