//! Delay-free trajectory collection and padded supervised samples.
//!
//! A sample anchored at position `t` with delay `d` pairs the state `s_t` and
//! the actions `a_t … a_{t+d-1}` (zero-padded to `D`) with the label states
//! `s_{t+1} … s_{t+d}`. Samples index into the trajectory store instead of
//! copying it.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{EnvConfig, EnvSpec, Environment, ExpertPolicy, Transition};
use crate::error::{Error, Result};
use crate::nncore::{checkpoint, Param};
use crate::util::{derive_seed, rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Random,
    Expert,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub provenance: Provenance,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// `s_t` for `t` in `0..=len`.
    pub fn state(&self, t: usize) -> &[f64] {
        if t == self.transitions.len() {
            &self.transitions[t - 1].next_state
        } else {
            &self.transitions[t].state
        }
    }

    pub fn action(&self, t: usize) -> &[f64] {
        &self.transitions[t].action
    }

    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }

    /// Every `next_state` equals the following transition's `state`.
    pub fn is_chained(&self) -> bool {
        self.transitions
            .windows(2)
            .all(|w| w[0].next_state == w[1].state)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStore {
    pub spec: EnvSpec,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryStore {
    pub fn new(spec: EnvSpec) -> Self {
        Self {
            spec,
            trajectories: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn count(&self, provenance: Provenance) -> usize {
        self.trajectories
            .iter()
            .filter(|t| t.provenance == provenance)
            .count()
    }

    pub fn extend(&mut self, other: TrajectoryStore) -> Result<()> {
        if other.spec != self.spec {
            return Err(Error::Config(
                "merging stores of different environments".into(),
            ));
        }
        self.trajectories.extend(other.trajectories);
        Ok(())
    }

    /// Per-dimension mean and standard deviation over every visited state.
    pub fn state_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let dim = self.spec.state_dim;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut n = 0.0;
        for traj in &self.trajectories {
            for t in 0..=traj.len() {
                for (i, v) in traj.state(t).iter().enumerate() {
                    sum[i] += v;
                    sq[i] += v * v;
                }
                n += 1.0;
            }
        }
        if n == 0.0 {
            return (vec![0.0; dim], vec![1.0; dim]);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        (mean, std)
    }
}

/// Behaviour policy used during collection.
#[derive(Debug, Clone, Copy)]
pub enum CollectPolicy<'a> {
    Random,
    Expert(&'a ExpertPolicy),
}

/// Collects `n` full-horizon trajectories; trajectory `i` uses seed
/// `derive_seed(seed, i)` for both the reset and any random actions.
pub fn collect(
    env_cfg: &EnvConfig,
    policy: CollectPolicy<'_>,
    n: usize,
    seed: u64,
) -> Result<TrajectoryStore> {
    let spec = env_cfg.build()?.spec().clone();
    let provenance = match policy {
        CollectPolicy::Random => Provenance::Random,
        CollectPolicy::Expert(p) => {
            p.ensure_trained()?;
            Provenance::Expert
        }
    };
    let trajectories: Result<Vec<Trajectory>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let traj_seed = derive_seed(seed, i as u64);
            let mut env = env_cfg.build()?;
            let mut action_rng = rng(derive_seed(traj_seed, 7));
            let mut state = env.reset(traj_seed);
            let mut transitions = Vec::with_capacity(spec.horizon);
            loop {
                let action = match policy {
                    CollectPolicy::Random => (0..spec.action_dim)
                        .map(|k| action_rng.random_range(spec.action_low[k]..spec.action_high[k]))
                        .collect(),
                    CollectPolicy::Expert(p) => p.expert_action(&state)?,
                };
                let tr = env.step(&action)?;
                state = tr.next_state.clone();
                let done = tr.done;
                transitions.push(tr);
                if done {
                    break;
                }
            }
            Ok(Trajectory {
                transitions,
                provenance,
            })
        })
        .collect();
    Ok(TrajectoryStore {
        spec,
        trajectories: trajectories?,
    })
}

/// Index of one supervised sample inside a [`TrajectoryStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub trajectory: usize,
    pub start: usize,
    /// Real delay `d` (number of real actions and labels).
    pub delay: usize,
    /// Padded length `D`.
    pub max_delay: usize,
}

/// A sample with its padded blocks materialised.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedSample {
    pub anchor_state: Vec<f64>,
    /// `D` actions; entries past `d` are zero.
    pub actions: Vec<Vec<f64>>,
    /// `D` states; entries past `d` are zero and masked out.
    pub labels: Vec<Vec<f64>>,
    pub mask: Vec<f64>,
    pub delay: usize,
}

impl TrainingSample {
    pub fn anchor_state<'s>(&self, store: &'s TrajectoryStore) -> &'s [f64] {
        store.trajectories[self.trajectory].state(self.start)
    }

    /// The `d` real actions.
    pub fn real_actions<'s>(&self, store: &'s TrajectoryStore) -> Vec<&'s [f64]> {
        let traj = &store.trajectories[self.trajectory];
        (0..self.delay)
            .map(|i| traj.action(self.start + i))
            .collect()
    }

    /// The `d` label states.
    pub fn real_labels<'s>(&self, store: &'s TrajectoryStore) -> Vec<&'s [f64]> {
        let traj = &store.trajectories[self.trajectory];
        (1..=self.delay)
            .map(|i| traj.state(self.start + i))
            .collect()
    }

    pub fn materialize(&self, store: &TrajectoryStore) -> PaddedSample {
        let s_dim = store.spec.state_dim;
        let a_dim = store.spec.action_dim;
        let mut actions: Vec<Vec<f64>> = self
            .real_actions(store)
            .into_iter()
            .map(<[f64]>::to_vec)
            .collect();
        let mut labels: Vec<Vec<f64>> = self
            .real_labels(store)
            .into_iter()
            .map(<[f64]>::to_vec)
            .collect();
        actions.resize(self.max_delay, vec![0.0; a_dim]);
        labels.resize(self.max_delay, vec![0.0; s_dim]);
        let mask = (0..self.max_delay)
            .map(|i| if i < self.delay { 1.0 } else { 0.0 })
            .collect();
        PaddedSample {
            anchor_state: self.anchor_state(store).to_vec(),
            actions,
            labels,
            mask,
            delay: self.delay,
        }
    }

    pub fn provenance(&self, store: &TrajectoryStore) -> Provenance {
        store.trajectories[self.trajectory].provenance
    }
}

/// Every `(trajectory, t, d)` with `d ∈ delay_set` whose labels exist.
/// Positions too close to the end for a delay are skipped.
pub fn make_samples(
    store: &TrajectoryStore,
    max_delay: usize,
    delay_set: &[usize],
) -> Result<Vec<TrainingSample>> {
    if max_delay == 0 {
        return Err(Error::Config("maximum delay D must be >= 1".into()));
    }
    if let Some(bad) = delay_set.iter().find(|d| **d == 0 || **d > max_delay) {
        return Err(Error::Config(format!(
            "delay {bad} outside [1, {max_delay}]"
        )));
    }
    let mut delays = delay_set.to_vec();
    delays.sort_unstable();
    delays.dedup();
    let mut out = Vec::new();
    for (ti, traj) in store.trajectories.iter().enumerate() {
        for start in 0..traj.len() {
            for &d in &delays {
                if start + d <= traj.len() {
                    out.push(TrainingSample {
                        trajectory: ti,
                        start,
                        delay: d,
                        max_delay,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Seeded shuffle into `(train, test)` with `round(ratio · n)` training samples.
pub fn split<T: Clone>(samples: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} not in (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut rng(seed));
    let n_train = (ratio * samples.len() as f64).round() as usize;
    let train = idx[..n_train].iter().map(|&i| samples[i].clone()).collect();
    let test = idx[n_train..].iter().map(|&i| samples[i].clone()).collect();
    Ok((train, test))
}

/// On-disk dataset: the trajectories plus the sampling parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub env: EnvConfig,
    pub store: TrajectoryStore,
    pub max_delay: usize,
    pub delay_set: Vec<usize>,
    pub config_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    kind: String,
    format_version: u32,
    config_hash: String,
    env: EnvConfig,
    spec: EnvSpec,
    max_delay: usize,
    delay_set: Vec<usize>,
    provenance: Vec<Provenance>,
    lengths: Vec<usize>,
}

impl DatasetFile {
    pub fn samples(&self) -> Result<Vec<TrainingSample>> {
        make_samples(&self.store, self.max_delay, &self.delay_set)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let spec = &self.store.spec;
        let steps: usize = self.store.trajectories.iter().map(Trajectory::len).sum();
        let mut states = Array2::zeros((steps + self.store.len(), spec.state_dim));
        let mut actions = Array2::zeros((steps, spec.action_dim));
        let mut rewards = Array2::zeros((steps, 1));
        let (mut si, mut ai) = (0, 0);
        for traj in &self.store.trajectories {
            for t in 0..=traj.len() {
                for (k, v) in traj.state(t).iter().enumerate() {
                    states[[si, k]] = *v;
                }
                si += 1;
            }
            for tr in &traj.transitions {
                for (k, v) in tr.action.iter().enumerate() {
                    actions[[ai, k]] = *v;
                }
                rewards[[ai, 0]] = tr.reward;
                ai += 1;
            }
        }
        let meta = DatasetMeta {
            kind: "dataset".into(),
            format_version: 1,
            config_hash: self.config_hash.clone(),
            env: self.env.clone(),
            spec: spec.clone(),
            max_delay: self.max_delay,
            delay_set: self.delay_set.clone(),
            provenance: self
                .store
                .trajectories
                .iter()
                .map(|t| t.provenance)
                .collect(),
            lengths: self
                .store
                .trajectories
                .iter()
                .map(Trajectory::len)
                .collect(),
        };
        let tensors = [
            Param::new("states", states),
            Param::new("actions", actions),
            Param::new("rewards", rewards),
        ];
        checkpoint::encode(
            serde_json::to_value(meta)?,
            &tensors.iter().collect::<Vec<_>>(),
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, tensors) = checkpoint::decode(bytes)?;
        let meta: DatasetMeta = serde_json::from_value(meta)?;
        if meta.kind != "dataset" || meta.format_version != 1 {
            return Err(Error::Format("not a version-1 dataset file".into()));
        }
        let [states, actions, rewards] = <[Param; 3]>::try_from(tensors)
            .map_err(|_| Error::Format("dataset: expected three tensors".into()))?;
        let (states, actions, rewards) = (states.value(), actions.value(), rewards.value());
        let horizon = meta.spec.horizon;
        let mut trajectories = Vec::with_capacity(meta.lengths.len());
        let (mut si, mut ai) = (0, 0);
        for (&len, &provenance) in meta.lengths.iter().zip(&meta.provenance) {
            let mut transitions = Vec::with_capacity(len);
            for t in 0..len {
                transitions.push(Transition {
                    state: states.row(si + t).to_vec(),
                    action: actions.row(ai + t).to_vec(),
                    reward: rewards[[ai + t, 0]],
                    next_state: states.row(si + t + 1).to_vec(),
                    done: t + 1 == horizon,
                });
            }
            si += len + 1;
            ai += len;
            trajectories.push(Trajectory {
                transitions,
                provenance,
            });
        }
        Ok(Self {
            env: meta.env,
            store: TrajectoryStore {
                spec: meta.spec,
                trajectories,
            },
            max_delay: meta.max_delay,
            delay_set: meta.delay_set,
            config_hash: meta.config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes)?;
        Ok(crate::util::sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path)?;
        Ok((Self::from_bytes(&bytes)?, crate::util::sha256_hex(&bytes)))
    }
}
