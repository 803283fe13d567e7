use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::nets::{Actor, TwinCritic};
use super::replay::Batch;
use crate::envs::EnvSpec;
use crate::error::{shape_err, Error, Result};
use crate::nncore::{AdamConfig, AdamState, Binding, Gradients, Graph, Param, Parameterized};
use crate::util::{rng, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub gamma: f64,
    pub buffer_capacity: usize,
    /// Environment steps of uniform random actions before updates start.
    pub training_threshold: usize,
    pub initial_alpha: f64,
    /// Defaults to `-action_dim`.
    pub target_entropy: Option<f64>,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            alpha_lr: 3e-4,
            batch_size: 256,
            tau: 0.005,
            gamma: 0.99,
            buffer_capacity: 100_000,
            training_threshold: 1000,
            initial_alpha: 0.2,
            target_entropy: None,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("sac: {m}")));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return bad("batch size and buffer capacity must be > 0");
        }
        if self.hidden.iter().any(|w| *w == 0) {
            return bad("hidden widths must be > 0");
        }
        if !(self.initial_alpha > 0.0) {
            return bad("initial alpha must be > 0");
        }
        for lr in [self.actor_lr, self.critic_lr, self.alpha_lr] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad("learning rates must be finite and >= 0");
            }
        }
        Ok(())
    }
}

/// Learnable `log α`.
#[derive(Debug, Clone, PartialEq)]
pub struct Temperature {
    log_alpha: Param,
}

impl Temperature {
    pub fn new(alpha: f64) -> Self {
        Self {
            log_alpha: Param::new("log_alpha", Array2::from_elem((1, 1), alpha.ln())),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.value()[[0, 0]].exp()
    }

    pub fn log_alpha(&self) -> f64 {
        self.log_alpha.value()[[0, 0]]
    }
}

impl Parameterized for Temperature {
    fn params(&self) -> Vec<&Param> {
        vec![&self.log_alpha]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.log_alpha]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SacLosses {
    pub critic: f64,
    pub actor: f64,
    pub alpha: f64,
}

/// Soft Bellman targets `r + γ (1 - done) (min Q̄(h', a') - α log π(a' | h'))`
/// with `a' = tanh(μ + σ ε)`.
pub fn critic_targets(
    target: &TwinCritic,
    actor: &Actor,
    alpha: f64,
    gamma: f64,
    batch: &Batch,
    eps_next: &Array2<f64>,
) -> Array2<f64> {
    let mut g = Graph::new();
    let hn = g.constant(&batch.h_next);
    let s = actor.sample(&mut g, hn, eps_next, Binding::Frozen);
    let (t1, t2) = target.apply(&mut g, hn, s.action, Binding::Frozen);
    let q = g.min(t1, t2);
    let soft = g.value(q) - &(g.value(s.log_prob) * alpha);
    let not_done = batch.done.mapv(|d| 1.0 - d);
    &batch.r + &(soft * &not_done * gamma)
}

/// `½ (mean (Q1 - y)² + mean (Q2 - y)²)` and its critic gradients.
pub fn critic_loss(
    critic: &TwinCritic,
    batch: &Batch,
    targets: &Array2<f64>,
) -> Result<(f64, Gradients)> {
    if targets.dim() != (batch.len(), 1) {
        return Err(shape_err("critic targets must be [n, 1]"));
    }
    let mut g = Graph::new();
    let h = g.constant(&batch.h);
    let a = g.constant(&batch.a);
    let (q1, q2) = critic.apply(&mut g, h, a, Binding::Trainable);
    let y = g.constant(targets);
    let mut terms = Vec::with_capacity(2);
    for q in [q1, q2] {
        let d = g.sub(q, y);
        let sq = g.square(d);
        terms.push(g.mean(sq));
    }
    let total = g.add(terms[0], terms[1]);
    let loss = g.scale(total, 0.5);
    let grads = g.backward(loss)?;
    Ok((g.scalar(loss), grads))
}

/// `mean(α log π(a | h) - min Q(h, a))` with the critics frozen. Also returns
/// `mean log π` for the temperature update.
pub fn actor_loss(
    actor: &Actor,
    critic: &TwinCritic,
    alpha: f64,
    batch: &Batch,
    eps: &Array2<f64>,
) -> Result<(f64, Gradients, f64)> {
    let mut g = Graph::new();
    let h = g.constant(&batch.h);
    let s = actor.sample(&mut g, h, eps, Binding::Trainable);
    let (q1, q2) = critic.apply(&mut g, h, s.action, Binding::Frozen);
    let q = g.min(q1, q2);
    let weighted = g.scale(s.log_prob, alpha);
    let diff = g.sub(weighted, q);
    let loss = g.mean(diff);
    let grads = g.backward(loss)?;
    let mean_log_prob = g.value(s.log_prob).mean().unwrap_or(0.0);
    Ok((g.scalar(loss), grads, mean_log_prob))
}

/// `-log α · (mean log π + target_entropy)` and `∂/∂ log α`.
pub fn alpha_loss(log_alpha: f64, mean_log_prob: f64, target_entropy: f64) -> (f64, f64) {
    let k = mean_log_prob + target_entropy;
    (-log_alpha * k, -k)
}

/// Soft actor-critic with twin critics, Polyak targets and a tuned temperature.
#[derive(Debug, Clone)]
pub struct Sac {
    cfg: SacConfig,
    action_center: Vec<f64>,
    action_scale: Vec<f64>,
    target_entropy: f64,
    pub actor: Actor,
    pub critic: TwinCritic,
    pub target: TwinCritic,
    pub temperature: Temperature,
    actor_opt: AdamState,
    critic_opt: AdamState,
    alpha_opt: AdamState,
    rng: Rng,
    updates: u64,
}

impl Sac {
    pub fn new(cfg: SacConfig, input_dim: usize, spec: &EnvSpec, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = rng(seed);
        let a = spec.action_dim;
        let actor = Actor::new(input_dim, a, &cfg.hidden, &mut init);
        let critic = TwinCritic::new(input_dim, a, &cfg.hidden, &mut init);
        let target = critic.clone();
        Ok(Self {
            target_entropy: cfg.target_entropy.unwrap_or(-(a as f64)),
            action_center: spec.action_center(),
            action_scale: spec.action_scale(),
            actor,
            critic,
            target,
            temperature: Temperature::new(cfg.initial_alpha),
            actor_opt: AdamState::new(AdamConfig::with_lr(cfg.actor_lr)),
            critic_opt: AdamState::new(AdamConfig::with_lr(cfg.critic_lr)),
            alpha_opt: AdamState::new(AdamConfig::with_lr(cfg.alpha_lr)),
            rng: rng(crate::util::derive_seed(seed, 1)),
            updates: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &SacConfig {
        &self.cfg
    }

    pub fn input_dim(&self) -> usize {
        self.actor.in_dim()
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn alpha(&self) -> f64 {
        self.temperature.alpha()
    }

    pub fn to_unit(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_center.iter().zip(&self.action_scale))
            .map(|(a, (c, s))| (a - c) / s)
            .collect()
    }

    pub fn from_unit(&self, unit: &[f64]) -> Vec<f64> {
        unit.iter()
            .zip(self.action_center.iter().zip(&self.action_scale))
            .map(|(u, (c, s))| c + s * u)
            .collect()
    }

    /// Environment-space action: a policy sample, or `tanh(mean)` when deterministic.
    pub fn act(&mut self, h: &[f64], deterministic: bool) -> Result<Vec<f64>> {
        let unit = if deterministic {
            self.actor.deterministic_unit(h)?
        } else {
            let eps: Vec<f64> = (0..self.actor.action_dim())
                .map(|_| StandardNormal.sample(&mut self.rng))
                .collect();
            self.actor.sample_unit(h, &eps)?
        };
        Ok(self.from_unit(&unit))
    }

    fn noise(&mut self, n: usize) -> Array2<f64> {
        let a = self.actor.action_dim();
        Array2::from_shape_simple_fn((n, a), || StandardNormal.sample(&mut self.rng))
    }

    pub fn rng_mut(&mut self) -> &mut Rng {
        &mut self.rng
    }

    /// One gradient step on critics, actor and temperature, then a Polyak
    /// update of the target critics.
    pub fn update(&mut self, batch: &Batch) -> Result<SacLosses> {
        if batch.is_empty() {
            return Err(Error::State("sac update on an empty batch".into()));
        }
        let n = batch.len();
        let eps_next = self.noise(n);
        let eps = self.noise(n);
        let alpha = self.alpha();

        let y = critic_targets(
            &self.target,
            &self.actor,
            alpha,
            self.cfg.gamma,
            batch,
            &eps_next,
        );
        let (critic_loss, grads) = critic_loss(&self.critic, batch, &y)?;
        self.critic_opt.update(&mut self.critic, &grads)?;

        let (actor_loss, grads, mean_log_prob) =
            actor_loss(&self.actor, &self.critic, alpha, batch, &eps)?;
        self.actor_opt.update(&mut self.actor, &grads)?;

        let (alpha_loss, d_log_alpha) = alpha_loss(
            self.temperature.log_alpha(),
            mean_log_prob,
            self.target_entropy,
        );
        let mut grads = Gradients::new();
        grads.accumulate("log_alpha", &Array2::from_elem((1, 1), d_log_alpha))?;
        self.alpha_opt.update(&mut self.temperature, &grads)?;

        self.target.soft_update_from(&self.critic, self.cfg.tau);
        self.updates += 1;

        let losses = SacLosses {
            critic: critic_loss,
            actor: actor_loss,
            alpha: alpha_loss,
        };
        if ![losses.critic, losses.actor, losses.alpha]
            .iter()
            .all(|v| v.is_finite())
            || !self.actor.all_finite()
            || !self.critic.all_finite()
        {
            return Err(Error::NonFinite(format!(
                "sac diverged at update {}: {losses:?}",
                self.updates
            )));
        }
        Ok(losses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::replay::{ReplayBuffer, ReplayEntry};
    use crate::nncore::gradcheck::check_gradients;
    use rand::Rng as _;

    fn spec(a: usize) -> EnvSpec {
        EnvSpec {
            name: "unit".into(),
            state_dim: 1,
            action_dim: a,
            action_low: vec![-1.0; a],
            action_high: vec![1.0; a],
            horizon: 1,
        }
    }

    fn random_batch(n: usize, hd: usize, ad: usize, seed: u64, done: bool) -> Batch {
        let mut r = rng(seed);
        let entries: Vec<ReplayEntry> = (0..n)
            .map(|_| ReplayEntry {
                h: (0..hd).map(|_| r.random_range(-1.0..1.0)).collect(),
                a: (0..ad).map(|_| r.random_range(-0.9..0.9)).collect(),
                r: r.random_range(-1.0..1.0),
                h_next: (0..hd).map(|_| r.random_range(-1.0..1.0)).collect(),
                done,
            })
            .collect();
        Batch::from_entries(&entries.iter().collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn zero_discount_target_is_reward() {
        let sac = Sac::new(
            SacConfig {
                hidden: vec![8],
                ..Default::default()
            },
            3,
            &spec(2),
            0,
        )
        .unwrap();
        let batch = random_batch(6, 3, 2, 1, false);
        let eps = Array2::zeros((6, 2));
        let y = critic_targets(&sac.target, &sac.actor, 0.5, 0.0, &batch, &eps);
        assert_eq!(y, batch.r);
        let done = random_batch(6, 3, 2, 2, true);
        let y = critic_targets(&sac.target, &sac.actor, 0.5, 0.99, &done, &eps);
        assert_eq!(y, done.r);
    }

    #[test]
    fn unit_tau_copies_critics_into_targets() {
        let cfg = SacConfig {
            hidden: vec![8],
            tau: 1.0,
            ..Default::default()
        };
        let mut sac = Sac::new(cfg, 3, &spec(1), 4).unwrap();
        sac.update(&random_batch(5, 3, 1, 3, false)).unwrap();
        assert_eq!(sac.target, sac.critic);
    }

    #[test]
    fn critic_and_actor_gradients_match_finite_differences() {
        let mut r = rng(11);
        let batch = random_batch(4, 3, 2, 5, false);
        let mut actor = Actor::new(3, 2, &[6, 5], &mut r);
        let mut critic = TwinCritic::new(3, 2, &[6, 5], &mut r);
        let target = TwinCritic::new(3, 2, &[6, 5], &mut r);
        let eps = Array2::from_shape_fn((4, 2), |_| StandardNormal.sample(&mut r));
        let y = critic_targets(&target, &actor, 0.3, 0.9, &batch, &eps);

        let report = check_gradients(&mut critic, |c| critic_loss(c, &batch, &y), 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "critic {report:?}");

        let frozen = critic.clone();
        let report = check_gradients(
            &mut actor,
            |a| actor_loss(a, &frozen, 0.3, &batch, &eps).map(|(l, g, _)| (l, g)),
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "actor {report:?}");

        let (_, grads, _) = actor_loss(&actor, &frozen, 0.3, &batch, &eps).unwrap();
        assert!(grads.iter().all(|(name, _)| name.starts_with("pi.")));
    }

    #[test]
    fn alpha_gradient_matches_difference_quotient() {
        let (l0, g) = alpha_loss(0.2, -1.3, -2.0);
        let (l1, _) = alpha_loss(0.2 + 1e-6, -1.3, -2.0);
        assert!(((l1 - l0) / 1e-6 - g).abs() < 1e-8);
    }

    #[test]
    fn bandit_policy_mean_converges_to_zero() {
        let cfg = SacConfig {
            hidden: vec![32, 32],
            batch_size: 64,
            gamma: 0.0,
            actor_lr: 3e-3,
            critic_lr: 3e-3,
            alpha_lr: 3e-3,
            ..Default::default()
        };
        let mut sac = Sac::new(cfg, 1, &spec(1), 7).unwrap();
        let mut buf = ReplayBuffer::new(4096, 1).unwrap();
        let mut r = rng(8);
        for _ in 0..4096 {
            let a: f64 = r.random_range(-1.0..1.0);
            buf.push(ReplayEntry {
                h: vec![1.0],
                a: vec![a],
                r: -a * a,
                h_next: vec![1.0],
                done: true,
            })
            .unwrap();
        }
        for _ in 0..1500 {
            let batch = buf.sample(64, &mut r).unwrap();
            sac.update(&batch).unwrap();
        }
        let mean = sac.act(&[1.0], true).unwrap()[0];
        assert!(mean.abs() < 0.05, "policy mean {mean}");
    }

    #[test]
    fn deterministic_action_is_repeatable_and_bounded() {
        let mut sac = Sac::new(
            SacConfig {
                hidden: vec![8],
                ..Default::default()
            },
            2,
            &spec(3),
            9,
        )
        .unwrap();
        let a = sac.act(&[0.5, -0.5], true).unwrap();
        assert_eq!(a, sac.act(&[0.5, -0.5], true).unwrap());
        for _ in 0..100 {
            let s = sac.act(&[3.0, -2.0], false).unwrap();
            assert!(s.iter().all(|v| v.abs() <= 1.0));
        }
        assert!(sac.act(&[0.0], true).is_err());
    }
}
