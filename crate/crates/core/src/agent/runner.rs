use std::io::{BufRead, Write};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::replay::{ReplayBuffer, ReplayEntry};
use super::sac::{Sac, SacConfig, SacLosses};
use crate::dataset::{make_samples, split, Provenance, Trajectory, TrajectoryStore};
use crate::envs::{AnyEnv, EnvConfig, EnvSpec, Environment, ExpertPolicy};
use crate::error::{Error, Result};
use crate::rddmdp::{DelayConfig, DelayProcess, InformationState};
use crate::seq2seq::{pretrain, PretrainConfig, Seq2SeqConfig, Seq2SeqModel};
use crate::util::{derive_seed, rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Deer,
    Sacas,
    Dolps,
    OnlineDeer,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Deer, Mode::Sacas, Mode::Dolps, Mode::OnlineDeer];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Deer => "deer",
            Mode::Sacas => "sacas",
            Mode::Dolps => "dolps",
            Mode::OnlineDeer => "online-deer",
        }
    }

    /// Whether training needs a pretrained sequence model.
    pub fn needs_checkpoint(self) -> bool {
        matches!(self, Mode::Deer | Mode::Dolps)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Agent decisions (environment interactions) per run.
    pub steps: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            eval_interval: 2_000,
            eval_episodes: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnlineConfig {
    /// Steps between encoder retraining; `None` keeps the random encoder.
    pub retrain_period: Option<usize>,
    pub pretrain: PretrainConfig,
    /// Most recent episodes kept for retraining.
    pub max_episodes: usize,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            retrain_period: Some(20_000),
            pretrain: PretrainConfig {
                epochs: 5,
                steps_per_epoch: Some(200),
                ..Default::default()
            },
            max_episodes: 200,
        }
    }
}

/// Maps an information state to the policy input.
#[derive(Debug, Clone)]
pub enum Featurizer<'m> {
    /// Delay-free: the base state itself.
    Raw,
    /// `(s, a_1 … a_z, 0 …)` padded to `max_actions`.
    Augmented {
        max_actions: usize,
        action_dim: usize,
    },
    /// Context representation of a frozen encoder.
    Encoder(&'m Seq2SeqModel),
    /// Last state predicted by a frozen decoder.
    Predictor(&'m Seq2SeqModel),
    /// Context representation of an encoder trained during interaction.
    Online(Box<Seq2SeqModel>),
}

impl Featurizer<'_> {
    pub fn input_dim(&self, spec: &EnvSpec) -> usize {
        match self {
            Featurizer::Raw | Featurizer::Predictor(_) => spec.state_dim,
            Featurizer::Augmented {
                max_actions,
                action_dim,
            } => spec.state_dim + max_actions * action_dim,
            Featurizer::Encoder(m) => m.context_dim(),
            Featurizer::Online(m) => m.context_dim(),
        }
    }

    pub fn features(&self, info: &InformationState) -> Result<Vec<f64>> {
        match self {
            Featurizer::Raw => Ok(info.base_state.clone()),
            Featurizer::Augmented {
                max_actions,
                action_dim,
            } => info.flatten_padded(*max_actions, *action_dim),
            Featurizer::Encoder(m) => Ok(m.encode(info)?.values),
            Featurizer::Online(m) => Ok(m.encode(info)?.values),
            Featurizer::Predictor(m) => {
                Ok(m.predict_states(info)?.pop().expect("z >= 1 predictions"))
            }
        }
    }

    fn is_encoder(&self) -> bool {
        matches!(self, Featurizer::Encoder(_) | Featurizer::Online(_))
    }
}

/// One line of a learning-curve file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CurveRecord {
    Header {
        mode: Mode,
        env: String,
        delay: String,
        seed: u64,
        input_dim: usize,
        steps: usize,
        /// Filled in by the experiment layer; empty for ad-hoc runs.
        #[serde(default)]
        config_hash: String,
    },
    /// End of a training episode.
    Train {
        step: usize,
        episode: usize,
        episode_return_true: f64,
        episode_return_delivered: f64,
        losses: Option<SacLosses>,
        alpha: f64,
    },
    /// Mean over deterministic evaluation episodes.
    Eval {
        step: usize,
        episode_return_true: f64,
        episode_return_delivered: f64,
    },
    /// Online encoder retraining.
    Retrain {
        step: usize,
        episodes: usize,
        test_loss: f64,
    },
    Summary {
        encodes: usize,
        updates: u64,
        final_return_true: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LearningCurve {
    pub records: Vec<CurveRecord>,
}

impl LearningCurve {
    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(out)
    }

    pub fn from_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut records = Vec::new();
        for line in r.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { records })
    }

    pub fn evals(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.records.iter().filter_map(|r| match r {
            CurveRecord::Eval {
                step,
                episode_return_true,
                ..
            } => Some((*step, *episode_return_true)),
            _ => None,
        })
    }

    /// True return of the last evaluation.
    pub fn final_return(&self) -> Option<f64> {
        self.evals().last().map(|(_, r)| r)
    }

    /// Every true return in the file (training and evaluation episodes).
    pub fn all_returns(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                CurveRecord::Train {
                    episode_return_true,
                    ..
                }
                | CurveRecord::Eval {
                    episode_return_true,
                    ..
                } => Some(*episode_return_true),
                _ => None,
            })
            .collect()
    }

    pub fn header(&self) -> Option<(Mode, &str, &str, u64)> {
        self.records.iter().find_map(|r| match r {
            CurveRecord::Header {
                mode,
                env,
                delay,
                seed,
                ..
            } => Some((*mode, env.as_str(), delay.as_str(), *seed)),
            _ => None,
        })
    }

    pub fn config_hash(&self) -> Option<&str> {
        self.records.iter().find_map(|r| match r {
            CurveRecord::Header { config_hash, .. } => Some(config_hash.as_str()),
            _ => None,
        })
    }

    pub fn set_config_hash(&mut self, hash: &str) {
        for r in &mut self.records {
            if let CurveRecord::Header { config_hash, .. } = r {
                *config_hash = hash.to_owned();
            }
        }
    }

    pub fn encodes(&self) -> Option<usize> {
        self.records.iter().find_map(|r| match r {
            CurveRecord::Summary { encodes, .. } => Some(*encodes),
            _ => None,
        })
    }
}

pub struct RunOutput {
    pub curve: LearningCurve,
    pub sac: Sac,
    /// Encoder calls made by the training loop (evaluation excluded).
    pub encodes: usize,
    pub episodes: usize,
    /// Final encoder of an online run.
    pub online_model: Option<Seq2SeqModel>,
}

/// Mean `(true, delivered)` return of deterministic episodes. The evaluation
/// process is rebuilt from `seed` each call, so every evaluation of a run
/// sees the same initial states and drop pattern.
pub fn evaluate_policy(
    env_cfg: &EnvConfig,
    delay: &DelayConfig,
    featurizer: &Featurizer<'_>,
    sac: &mut Sac,
    episodes: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if episodes == 0 {
        return Err(Error::Config(
            "evaluation needs at least one episode".into(),
        ));
    }
    let mut proc = DelayProcess::bernoulli(env_cfg.build()?, delay.clone().with_seed(seed))?;
    let (mut true_sum, mut delivered_sum) = (0.0, 0.0);
    for _ in 0..episodes {
        let mut info = proc.reset()?;
        loop {
            let h = featurizer.features(&info)?;
            let a = sac.act(&h, true)?;
            let out = proc.step(&a)?;
            if out.done {
                break;
            }
            info = out.info;
        }
        true_sum += proc.true_return();
        delivered_sum += proc.delivered_return();
    }
    Ok((true_sum / episodes as f64, delivered_sum / episodes as f64))
}

fn check_delay(delay: &DelayConfig, featurizer: &Featurizer<'_>, spec: &EnvSpec) -> Result<()> {
    delay.validate()?;
    let capacity = match featurizer {
        Featurizer::Raw => {
            if !delay.is_passthrough() {
                return Err(Error::Config(
                    "raw-state policy input needs a zero delay".into(),
                ));
            }
            return Ok(());
        }
        Featurizer::Augmented { max_actions, .. } => *max_actions,
        Featurizer::Encoder(m) | Featurizer::Predictor(m) => {
            m.check_spec(spec)?;
            m.config().max_delay
        }
        Featurizer::Online(m) => {
            m.check_spec(spec)?;
            m.config().max_delay
        }
    };
    if delay.max_delay() > capacity {
        return Err(Error::Config(format!(
            "delay {} needs D >= {}, model has D = {capacity}",
            delay.tag(),
            delay.max_delay()
        )));
    }
    if delay.is_passthrough() {
        return Err(Error::Config(
            "zero delay uses the raw-state policy input".into(),
        ));
    }
    Ok(())
}

/// Shared training loop. Random actions until the training threshold, then
/// one SAC update per step on the delivered reward.
pub fn run(
    env_cfg: &EnvConfig,
    delay: &DelayConfig,
    mode: Mode,
    mut featurizer: Featurizer<'_>,
    sac_cfg: &SacConfig,
    run_cfg: &RunConfig,
    online: Option<&OnlineConfig>,
    seed: u64,
) -> Result<RunOutput> {
    let spec = env_cfg.build()?.spec().clone();
    check_delay(delay, &featurizer, &spec)?;
    if run_cfg.eval_interval == 0 || run_cfg.eval_episodes == 0 {
        return Err(Error::Config(
            "eval_interval and eval_episodes must be > 0".into(),
        ));
    }
    let input_dim = featurizer.input_dim(&spec);
    let mut proc: DelayProcess<AnyEnv> = DelayProcess::bernoulli(
        env_cfg.build()?,
        delay.clone().with_seed(derive_seed(seed, 11)),
    )?;
    let mut sac = Sac::new(sac_cfg.clone(), input_dim, &spec, derive_seed(seed, 12))?;
    let mut buffer = ReplayBuffer::new(sac_cfg.buffer_capacity, input_dim)?;
    let mut explore = rng(derive_seed(seed, 13));
    let mut sampler = rng(derive_seed(seed, 14));
    let eval_seed = derive_seed(seed, 15);

    let mut curve = LearningCurve::default();
    curve.records.push(CurveRecord::Header {
        mode,
        env: env_cfg.name().into(),
        delay: delay.tag(),
        seed,
        input_dim,
        steps: run_cfg.steps,
        config_hash: String::new(),
    });

    let mut online_store = TrajectoryStore::new(spec.clone());
    let mut encodes = 0usize;
    let mut episodes = 0usize;
    let mut last_losses: Option<SacLosses> = None;

    let mut info = proc.reset()?;
    let mut h = featurizer.features(&info)?;
    encodes += featurizer.is_encoder() as usize;

    for step in 1..=run_cfg.steps {
        let action: Vec<f64> = if step <= sac_cfg.training_threshold {
            (0..spec.action_dim)
                .map(|k| explore.random_range(spec.action_low[k]..spec.action_high[k]))
                .collect()
        } else {
            sac.act(&h, false)?
        };
        let out = proc.step(&action)?;
        let h_next = featurizer.features(&out.info)?;
        encodes += featurizer.is_encoder() as usize;
        // Episodes end only by the time limit, so successors are always bootstrapped.
        buffer.push(ReplayEntry {
            h: std::mem::take(&mut h),
            a: sac.to_unit(&spec.clip_action(&action)?),
            r: out.reward,
            h_next: h_next.clone(),
            done: false,
        })?;
        if step > sac_cfg.training_threshold
            && buffer.len() >= sac_cfg.batch_size.min(buffer.capacity())
        {
            let batch = buffer.sample(sac_cfg.batch_size, &mut sampler)?;
            last_losses = Some(sac.update(&batch)?);
        }
        h = h_next;

        if out.done {
            episodes += 1;
            curve.records.push(CurveRecord::Train {
                step,
                episode: episodes,
                episode_return_true: proc.true_return(),
                episode_return_delivered: proc.delivered_return(),
                losses: last_losses,
                alpha: sac.alpha(),
            });
            if online.is_some() {
                online_store.trajectories.push(Trajectory {
                    transitions: proc.true_transitions(),
                    provenance: Provenance::Random,
                });
            }
            info = proc.reset()?;
            h = featurizer.features(&info)?;
            encodes += featurizer.is_encoder() as usize;
        }

        if let (Some(oc), Featurizer::Online(model)) = (online, &mut featurizer) {
            if let Some(period) = oc.retrain_period {
                if period > 0 && step % period == 0 && !online_store.is_empty() {
                    let excess = online_store.len().saturating_sub(oc.max_episodes);
                    online_store.trajectories.drain(..excess);
                    let test_loss = retrain_online(
                        model,
                        &online_store,
                        oc,
                        derive_seed(seed, 16 + step as u64),
                    )?;
                    curve.records.push(CurveRecord::Retrain {
                        step,
                        episodes: online_store.len(),
                        test_loss,
                    });
                    if let Some(current) = proc.info() {
                        h = featurizer.features(current)?;
                        encodes += 1;
                    }
                }
            }
        }

        if step % run_cfg.eval_interval == 0 || step == run_cfg.steps {
            let (ret_true, ret_delivered) = evaluate_policy(
                env_cfg,
                delay,
                &featurizer,
                &mut sac,
                run_cfg.eval_episodes,
                eval_seed,
            )?;
            curve.records.push(CurveRecord::Eval {
                step,
                episode_return_true: ret_true,
                episode_return_delivered: ret_delivered,
            });
        }
    }
    let final_return_true = curve.final_return().unwrap_or(f64::NAN);
    curve.records.push(CurveRecord::Summary {
        encodes,
        updates: sac.updates(),
        final_return_true,
    });
    let online_model = match featurizer {
        Featurizer::Online(m) => Some(*m),
        _ => None,
    };
    Ok(RunOutput {
        curve,
        sac,
        encodes,
        episodes,
        online_model,
    })
}

fn retrain_online(
    model: &mut Seq2SeqModel,
    store: &TrajectoryStore,
    oc: &OnlineConfig,
    seed: u64,
) -> Result<f64> {
    let d = model.config().max_delay;
    let delays: Vec<usize> = (1..=d).collect();
    let samples = make_samples(store, d, &delays)?;
    let (train, test) = split(&samples, 0.9, seed)?;
    model.norm = crate::seq2seq::Normalizer::fit(store);
    let cfg = PretrainConfig {
        seed,
        ..oc.pretrain.clone()
    };
    let curve = pretrain(model, store, &train, &test, &cfg)?;
    Ok(curve.last().map(|r| r.test_loss).unwrap_or(f64::NAN))
}

fn raw_if_passthrough<'m>(delay: &DelayConfig, f: Featurizer<'m>) -> Featurizer<'m> {
    if delay.is_passthrough() {
        Featurizer::Raw
    } else {
        f
    }
}

/// DEER: SAC on the frozen encoder's context representation.
pub fn run_deer(
    env_cfg: &EnvConfig,
    delay: &DelayConfig,
    encoder: &Seq2SeqModel,
    sac_cfg: &SacConfig,
    run_cfg: &RunConfig,
    seed: u64,
) -> Result<RunOutput> {
    let f = raw_if_passthrough(delay, Featurizer::Encoder(encoder));
    run(env_cfg, delay, Mode::Deer, f, sac_cfg, run_cfg, None, seed)
}

/// SACAS: SAC on the information state zero-padded to `max_actions` actions.
pub fn run_sacas(
    env_cfg: &EnvConfig,
    delay: &DelayConfig,
    max_actions: usize,
    sac_cfg: &SacConfig,
    run_cfg: &RunConfig,
    seed: u64,
) -> Result<RunOutput> {
    let action_dim = env_cfg.build()?.spec().action_dim;
    let f = raw_if_passthrough(
        delay,
        Featurizer::Augmented {
            max_actions,
            action_dim,
        },
    );
    run(env_cfg, delay, Mode::Sacas, f, sac_cfg, run_cfg, None, seed)
}

/// DOLPS: SAC on the decoder's estimate of the current state.
pub fn run_dolps(
    env_cfg: &EnvConfig,
    delay: &DelayConfig,
    model: &Seq2SeqModel,
    sac_cfg: &SacConfig,
    run_cfg: &RunConfig,
    seed: u64,
) -> Result<RunOutput> {
    let f = raw_if_passthrough(delay, Featurizer::Predictor(model));
    run(env_cfg, delay, Mode::Dolps, f, sac_cfg, run_cfg, None, seed)
}

/// Online DEER: a randomly initialised encoder retrained every
/// `retrain_period` steps on the episodes seen so far. Stored replay
/// representations are not recomputed after retraining.
pub fn run_online_deer(
    env_cfg: &EnvConfig,
    delay: &DelayConfig,
    seq_cfg: &Seq2SeqConfig,
    online: &OnlineConfig,
    sac_cfg: &SacConfig,
    run_cfg: &RunConfig,
    seed: u64,
) -> Result<RunOutput> {
    let spec = env_cfg.build()?.spec().clone();
    let mut model = Seq2SeqModel::new(
        seq_cfg.clone(),
        spec.state_dim,
        spec.action_dim,
        &mut rng(derive_seed(seed, 17)),
    )?;
    model.norm.action_center = spec.action_center();
    model.norm.action_scale = spec.action_scale();
    let f = raw_if_passthrough(delay, Featurizer::Online(Box::new(model)));
    run(
        env_cfg,
        delay,
        Mode::OnlineDeer,
        f,
        sac_cfg,
        run_cfg,
        Some(online),
        seed,
    )
}

/// Delay-free SAC whose deterministic policy becomes an expert once its
/// final evaluation return reaches `threshold`.
pub fn train_expert(
    env_cfg: &EnvConfig,
    sac_cfg: &SacConfig,
    run_cfg: &RunConfig,
    threshold: f64,
    seed: u64,
) -> Result<(ExpertPolicy, LearningCurve)> {
    let delay = DelayConfig::constant(0);
    let out = run(
        env_cfg,
        &delay,
        Mode::Deer,
        Featurizer::Raw,
        sac_cfg,
        run_cfg,
        None,
        seed,
    )?;
    let achieved = out.curve.final_return().unwrap_or(f64::NEG_INFINITY);
    let spec = env_cfg.build()?.spec().clone();
    Ok((
        ExpertPolicy::sac(out.sac.actor.clone(), spec, threshold, achieved),
        out.curve,
    ))
}
