use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ExpertConfig};
use super::report::{aggregate, k1_table_csv, records_csv, CurveSummary, Report};
use crate::agent::{
    evaluate_policy, run, run_deer, run_dolps, run_online_deer, run_sacas, train_expert, Actor,
    Featurizer, LearningCurve, Mode, Sac,
};
use crate::dataset::{collect, split, CollectPolicy, DatasetFile, Provenance};
use crate::envs::{EnvConfig, Environment, ExpertPolicy, LinearSystemEnv};
use crate::error::{Error, Result};
use crate::nncore::{checkpoint, Parameterized};
use crate::rddmdp::DelayConfig;
use crate::seq2seq::{evaluate, pretrain, Seq2SeqModel};
use crate::util::{derive_seed, rng, sha256_hex};

/// File names under `output_dir`.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.bin")
    }

    pub fn expert(&self) -> PathBuf {
        self.root.join("expert.json")
    }

    pub fn expert_curve(&self) -> PathBuf {
        self.root.join("expert_curve.jsonl")
    }

    pub fn encoder(&self, k1: usize) -> PathBuf {
        self.root.join(format!("encoder_k{k1}.bin"))
    }

    pub fn pretrain_curve(&self, k1: usize) -> PathBuf {
        self.root.join(format!("pretrain_k{k1}.jsonl"))
    }

    pub fn curve(&self, id: &str) -> PathBuf {
        self.root.join("curves").join(format!("{id}.jsonl"))
    }

    pub fn policy(&self, id: &str) -> PathBuf {
        self.root.join("policies").join(format!("{id}.bin"))
    }

    pub fn online_encoder(&self, id: &str) -> PathBuf {
        self.root.join("policies").join(format!("{id}.encoder.bin"))
    }

    pub fn eval(&self, id: &str) -> PathBuf {
        self.root.join("eval").join(format!("{id}.json"))
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report.csv")
    }

    pub fn k1_csv(&self) -> PathBuf {
        self.root.join("k1_sweep.csv")
    }

    fn ensure_dirs(&self) -> Result<()> {
        for sub in ["curves", "policies", "eval"] {
            fs::create_dir_all(self.root.join(sub))?;
        }
        Ok(())
    }
}

/// Restricts `train`, `eval` and `report` to a subset of the configured modes and seeds.
#[derive(Debug, Clone, Default)]
pub struct Selection {
    pub modes: Option<Vec<Mode>>,
    pub seeds: Option<Vec<u64>>,
}

/// One training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub mode: Mode,
    pub delay: DelayConfig,
    /// Encoder width for modes that read a pretrained checkpoint.
    pub k1: Option<usize>,
    pub seed: u64,
}

impl Job {
    pub fn id(&self) -> String {
        let k = self.k1.map(|k| format!("-k{k}")).unwrap_or_default();
        format!(
            "{}{k}_{}_s{}",
            self.mode.as_str(),
            self.delay.tag(),
            self.seed
        )
    }

    /// Jobs in a fixed order: mode, delay, encoder width, seed.
    pub fn all(cfg: &ExperimentConfig, sel: &Selection) -> Result<Vec<Job>> {
        let modes = match &sel.modes {
            Some(m) => {
                if let Some(bad) = m.iter().find(|x| !cfg.modes.contains(x)) {
                    return Err(Error::Config(format!(
                        "mode {} is not in the config",
                        bad.as_str()
                    )));
                }
                m.clone()
            }
            None => cfg.modes.clone(),
        };
        let seeds = sel.seeds.clone().unwrap_or_else(|| cfg.seeds.clone());
        // Every mode is plain SAC without delay, so that baseline is run once,
        // under the first configured mode.
        let baseline_mode = cfg.modes.first().copied();
        let mut jobs = Vec::new();
        for mode in modes {
            for delay in cfg.delays.configs() {
                if delay.is_passthrough() && Some(mode) != baseline_mode {
                    continue;
                }
                let widths: Vec<Option<usize>> =
                    if mode.needs_checkpoint() && !delay.is_passthrough() {
                        cfg.k1_values().into_iter().map(Some).collect()
                    } else {
                        vec![None]
                    };
                for k1 in widths {
                    for &seed in &seeds {
                        jobs.push(Job {
                            mode,
                            delay: delay.clone(),
                            k1,
                            seed,
                        });
                    }
                }
            }
        }
        Ok(jobs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSummary {
    pub config_hash: String,
    pub kind: String,
    /// Mean return over `dataset.expert_eval_episodes` episodes.
    pub expert_return: f64,
    pub episodes: usize,
    pub threshold: Option<f64>,
    pub training_return: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CollectSummary {
    pub dataset_hash: String,
    pub random_trajectories: usize,
    pub expert_trajectories: usize,
    pub expert: ExpertSummary,
}

#[derive(Debug, Clone)]
pub struct PretrainSummary {
    pub k1: usize,
    pub checkpoint_hash: String,
    pub test_loss: f64,
    /// Autoregressive test MSE per state dimension, in raw units.
    pub test_mse_per_dim: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub id: String,
    pub final_return: f64,
    pub curve_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub config_hash: String,
    pub id: String,
    pub mode: Mode,
    pub delay: String,
    pub k1: Option<usize>,
    pub seed: u64,
    pub episodes: usize,
    pub return_true: f64,
    pub return_delivered: f64,
}

fn missing(path: &Path, prerequisite: &str) -> Error {
    Error::MissingArtifact {
        path: path.display().to_string(),
        prerequisite: format!("deer {prerequisite} --config <config>"),
    }
}

fn require(path: &Path, prerequisite: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(missing(path, prerequisite))
    }
}

fn check_hash(path: &Path, found: &str, expected: &str, prerequisite: &str) -> Result<()> {
    if found == expected {
        Ok(())
    } else {
        Err(Error::State(format!(
            "{} was produced under config hash {found:?}, current config hash is {expected:?}; rerun `deer {prerequisite}`",
            path.display()
        )))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn expert_policy(
    cfg: &ExperimentConfig,
    layout: &Layout,
    hash: &str,
) -> Result<(ExpertPolicy, Option<f64>)> {
    match &cfg.dataset.expert {
        ExpertConfig::Lqr => match &cfg.env {
            EnvConfig::LinearSystem(c) => Ok((ExpertPolicy::lqr(&LinearSystemEnv::new(c)?)?, None)),
            other => Err(Error::Config(format!("no LQR expert for {}", other.name()))),
        },
        ExpertConfig::Sac {
            threshold,
            sac,
            run,
            seed,
        } => {
            let (expert, mut curve) = train_expert(&cfg.env, sac, run, *threshold, *seed)?;
            curve.set_config_hash(hash);
            fs::write(layout.expert_curve(), curve.to_jsonl()?)?;
            expert.ensure_trained()?;
            Ok((expert, curve.final_return()))
        }
    }
}

/// Builds `dataset.bin` from random and expert trajectories and records the
/// expert's return in `expert.json`.
pub fn cmd_collect(cfg: &ExperimentConfig) -> Result<CollectSummary> {
    cfg.validate()?;
    let hash = cfg.config_hash();
    let layout = Layout::new(&cfg.output_dir);
    fs::create_dir_all(&layout.root)?;
    let ds = &cfg.dataset;
    let (expert, training_return) = expert_policy(cfg, &layout, &hash)?;

    let mut store = collect(
        &cfg.env,
        CollectPolicy::Random,
        ds.random_trajectories,
        ds.random_seed(),
    )?;
    let experts = collect(
        &cfg.env,
        CollectPolicy::Expert(&expert),
        ds.expert_trajectories,
        ds.expert_seed(),
    )?;
    store.extend(experts)?;
    let probe = collect(
        &cfg.env,
        CollectPolicy::Expert(&expert),
        ds.expert_eval_episodes,
        ds.probe_seed(),
    )?;
    let expert_return = probe
        .trajectories
        .iter()
        .map(|t| t.total_reward())
        .sum::<f64>()
        / probe.len() as f64;

    let summary = ExpertSummary {
        config_hash: hash.clone(),
        kind: match ds.expert {
            ExpertConfig::Lqr => "lqr".into(),
            ExpertConfig::Sac { .. } => "sac".into(),
        },
        expert_return,
        episodes: probe.len(),
        threshold: match ds.expert {
            ExpertConfig::Sac { threshold, .. } => Some(threshold),
            ExpertConfig::Lqr => None,
        },
        training_return,
    };
    write_json(&layout.expert(), &summary)?;

    let file = DatasetFile {
        env: cfg.env.clone(),
        max_delay: cfg.seq2seq.max_delay,
        delay_set: cfg.delay_set(),
        config_hash: hash,
        store,
    };
    let dataset_hash = file.save(&layout.dataset())?;
    log::info!(
        "collected {} trajectories ({} expert), expert return {expert_return:.3}",
        file.store.len(),
        file.store.count(Provenance::Expert)
    );
    Ok(CollectSummary {
        dataset_hash,
        random_trajectories: file.store.count(Provenance::Random),
        expert_trajectories: file.store.count(Provenance::Expert),
        expert: summary,
    })
}

fn load_dataset(cfg: &ExperimentConfig, layout: &Layout) -> Result<(DatasetFile, String)> {
    let path = layout.dataset();
    require(&path, "collect")?;
    let (file, file_hash) = DatasetFile::load(&path)?;
    check_hash(&path, &file.config_hash, &cfg.config_hash(), "collect")?;
    Ok((file, file_hash))
}

fn load_expert(cfg: &ExperimentConfig, layout: &Layout) -> Result<ExpertSummary> {
    let path = layout.expert();
    require(&path, "collect")?;
    let summary: ExpertSummary = serde_json::from_slice(&fs::read(&path)?)?;
    check_hash(&path, &summary.config_hash, &cfg.config_hash(), "collect")?;
    Ok(summary)
}

/// Pretrains one encoder per configured width on the stored dataset.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<Vec<PretrainSummary>> {
    cfg.validate()?;
    let hash = cfg.config_hash();
    let layout = Layout::new(&cfg.output_dir);
    let (file, _) = load_dataset(cfg, &layout)?;
    let samples = file.samples()?;
    let (train, test) = split(&samples, cfg.dataset.split_ratio, cfg.dataset.split_seed())?;
    cfg.k1_values()
        .par_iter()
        .map(|&k1| {
            let mut model =
                Seq2SeqModel::for_store(cfg.seq2seq_for(k1), &file.store, derive_seed(cfg.pretrain.seed, k1 as u64))?;
            let epochs = pretrain(&mut model, &file.store, &train, &test, &cfg.pretrain)?;
            let mut log = Vec::new();
            serde_json::to_writer(
                &mut log,
                &serde_json::json!({"kind": "header", "config_hash": hash, "k1": k1, "train": train.len(), "test": test.len()}),
            )?;
            log.write_all(b"\n")?;
            for e in &epochs {
                serde_json::to_writer(&mut log, e)?;
                log.write_all(b"\n")?;
            }
            fs::write(layout.pretrain_curve(k1), log)?;
            let checkpoint_hash = model.save(&layout.encoder(k1), &hash)?;
            let report = match epochs.last() {
                Some(e) => (e.test_loss, e.test_mse_per_dim.clone()),
                None => {
                    let r = evaluate(&model, &file.store, &test)?;
                    (r.loss, r.mse_per_dim)
                }
            };
            Ok(PretrainSummary {
                k1,
                checkpoint_hash,
                test_loss: report.0,
                test_mse_per_dim: report.1,
            })
        })
        .collect()
}

fn load_encoders(
    cfg: &ExperimentConfig,
    layout: &Layout,
    jobs: &[Job],
) -> Result<BTreeMap<usize, (Seq2SeqModel, String)>> {
    let hash = cfg.config_hash();
    let mut out = BTreeMap::new();
    for k1 in jobs.iter().filter_map(|j| j.k1) {
        if out.contains_key(&k1) {
            continue;
        }
        let path = layout.encoder(k1);
        require(&path, "pretrain")?;
        let (model, model_hash, file_hash) = Seq2SeqModel::load(&path)?;
        check_hash(&path, &model_hash, &hash, "pretrain")?;
        out.insert(k1, (model, file_hash));
    }
    Ok(out)
}

/// Writes an actor checkpoint stamped with the config hash.
pub fn save_policy(
    path: &Path,
    actor: &Actor,
    hidden: &[usize],
    config_hash: &str,
) -> Result<String> {
    let meta = serde_json::json!({
        "kind": "policy",
        "config_hash": config_hash,
        "input_dim": actor.in_dim(),
        "action_dim": actor.action_dim(),
        "hidden": hidden,
    });
    let bytes = checkpoint::encode(meta, &actor.params())?;
    fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

#[derive(Deserialize)]
struct PolicyMeta {
    kind: String,
    config_hash: String,
    input_dim: usize,
    action_dim: usize,
    hidden: Vec<usize>,
}

/// Reads an actor checkpoint; returns the actor and its config hash.
pub fn load_policy(path: &Path) -> Result<(Actor, String)> {
    let (meta, params) = checkpoint::decode(&fs::read(path)?)?;
    let meta: PolicyMeta = serde_json::from_value(meta)?;
    if meta.kind != "policy" {
        return Err(Error::Format(format!(
            "{} is not a policy checkpoint",
            path.display()
        )));
    }
    let mut actor = Actor::new(meta.input_dim, meta.action_dim, &meta.hidden, &mut rng(0));
    let slots = actor.params_mut();
    if slots.len() != params.len() {
        return Err(Error::Format(format!(
            "{}: expected {} tensors",
            path.display(),
            slots.len()
        )));
    }
    for (dst, src) in slots.into_iter().zip(&params) {
        if dst.name() != src.name() || dst.shape() != src.shape() {
            return Err(Error::Format(format!(
                "{}: tensor {} {:?} does not match {} {:?}",
                path.display(),
                src.name(),
                src.shape(),
                dst.name(),
                dst.shape()
            )));
        }
        dst.value_mut().assign(src.value());
    }
    Ok((actor, meta.config_hash))
}

fn encoder_for<'a>(
    encoders: &'a BTreeMap<usize, (Seq2SeqModel, String)>,
    job: &Job,
) -> Result<&'a Seq2SeqModel> {
    job.k1
        .and_then(|k| encoders.get(&k))
        .map(|(m, _)| m)
        .ok_or_else(|| Error::State(format!("{}: no encoder loaded", job.id())))
}

fn train_job(
    cfg: &ExperimentConfig,
    layout: &Layout,
    encoders: &BTreeMap<usize, (Seq2SeqModel, String)>,
    job: &Job,
) -> Result<TrainSummary> {
    let (env, delay, sac, run_cfg, seed) = (&cfg.env, &job.delay, &cfg.sac, &cfg.run, job.seed);
    let mut out = if delay.is_passthrough() {
        run(
            env,
            delay,
            job.mode,
            Featurizer::Raw,
            sac,
            run_cfg,
            None,
            seed,
        )?
    } else {
        match job.mode {
            Mode::Deer => run_deer(env, delay, encoder_for(encoders, job)?, sac, run_cfg, seed)?,
            Mode::Dolps => run_dolps(env, delay, encoder_for(encoders, job)?, sac, run_cfg, seed)?,
            Mode::Sacas => run_sacas(env, delay, delay.max_delay(), sac, run_cfg, seed)?,
            Mode::OnlineDeer => {
                run_online_deer(env, delay, &cfg.seq2seq, &cfg.online, sac, run_cfg, seed)?
            }
        }
    };
    let hash = cfg.config_hash();
    let id = job.id();
    out.curve.set_config_hash(&hash);
    let bytes = out.curve.to_jsonl()?;
    fs::write(layout.curve(&id), &bytes)?;
    save_policy(&layout.policy(&id), &out.sac.actor, &sac.hidden, &hash)?;
    if let Some(model) = &out.online_model {
        model.save(&layout.online_encoder(&id), &hash)?;
    }
    let final_return = out.curve.final_return().unwrap_or(f64::NAN);
    log::info!("{id}: final return {final_return:.3}");
    Ok(TrainSummary {
        id,
        final_return,
        curve_hash: sha256_hex(&bytes),
    })
}

/// Trains every selected (mode, delay, width, seed) job in parallel.
pub fn cmd_train(cfg: &ExperimentConfig, sel: &Selection) -> Result<Vec<TrainSummary>> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    layout.ensure_dirs()?;
    let jobs = Job::all(cfg, sel)?;
    let encoders = load_encoders(cfg, &layout, &jobs)?;
    jobs.par_iter()
        .map(|j| train_job(cfg, &layout, &encoders, j))
        .collect()
}

/// Re-evaluates every stored policy over `report.eval_episodes` fresh episodes.
pub fn cmd_eval(cfg: &ExperimentConfig, sel: &Selection) -> Result<Vec<EvalResult>> {
    cfg.validate()?;
    let hash = cfg.config_hash();
    let layout = Layout::new(&cfg.output_dir);
    layout.ensure_dirs()?;
    let jobs = Job::all(cfg, sel)?;
    for j in &jobs {
        require(&layout.policy(&j.id()), "train")?;
    }
    let encoders = load_encoders(cfg, &layout, &jobs)?;
    let spec = cfg.env.build()?.spec().clone();
    jobs.par_iter()
        .map(|job| {
            let id = job.id();
            let path = layout.policy(&id);
            let (actor, policy_hash) = load_policy(&path)?;
            check_hash(&path, &policy_hash, &hash, "train")?;
            let featurizer = if job.delay.is_passthrough() {
                Featurizer::Raw
            } else {
                match job.mode {
                    Mode::Deer => Featurizer::Encoder(encoder_for(&encoders, job)?),
                    Mode::Dolps => Featurizer::Predictor(encoder_for(&encoders, job)?),
                    Mode::Sacas => Featurizer::Augmented {
                        max_actions: job.delay.max_delay(),
                        action_dim: spec.action_dim,
                    },
                    Mode::OnlineDeer => {
                        let enc_path = layout.online_encoder(&id);
                        require(&enc_path, "train")?;
                        let (model, model_hash, _) = Seq2SeqModel::load(&enc_path)?;
                        check_hash(&enc_path, &model_hash, &hash, "train")?;
                        Featurizer::Online(Box::new(model))
                    }
                }
            };
            if featurizer.input_dim(&spec) != actor.in_dim() {
                return Err(Error::Shape(format!(
                    "{id}: policy expects {} inputs, featurizer gives {}",
                    actor.in_dim(),
                    featurizer.input_dim(&spec)
                )));
            }
            let mut sac = Sac::new(cfg.sac.clone(), actor.in_dim(), &spec, 0)?;
            sac.actor = actor;
            let episodes = cfg.report.eval_episodes;
            let (return_true, return_delivered) = evaluate_policy(
                &cfg.env,
                &job.delay,
                &featurizer,
                &mut sac,
                episodes,
                derive_seed(job.seed, 99),
            )?;
            let result = EvalResult {
                config_hash: hash.clone(),
                id: id.clone(),
                mode: job.mode,
                delay: job.delay.tag(),
                k1: job.k1,
                seed: job.seed,
                episodes,
                return_true,
                return_delivered,
            };
            write_json(&layout.eval(&id), &result)?;
            Ok(result)
        })
        .collect()
}

fn read_curve(layout: &Layout, job: &Job, hash: &str) -> Result<CurveSummary> {
    let path = layout.curve(&job.id());
    require(&path, "train")?;
    let bytes = fs::read(&path)?;
    let curve = LearningCurve::from_jsonl(BufReader::new(bytes.as_slice()))?;
    check_hash(&path, curve.config_hash().unwrap_or(""), hash, "train")?;
    let final_return = curve
        .final_return()
        .ok_or_else(|| Error::Format(format!("{}: no evaluation records", path.display())))?;
    Ok(CurveSummary {
        mode: job.mode,
        delay: job.delay.tag(),
        k1: job.k1,
        seed: job.seed,
        final_return,
        all_returns: curve.all_returns(),
        curve_hash: sha256_hex(&bytes),
    })
}

/// Aggregates the stored learning curves into `report.json`, `report.csv`
/// and, when several encoder widths are configured, `k1_sweep.csv`.
pub fn cmd_report(cfg: &ExperimentConfig, sel: &Selection) -> Result<Report> {
    cfg.validate()?;
    let hash = cfg.config_hash();
    let layout = Layout::new(&cfg.output_dir);
    let expert = load_expert(cfg, &layout)?;
    let jobs = Job::all(cfg, sel)?;
    let runs = jobs
        .iter()
        .map(|j| read_curve(&layout, j, &hash))
        .collect::<Result<Vec<_>>>()?;
    let dataset_hash = if layout.dataset().exists() {
        Some(load_dataset(cfg, &layout)?.1)
    } else {
        None
    };
    let checkpoint_hashes = load_encoders(cfg, &layout, &jobs)?
        .into_iter()
        .map(|(k, (_, h))| (k, h))
        .collect();
    let (min_return, records) = aggregate(
        &cfg.name,
        cfg.env.name(),
        &hash,
        &runs,
        expert.expert_return,
    )?;
    let report = Report {
        name: cfg.name.clone(),
        config_hash: hash,
        dataset_hash,
        checkpoint_hashes,
        min_return,
        expert_return: expert.expert_return,
        records,
    };
    write_json(&layout.report_json(), &report)?;
    fs::write(layout.report_csv(), records_csv(&report.records)?)?;
    if cfg.k1_values().len() > 1 {
        fs::write(layout.k1_csv(), k1_table_csv(&report.records)?)?;
    }
    Ok(report)
}
