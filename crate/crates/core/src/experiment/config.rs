use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::{Mode, OnlineConfig, RunConfig, SacConfig};
use crate::envs::{EnvConfig, Environment};
use crate::error::{Error, Result};
use crate::rddmdp::{DelayConfig, InitialActions};
use crate::seq2seq::{PretrainConfig, Seq2SeqConfig};
use crate::util::{derive_seed, sha256_hex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomDelay {
    pub intrinsic: usize,
    pub max_extra: usize,
    pub drop_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DelayGrid {
    pub constant: Vec<usize>,
    pub random: Vec<RandomDelay>,
    pub initial_actions: InitialActions,
}

impl Default for DelayGrid {
    fn default() -> Self {
        Self {
            constant: vec![0, 1, 2, 4, 6, 8],
            random: Vec::new(),
            initial_actions: InitialActions::Zeros,
        }
    }
}

impl DelayGrid {
    pub fn configs(&self) -> Vec<DelayConfig> {
        let mut out: Vec<DelayConfig> = self
            .constant
            .iter()
            .map(|&d| DelayConfig::constant(d))
            .collect();
        out.extend(
            self.random
                .iter()
                .map(|r| DelayConfig::random(r.intrinsic, r.max_extra, r.drop_prob)),
        );
        for c in &mut out {
            if !c.is_passthrough() {
                c.initial_actions = self.initial_actions.clone();
            }
        }
        out
    }

    pub fn max_delay(&self) -> usize {
        self.configs()
            .iter()
            .map(DelayConfig::max_delay)
            .max()
            .unwrap_or(0)
    }
}

/// How expert trajectories are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExpertConfig {
    /// Analytic LQR gain (linear system only).
    Lqr,
    /// Delay-free SAC trained until its final evaluation reaches `threshold`.
    Sac {
        threshold: f64,
        #[serde(default)]
        sac: SacConfig,
        #[serde(default)]
        run: RunConfig,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub random_trajectories: usize,
    pub expert_trajectories: usize,
    /// Delays used for training samples; empty means `1..=D`.
    pub delay_set: Vec<usize>,
    pub split_ratio: f64,
    pub seed: u64,
    pub expert: ExpertConfig,
    /// Episodes used to measure the expert's return for normalisation.
    pub expert_eval_episodes: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            random_trajectories: 500,
            expert_trajectories: 10,
            delay_set: Vec::new(),
            split_ratio: 0.9,
            seed: 0,
            expert: ExpertConfig::Lqr,
            expert_eval_episodes: 10,
        }
    }
}

impl DatasetConfig {
    /// Collection seed of the random trajectories.
    pub fn random_seed(&self) -> u64 {
        derive_seed(self.seed, 1)
    }

    pub fn expert_seed(&self) -> u64 {
        derive_seed(self.seed, 2)
    }

    /// Seed of the episodes that measure the expert's return.
    pub fn probe_seed(&self) -> u64 {
        derive_seed(self.seed, 3)
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, 4)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Final-evaluation episodes per trained policy in `eval`.
    pub eval_episodes: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { eval_episodes: 10 }
    }
}

/// Everything a run needs; defaults are written out by [`ExperimentConfig::to_toml`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
    pub env: EnvConfig,
    #[serde(default)]
    pub delays: DelayGrid,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub seq2seq: Seq2SeqConfig,
    /// Extra encoder widths trained and evaluated alongside `seq2seq.k1`.
    #[serde(default)]
    pub k1_sweep: Vec<usize>,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub sac: SacConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub online: OnlineConfig,
    #[serde(default)]
    pub report: ReportConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

fn default_modes() -> Vec<Mode> {
    vec![Mode::Deer, Mode::Sacas]
}

impl ExperimentConfig {
    pub fn minimal(name: &str, env: EnvConfig, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            name: name.into(),
            output_dir: output_dir.into(),
            seeds: default_seeds(),
            modes: default_modes(),
            env,
            delays: DelayGrid::default(),
            dataset: DatasetConfig::default(),
            seq2seq: Seq2SeqConfig::default(),
            k1_sweep: Vec::new(),
            pretrain: PretrainConfig::default(),
            sac: SacConfig::default(),
            run: RunConfig::default(),
            online: OnlineConfig::default(),
            report: ReportConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config; a relative `output_dir` is resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        if cfg.output_dir.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.env.build()?.spec().validate()?;
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        for c in self.delays.configs() {
            c.validate()?;
        }
        let d_max = self.delays.max_delay();
        if self.seq2seq.max_delay < d_max {
            return bad(format!(
                "seq2seq.max_delay = {} is below the largest delay in the grid ({d_max})",
                self.seq2seq.max_delay
            ));
        }
        self.seq2seq.validate()?;
        if self.k1_sweep.contains(&0) {
            return bad("k1_sweep entries must be > 0".into());
        }
        if let Some(d) = self
            .dataset
            .delay_set
            .iter()
            .find(|d| **d == 0 || **d > self.seq2seq.max_delay)
        {
            return bad(format!("dataset.delay_set entry {d} outside [1, D]"));
        }
        if !(self.dataset.split_ratio > 0.0 && self.dataset.split_ratio < 1.0) {
            return bad("dataset.split_ratio must lie in (0, 1)".into());
        }
        if self.dataset.random_trajectories + self.dataset.expert_trajectories == 0 {
            return bad("dataset needs at least one trajectory".into());
        }
        if matches!(self.dataset.expert, ExpertConfig::Lqr)
            && !matches!(self.env, EnvConfig::LinearSystem(_))
        {
            return bad("the LQR expert is only available for linear_system".into());
        }
        if self.dataset.expert_eval_episodes == 0 || self.report.eval_episodes == 0 {
            return bad("evaluation episode counts must be > 0".into());
        }
        self.sac.validate()?;
        if self.run.eval_interval == 0 || self.run.eval_episodes == 0 {
            return bad("run.eval_interval and run.eval_episodes must be > 0".into());
        }
        Ok(())
    }

    /// Hash of everything that determines artifacts, excluding the output
    /// directory and the seed list (runs for different seeds can be combined).
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.seeds.clear();
        let bytes = serde_json::to_vec(&c).expect("config serialises");
        sha256_hex(&bytes)[..16].to_string()
    }

    pub fn delay_set(&self) -> Vec<usize> {
        if self.dataset.delay_set.is_empty() {
            (1..=self.seq2seq.max_delay).collect()
        } else {
            self.dataset.delay_set.clone()
        }
    }

    /// `seq2seq.k1` followed by any distinct sweep widths.
    pub fn k1_values(&self) -> Vec<usize> {
        let mut out = vec![self.seq2seq.k1];
        for k in &self.k1_sweep {
            if !out.contains(k) {
                out.push(*k);
            }
        }
        out
    }

    pub fn seq2seq_for(&self, k1: usize) -> Seq2SeqConfig {
        Seq2SeqConfig {
            k1,
            ..self.seq2seq.clone()
        }
    }
}
