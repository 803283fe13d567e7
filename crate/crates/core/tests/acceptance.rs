//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Positional arguments select criteria, e.g.
//! `cargo test --test acceptance -- 1 2 3`.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use deer_core::agent::{
    actor_loss, alpha_loss, critic_loss, critic_targets, Actor, Batch, Mode, ReplayEntry,
    TwinCritic,
};
use deer_core::dataset::{split, DatasetFile, Provenance};
use deer_core::envs::{EnvConfig, Environment, LinearSystemConfig, LinearSystemEnv};
use deer_core::experiment::{
    cmd_collect, cmd_eval, cmd_pretrain, cmd_report, cmd_train, ExperimentConfig, Layout, Report,
    RunRecord, Selection,
};
use deer_core::nncore::gradcheck::check_gradients;
use deer_core::nncore::{attend, Activation, Binding, Dense, Graph, GruCell, Param, Parameterized};
use deer_core::rddmdp::{DelayConfig, DelayProcess, DropSource, InformationState, InitialActions};
use deer_core::seq2seq::{Seq2SeqConfig, Seq2SeqModel, SeqBatch};
use deer_core::util::{derive_seed, median, rng, Rng as SimRng};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn workdir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(format!("{name}.toml"))
}

struct Finished {
    cfg: ExperimentConfig,
    report: Report,
    secs: f64,
}

/// Full collect → pretrain → train → report runs, shared between criteria.
#[derive(Default)]
struct Lab {
    done: BTreeMap<&'static str, Result<Finished, String>>,
}

impl Lab {
    fn pipeline(&mut self, name: &'static str) -> Result<&Finished, String> {
        self.done
            .entry(name)
            .or_insert_with(|| run_pipeline(name, &workdir().join(name), &Selection::default()))
            .as_ref()
            .map_err(|e| format!("{name} pipeline: {e}"))
    }
}

fn load_config(name: &str, out: &Path) -> Result<ExperimentConfig, String> {
    let mut cfg = ExperimentConfig::load(&config_path(name)).map_err(err)?;
    cfg.output_dir = out.to_path_buf();
    Ok(cfg)
}

fn run_pipeline(name: &str, out: &Path, sel: &Selection) -> Result<Finished, String> {
    let t = Instant::now();
    if out.exists() {
        fs::remove_dir_all(out).map_err(err)?;
    }
    let cfg = load_config(name, out)?;
    cmd_collect(&cfg).map_err(err)?;
    cmd_pretrain(&cfg).map_err(err)?;
    cmd_train(&cfg, sel).map_err(err)?;
    let report = cmd_report(&cfg, sel).map_err(err)?;
    Ok(Finished {
        cfg,
        report,
        secs: t.elapsed().as_secs_f64(),
    })
}

fn record<'r>(
    report: &'r Report,
    mode: Mode,
    delay: &str,
    k1: Option<usize>,
) -> Result<&'r RunRecord, String> {
    report
        .records
        .iter()
        .find(|r| r.mode == mode && r.delay == delay && r.k1 == k1)
        .ok_or_else(|| format!("{}: no record for {} {delay}", report.name, mode.as_str()))
}

fn baseline(report: &Report) -> Result<&RunRecord, String> {
    report
        .records
        .iter()
        .find(|r| r.delay == "const_d0")
        .ok_or_else(|| format!("{}: no delay-free record", report.name))
}

fn cell(r: &RunRecord) -> String {
    format!("{:.4}±{:.4}", r.median_normalized, r.variance_normalized)
}

// ---------------------------------------------------------------- 1

fn c1_conformance_trace(_: &mut Lab) -> Check {
    let t = Instant::now();
    let env = LinearSystemEnv::new(&LinearSystemConfig::default()).map_err(err)?;
    let a: Vec<Vec<f64>> = (0..5)
        .map(|k| vec![0.1 * (k + 1) as f64, -0.05 * (k + 1) as f64])
        .collect();
    let mut cfg = DelayConfig::random(1, 1, 0.5);
    cfg.initial_actions = InitialActions::Explicit(vec![a[0].clone()]);
    let omega = vec![false, false, true, true, false];
    let mut p = DelayProcess::new(env, cfg, DropSource::Scripted(omega)).map_err(err)?;
    p.enable_trace();
    p.reset_with_seed(42).map_err(err)?;
    for k in 1..=3 {
        p.step(&a[k]).map_err(err)?;
    }
    let trace = p.trace().ok_or("no trace")?.to_vec();
    let s = p.true_states().to_vec();
    // Step 0 is the blind step: nothing delivered yet, lag d_I.
    let mut z = vec![1];
    z.extend(trace.iter().map(|r| r.z));
    ensure!(z == vec![1, 1, 2, 2, 1], "z sequence {z:?}");
    let expected: Vec<(Vec<f64>, Vec<Vec<f64>>)> = vec![
        (s[0].clone(), vec![a[0].clone()]),
        (s[0].clone(), vec![a[0].clone(), a[1].clone()]),
        (s[0].clone(), vec![a[1].clone(), a[2].clone()]),
        (s[3].clone(), vec![a[3].clone()]),
    ];
    for (i, (r, (base, acts))) in trace.iter().zip(&expected).enumerate() {
        ensure!(r.t == i + 1, "trace time {} at row {i}", r.t);
        ensure!(
            &r.base_state == base && &r.actions == acts,
            "information state at t={} is ({:?}, {:?})",
            r.t,
            r.base_state,
            r.actions
        );
    }
    let omegas: Vec<u8> = trace.iter().map(|r| r.omega).collect();
    ensure!(omegas == vec![0, 1, 1, 0], "ω trace {omegas:?}");
    let secs = t.elapsed().as_secs_f64();
    ensure!(secs < 1.0, "took {secs:.3} s");
    Ok(format!(
        "z=(1,1,2,2,1), 4 information states bit-exact, {secs:.4} s"
    ))
}

// ---------------------------------------------------------------- 2

/// Constant-delay reference built from FIFO queues over an undelayed env.
struct QueueOracle {
    env: deer_core::envs::AnyEnv,
    d: usize,
    delivered: Vec<f64>,
    states: VecDeque<Vec<f64>>,
    rewards: VecDeque<f64>,
    actions: VecDeque<Vec<f64>>,
    env_done: bool,
}

impl QueueOracle {
    fn new(env_cfg: &EnvConfig, d: usize) -> Self {
        Self {
            env: env_cfg.build().unwrap(),
            d,
            delivered: Vec::new(),
            states: VecDeque::new(),
            rewards: VecDeque::new(),
            actions: VecDeque::new(),
            env_done: false,
        }
    }

    fn push_env_step(&mut self, a: &[f64]) {
        let tr = self.env.step(a).unwrap();
        self.env_done = tr.done;
        self.states.push_back(tr.next_state);
        self.rewards.push_back(tr.reward);
    }

    fn reset(&mut self, seed: u64) -> (Vec<f64>, Vec<Vec<f64>>) {
        self.delivered = self.env.reset(seed);
        self.states.clear();
        self.rewards.clear();
        self.actions.clear();
        self.env_done = false;
        let zero = vec![0.0; self.env.spec().action_dim];
        for _ in 0..self.d {
            self.push_env_step(&zero);
            self.actions.push_back(zero.clone());
        }
        (
            self.delivered.clone(),
            self.actions.iter().cloned().collect(),
        )
    }

    /// Returns `(base state, actions, reward, done)`.
    fn step(&mut self, a: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>, f64, bool) {
        if !self.env_done {
            self.push_env_step(a);
        }
        self.actions.push_back(a.to_vec());
        self.actions.pop_front();
        self.delivered = self.states.pop_front().expect("queued state");
        let r = self.rewards.pop_front().expect("queued reward");
        let done = self.env_done && self.states.is_empty();
        (
            self.delivered.clone(),
            self.actions.iter().cloned().collect(),
            r,
            done,
        )
    }
}

fn c2_cdmdp_reduction(_: &mut Lab) -> Check {
    let env_cfg = EnvConfig::LinearSystem(LinearSystemConfig::default());
    let spec = env_cfg.build().map_err(err)?.spec().clone();
    for d in [1usize, 2, 4, 8] {
        let mut proc =
            DelayProcess::bernoulli(env_cfg.build().map_err(err)?, DelayConfig::constant(d))
                .map_err(err)?;
        let mut oracle = QueueOracle::new(&env_cfg, d);
        let mut r: SimRng = rng(derive_seed(9, d as u64));
        let mut episode = 0u64;
        let info = proc.reset_with_seed(episode).map_err(err)?;
        let (s, acts) = oracle.reset(episode);
        ensure!(
            info.base_state == s && info.actions == acts,
            "d={d}: reset differs"
        );
        for step in 0..1000 {
            let a: Vec<f64> = (0..spec.action_dim)
                .map(|k| r.random_range(spec.action_low[k]..spec.action_high[k]))
                .collect();
            let out = proc.step(&a).map_err(err)?;
            let (s, acts, rew, done) = oracle.step(&a);
            ensure!(
                out.info.base_state == s && out.info.actions == acts && out.info.z == d,
                "d={d} step {step}: information state differs"
            );
            ensure!(
                out.reward == rew && out.done == done,
                "d={d} step {step}: reward/done differ"
            );
            if done {
                episode += 1;
                let info = proc.reset_with_seed(episode).map_err(err)?;
                let (s, acts) = oracle.reset(episode);
                ensure!(
                    info.base_state == s && info.actions == acts,
                    "d={d}: reset {episode} differs"
                );
            }
        }
    }
    Ok("1000 steps each for d ∈ {1,2,4,8}: states, actions, rewards, done flags identical".into())
}

// ---------------------------------------------------------------- 3

struct AttentionInputs {
    query: Param,
    states: Vec<Param>,
}

impl Parameterized for AttentionInputs {
    fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.query).chain(&self.states).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.query)
            .chain(&mut self.states)
            .collect()
    }
}

fn uniform(rows: usize, cols: usize, r: &mut SimRng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
}

fn mse_to<'p>(
    g: &mut Graph<'p>,
    out: deer_core::nncore::Var,
    target: &'p Array2<f64>,
) -> deer_core::nncore::Var {
    let y = g.constant(target);
    let diff = g.sub(out, y);
    let sq = g.square(diff);
    g.mean(sq)
}

fn c3_gradient_suite(_: &mut Lab) -> Check {
    let t = Instant::now();
    let tol = 1e-4;
    let h = 1e-5;
    let mut r = rng(2024);
    let mut results: Vec<(&str, f64)> = Vec::new();

    let mut dense = Dense::new("dense", 3, 2, Activation::Tanh, &mut r);
    let x = uniform(4, 3, &mut r);
    let y = uniform(4, 2, &mut r);
    let rep = check_gradients(
        &mut dense,
        |m: &Dense| {
            let mut g = Graph::new();
            let b = m.bind(&mut g, Binding::Trainable);
            let xv = g.constant(&x);
            let out = b.apply(&mut g, xv);
            let loss = mse_to(&mut g, out, &y);
            Ok((g.scalar(loss), g.backward(loss)?))
        },
        h,
    )
    .map_err(err)?;
    results.push(("dense", rep.max_rel_error));

    let mut gru = GruCell::new("gru", 3, 4, &mut r);
    let x1 = uniform(2, 3, &mut r);
    let x2 = uniform(2, 3, &mut r);
    let h0 = uniform(2, 4, &mut r);
    let y = uniform(2, 4, &mut r);
    let rep = check_gradients(
        &mut gru,
        |m: &GruCell| {
            let mut g = Graph::new();
            let b = m.bind(&mut g, Binding::Trainable);
            let (a, bx, hv) = (g.constant(&x1), g.constant(&x2), g.constant(&h0));
            let h1 = b.apply(&mut g, a, hv);
            let h2 = b.apply(&mut g, bx, h1);
            let loss = mse_to(&mut g, h2, &y);
            Ok((g.scalar(loss), g.backward(loss)?))
        },
        h,
    )
    .map_err(err)?;
    results.push(("gru", rep.max_rel_error));

    let mut inputs = AttentionInputs {
        query: Param::new("q", uniform(2, 4, &mut r)),
        states: (0..3)
            .map(|j| Param::new(format!("h{j}"), uniform(2, 4, &mut r)))
            .collect(),
    };
    let y_ctx = uniform(2, 4, &mut r);
    let y_w = uniform(2, 3, &mut r);
    let rep = check_gradients(
        &mut inputs,
        |m: &AttentionInputs| {
            let mut g = Graph::new();
            let q = g.param(&m.query);
            let hs: Vec<_> = m.states.iter().map(|p| g.param(p)).collect();
            let (ctx, w) = attend(&mut g, &hs, q);
            let l1 = mse_to(&mut g, ctx, &y_ctx);
            let l2 = mse_to(&mut g, w, &y_w);
            let loss = g.add(l1, l2);
            Ok((g.scalar(loss), g.backward(loss)?))
        },
        h,
    )
    .map_err(err)?;
    results.push(("attention", rep.max_rel_error));

    let seq_cfg = Seq2SeqConfig {
        k1: 8,
        k2: 4,
        max_delay: 3,
        teacher_forcing: 0.5,
    };
    let mut model = Seq2SeqModel::new(seq_cfg, 3, 2, &mut r).map_err(err)?;
    let n = 3;
    let batch = SeqBatch {
        anchors: uniform(n, 3, &mut r),
        actions: (0..3).map(|_| uniform(n, 2, &mut r)).collect(),
        labels: (0..3).map(|_| uniform(n, 3, &mut r)).collect(),
        feed_own: vec![
            Array2::zeros((n, 1)),
            ndarray::array![[1.0], [0.0], [1.0]],
            ndarray::array![[0.0], [1.0], [1.0]],
        ],
    };
    let rep = check_gradients(
        &mut model,
        |m: &Seq2SeqModel| {
            let mut g = Graph::new();
            let (loss, _) = m.batch_loss(&mut g, &batch, Binding::Trainable)?;
            Ok((g.scalar(loss), g.backward(loss)?))
        },
        h,
    )
    .map_err(err)?;
    ensure!(
        rep.entries_checked == model.num_params(),
        "seq2seq: not every parameter checked"
    );
    results.push(("seq2seq masked MSE (K1=8, K2=4)", rep.max_rel_error));

    let entries: Vec<ReplayEntry> = (0..5)
        .map(|_| ReplayEntry {
            h: (0..3).map(|_| r.random_range(-1.0..1.0)).collect(),
            a: (0..2).map(|_| r.random_range(-0.9..0.9)).collect(),
            r: r.random_range(-1.0..1.0),
            h_next: (0..3).map(|_| r.random_range(-1.0..1.0)).collect(),
            done: false,
        })
        .collect();
    let batch = Batch::from_entries(&entries.iter().collect::<Vec<_>>()).map_err(err)?;
    let mut actor = Actor::new(3, 2, &[8, 8], &mut r);
    let mut critic = TwinCritic::new(3, 2, &[8, 8], &mut r);
    let target = TwinCritic::new(3, 2, &[8, 8], &mut r);
    let eps = Array2::from_shape_fn((5, 2), |_| StandardNormal.sample(&mut r));
    let y = critic_targets(&target, &actor, 0.2, 0.99, &batch, &eps);
    let rep = check_gradients(&mut critic, |c| critic_loss(c, &batch, &y), h).map_err(err)?;
    results.push(("sac critic", rep.max_rel_error));
    let frozen = critic.clone();
    let rep = check_gradients(
        &mut actor,
        |a| actor_loss(a, &frozen, 0.2, &batch, &eps).map(|(l, g, _)| (l, g)),
        h,
    )
    .map_err(err)?;
    results.push(("sac actor", rep.max_rel_error));
    let (log_alpha, mean_logp, target_ent) = (-1.2, -0.7, -2.0);
    let (_, analytic) = alpha_loss(log_alpha, mean_logp, target_ent);
    let numeric = (alpha_loss(log_alpha + h, mean_logp, target_ent).0
        - alpha_loss(log_alpha - h, mean_logp, target_ent).0)
        / (2.0 * h);
    results.push((
        "sac temperature",
        deer_core::nncore::gradcheck::relative_error(analytic, numeric),
    ));

    let secs = t.elapsed().as_secs_f64();
    let worst = results
        .iter()
        .cloned()
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let summary = results
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure!(
        worst.1 < tol,
        "{} relative error {:.3e} ≥ {tol:e} ({summary})",
        worst.0,
        worst.1
    );
    ensure!(secs < 60.0, "took {secs:.1} s");
    Ok(format!("{summary}; {secs:.2} s"))
}

// ---------------------------------------------------------------- 4

fn c4_encoder_fidelity(lab: &mut Lab) -> Check {
    let fin = lab.pipeline("linear_system")?;
    let cfg = &fin.cfg;
    ensure!(cfg.seq2seq.max_delay == 4, "linear config must use D = 4");
    let layout = Layout::new(&cfg.output_dir);
    let (file, _) = DatasetFile::load(&layout.dataset()).map_err(err)?;
    ensure!(
        file.store.count(Provenance::Random) == 500 && file.store.count(Provenance::Expert) == 10,
        "dataset mix differs from 500 random + 10 expert"
    );
    let (model, _, _) = Seq2SeqModel::load(&layout.encoder(cfg.seq2seq.k1)).map_err(err)?;
    let env = match &cfg.env {
        EnvConfig::LinearSystem(c) => {
            ensure!(c.noise_std == 0.0, "linear system must be noiseless");
            LinearSystemEnv::new(c).map_err(err)?
        }
        _ => return Err("linear_system config has another env".into()),
    };
    let samples = file.samples().map_err(err)?;
    let (_, test) =
        split(&samples, cfg.dataset.split_ratio, cfg.dataset.split_seed()).map_err(err)?;
    let s_dim = file.store.spec.state_dim;
    let mut sq = vec![0.0; s_dim];
    let mut count = 0usize;
    let mut label_gap = 0.0f64;
    for smp in &test {
        let anchor = smp.anchor_state(&file.store).to_vec();
        let actions: Vec<Vec<f64>> = smp
            .real_actions(&file.store)
            .iter()
            .map(|a| a.to_vec())
            .collect();
        // Exact rollout x ← A x + B u.
        let mut x = anchor.clone();
        let mut oracle = Vec::with_capacity(actions.len());
        for u in &actions {
            x = (0..s_dim)
                .map(|i| {
                    (0..s_dim).map(|j| env.a[(i, j)] * x[j]).sum::<f64>()
                        + (0..u.len()).map(|j| env.b[(i, j)] * u[j]).sum::<f64>()
                })
                .collect();
            oracle.push(x.clone());
        }
        for (o, l) in oracle.iter().zip(smp.real_labels(&file.store)) {
            for (a, b) in o.iter().zip(l) {
                label_gap = label_gap.max((a - b).abs());
            }
        }
        let info = InformationState {
            base_state: anchor,
            z: actions.len(),
            actions,
        };
        let preds = model.predict_states(&info).map_err(err)?;
        for (p, o) in preds.iter().zip(&oracle) {
            for k in 0..s_dim {
                sq[k] += (p[k] - o[k]).powi(2);
            }
            count += 1;
        }
    }
    ensure!(
        label_gap < 1e-9,
        "stored labels deviate from the A/B rollout by {label_gap:e}"
    );
    let mse: Vec<f64> = sq.iter().map(|s| s / count as f64).collect();
    let txt = mse
        .iter()
        .map(|m| format!("{m:.2e}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure!(
        mse.iter().all(|m| *m < 1e-3),
        "per-dimension MSE [{txt}] not all < 1e-3"
    );
    Ok(format!(
        "{} test samples, autoregressive MSE vs A/B rollout per dim [{txt}]",
        test.len()
    ))
}

// ---------------------------------------------------------------- 5

fn check_dataset(cfg: &ExperimentConfig) -> Result<usize, String> {
    let layout = Layout::new(&cfg.output_dir);
    let (file, _) = DatasetFile::load(&layout.dataset()).map_err(err)?;
    let store = &file.store;
    let (s_dim, a_dim) = (store.spec.state_dim, store.spec.action_dim);
    let mut env = cfg.env.build().map_err(err)?;
    let (mut n_random, mut n_expert) = (0u64, 0u64);
    let mut replayed: Vec<Vec<Vec<f64>>> = Vec::with_capacity(store.len());
    for (ti, traj) in store.trajectories.iter().enumerate() {
        let (i, base) = match traj.provenance {
            Provenance::Random => (&mut n_random, cfg.dataset.random_seed()),
            Provenance::Expert => (&mut n_expert, cfg.dataset.expert_seed()),
        };
        let mut states = vec![env.reset(derive_seed(base, *i))];
        *i += 1;
        for (k, tr) in traj.transitions.iter().enumerate() {
            let out = env.step(&tr.action).map_err(err)?;
            ensure!(
                out.reward == tr.reward && out.next_state == tr.next_state,
                "{}: trajectory {ti} step {k} does not replay",
                cfg.name
            );
            states.push(out.next_state);
        }
        ensure!(
            states[0] == traj.state(0),
            "{}: trajectory {ti} start differs",
            cfg.name
        );
        replayed.push(states);
    }
    let samples = file.samples().map_err(err)?;
    let delays = cfg.delay_set();
    let expected: usize = store
        .trajectories
        .iter()
        .map(|t| {
            delays
                .iter()
                .filter(|&&d| d <= t.len())
                .map(|&d| t.len() - d + 1)
                .sum::<usize>()
        })
        .sum();
    ensure!(
        samples.len() == expected,
        "{}: {} samples, expected {expected}",
        cfg.name,
        samples.len()
    );
    let d_max = file.max_delay;
    for s in &samples {
        let p = s.materialize(store);
        let states = &replayed[s.trajectory];
        let traj = &store.trajectories[s.trajectory];
        ensure!(p.anchor_state == states[s.start], "anchor mismatch");
        ensure!(
            p.actions.len() == d_max && p.labels.len() == d_max && p.mask.len() == d_max,
            "padded length"
        );
        for k in 0..d_max {
            if k < s.delay {
                ensure!(
                    p.labels[k] == states[s.start + k + 1]
                        && p.actions[k] == traj.transitions[s.start + k].action,
                    "{}: sample {s:?} step {k} does not replay to its label",
                    cfg.name
                );
                ensure!(p.mask[k] == 1.0, "mask must be 1 on real steps");
            } else {
                ensure!(
                    p.mask[k] == 0.0
                        && p.labels[k] == vec![0.0; s_dim]
                        && p.actions[k] == vec![0.0; a_dim],
                    "{}: padding of {s:?} at {k} is not zero",
                    cfg.name
                );
            }
        }
    }
    Ok(samples.len())
}

fn c5_dataset_correctness(lab: &mut Lab) -> Check {
    let mut parts = Vec::new();
    for name in ["linear_system", "point_mass", "pendulum"] {
        let cfg = lab.pipeline(name)?.cfg.clone();
        let n = check_dataset(&cfg)?;
        parts.push(format!("{name} {n}"));
    }
    Ok(format!(
        "100% of samples replay; padding and masks hold ({})",
        parts.join(", ")
    ))
}

// ---------------------------------------------------------------- 6

fn c6_fixed_length(_: &mut Lab) -> Check {
    let env_cfg = EnvConfig::LinearSystem(LinearSystemConfig::default());
    let k1 = 32;
    let cfg = Seq2SeqConfig {
        k1,
        k2: 16,
        max_delay: 6,
        teacher_forcing: 0.5,
    };
    let model = Seq2SeqModel::new(cfg, 4, 2, &mut rng(1)).map_err(err)?;
    let spec = env_cfg.build().map_err(err)?.spec().clone();
    for z in 1..=6 {
        let info = InformationState {
            base_state: vec![0.1; 4],
            actions: vec![vec![0.2, -0.2]; z],
            z,
        };
        ensure!(
            model.encode(&info).map_err(err)?.values.len() == k1,
            "z={z}: wrong length"
        );
    }
    let mut seen = BTreeMap::new();
    for (i, mu) in [0.2, 0.4, 0.6].into_iter().enumerate() {
        let delay = DelayConfig::random(2, 4, mu).with_seed(i as u64);
        let mut p = DelayProcess::bernoulli(env_cfg.build().map_err(err)?, delay).map_err(err)?;
        let mut r = rng(100 + i as u64);
        let mut info = p.reset().map_err(err)?;
        for step in 0..10_000 {
            let c = model.encode(&info).map_err(err)?;
            ensure!(
                c.values.len() == k1,
                "μ={mu} step {step}: length {}",
                c.values.len()
            );
            ensure!(
                (2..=6).contains(&info.z) && c.delay == info.z,
                "μ={mu} step {step}: z={}",
                info.z
            );
            *seen.entry(info.z).or_insert(0usize) += 1;
            let a: Vec<f64> = (0..2)
                .map(|k| r.random_range(spec.action_low[k]..spec.action_high[k]))
                .collect();
            let out = p.step(&a).map_err(err)?;
            info = if out.done {
                p.reset().map_err(err)?
            } else {
                out.info
            };
        }
    }
    ensure!(
        seen.len() == 5,
        "lags observed {:?}",
        seen.keys().collect::<Vec<_>>()
    );
    Ok(format!(
        "30,000 encodes of length {k1}; lag histogram {seen:?}"
    ))
}

// ---------------------------------------------------------------- 7

fn c7_trend(lab: &mut Lab) -> Check {
    let mut lines = Vec::new();
    let mut sacas_ok = Vec::new();
    for name in ["linear_system", "point_mass"] {
        let fin = lab.pipeline(name)?;
        let rep = &fin.report;
        let k1 = Some(fin.cfg.seq2seq.k1);
        let sac = baseline(rep)?;
        let deer2 = record(rep, Mode::Deer, "const_d2", k1)?;
        let deer4 = record(rep, Mode::Deer, "const_d4", k1)?;
        let sacas4 = record(rep, Mode::Sacas, "const_d4", None)?;
        ensure!(
            deer2.seeds.len() == 5 && sac.seeds.len() == 5,
            "{name}: need 5 seeds per cell"
        );
        let ratio = deer2.median_normalized / sac.median_normalized;
        lines.push(format!(
            "{name}: SAC {} DEER(d=2) {} ratio {ratio:.3}; d=4 DEER {} SACAS {}; {:.0} s",
            cell(sac),
            cell(deer2),
            cell(deer4),
            cell(sacas4),
            fin.secs
        ));
        ensure!(
            deer2.median_normalized >= 0.8 * sac.median_normalized,
            "{name}: DEER d=2 below 80% of delay-free SAC ({})",
            lines.join(" | ")
        );
        ensure!(fin.secs < 3600.0, "{name}: pipeline took {:.0} s", fin.secs);
        sacas_ok.push(deer4.median_final() >= sacas4.median_final());
    }
    ensure!(
        sacas_ok.iter().any(|b| *b),
        "DEER d=4 below SACAS on both envs ({})",
        lines.join(" | ")
    );
    Ok(lines.join(" | "))
}

trait MedianFinal {
    fn median_final(&self) -> f64;
}

impl MedianFinal for RunRecord {
    fn median_final(&self) -> f64 {
        median(&self.final_returns)
    }
}

// ---------------------------------------------------------------- 8

fn c8_ablations(lab: &mut Lab) -> Check {
    let mut findings = Vec::new();
    let mut online_holds = Vec::new();
    for name in ["linear_system", "pendulum"] {
        let fin = lab.pipeline(name)?;
        let rep = &fin.report;
        let k1 = Some(fin.cfg.seq2seq.k1);
        for delay in fin
            .cfg
            .delays
            .configs()
            .iter()
            .filter(|d| !d.is_passthrough())
        {
            let tag = delay.tag();
            let deer = record(rep, Mode::Deer, &tag, k1)?;
            let online = record(rep, Mode::OnlineDeer, &tag, None)?;
            let holds = deer.median_final() >= online.median_final();
            online_holds.push(holds);
            findings.push(format!(
                "{name} {tag}: offline {} vs online {}{}",
                cell(deer),
                cell(online),
                if holds { "" } else { " (direction fails)" }
            ));
        }
    }
    let pend = lab.pipeline("pendulum")?;
    let k1 = Some(pend.cfg.seq2seq.k1);
    let deer = record(&pend.report, Mode::Deer, "const_d4", k1)?;
    let dolps = record(&pend.report, Mode::Dolps, "const_d4", k1)?;
    let dolps_holds = deer.median_final() >= dolps.median_final();
    findings.push(format!(
        "pendulum const_d4: DEER {} vs DOLPS {}",
        cell(deer),
        cell(dolps)
    ));
    let text = findings.join(" | ");
    ensure!(
        online_holds.iter().any(|h| *h),
        "offline < online everywhere: {text}"
    );
    ensure!(dolps_holds, "DEER below DOLPS on Pendulum: {text}");
    Ok(text)
}

// ---------------------------------------------------------------- 9

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).into_iter().flatten().flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn c9_determinism(lab: &mut Lab) -> Check {
    let first = lab.pipeline("linear_system")?;
    let root1 = first.cfg.output_dir.clone();
    let root2 = workdir().join("linear_system_rerun");
    let seed0 = Selection {
        modes: None,
        seeds: Some(vec![0]),
    };
    if root2.exists() {
        fs::remove_dir_all(&root2).map_err(err)?;
    }
    let cfg2 = load_config("linear_system", &root2)?;
    cmd_collect(&cfg2).map_err(err)?;
    cmd_pretrain(&cfg2).map_err(err)?;
    cmd_train(&cfg2, &seed0).map_err(err)?;
    cmd_eval(&cfg2, &seed0).map_err(err)?;
    cmd_eval(&first.cfg, &seed0).map_err(err)?;
    let mut compared = 0;
    for f in files_under(&root2) {
        let rel = f.strip_prefix(&root2).map_err(err)?;
        let a = fs::read(root1.join(rel)).map_err(|e| format!("{}: {e}", rel.display()))?;
        let b = fs::read(&f).map_err(err)?;
        ensure!(a == b, "{} differs between runs", rel.display());
        compared += 1;
    }
    let curves = files_under(&root2.join("curves")).len();
    ensure!(curves >= 5, "only {curves} curve files compared");
    let r1 = fs::read(Layout::new(&root1).report_json()).map_err(err)?;
    cmd_report(&first.cfg, &Selection::default()).map_err(err)?;
    let r2 = fs::read(Layout::new(&root1).report_json()).map_err(err)?;
    ensure!(r1 == r2, "report.json changed on rerun");
    Ok(format!(
        "{compared} artifacts ({curves} curves) byte-identical across collect/pretrain/train/eval reruns; report stable"
    ))
}

// ---------------------------------------------------------------- runner

type Criterion = (u8, &'static str, fn(&mut Lab) -> Check);

fn main() {
    let wanted: Vec<u8> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let criteria: [Criterion; 9] = [
        (1, "conformance trace", c1_conformance_trace),
        (2, "CDMDP reduction", c2_cdmdp_reduction),
        (3, "gradient suite", c3_gradient_suite),
        (4, "encoder fidelity", c4_encoder_fidelity),
        (5, "dataset correctness", c5_dataset_correctness),
        (6, "fixed-length context", c6_fixed_length),
        (7, "constant-delay trend", c7_trend),
        (8, "ablation directions", c8_ablations),
        (9, "determinism", c9_determinism),
    ];
    let mut lab = Lab::default();
    let mut failed = 0;
    let mut lines = Vec::new();
    for (id, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| check(&mut lab))).unwrap_or_else(|p| {
            Err(format!(
                "panic: {:?}",
                p.downcast_ref::<String>()
                    .cloned()
                    .or(p.downcast_ref::<&str>().map(|s| s.to_string()))
            ))
        });
        let secs = t.elapsed().as_secs_f64();
        let line = match outcome {
            Ok(detail) => format!("PASS [{id}] {name} ({secs:.1} s): {detail}"),
            Err(why) => {
                failed += 1;
                format!("FAIL [{id}] {name} ({secs:.1} s): {why}")
            }
        };
        println!("{line}");
        lines.push(line);
    }
    println!("\nacceptance summary");
    for l in &lines {
        println!("  {}", l.split(": ").next().unwrap_or(l));
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
