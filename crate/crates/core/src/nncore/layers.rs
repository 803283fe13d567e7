//! Dense layer, GRU cell and scaled dot-product attention.
//!
//! Each block has a plain single-example forward (`forward` / `step` /
//! [`attention`]) and a graph binding used for batched training.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Graph, Param, Var};
use super::Parameterized;
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    fn on_graph(self, g: &mut Graph<'_>, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
        }
    }
}

/// Whether a bound block's parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    Trainable,
    Frozen,
}

fn bind_param<'p>(g: &mut Graph<'p>, p: &'p Param, binding: Binding) -> Var {
    match binding {
        Binding::Trainable => g.param(p),
        Binding::Frozen => g.frozen(p),
    }
}

/// Uniform(-1/√fan_in, 1/√fan_in) initialisation.
pub fn uniform_init<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    fan_in: usize,
    rng: &mut R,
) -> Array2<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// `y = activation(W x + b)` with `W: [out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    weight: Param,
    bias: Param,
    activation: Activation,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                uniform_init(out_dim, in_dim, in_dim, rng),
            ),
            bias: Param::new(
                format!("{name}.bias"),
                uniform_init(1, out_dim, in_dim, rng),
            ),
            activation,
        }
    }

    pub fn zeros(name: &str, in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), Array2::zeros((out_dim, in_dim))),
            bias: Param::new(format!("{name}.bias"), Array2::zeros((1, out_dim))),
            activation,
        }
    }

    pub fn from_parts(
        name: &str,
        weight: Array2<f64>,
        bias: Array1<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(shape_err(format!(
                "dense {name}: weight {:?} vs bias {}",
                weight.dim(),
                bias.len()
            )));
        }
        let bias = bias.insert_axis(ndarray::Axis(0));
        Ok(Self {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), bias),
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape().1
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape().0
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weight(&self) -> &Array2<f64> {
        self.weight.value()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(shape_err(format!(
                "dense input length {} != {}",
                x.len(),
                self.in_dim()
            )));
        }
        let w = self.weight.value();
        let b = self.bias.value();
        Ok((0..self.out_dim())
            .map(|i| {
                let z: f64 = w.row(i).iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b[[0, i]];
                self.activation.apply(z)
            })
            .collect())
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<'p>, binding: Binding) -> BoundDense {
        BoundDense {
            weight: bind_param(g, &self.weight, binding),
            bias: bind_param(g, &self.bias, binding),
            activation: self.activation,
        }
    }
}

impl Parameterized for Dense {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundDense {
    weight: Var,
    bias: Var,
    activation: Activation,
}

impl BoundDense {
    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let z = g.matmul_t(x, self.weight);
        let z = g.add(z, self.bias);
        self.activation.on_graph(g, z)
    }
}

/// Single-layer GRU cell.
///
/// Gate blocks are stacked in the order (reset, update, candidate):
///
/// - `r = σ(W_ir x + W_hr h + b_r)`
/// - `u = σ(W_iu x + W_hu h + b_u)`
/// - `n = tanh(W_in x + b_n + r ⊙ (W_hn h))`
/// - `h' = (1 - u) ⊙ n + u ⊙ h`
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    w_ih: Param,
    w_hh: Param,
    bias: Param,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(name: &str, in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w_ih: Param::new(
                format!("{name}.w_ih"),
                uniform_init(3 * hidden, in_dim, hidden, rng),
            ),
            w_hh: Param::new(
                format!("{name}.w_hh"),
                uniform_init(3 * hidden, hidden, hidden, rng),
            ),
            bias: Param::new(
                format!("{name}.bias"),
                uniform_init(1, 3 * hidden, hidden, rng),
            ),
        }
    }

    pub fn zeros(name: &str, in_dim: usize, hidden: usize) -> Self {
        Self {
            w_ih: Param::new(format!("{name}.w_ih"), Array2::zeros((3 * hidden, in_dim))),
            w_hh: Param::new(format!("{name}.w_hh"), Array2::zeros((3 * hidden, hidden))),
            bias: Param::new(format!("{name}.bias"), Array2::zeros((1, 3 * hidden))),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w_ih.shape().1
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hh.shape().1
    }

    pub fn w_ih(&self) -> &Array2<f64> {
        self.w_ih.value()
    }

    pub fn w_hh(&self) -> &Array2<f64> {
        self.w_hh.value()
    }

    pub fn bias(&self) -> &Array2<f64> {
        self.bias.value()
    }

    pub fn step(&self, x: &[f64], h_prev: &[f64]) -> Result<Vec<f64>> {
        let k = self.hidden_dim();
        if x.len() != self.in_dim() || h_prev.len() != k {
            return Err(shape_err(format!(
                "gru step: input {} (want {}), hidden {} (want {k})",
                x.len(),
                self.in_dim(),
                h_prev.len()
            )));
        }
        let xa = Array1::from(x.to_vec());
        let ha = Array1::from(h_prev.to_vec());
        let gi = self.w_ih.value().dot(&xa) + &self.bias.value().row(0);
        let gh = self.w_hh.value().dot(&ha);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        Ok((0..k)
            .map(|j| {
                let r = sig(gi[j] + gh[j]);
                let u = sig(gi[k + j] + gh[k + j]);
                let n = (gi[2 * k + j] + r * gh[2 * k + j]).tanh();
                (1.0 - u) * n + u * h_prev[j]
            })
            .collect())
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<'p>, binding: Binding) -> BoundGru {
        BoundGru {
            w_ih: bind_param(g, &self.w_ih, binding),
            w_hh: bind_param(g, &self.w_hh, binding),
            bias: bind_param(g, &self.bias, binding),
            hidden: self.hidden_dim(),
        }
    }
}

impl Parameterized for GruCell {
    fn params(&self) -> Vec<&Param> {
        vec![&self.w_ih, &self.w_hh, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w_ih, &mut self.w_hh, &mut self.bias]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundGru {
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    hidden: usize,
}

impl BoundGru {
    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var, h: Var) -> Var {
        let k = self.hidden;
        let gi = g.matmul_t(x, self.w_ih);
        let gi = g.add(gi, self.bias);
        let gh = g.matmul_t(h, self.w_hh);

        let gi_r = g.slice_cols(gi, 0, k);
        let gh_r = g.slice_cols(gh, 0, k);
        let pre_r = g.add(gi_r, gh_r);
        let r = g.sigmoid(pre_r);

        let gi_u = g.slice_cols(gi, k, 2 * k);
        let gh_u = g.slice_cols(gh, k, 2 * k);
        let pre_u = g.add(gi_u, gh_u);
        let u = g.sigmoid(pre_u);

        let gi_n = g.slice_cols(gi, 2 * k, 3 * k);
        let gh_n = g.slice_cols(gh, 2 * k, 3 * k);
        let gated = g.mul(r, gh_n);
        let pre_n = g.add(gi_n, gated);
        let n = g.tanh(pre_n);

        // h' = n + u ⊙ (h - n)
        let diff = g.sub(h, n);
        let carried = g.mul(u, diff);
        g.add(n, carried)
    }
}

/// Scaled dot-product attention for a single query.
///
/// Scores are `⟨q, h_j⟩ / √k`; returns `(context, weights)`.
pub fn attention(encoder_states: &[Vec<f64>], query: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if encoder_states.is_empty() {
        return Err(shape_err("attention over an empty state list"));
    }
    let k = query.len();
    if let Some(bad) = encoder_states.iter().find(|h| h.len() != k) {
        return Err(shape_err(format!(
            "attention: state length {} vs query length {k}",
            bad.len()
        )));
    }
    let scale = 1.0 / (k as f64).sqrt();
    let scores: Vec<f64> = encoder_states
        .iter()
        .map(|h| h.iter().zip(query).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let mut context = vec![0.0; k];
    for (w, h) in weights.iter().zip(encoder_states) {
        for (c, v) in context.iter_mut().zip(h) {
            *c += w * v;
        }
    }
    Ok((context, weights))
}

/// Batched attention on the graph: each `states[j]` and `query` are `[n, k]`.
/// Returns `(context [n, k], weights [n, len(states)])`.
pub fn attend(g: &mut Graph<'_>, states: &[Var], query: Var) -> (Var, Var) {
    assert!(!states.is_empty(), "attention over an empty state list");
    let k = g.shape(query).1;
    let scores: Vec<Var> = states.iter().map(|h| g.row_dot(query, *h)).collect();
    let scores = g.concat_cols(&scores);
    let scores = g.scale(scores, 1.0 / (k as f64).sqrt());
    let weights = g.softmax_rows(scores);
    let mut context = None;
    for (j, h) in states.iter().enumerate() {
        let w = g.slice_cols(weights, j, j + 1);
        let term = g.mul(w, *h);
        context = Some(match context {
            None => term,
            Some(acc) => g.add(acc, term),
        });
    }
    (context.expect("non-empty"), weights)
}
