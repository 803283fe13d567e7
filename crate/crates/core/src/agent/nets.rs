use ndarray::Array2;
use rand::Rng;

use crate::error::{shape_err, Result};
use crate::nncore::{Activation, Binding, Dense, Graph, Param, Parameterized, Var};

/// Fully connected network: ReLU hidden layers and a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        input: usize,
        hidden: &[usize],
        output: usize,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input;
        for (i, &width) in hidden.iter().enumerate() {
            layers.push(Dense::new(
                &format!("{name}.l{i}"),
                fan_in,
                width,
                Activation::Relu,
                rng,
            ));
            fan_in = width;
        }
        layers.push(Dense::new(
            &format!("{name}.l{}", hidden.len()),
            fan_in,
            output,
            Activation::Identity,
            rng,
        ));
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Self {
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = x.to_vec();
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    pub fn apply<'p>(&'p self, g: &mut Graph<'p>, x: Var, binding: Binding) -> Var {
        let mut h = x;
        for layer in &self.layers {
            let bound = layer.bind(g, binding);
            h = bound.apply(g, h);
        }
        h
    }
}

impl Parameterized for Mlp {
    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect()
    }
}

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Tanh-squashed Gaussian policy. Actions live in `[-1, 1]^A`; callers
/// rescale to the environment box.
#[derive(Debug, Clone, PartialEq)]
pub struct Actor {
    net: Mlp,
    action_dim: usize,
}

/// Graph handles of a reparameterised actor sample.
#[derive(Debug, Clone, Copy)]
pub struct ActorSample {
    /// Squashed action `tanh(u)`, `[n, A]`.
    pub action: Var,
    /// `log π(a | h)`, `[n, 1]`.
    pub log_prob: Var,
}

impl Actor {
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        action_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Self {
        Self {
            net: Mlp::new("pi", input, hidden, 2 * action_dim, rng),
            action_dim,
        }
    }

    pub fn from_net(net: Mlp, action_dim: usize) -> Result<Self> {
        if net.out_dim() != 2 * action_dim {
            return Err(shape_err(format!(
                "actor head width {} != 2 x {action_dim}",
                net.out_dim()
            )));
        }
        Ok(Self { net, action_dim })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn in_dim(&self) -> usize {
        self.net.in_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn check_input(&self, h: &[f64]) -> Result<()> {
        if h.len() != self.in_dim() {
            return Err(shape_err(format!(
                "policy input length {} != {}",
                h.len(),
                self.in_dim()
            )));
        }
        Ok(())
    }

    /// `tanh(mean)` in `[-1, 1]^A`.
    pub fn deterministic_unit(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.check_input(h)?;
        let out = self.net.forward(h)?;
        Ok(out[..self.action_dim].iter().map(|m| m.tanh()).collect())
    }

    /// `tanh(mean + σ ε)` with `ε ~ N(0, I)` supplied by the caller.
    pub fn sample_unit(&self, h: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
        self.check_input(h)?;
        let out = self.net.forward(h)?;
        let a = self.action_dim;
        Ok((0..a)
            .map(|i| {
                let log_std = out[a + i].clamp(LOG_STD_MIN, LOG_STD_MAX);
                (out[i] + log_std.exp() * eps[i]).tanh()
            })
            .collect())
    }

    /// Reparameterised sample for a batch `h: [n, in]` with noise `eps: [n, A]`.
    ///
    /// `log π = Σ_j [ -ε_j²/2 - log σ_j - ln(2π)/2 - 2(ln 2 - u_j - softplus(-2 u_j)) ]`,
    /// the last term being the stable form of `ln(1 - tanh²(u_j))`.
    pub fn sample<'p>(
        &'p self,
        g: &mut Graph<'p>,
        h: Var,
        eps: &Array2<f64>,
        binding: Binding,
    ) -> ActorSample {
        let a = self.action_dim;
        let out = self.net.apply(g, h, binding);
        let mean = g.slice_cols(out, 0, a);
        let raw_log_std = g.slice_cols(out, a, 2 * a);
        let log_std = g.clamp(raw_log_std, LOG_STD_MIN, LOG_STD_MAX);
        let std = g.exp(log_std);
        let eps_var = g.input(eps.clone());
        let noise = g.mul(std, eps_var);
        let u = g.add(mean, noise);
        let action = g.tanh(u);

        let gauss_const = g.input(eps.mapv(|e| -0.5 * e * e - HALF_LN_2PI));
        let gauss = g.sub(gauss_const, log_std);
        let neg_2u = g.scale(u, -2.0);
        let sp = g.softplus(neg_2u);
        let u_plus_sp = g.add(u, sp);
        let correction = g.affine(u_plus_sp, -2.0, 2.0 * std::f64::consts::LN_2);
        let per_dim = g.sub(gauss, correction);
        let log_prob = g.sum_cols(per_dim);
        ActorSample { action, log_prob }
    }
}

impl Parameterized for Actor {
    fn params(&self) -> Vec<&Param> {
        self.net.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.net.params_mut()
    }
}

/// Two independent Q-networks over `[h, a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinCritic {
    q1: Mlp,
    q2: Mlp,
}

impl TwinCritic {
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        action_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Self {
        Self {
            q1: Mlp::new("q1", input + action_dim, hidden, 1, rng),
            q2: Mlp::new("q2", input + action_dim, hidden, 1, rng),
        }
    }

    /// `(Q1, Q2)` each `[n, 1]` for `h: [n, in]`, `a: [n, A]`.
    pub fn apply<'p>(&'p self, g: &mut Graph<'p>, h: Var, a: Var, binding: Binding) -> (Var, Var) {
        let x = g.concat_cols(&[h, a]);
        (self.q1.apply(g, x, binding), self.q2.apply(g, x, binding))
    }

    pub fn q_values(&self, h: &[f64], a: &[f64]) -> Result<(f64, f64)> {
        let x: Vec<f64> = h.iter().chain(a).copied().collect();
        Ok((self.q1.forward(&x)?[0], self.q2.forward(&x)?[0]))
    }
}

impl Parameterized for TwinCritic {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.q1.params();
        p.extend(self.q2.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.q1.params_mut();
        p.extend(self.q2.params_mut());
        p
    }
}
