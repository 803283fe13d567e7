use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::tape::Gradients;
use super::Parameterized;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam with bias correction. Moments are keyed by parameter name and
/// created on first use; parameters without a gradient are left untouched.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Array2<f64>>,
    second: BTreeMap<String, Array2<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn update<M: Parameterized + ?Sized>(
        &mut self,
        model: &mut M,
        grads: &Gradients,
    ) -> Result<()> {
        {
            let params = model.params();
            for (name, grad) in grads.iter() {
                let Some(p) = params.iter().find(|p| p.name() == name) else {
                    return Err(Error::Shape(format!(
                        "gradient for unknown parameter {name}"
                    )));
                };
                if p.shape() != grad.dim() {
                    return Err(Error::Shape(format!(
                        "gradient {name}: {:?} vs parameter {:?}",
                        grad.dim(),
                        p.shape()
                    )));
                }
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for p in model.params_mut() {
            let Some(grad) = grads.get(p.name()) else {
                continue;
            };
            let shape = p.shape();
            let m = self
                .first
                .entry(p.name().to_owned())
                .or_insert_with(|| Array2::zeros(shape));
            m.zip_mut_with(grad, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
            let v = self
                .second
                .entry(p.name().to_owned())
                .or_insert_with(|| Array2::zeros(shape));
            v.zip_mut_with(grad, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
            let value = p.value_mut();
            ndarray::Zip::from(value)
                .and(&*m)
                .and(&*v)
                .for_each(|w, &m, &v| {
                    let m_hat = m / c1;
                    let v_hat = v / c2;
                    *w -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::Param;
    use ndarray::array;

    struct One(Param);

    impl Parameterized for One {
        fn params(&self) -> Vec<&Param> {
            vec![&self.0]
        }
        fn params_mut(&mut self) -> Vec<&mut Param> {
            vec![&mut self.0]
        }
    }

    fn grads(name: &str, g: Array2<f64>) -> Gradients {
        let mut out = Gradients::new();
        out.accumulate(name, &g).unwrap();
        out
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut m = One(Param::new("w", array![[1.5, -2.0]]));
        let mut adam = AdamState::new(AdamConfig::default());
        adam.update(&mut m, &grads("w", array![[0.0, 0.0]]))
            .unwrap();
        assert_eq!(m.0.value(), &array![[1.5, -2.0]]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut m = One(Param::new("w", array![[1.5]]));
        let mut adam = AdamState::new(AdamConfig::with_lr(0.0));
        adam.update(&mut m, &grads("w", array![[3.0]])).unwrap();
        assert_eq!(m.0.value(), &array![[1.5]]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut m = One(Param::new("w", array![[1.0]]));
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1));
        adam.update(&mut m, &grads("w", array![[1.0]])).unwrap();
        // m̂ = 1, v̂ = 1: Δ = 0.1 / (1 + 1e-8).
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((m.0.value()[[0, 0]] - expected).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut m = One(Param::new("w", array![[1.0]]));
        let mut adam = AdamState::new(AdamConfig::default());
        assert!(adam
            .update(&mut m, &grads("w", array![[1.0, 2.0]]))
            .is_err());
        assert!(adam.update(&mut m, &grads("other", array![[1.0]])).is_err());
        assert_eq!(adam.step_count(), 0);
    }
}
