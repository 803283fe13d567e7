//! Differentiable building blocks shared by the sequence model and the agent.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod tape;

pub use adam::{AdamConfig, AdamState};
pub use layers::{attend, attention, Activation, Binding, BoundDense, BoundGru, Dense, GruCell};
pub use tape::{Gradients, Graph, Param, Var};

/// A container of named parameters in a fixed order.
pub trait Parameterized {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value().len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    /// Overwrites every parameter with the same-named one from `source`.
    fn copy_params_from(&mut self, source: &dyn Parameterized) {
        let src = source.params();
        for (dst, s) in self.params_mut().into_iter().zip(src) {
            debug_assert_eq!(dst.name(), s.name());
            dst.value_mut().assign(s.value());
        }
    }

    /// Polyak averaging: `self ← τ·source + (1 - τ)·self`.
    fn soft_update_from(&mut self, source: &dyn Parameterized, tau: f64) {
        let src = source.params();
        for (dst, s) in self.params_mut().into_iter().zip(src) {
            dst.value_mut()
                .zip_mut_with(s.value(), |d, &v| *d = tau * v + (1.0 - tau) * *d);
        }
    }
}
