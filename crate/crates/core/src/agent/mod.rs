//! Soft actor-critic over context representations and the comparison modes.
//!
//! - DEER: the policy reads the frozen encoder's context vector.
//! - SACAS: the policy reads the information state flattened and zero-padded to `D` actions.
//! - DOLPS: the policy reads the decoder's last predicted state.
//! - online-DEER: the encoder starts random and is retrained on interaction data.
//!
//! With a zero delay every mode degenerates to SAC on raw states.

mod nets;
mod replay;
mod runner;
mod sac;

pub use nets::{Actor, ActorSample, Mlp, TwinCritic, LOG_STD_MAX, LOG_STD_MIN};
pub use replay::{Batch, ReplayBuffer, ReplayEntry};
pub use runner::{
    evaluate_policy, run, run_deer, run_dolps, run_online_deer, run_sacas, train_expert,
    CurveRecord, Featurizer, LearningCurve, Mode, OnlineConfig, RunConfig, RunOutput,
};
pub use sac::{
    actor_loss, alpha_loss, critic_loss, critic_targets, Sac, SacConfig, SacLosses, Temperature,
};
