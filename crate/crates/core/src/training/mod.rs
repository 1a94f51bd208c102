//! Optimization: the stochastic-expert objective and its ablations, baseline
//! cross-entropy (plus balancing loss), Adam, and the training loop.

mod adam;
mod config;
mod step;
mod trainer;
mod variance;

pub use adam::{Adam, AdamSlot};
pub use config::{inverse_sqrt_lr, Objective, TrainingConfig};
pub use step::{
    ablation_step, baseline_step, objective_step, symmetric_kl, thor_step, LossBreakdown, StepLoss,
};
pub use trainer::{StepRecord, Trainer};
pub use variance::{prediction_variance, VarianceReport};
