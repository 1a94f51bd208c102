use super::adam::Adam;
use super::config::{inverse_sqrt_lr, TrainingConfig};
use super::step::{objective_step, LossBreakdown};
use crate::autodiff::{RngState, SeededRng};
use crate::data::{BatchSchedule, Example};
use crate::error::Result;
use crate::routing::TelemetryFragment;
use crate::transformer::Model;

/// Outcome of one optimizer step.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub loss: LossBreakdown,
    pub fragments: Vec<TelemetryFragment>,
}

/// Owns a model, its optimizer state, and the training stream.
///
/// Step `t` always trains on batch `t` of the deterministic schedule, so a
/// trainer rebuilt from saved parameters, optimizer moments, rng state, and
/// step counter continues exactly where the original left off.
pub struct Trainer {
    pub model: Model,
    pub config: TrainingConfig,
    pub adam: Adam,
    pub rng: SeededRng,
    /// Completed optimizer steps.
    pub step: u64,
    train: Vec<Example>,
    schedule: BatchSchedule,
}

impl Trainer {
    pub fn new(model: Model, config: TrainingConfig, train: Vec<Example>) -> Result<Self> {
        let rng = SeededRng::derived(config.seed, &[0x7124]);
        let adam = Adam::new(config.beta1, config.beta2, config.adam_eps);
        Self::resume(model, config, adam, rng.state(), 0, train)
    }

    pub fn resume(
        model: Model,
        config: TrainingConfig,
        adam: Adam,
        rng: RngState,
        step: u64,
        train: Vec<Example>,
    ) -> Result<Self> {
        config.validate()?;
        let schedule = BatchSchedule::new(&train, config.batch_tokens, config.seed)?;
        Ok(Self {
            model,
            config,
            adam,
            rng: SeededRng::from_state(rng),
            step,
            train,
            schedule,
        })
    }

    pub fn train_examples(&self) -> &[Example] {
        &self.train
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        inverse_sqrt_lr(self.config.lr, self.config.warmup_steps, step)
    }

    /// Runs one optimizer step and returns its losses.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let batch = self.schedule.batch_at(&self.train, self.step)?;
        let step = self.step + 1;
        let lr = self.lr_at(step);
        let mut loss = objective_step(&self.model, &batch, &self.config, &mut self.rng)?;
        let fragments = std::mem::take(&mut loss.fragments);
        let mut breakdown = loss.backward(&mut self.model.store)?;
        self.adam.step(&mut self.model.store, lr)?;
        self.step = step;
        breakdown.step = step;
        breakdown.lr = lr;
        Ok(StepRecord {
            loss: breakdown,
            fragments,
        })
    }

    /// Trains until `config.total_steps`, calling `on_step` after every step.
    pub fn run<F>(&mut self, mut on_step: F) -> Result<()>
    where
        F: FnMut(&mut Self, &StepRecord) -> Result<()>,
    {
        while self.step < self.config.total_steps {
            let record = self.train_step()?;
            on_step(self, &record)?;
        }
        Ok(())
    }
}

