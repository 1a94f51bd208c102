use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Two sampled expert paths, both cross-entropies plus the consistency term.
    ThorFull,
    /// First path's cross-entropy plus the consistency term.
    Ce1Cr,
    /// Both cross-entropies, no consistency term.
    Ce1Ce2,
    /// One sampled expert path, one cross-entropy.
    Ce1Only,
    /// Single forward pass with each layer's own routing.
    BaselineCe,
    /// As `BaselineCe` plus the weighted load-balancing loss.
    SwitchCePlusAux,
}

impl Objective {
    pub const ALL: [Objective; 6] = [
        Objective::ThorFull,
        Objective::Ce1Cr,
        Objective::Ce1Ce2,
        Objective::Ce1Only,
        Objective::BaselineCe,
        Objective::SwitchCePlusAux,
    ];

    /// Objectives that sample experts themselves and need gate-free layers.
    pub fn is_stochastic(self) -> bool {
        matches!(
            self,
            Objective::ThorFull | Objective::Ce1Cr | Objective::Ce1Ce2 | Objective::Ce1Only
        )
    }

    pub fn has_cr(self) -> bool {
        matches!(self, Objective::ThorFull | Objective::Ce1Cr)
    }

    pub fn name(self) -> &'static str {
        match self {
            Objective::ThorFull => "thor_full",
            Objective::Ce1Cr => "ce1_cr",
            Objective::Ce1Ce2 => "ce1_ce2",
            Objective::Ce1Only => "ce1_only",
            Objective::BaselineCe => "baseline_ce",
            Objective::SwitchCePlusAux => "switch_ce_plus_aux",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown objective `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub objective: Objective,
    /// Consistency-term weight; ignored by objectives without it.
    pub alpha: f64,
    /// Peak learning rate.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: u64,
    /// Token budget per batch (source plus target slots, padding included).
    pub batch_tokens: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub label_smoothing: f64,
    pub aux_coefficient: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            objective: Objective::ThorFull,
            alpha: 5.0,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            warmup_steps: 4000,
            batch_tokens: 4096,
            total_steps: 100_000,
            seed: 1,
            label_smoothing: 0.1,
            aux_coefficient: 0.01,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("training.alpha", self.alpha),
            ("training.aux_coefficient", self.aux_coefficient),
        ];
        for (path, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(path, "must be a finite value >= 0"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("training.lr", "must be positive"));
        }
        for (path, b) in [("training.beta1", self.beta1), ("training.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(path, "must lie in [0, 1)"));
            }
        }
        if self.adam_eps <= 0.0 {
            return Err(Error::config("training.adam_eps", "must be positive"));
        }
        if self.warmup_steps == 0 {
            return Err(Error::config("training.warmup_steps", "must be positive"));
        }
        if self.batch_tokens == 0 {
            return Err(Error::config("training.batch_tokens", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("training.label_smoothing", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Inverse-square-root schedule with linear warmup, peaking at `peak` when
/// `step == warmup`. Steps are 1-based.
pub fn inverse_sqrt_lr(peak: f64, warmup: u64, step: u64) -> f64 {
    let t = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    peak * (t / w).min((w / t).sqrt())
}
