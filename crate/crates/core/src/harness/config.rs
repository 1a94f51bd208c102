use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticTaskSpec;
use crate::error::{Error, Result};
use crate::inference::DecodeConfig;
use crate::training::{Objective, TrainingConfig};
use crate::transformer::{ExpertConfig, ModelConfig, RoutingMode};

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_dir: PathBuf,
    /// Steps per routing-telemetry record.
    pub telemetry_interval: u64,
    /// Steps between validation passes; the final step is always validated.
    pub validate_interval: u64,
    pub model: ModelConfig,
    pub experts: ExpertConfig,
    pub training: TrainingConfig,
    pub decode: DecodeConfig,
    pub task: SyntheticTaskSpec,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.experts.validate()?;
        self.training.validate()?;
        self.decode.validate(self.model.max_seq_len)?;
        self.task.validate(self.model.max_seq_len)?;
        if self.telemetry_interval == 0 {
            return Err(Error::config("telemetry_interval", "must be positive"));
        }
        if self.validate_interval == 0 {
            return Err(Error::config("validate_interval", "must be positive"));
        }
        for (path, vocab) in [
            ("model.vocab_src", self.model.vocab_src),
            ("model.vocab_tgt", self.model.vocab_tgt),
        ] {
            if vocab < self.task.vocab_size {
                return Err(Error::config(
                    path,
                    format!("smaller than task.vocab_size ({})", self.task.vocab_size),
                ));
            }
        }
        // TOML integers are signed 64-bit.
        for (path, seed) in [
            ("training.seed", self.training.seed),
            ("decode.seed", self.decode.seed),
            ("task.seed", self.task.seed),
        ] {
            if seed > i64::MAX as u64 {
                return Err(Error::config(path, "must not exceed 2^63 - 1"));
            }
        }
        let objective = self.training.objective;
        if objective.is_stochastic() && self.experts.mode != RoutingMode::Thor {
            return Err(Error::config(
                "training.objective",
                format!("`{}` requires experts.mode.kind = \"thor\"", objective.name()),
            ));
        }
        if self.experts.mode == RoutingMode::Thor
            && self.experts.n_experts > 1
            && !objective.is_stochastic()
        {
            return Err(Error::config(
                "training.objective",
                "gate-free layers with several experts need a stochastic-expert objective",
            ));
        }
        if objective == Objective::SwitchCePlusAux && !self.experts.mode.is_gated_top1() {
            return Err(Error::config(
                "training.objective",
                "switch_ce_plus_aux requires a gated top-1 routing mode",
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Overrides the field at dotted `path` (e.g. `training.alpha`) with
    /// `value`, parsed as a TOML literal when possible and as a string otherwise.
    /// Only the field's type is checked; call [`RunConfig::validate`] afterwards.
    pub fn set(&mut self, path: &str, value: &str) -> Result<()> {
        let mut root = toml::Value::try_from(&*self)?;
        let mut slot = &mut root;
        let parts: Vec<&str> = path.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = slot
                .as_table_mut()
                .ok_or_else(|| Error::config(path, "not a configuration section"))?;
            if i + 1 == parts.len() {
                table.insert((*part).to_string(), parse_literal(value));
                break;
            }
            slot = table
                .get_mut(*part)
                .ok_or_else(|| Error::config(path, "unknown configuration field"))?;
        }
        let updated: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(path, e.message().to_string()))?;
        let mut check = toml::Value::try_from(&updated)?;
        for part in &parts {
            check = match check.as_table_mut().and_then(|t| t.remove(*part)) {
                Some(v) => v,
                None => return Err(Error::config(path, "unknown configuration field")),
            };
        }
        *self = updated;
        Ok(())
    }

    /// Applies `path=value` overrides in order, then validates the result.
    pub fn apply_overrides<'a>(
        &mut self,
        overrides: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<()> {
        for (path, value) in overrides {
            self.set(path, value)?;
        }
        self.validate()
    }
}

fn parse_literal(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}
