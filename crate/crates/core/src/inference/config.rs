use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How expert layers are evaluated at inference time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// One random expert per layer per sentence.
    DispatchSentence,
    /// One random expert per layer per token position.
    DispatchToken,
    /// All experts per layer, outputs averaged uniformly.
    Ensemble,
    /// Each layer's own trained routing (gated and Switch-style models).
    Learned,
}

impl InferenceMode {
    pub const ALL: [InferenceMode; 4] = [
        InferenceMode::DispatchSentence,
        InferenceMode::DispatchToken,
        InferenceMode::Ensemble,
        InferenceMode::Learned,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InferenceMode::DispatchSentence => "dispatch_sentence",
            InferenceMode::DispatchToken => "dispatch_token",
            InferenceMode::Ensemble => "ensemble",
            InferenceMode::Learned => "learned",
        }
    }

    pub fn is_dispatch(self) -> bool {
        matches!(self, InferenceMode::DispatchSentence | InferenceMode::DispatchToken)
    }
}

impl std::str::FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InferenceMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown inference mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: InferenceMode,
    pub beam_size: usize,
    /// Exponent of the length normalization `score / len^penalty`.
    pub length_penalty: f64,
    /// Maximum generated tokens, EOS included.
    pub max_decode_len: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: InferenceMode::DispatchSentence,
            beam_size: 5,
            length_penalty: 1.0,
            max_decode_len: 32,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self, max_seq_len: usize) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::config("decode.beam_size", "must be at least 1"));
        }
        if self.max_decode_len == 0 || self.max_decode_len > max_seq_len {
            return Err(Error::config(
                "decode.max_decode_len",
                format!("must lie in 1..={max_seq_len} (model.max_seq_len)"),
            ));
        }
        if !self.length_penalty.is_finite() {
            return Err(Error::config("decode.length_penalty", "must be finite"));
        }
        Ok(())
    }
}
