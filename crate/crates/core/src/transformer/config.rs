use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    /// Hidden width of every expert FFN.
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub vocab_src: usize,
    pub vocab_tgt: usize,
    pub dropout: f64,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("model.d_model", self.d_model),
            ("model.n_heads", self.n_heads),
            ("model.d_head", self.d_head),
            ("model.d_ff", self.d_ff),
            ("model.n_enc_layers", self.n_enc_layers),
            ("model.n_dec_layers", self.n_dec_layers),
            ("model.vocab_src", self.vocab_src),
            ("model.vocab_tgt", self.vocab_tgt),
            ("model.max_seq_len", self.max_seq_len),
        ];
        for (path, v) in dims {
            if v == 0 {
                return Err(Error::config(path, "must be positive"));
            }
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::config(
                "model.d_head",
                format!(
                    "n_heads ({}) × d_head ({}) must equal d_model ({})",
                    self.n_heads, self.d_head, self.d_model
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Number of expert layers (one per encoder and decoder layer).
    pub fn n_layers(&self) -> usize {
        self.n_enc_layers + self.n_dec_layers
    }
}

/// How an expert layer chooses among its experts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RoutingMode {
    /// Softmax gate, top-K experts mixed by their gate values.
    GatedTopK { k: usize },
    /// Top-1 gate per token.
    SwitchToken,
    /// Top-1 gate per sentence, computed on the mean token representation.
    SwitchSentence,
    /// Uniformly random expert per token; no gate.
    SwitchRandom,
    /// Gate-free stochastic experts chosen by the caller.
    Thor,
}

impl RoutingMode {
    pub fn has_gate(self) -> bool {
        matches!(
            self,
            RoutingMode::GatedTopK { .. } | RoutingMode::SwitchToken | RoutingMode::SwitchSentence
        )
    }

    /// Gated modes that send each unit to exactly one expert.
    pub fn is_gated_top1(self) -> bool {
        matches!(
            self,
            RoutingMode::SwitchToken | RoutingMode::SwitchSentence | RoutingMode::GatedTopK { k: 1 }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    pub n_experts: usize,
    pub mode: RoutingMode,
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 {
            return Err(Error::config("experts.n_experts", "must be at least 1"));
        }
        if let RoutingMode::GatedTopK { k } = self.mode {
            if k == 0 || k > self.n_experts {
                return Err(Error::config(
                    "experts.mode.k",
                    format!("need 1 <= k <= n_experts ({})", self.n_experts),
                ));
            }
        }
        Ok(())
    }
}
