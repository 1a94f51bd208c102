use std::path::PathBuf;

use super::config::RunConfig;
use crate::data::{SyntheticTaskSpec, TaskKind};
use crate::error::{Error, Result};
use crate::inference::{DecodeConfig, InferenceMode};
use crate::training::{Objective, TrainingConfig};
use crate::transformer::{ExpertConfig, ModelConfig, RoutingMode};

/// A named, ready-to-train configuration.
#[derive(Clone, Debug)]
pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    pub config: RunConfig,
}

const VOCAB: usize = 16;

/// Desk-scale cipher task: 12 symbols, lengths 3–8, pairs of tokens swapped.
pub fn cipher_task(seed: u64) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        kind: TaskKind::CipherTranslation,
        vocab_size: VOCAB,
        min_len: 3,
        max_len: 8,
        train_size: 200,
        valid_size: 500,
        test_size: 100,
        seed,
        permutation: None,
        reorder_window: 2,
    }
}

pub fn copy_task(seed: u64) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        kind: TaskKind::Copy,
        permutation: None,
        reorder_window: 0,
        ..cipher_task(seed)
    }
}

/// One encoder and one decoder layer, d_model 32, two heads.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_heads: 2,
        d_head: 16,
        d_ff: 64,
        n_enc_layers: 1,
        n_dec_layers: 1,
        vocab_src: VOCAB,
        vocab_tgt: VOCAB,
        dropout: 0.1,
        max_seq_len: 12,
    }
}

fn base(name: &str, mode: RoutingMode, n_experts: usize, objective: Objective) -> RunConfig {
    RunConfig {
        run_dir: PathBuf::from("runs").join(name),
        telemetry_interval: 50,
        validate_interval: 500,
        model: tiny_model(),
        experts: ExpertConfig { n_experts, mode },
        training: TrainingConfig {
            objective,
            alpha: 5.0,
            lr: 3e-3,
            warmup_steps: 200,
            batch_tokens: 256,
            total_steps: 6000,
            seed: 1,
            label_smoothing: 0.1,
            aux_coefficient: 0.1,
            ..TrainingConfig::default()
        },
        decode: DecodeConfig {
            mode: if mode == RoutingMode::Thor {
                InferenceMode::DispatchSentence
            } else {
                InferenceMode::Learned
            },
            beam_size: 1,
            length_penalty: 1.0,
            max_decode_len: 12,
            seed: 0,
        },
        task: cipher_task(1),
    }
}

fn thor(name: &str, n_experts: usize, objective: Objective) -> RunConfig {
    base(name, RoutingMode::Thor, n_experts, objective)
}

fn vanilla(name: &str) -> RunConfig {
    base(name, RoutingMode::GatedTopK { k: 1 }, 1, Objective::BaselineCe)
}

pub fn all() -> Vec<Preset> {
    let mut presets = vec![
        Preset {
            name: "thor-tiny-cipher",
            description: "stochastic experts (N=2), full consistency-regularized objective, alpha 5",
            config: thor("thor-tiny-cipher", 2, Objective::ThorFull),
        },
        Preset {
            name: "thor-tiny-copy",
            description: "stochastic experts (N=2) on the copy task",
            config: RunConfig {
                task: copy_task(1),
                ..thor("thor-tiny-copy", 2, Objective::ThorFull)
            },
        },
        Preset {
            name: "ablation-ce1-cr",
            description: "ablation: first cross-entropy plus consistency term",
            config: thor("ablation-ce1-cr", 2, Objective::Ce1Cr),
        },
        Preset {
            name: "ablation-ce1-ce2",
            description: "ablation: both cross-entropies, no consistency term",
            config: thor("ablation-ce1-ce2", 2, Objective::Ce1Ce2),
        },
        Preset {
            name: "ablation-ce1-only",
            description: "ablation: one sampled expert path, one cross-entropy",
            config: thor("ablation-ce1-only", 2, Objective::Ce1Only),
        },
        Preset {
            name: "switch-no-balance",
            description: "token-level top-1 gate (N=2) trained without the balancing loss",
            config: base("switch-no-balance", RoutingMode::SwitchToken, 2, Objective::BaselineCe),
        },
        Preset {
            name: "switch-with-balance",
            description: "token-level top-1 gate (N=2) with the balancing loss",
            config: base(
                "switch-with-balance",
                RoutingMode::SwitchToken,
                2,
                Objective::SwitchCePlusAux,
            ),
        },
        Preset {
            name: "switch-sentence-with-balance",
            description: "sentence-level top-1 gate (N=2) with the balancing loss",
            config: base(
                "switch-sentence-with-balance",
                RoutingMode::SwitchSentence,
                2,
                Objective::SwitchCePlusAux,
            ),
        },
        Preset {
            name: "switch-random",
            description: "uniformly random expert per token (N=2), no gate",
            config: base("switch-random", RoutingMode::SwitchRandom, 2, Objective::BaselineCe),
        },
        Preset {
            name: "gated-top2",
            description: "softmax gate mixing the top 2 of 4 experts",
            config: base("gated-top2", RoutingMode::GatedTopK { k: 2 }, 4, Objective::BaselineCe),
        },
        Preset {
            name: "vanilla-tiny-cipher",
            description: "plain transformer (one expert per layer) on the cipher task",
            config: vanilla("vanilla-tiny-cipher"),
        },
        Preset {
            name: "vanilla-tiny-copy",
            description: "plain transformer (one expert per layer) on the copy task",
            config: RunConfig {
                task: copy_task(1),
                ..vanilla("vanilla-tiny-copy")
            },
        },
    ];
    for (n, name) in [
        (1, "thor-experts-1"),
        (2, "thor-experts-2"),
        (4, "thor-experts-4"),
        (8, "thor-experts-8"),
    ] {
        presets.push(Preset {
            name,
            description: "expert-count sweep; reports the train/valid gap per N without asserting a direction",
            config: thor(name, n, Objective::ThorFull),
        });
    }
    presets
}

pub fn find(name: &str) -> Result<Preset> {
    all().into_iter().find(|p| p.name == name).ok_or_else(|| {
        let names: Vec<&str> = all().iter().map(|p| p.name).collect();
        Error::InvalidArgument(format!(
            "unknown preset `{name}`; available: {}",
            names.join(", ")
        ))
    })
}
