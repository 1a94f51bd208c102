//! Inference: dispatch (per-sentence or per-token random experts), ensemble,
//! and learned-routing evaluation; greedy and beam decoding; corpus scoring.

mod config;
mod decode;
mod eval;

pub use config::{DecodeConfig, InferenceMode};
pub use decode::{
    beam_search, dispatch_forward, ensemble_forward, forward_logits, greedy_decode, Dispatcher,
    ForwardReport, Hypothesis,
};
pub use eval::{corpus_flops, decode_corpus, evaluate, score, EvalReport};
