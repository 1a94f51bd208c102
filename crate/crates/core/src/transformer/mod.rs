//! Encoder–decoder transformer with pluggable expert FFN sublayers.

mod attention;
mod config;
mod model;

pub use attention::{sinusoidal_positions, LayerNorm, Linear, MultiHeadAttention};
pub use config::{ExpertConfig, ModelConfig, RoutingMode};
pub use model::{ForwardCtx, Model, Routing, TokenGrid};
