//! Expert layers: gated top-K mixing, Switch-style top-1 routing, random
//! routing, gate-free stochastic selection, balancing loss, and telemetry.

mod expert;
mod select;
mod telemetry;

pub use expert::{
    combine_top_k, gate_scores, load_balancing_loss, top_k_indices, ExpertFfn, ExpertLayer,
    ExpertOutput, LayerChoice, Units, INIT_STD,
};
pub use select::{thor_select, ExpertChoice, SelectCount};
pub use telemetry::{record_all_layers, record_telemetry, RoutingTelemetry, TelemetryFragment};
