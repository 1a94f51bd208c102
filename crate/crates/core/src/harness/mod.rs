//! Run configuration, checkpoints, structured records, presets, and the
//! operations behind the command-line verbs.

mod checkpoint;
mod commands;
mod config;
pub mod presets;
mod records;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use commands::{
    analyze_routing, analyze_telemetry, eval, gen_data, resolve_run_dir, sweep_alpha, train,
    train_in_memory, variance, EvalRequest, LayerVerdict, RoutingAnalysis, SweepRow, TrainOutcome,
    COLLAPSE_LOAD, RUN_ROOT_ENV,
};
pub use config::RunConfig;
pub use presets::Preset;
pub use records::{
    read_jsonl, JsonlWriter, ValidationRecord, BEST_CHECKPOINT, CONFIG_FILE, FINAL_CHECKPOINT,
    METRICS_FILE, TELEMETRY_FILE, VALIDATION_FILE,
};
