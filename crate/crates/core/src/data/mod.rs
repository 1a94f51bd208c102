//! Synthetic sequence-transduction tasks, batching, and corpus BLEU.

mod batch;
mod bleu;
mod task;

pub use batch::{epoch_batches, Batch, BatchSchedule};
pub use bleu::{bleu, bleu_with_order};
pub use task::{
    generate_dataset, read_split, write_dataset, Dataset, Example, Split, SyntheticTaskSpec,
    TaskKind,
};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Number of reserved ids preceding the task symbols.
pub const RESERVED: usize = 4;
