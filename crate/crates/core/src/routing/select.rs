use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::SeededRng;

/// How many experts to activate per layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectCount {
    One,
    Pair,
    All,
}

/// Selected expert indices for each expert layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertChoice {
    pub per_layer: Vec<Vec<usize>>,
}

impl ExpertChoice {
    /// The `slot`-th selected expert of every layer (0 = first of a pair).
    pub fn slot(&self, slot: usize) -> Vec<usize> {
        self.per_layer.iter().map(|c| c[slot]).collect()
    }

    /// Same expert for both passes in every layer.
    pub fn identical_pair(experts: &[usize]) -> Self {
        Self {
            per_layer: experts.iter().map(|&e| vec![e, e]).collect(),
        }
    }
}

/// Uniform gate-free expert selection for `layers` layers of `n_experts` experts.
///
/// A pair is an ordered draw without replacement; with a single expert the
/// pair degenerates to `(0, 0)`.
pub fn thor_select(
    rng: &mut SeededRng,
    layers: usize,
    n_experts: usize,
    count: SelectCount,
) -> ExpertChoice {
    assert!(n_experts >= 1, "expert layers hold at least one expert");
    let per_layer = (0..layers)
        .map(|_| match count {
            SelectCount::One => vec![rng.gen_range(0..n_experts)],
            SelectCount::Pair if n_experts == 1 => vec![0, 0],
            SelectCount::Pair => {
                let i = rng.gen_range(0..n_experts);
                let mut j = rng.gen_range(0..n_experts - 1);
                if j >= i {
                    j += 1;
                }
                vec![i, j]
            }
            SelectCount::All => (0..n_experts).collect(),
        })
        .collect();
    ExpertChoice { per_layer }
}
