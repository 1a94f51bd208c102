use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

/// Corpus BLEU on a 0–100 scale with the standard four n-gram orders.
pub fn bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    bleu_with_order(hypotheses, references, 4)
}

/// Corpus BLEU: geometric mean of clipped n-gram precisions for `n = 1..=max_n`
/// times the brevity penalty.
///
/// A zero precision for `n ≥ 2` is replaced by `(0 + 1) / (total + 1)`; a zero
/// unigram precision yields a score of 0.
pub fn bleu_with_order<T: Eq + Hash>(
    hypotheses: &[Vec<T>],
    references: &[Vec<T>],
    max_n: usize,
) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if hypotheses.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::InvalidArgument("BLEU order must be at least 1".into()));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=max_n {
            if hyp.len() < n {
                continue;
            }
            totals[n - 1] += hyp.len() + 1 - n;
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(hyp, n) {
                matches[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let log_precision: f64 = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| {
            if m == 0 {
                (1.0 / (t as f64 + 1.0)).ln()
            } else {
                (m as f64 / t as f64).ln()
            }
        })
        .sum::<f64>()
        / max_n as f64;
    let brevity = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * brevity * log_precision.exp())
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}
