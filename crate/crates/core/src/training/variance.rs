use serde::{Deserialize, Serialize};

use crate::data::{Batch, Example, PAD};
use crate::error::{Error, Result};
use crate::inference::{decode_corpus, forward_logits, score, DecodeConfig};
use crate::transformer::Model;

/// Spread of predictions across stochastic-routing evaluation runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub seeds: Vec<u64>,
    /// Corpus BLEU of each run.
    pub scores: Vec<f64>,
    pub mean: f64,
    /// Population variance of `scores`.
    pub variance: f64,
    /// Variance across runs of the reference-token probability, averaged over
    /// every non-pad target token of the corpus.
    pub token_prob_variance: f64,
    /// The same quantity averaged within each example.
    pub per_example: Vec<f64>,
}

fn population_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Reference-token probabilities under teacher forcing, one vector per example.
fn reference_probs(model: &Model, examples: &[Example], decode: &DecodeConfig) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(examples.len());
    for i in 0..examples.len() {
        let batch = Batch::from_split(examples, &[i])?;
        let logits = forward_logits(model, &batch, decode.mode, decode.seed)?.logits;
        let probs = batch
            .target_out
            .iter()
            .enumerate()
            .filter(|&(_, &y)| y != PAD)
            .map(|(r, &y)| {
                let z = logits.row(r);
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = z.iter().map(|v| (v - max).exp()).sum();
                (z[y] - max).exp() / denom
            })
            .collect();
        out.push(probs);
    }
    Ok(out)
}

/// Evaluates `examples` once per seed under the dispatch mode of `decode`
/// and reports how much corpus BLEU and token probabilities move.
pub fn prediction_variance(
    model: &Model,
    examples: &[Example],
    decode: &DecodeConfig,
    seeds: &[u64],
) -> Result<VarianceReport> {
    if seeds.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "prediction variance needs at least 2 runs, got {}",
            seeds.len()
        )));
    }
    if !decode.mode.is_dispatch() {
        return Err(Error::InvalidArgument(format!(
            "prediction variance needs a dispatch mode, got `{}`",
            decode.mode.name()
        )));
    }
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let refs: Vec<Vec<usize>> = examples.iter().map(|e| e.target.clone()).collect();
    let mut scores = Vec::with_capacity(seeds.len());
    let mut probs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = DecodeConfig {
            seed,
            ..decode.clone()
        };
        let hyps = decode_corpus(model, examples, &cfg)?;
        scores.push(score(&hyps, &refs)?.0);
        probs.push(reference_probs(model, examples, &cfg)?);
    }
    let (mean, variance) = population_variance(&scores);
    let mut per_example = Vec::with_capacity(examples.len());
    let (mut total, mut count) = (0.0, 0usize);
    for e in 0..examples.len() {
        let tokens = probs[0][e].len();
        let mut sum = 0.0;
        for t in 0..tokens {
            let across: Vec<f64> = probs.iter().map(|run| run[e][t]).collect();
            sum += population_variance(&across).1;
        }
        total += sum;
        count += tokens;
        per_example.push(sum / tokens as f64);
    }
    Ok(VarianceReport {
        seeds: seeds.to_vec(),
        scores,
        mean,
        variance,
        token_prob_variance: total / count as f64,
        per_example,
    })
}
