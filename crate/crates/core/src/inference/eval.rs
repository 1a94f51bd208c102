use serde::{Deserialize, Serialize};

use super::config::{DecodeConfig, InferenceMode};
use super::decode::{beam_search, forward_logits, greedy_decode};
use crate::data::{bleu, Batch, Example};
use crate::error::{Error, Result};
use crate::transformer::Model;

/// Sentences decoded together by batched greedy search.
const GREEDY_CHUNK: usize = 64;

/// Corpus-level decoding quality and cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: InferenceMode,
    pub sentences: usize,
    pub bleu: f64,
    /// Fraction of hypotheses equal to their reference.
    pub exact_match: f64,
    /// Teacher-forced forward FLOPs over the whole split.
    pub forward_flops: u64,
    /// Part of `forward_flops` spent in expert layers.
    pub expert_flops: u64,
}

/// Decodes every example; sentence ids are positions in `examples`.
pub fn decode_corpus(model: &Model, examples: &[Example], config: &DecodeConfig) -> Result<Vec<Vec<usize>>> {
    if config.beam_size == 1 {
        let mut out = Vec::with_capacity(examples.len());
        for (c, chunk) in examples.chunks(GREEDY_CHUNK).enumerate() {
            let sources: Vec<&[usize]> = chunk.iter().map(|e| e.source.as_slice()).collect();
            let ids: Vec<usize> = (0..chunk.len()).map(|i| c * GREEDY_CHUNK + i).collect();
            out.extend(greedy_decode(model, &sources, &ids, config)?);
        }
        Ok(out)
    } else {
        examples
            .iter()
            .enumerate()
            .map(|(i, e)| Ok(beam_search(model, &e.source, i, config)?.symbols()))
            .collect()
    }
}

/// Teacher-forced FLOPs of the split under `mode`, as `(total, expert)`.
pub fn corpus_flops(model: &Model, examples: &[Example], mode: InferenceMode, seed: u64) -> Result<(u64, u64)> {
    let (mut total, mut expert) = (0, 0);
    for (c, chunk) in examples.chunks(GREEDY_CHUNK).enumerate() {
        let idx: Vec<usize> = (c * GREEDY_CHUNK..c * GREEDY_CHUNK + chunk.len()).collect();
        let batch = Batch::from_split(examples, &idx)?;
        let r = forward_logits(model, &batch, mode, seed)?;
        total += r.flops;
        expert += r.expert_flops;
    }
    Ok((total, expert))
}

/// Scores hypotheses against references.
pub fn score(hypotheses: &[Vec<usize>], references: &[Vec<usize>]) -> Result<(f64, f64)> {
    if hypotheses.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let b = bleu(hypotheses, references)?;
    let exact = hypotheses.iter().zip(references).filter(|(h, r)| h == r).count();
    Ok((b, exact as f64 / hypotheses.len() as f64))
}

/// Decodes a split and reports BLEU, exact match, and forward cost.
pub fn evaluate(model: &Model, examples: &[Example], config: &DecodeConfig) -> Result<EvalReport> {
    let hyps = decode_corpus(model, examples, config)?;
    let refs: Vec<Vec<usize>> = examples.iter().map(|e| e.target.clone()).collect();
    let (bleu, exact_match) = score(&hyps, &refs)?;
    let (forward_flops, expert_flops) = corpus_flops(model, examples, config.mode, config.seed)?;
    Ok(EvalReport {
        mode: config.mode,
        sentences: examples.len(),
        bleu,
        exact_match,
        forward_flops,
        expert_flops,
    })
}
