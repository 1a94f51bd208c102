use super::config::{DecodeConfig, InferenceMode};
use crate::autodiff::{mix, Graph, SeededRng, Tensor};
use crate::data::{Batch, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::transformer::{ForwardCtx, Model, Routing, TokenGrid};

/// Deterministic expert choices for dispatch inference.
///
/// A choice depends only on `(seed, sentence, layer)` for sentence-level
/// dispatch and additionally on the token position for token-level dispatch,
/// so it is independent of batching, hypothesis, and evaluation order.
#[derive(Clone, Debug)]
pub struct Dispatcher {
    pub mode: InferenceMode,
    pub seed: u64,
    pub n_experts: usize,
    /// Sentence id of every batch row.
    pub sentences: Vec<usize>,
}

impl Dispatcher {
    pub fn expert(&self, layer: usize, row: usize, pos: usize) -> usize {
        if self.n_experts == 1 {
            return 0;
        }
        let sentence = self.sentences[row] as u64;
        let key = match self.mode {
            InferenceMode::DispatchToken => mix(self.seed, &[1, sentence, layer as u64, pos as u64]),
            _ => mix(self.seed, &[0, sentence, layer as u64]),
        };
        (key % self.n_experts as u64) as usize
    }
}

/// Runs `f` with the routing of `mode` for rows belonging to `sentences`.
fn with_routing<T>(
    model: &Model,
    mode: InferenceMode,
    seed: u64,
    sentences: &[usize],
    f: impl FnOnce(&mut ForwardCtx<'_>) -> Result<T>,
) -> Result<T> {
    match mode {
        InferenceMode::DispatchSentence | InferenceMode::DispatchToken => {
            let d = Dispatcher {
                mode,
                seed,
                n_experts: model.n_experts(),
                sentences: sentences.to_vec(),
            };
            let route = |layer: usize, row: usize, pos: usize| d.expert(layer, row, pos);
            f(&mut ForwardCtx::eval(Routing::Dispatch(&route)))
        }
        InferenceMode::Ensemble => f(&mut ForwardCtx::eval(Routing::Ensemble)),
        InferenceMode::Learned => {
            let first = sentences.first().copied().unwrap_or(0) as u64;
            let mut rng = SeededRng::derived(seed, &[0x1ea7, first]);
            f(&mut ForwardCtx::with_rng(Routing::Learned, false, &mut rng))
        }
    }
}

/// Teacher-forced logits with their forward cost.
#[derive(Clone, Debug)]
pub struct ForwardReport {
    /// `[batch·tgt_len × vocab_tgt]`.
    pub logits: Tensor,
    pub flops: u64,
    /// Part of `flops` spent in expert layers.
    pub expert_flops: u64,
}

/// Teacher-forced forward pass of `batch` under an inference mode; rows are
/// keyed by `batch.indices` for dispatch randomness.
pub fn forward_logits(
    model: &Model,
    batch: &Batch,
    mode: InferenceMode,
    seed: u64,
) -> Result<ForwardReport> {
    with_routing(model, mode, seed, &batch.indices, |ctx| {
        let mut g = Graph::new();
        let logits = model.forward(&mut g, batch, ctx)?;
        Ok(ForwardReport {
            logits: g.value(logits).clone(),
            flops: g.flops(),
            expert_flops: ctx.expert_flops,
        })
    })
}

/// One random expert per layer per sentence or per token, one expert
/// evaluation per unit and layer.
pub fn dispatch_forward(
    model: &Model,
    batch: &Batch,
    mode: InferenceMode,
    seed: u64,
) -> Result<ForwardReport> {
    if !mode.is_dispatch() {
        return Err(Error::InvalidArgument(format!(
            "`{}` is not a dispatch mode",
            mode.name()
        )));
    }
    forward_logits(model, batch, mode, seed)
}

/// Every expert on every unit, outputs averaged. Uses no randomness.
pub fn ensemble_forward(model: &Model, batch: &Batch) -> Result<ForwardReport> {
    forward_logits(model, batch, InferenceMode::Ensemble, 0)
}

fn source_grid(sources: &[&[usize]]) -> (Vec<usize>, Vec<bool>, usize) {
    let len = sources.iter().map(|s| s.len() + 1).max().unwrap_or(1);
    let mut ids = vec![PAD; sources.len() * len];
    let mut pad = vec![true; sources.len() * len];
    for (r, s) in sources.iter().enumerate() {
        let row = &mut ids[r * len..(r + 1) * len];
        row[..s.len()].copy_from_slice(s);
        row[s.len()] = EOS;
        pad[r * len..r * len + s.len() + 1].fill(false);
    }
    (ids, pad, len)
}

/// Encoder states for `sources` as a detached tensor plus the source pad mask.
fn encode(
    model: &Model,
    sources: &[&[usize]],
    ctx: &mut ForwardCtx<'_>,
) -> Result<(Tensor, Vec<bool>)> {
    let (ids, pad, len) = source_grid(sources);
    let grid = TokenGrid {
        ids: &ids,
        batch: sources.len(),
        len,
        pad: &pad,
    };
    let mut g = Graph::new();
    let memory = model.encode(&mut g, &grid, ctx)?;
    Ok((g.value(memory).clone(), pad))
}

/// Log-probabilities of the last position of each row, with PAD and BOS excluded.
fn next_token_logprobs(
    model: &Model,
    memory: &Tensor,
    src_pad: &[bool],
    prefixes: &[Vec<usize>],
    ctx: &mut ForwardCtx<'_>,
) -> Result<Vec<Vec<f64>>> {
    let b = prefixes.len();
    let t = prefixes[0].len();
    let ids: Vec<usize> = prefixes.iter().flatten().copied().collect();
    let pad: Vec<bool> = ids.iter().map(|&id| id == PAD).collect();
    let grid = TokenGrid {
        ids: &ids,
        batch: b,
        len: t,
        pad: &pad,
    };
    let mut g = Graph::new();
    let mem = g.constant(memory.clone());
    let logits = model.decode(&mut g, mem, src_pad, &grid, ctx)?;
    let values = g.value(logits);
    Ok((0..b)
        .map(|r| {
            let z = values.row(r * t + t - 1);
            let max = z
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != PAD && i != BOS)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + z.iter()
                    .enumerate()
                    .filter(|&(i, _)| i != PAD && i != BOS)
                    .map(|(_, &v)| (v - max).exp())
                    .sum::<f64>()
                    .ln();
            z.iter()
                .enumerate()
                .map(|(i, &v)| if i == PAD || i == BOS { f64::NEG_INFINITY } else { v - lse })
                .collect()
        })
        .collect())
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding of several sources at once; returns the generated
/// symbols of each, without EOS. `sentences` keys the dispatch randomness.
pub fn greedy_decode(
    model: &Model,
    sources: &[&[usize]],
    sentences: &[usize],
    config: &DecodeConfig,
) -> Result<Vec<Vec<usize>>> {
    config.validate(model.config.max_seq_len)?;
    if sources.is_empty() || sources.len() != sentences.len() {
        return Err(Error::InvalidArgument(
            "greedy decoding needs one sentence id per source".into(),
        ));
    }
    with_routing(model, config.mode, config.seed, sentences, |ctx| {
        let (memory, src_pad) = encode(model, sources, ctx)?;
        let mut prefixes: Vec<Vec<usize>> = vec![vec![BOS]; sources.len()];
        let mut done = vec![false; sources.len()];
        for _ in 0..config.max_decode_len {
            let logprobs = next_token_logprobs(model, &memory, &src_pad, &prefixes, ctx)?;
            for (r, prefix) in prefixes.iter_mut().enumerate() {
                if done[r] {
                    prefix.push(PAD);
                    continue;
                }
                let token = argmax(&logprobs[r]);
                prefix.push(token);
                done[r] = token == EOS;
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(prefixes
            .into_iter()
            .map(|p| p[1..].iter().copied().take_while(|&t| t != EOS && t != PAD).collect())
            .collect())
    })
}

/// A decoded sequence with its total log-probability and normalized score.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated symbols, EOS included when the hypothesis finished.
    pub tokens: Vec<usize>,
    pub logprob: f64,
    /// `logprob / len^length_penalty`.
    pub score: f64,
}

impl Hypothesis {
    /// Generated symbols without the closing EOS.
    pub fn symbols(&self) -> Vec<usize> {
        self.tokens.iter().copied().take_while(|&t| t != EOS).collect()
    }
}

fn normalized(logprob: f64, len: usize, penalty: f64) -> f64 {
    logprob / (len as f64).powf(penalty)
}

/// Length-normalized beam search for one source sentence. Expert choices stay
/// fixed per sentence (or per position) for the whole decode and are shared
/// by all hypotheses.
pub fn beam_search(
    model: &Model,
    source: &[usize],
    sentence: usize,
    config: &DecodeConfig,
) -> Result<Hypothesis> {
    config.validate(model.config.max_seq_len)?;
    let beam = config.beam_size;
    let (memory, src_pad) = with_routing(model, config.mode, config.seed, &[sentence], |ctx| {
        encode(model, &[source], ctx)
    })?;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        score: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..config.max_decode_len {
        let k = live.len();
        let tiled = Tensor::new(
            [k * memory.rows(), memory.cols()],
            (0..k).flat_map(|_| memory.data().iter().copied()).collect(),
        )?;
        let pad: Vec<bool> = (0..k).flat_map(|_| src_pad.iter().copied()).collect();
        let prefixes: Vec<Vec<usize>> = live
            .iter()
            .map(|h| std::iter::once(BOS).chain(h.tokens.iter().copied()).collect())
            .collect();
        let rows = vec![sentence; k];
        let logprobs = with_routing(model, config.mode, config.seed, &rows, |ctx| {
            next_token_logprobs(model, &tiled, &pad, &prefixes, ctx)
        })?;

        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (parent, (h, lp)) in live.iter().zip(&logprobs).enumerate() {
            for (token, &l) in lp.iter().enumerate() {
                if l.is_finite() {
                    candidates.push((h.logprob + l, parent, token));
                }
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0));

        let mut next = Vec::with_capacity(beam);
        for &(logprob, parent, token) in &candidates {
            if next.len() == beam {
                break;
            }
            let parent = &live[parent];
            let mut tokens = parent.tokens.clone();
            tokens.push(token);
            let score = normalized(logprob, tokens.len(), config.length_penalty);
            let hyp = Hypothesis {
                tokens,
                logprob,
                score,
            };
            if token == EOS {
                if finished.len() < beam {
                    finished.push(hyp);
                }
            } else {
                next.push(hyp);
            }
        }
        live = next;
        if finished.len() >= beam || live.is_empty() {
            break;
        }
        if step + 1 == config.max_decode_len {
            finished.append(&mut live);
        }
    }
    if finished.is_empty() {
        finished = live;
    }
    let best = finished
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| a.score.total_cmp(&b.score).then(j.cmp(i)))
        .map(|(_, h)| h.clone())
        .ok_or_else(|| Error::InvalidArgument("beam search produced no hypothesis".into()))?;
    debug_assert!(finished.iter().all(|h| h.score <= best.score));
    Ok(best)
}
