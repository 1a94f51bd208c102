use rand::seq::SliceRandom;
use rand::Rng;

use super::{Example, BOS, EOS, PAD};
use crate::autodiff::SeededRng;
use crate::error::{Error, Result};

/// Padded, row-major id matrices for a group of examples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    /// `[batch_size × src_len]`: symbols followed by EOS, then PAD.
    pub source: Vec<usize>,
    /// `[batch_size × tgt_len]`: BOS followed by the target symbols.
    pub target_in: Vec<usize>,
    /// `[batch_size × tgt_len]`: target symbols followed by EOS.
    pub target_out: Vec<usize>,
    /// `true` exactly at padded source positions.
    pub src_pad: Vec<bool>,
    /// `true` exactly at padded target positions.
    pub tgt_pad: Vec<bool>,
    /// Position of each row's example in its split; keys per-sentence randomness.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn new(examples: &[&Example], indices: &[usize]) -> Result<Self> {
        if examples.is_empty() || examples.len() != indices.len() {
            return Err(Error::InvalidArgument(
                "batch needs one index per example and at least one example".into(),
            ));
        }
        let b = examples.len();
        let src_len = examples.iter().map(|e| e.source.len() + 1).max().unwrap_or(1);
        let tgt_len = examples.iter().map(|e| e.target.len() + 1).max().unwrap_or(1);
        let mut source = vec![PAD; b * src_len];
        let mut target_in = vec![PAD; b * tgt_len];
        let mut target_out = vec![PAD; b * tgt_len];
        for (r, e) in examples.iter().enumerate() {
            let s = &mut source[r * src_len..(r + 1) * src_len];
            s[..e.source.len()].copy_from_slice(&e.source);
            s[e.source.len()] = EOS;
            let ti = &mut target_in[r * tgt_len..(r + 1) * tgt_len];
            ti[0] = BOS;
            ti[1..=e.target.len()].copy_from_slice(&e.target);
            let to = &mut target_out[r * tgt_len..(r + 1) * tgt_len];
            to[..e.target.len()].copy_from_slice(&e.target);
            to[e.target.len()] = EOS;
        }
        let src_pad = pad_mask(examples.iter().map(|e| e.source.len() + 1), src_len);
        let tgt_pad = pad_mask(examples.iter().map(|e| e.target.len() + 1), tgt_len);
        Ok(Self {
            batch_size: b,
            src_len,
            tgt_len,
            source,
            target_in,
            target_out,
            src_pad,
            tgt_pad,
            indices: indices.to_vec(),
        })
    }

    /// Builds a batch from positions into `split`.
    pub fn from_split(split: &[Example], indices: &[usize]) -> Result<Self> {
        let examples: Vec<&Example> = indices.iter().map(|&i| &split[i]).collect();
        Self::new(&examples, indices)
    }

    /// Padded token slots, the quantity bounded by the batching budget.
    pub fn token_slots(&self) -> usize {
        self.batch_size * self.src_len.max(self.tgt_len)
    }

    /// Number of non-pad target positions.
    pub fn target_tokens(&self) -> usize {
        self.tgt_pad.iter().filter(|&&p| !p).count()
    }
}

fn pad_mask(lens: impl Iterator<Item = usize>, width: usize) -> Vec<bool> {
    lens.flat_map(|len| (0..width).map(move |i| i >= len))
        .collect()
}

fn slots(e: &Example) -> usize {
    e.source.len().max(e.target.len()) + 1
}

/// Length-bucketed batches of split positions for one epoch.
///
/// Examples are ordered by padded length (ties broken randomly), packed greedily
/// so that `rows × longest` stays within `token_budget`, and the batch order is
/// then shuffled. Every example appears exactly once.
pub fn epoch_batches(
    examples: &[Example],
    token_budget: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    let longest = examples.iter().map(slots).max().unwrap_or(0);
    if token_budget < longest {
        return Err(Error::InvalidArgument(format!(
            "token budget {token_budget} is smaller than the longest example ({longest} slots)"
        )));
    }
    let mut rng = SeededRng::derived(seed, &[epoch]);
    let mut order: Vec<(usize, u64, usize)> = examples
        .iter()
        .enumerate()
        .map(|(i, e)| (slots(e), rng.gen::<u64>(), i))
        .collect();
    order.sort_unstable();

    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut width = 0;
    for (len, _, i) in order {
        let w = width.max(len);
        if !current.is_empty() && (current.len() + 1) * w > token_budget {
            batches.push(std::mem::take(&mut current));
            width = 0;
        }
        width = width.max(len);
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches.shuffle(&mut rng);
    Ok(batches)
}

/// Maps a global step to its batch, epoch by epoch, without external state.
#[derive(Clone, Debug)]
pub struct BatchSchedule {
    token_budget: usize,
    seed: u64,
    per_epoch: usize,
    cached_epoch: Option<(u64, Vec<Vec<usize>>)>,
}

impl BatchSchedule {
    pub fn new(examples: &[Example], token_budget: usize, seed: u64) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let per_epoch = epoch_batches(examples, token_budget, seed, 0)?.len();
        Ok(Self {
            token_budget,
            seed,
            per_epoch,
            cached_epoch: None,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.per_epoch
    }

    pub fn batch_at(&mut self, examples: &[Example], step: u64) -> Result<Batch> {
        let epoch = step / self.per_epoch as u64;
        let pos = (step % self.per_epoch as u64) as usize;
        if self.cached_epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let batches = epoch_batches(examples, self.token_budget, self.seed, epoch)?;
            debug_assert_eq!(batches.len(), self.per_epoch);
            self.cached_epoch = Some((epoch, batches));
        }
        let (_, batches) = self.cached_epoch.as_ref().expect("cached above");
        Batch::from_split(examples, &batches[pos])
    }
}
