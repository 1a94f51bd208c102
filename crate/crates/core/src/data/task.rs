use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::RESERVED;
use crate::autodiff::SeededRng;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    /// Substitution cipher over symbols followed by reversal of consecutive
    /// blocks of `reorder_window` tokens.
    CipherTranslation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    /// Total vocabulary size including the reserved ids.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub seed: u64,
    /// Symbol permutation for the cipher task, indexed by `id - RESERVED`.
    /// Drawn from `seed` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permutation: Option<Vec<usize>>,
    #[serde(default)]
    pub reorder_window: usize,
}

/// One `(source, target)` pair of symbol ids, without BOS/EOS.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn num_symbols(&self) -> usize {
        self.vocab_size.saturating_sub(RESERVED)
    }

    pub fn validate(&self, max_seq_len: usize) -> Result<()> {
        if self.vocab_size <= RESERVED {
            return Err(Error::config(
                "task.vocab_size",
                format!("must exceed the {RESERVED} reserved ids"),
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config(
                "task.min_len",
                "need 1 <= min_len <= max_len",
            ));
        }
        // +1 for the EOS / BOS marker
        if self.max_len + 1 > max_seq_len {
            return Err(Error::config(
                "task.max_len",
                format!("max_len + 1 exceeds max_seq_len {max_seq_len}"),
            ));
        }
        if let Some(p) = &self.permutation {
            let mut sorted = p.clone();
            sorted.sort_unstable();
            if sorted != (0..self.num_symbols()).collect::<Vec<_>>() {
                return Err(Error::config(
                    "task.permutation",
                    "must be a permutation of 0..vocab_size-4",
                ));
            }
        }
        Ok(())
    }

    /// Symbol mapping used by the cipher task.
    pub fn cipher_permutation(&self) -> Vec<usize> {
        match &self.permutation {
            Some(p) => p.clone(),
            None => {
                let mut p: Vec<usize> = (0..self.num_symbols()).collect();
                p.shuffle(&mut SeededRng::derived(self.seed, &[1]));
                p
            }
        }
    }

    /// The deterministic target for `source`.
    pub fn transduce(&self, source: &[usize]) -> Vec<usize> {
        self.transduce_with(source, &self.cipher_permutation())
    }

    fn transduce_with(&self, source: &[usize], perm: &[usize]) -> Vec<usize> {
        match self.kind {
            TaskKind::Copy => source.to_vec(),
            TaskKind::Reverse => source.iter().rev().copied().collect(),
            TaskKind::CipherTranslation => {
                let mut out: Vec<usize> = source
                    .iter()
                    .map(|&s| perm[s - RESERVED] + RESERVED)
                    .collect();
                if self.reorder_window >= 2 {
                    for block in out.chunks_mut(self.reorder_window) {
                        block.reverse();
                    }
                }
                out
            }
        }
    }

    fn distinct_sequences(&self) -> f64 {
        let s = self.num_symbols() as f64;
        (self.min_len..=self.max_len).map(|l| s.powi(l as i32)).sum()
    }
}

/// Samples train/valid/test splits whose source sequences are pairwise distinct.
pub fn generate_dataset(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    if spec.vocab_size <= RESERVED {
        return Err(Error::InfeasibleSpec(format!(
            "vocab_size {} leaves no symbols after {RESERVED} reserved ids",
            spec.vocab_size
        )));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::InfeasibleSpec(format!(
            "invalid length range {}..={}",
            spec.min_len, spec.max_len
        )));
    }
    let total = spec.train_size + spec.valid_size + spec.test_size;
    if total as f64 > spec.distinct_sequences() {
        return Err(Error::InfeasibleSpec(format!(
            "{total} distinct samples requested but only {} sequences exist",
            spec.distinct_sequences()
        )));
    }
    let perm = spec.cipher_permutation();
    let mut rng = SeededRng::derived(spec.seed, &[0]);
    let mut seen = HashSet::with_capacity(total);
    let mut all = Vec::with_capacity(total);
    let max_attempts = 100 * total.max(1);
    let mut attempts = 0;
    while all.len() < total {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::InfeasibleSpec(format!(
                "could not draw {total} distinct samples in {max_attempts} attempts"
            )));
        }
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let source: Vec<usize> = (0..len)
            .map(|_| RESERVED + rng.gen_range(0..spec.num_symbols()))
            .collect();
        if seen.insert(source.clone()) {
            let target = spec.transduce_with(&source, &perm);
            all.push(Example { source, target });
        }
    }
    let test = all.split_off(spec.train_size + spec.valid_size);
    let valid = all.split_off(spec.train_size);
    Ok(Dataset {
        train: all,
        valid,
        test,
    })
}

fn write_lines(path: &Path, seqs: impl Iterator<Item = String>) -> Result<()> {
    let mut body = String::new();
    for line in seqs {
        body.push_str(&line);
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

/// Writes `{split}.src` / `{split}.tgt` parallel files, one space-separated sequence per line.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for split in [Split::Train, Split::Valid, Split::Test] {
        let examples = dataset.split(split);
        write_lines(
            &dir.join(format!("{}.src", split.name())),
            examples.iter().map(|e| join_ids(&e.source)),
        )?;
        write_lines(
            &dir.join(format!("{}.tgt", split.name())),
            examples.iter().map(|e| join_ids(&e.target)),
        )?;
    }
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<Vec<usize>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|line| {
            line.split_whitespace()
                .map(|tok| {
                    tok.parse::<usize>().map_err(|_| {
                        Error::InvalidArgument(format!("bad token `{tok}` in {}", path.display()))
                    })
                })
                .collect()
        })
        .collect()
}

pub fn read_split(dir: &Path, split: Split) -> Result<Vec<Example>> {
    let src = read_lines(&dir.join(format!("{}.src", split.name())))?;
    let tgt = read_lines(&dir.join(format!("{}.tgt", split.name())))?;
    if src.len() != tgt.len() {
        return Err(Error::InvalidArgument(format!(
            "{} split has {} sources but {} targets",
            split.name(),
            src.len(),
            tgt.len()
        )));
    }
    Ok(src
        .into_iter()
        .zip(tgt)
        .map(|(source, target)| Example { source, target })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TaskKind) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            kind,
            vocab_size: 12,
            min_len: 2,
            max_len: 6,
            train_size: 200,
            valid_size: 30,
            test_size: 30,
            seed: 5,
            permutation: None,
            reorder_window: 3,
        }
    }

    #[test]
    fn copy_target_equals_source() {
        let d = generate_dataset(&spec(TaskKind::Copy)).unwrap();
        assert!(d.train.iter().all(|e| e.source == e.target));
    }

    #[test]
    fn reverse_target_is_reversed_source() {
        let d = generate_dataset(&spec(TaskKind::Reverse)).unwrap();
        for e in d.train.iter().chain(&d.test) {
            let mut r = e.source.clone();
            r.reverse();
            assert_eq!(r, e.target);
        }
    }

    #[test]
    fn identity_cipher_without_reordering_is_copy() {
        let mut s = spec(TaskKind::CipherTranslation);
        s.permutation = Some((0..8).collect());
        s.reorder_window = 0;
        let d = generate_dataset(&s).unwrap();
        assert!(d.valid.iter().all(|e| e.source == e.target));
    }

    #[test]
    fn cipher_maps_and_reorders_blocks() {
        let mut s = spec(TaskKind::CipherTranslation);
        s.permutation = Some(vec![1, 2, 3, 4, 5, 6, 7, 0]);
        s.reorder_window = 2;
        assert_eq!(s.transduce(&[4, 5, 6, 11, 7]), vec![6, 5, 4, 7, 8]);
    }

    #[test]
    fn splits_are_disjoint_and_deterministic() {
        let s = spec(TaskKind::CipherTranslation);
        let a = generate_dataset(&s).unwrap();
        let b = generate_dataset(&s).unwrap();
        assert_eq!(a, b);
        let train: HashSet<_> = a.train.iter().map(|e| &e.source).collect();
        assert!(a.valid.iter().chain(&a.test).all(|e| !train.contains(&e.source)));
        let valid: HashSet<_> = a.valid.iter().map(|e| &e.source).collect();
        assert!(a.test.iter().all(|e| !valid.contains(&e.source)));
        assert_eq!(a.train.len(), 200);
    }

    #[test]
    fn infeasible_spec_is_rejected() {
        let mut s = spec(TaskKind::Copy);
        s.vocab_size = 6;
        s.min_len = 1;
        s.max_len = 2;
        // 2 + 4 = 6 distinct sequences
        assert!(matches!(generate_dataset(&s), Err(Error::InfeasibleSpec(_))));
        s.vocab_size = 4;
        assert!(matches!(generate_dataset(&s), Err(Error::InfeasibleSpec(_))));
    }

    #[test]
    fn files_round_trip() {
        let d = generate_dataset(&spec(TaskKind::Reverse)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &d).unwrap();
        assert_eq!(read_split(dir.path(), Split::Test).unwrap(), d.test);
        let first = fs::read_to_string(dir.path().join("train.src")).unwrap();
        assert_eq!(first.lines().next().unwrap(), join_ids(&d.train[0].source));
    }
}
