//! Synthetic position-sensitive tasks.

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// The target at position `i` is the input token at `i + offset`;
    /// positions whose source falls outside the sequence carry no target.
    ShiftCopy { offset: i64 },
    /// Two marker tokens (id 0) are placed in the sequence; position 0 is
    /// labeled 1 when they are at most `max_distance` apart, else 0.
    DistanceClass { max_distance: usize },
}

/// How shift-copy input tokens are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TokenSampling {
    /// Consecutive blocks of `vocab` tokens, each block a uniformly random
    /// permutation of the vocabulary (the last block truncated). When the
    /// length is a multiple of `vocab`, every sequence has the same token
    /// multiset, so a position-blind model learns nothing from which tokens
    /// are present and its accuracy is capped at `1/(vocab - 1)`.
    #[default]
    Permutation,
    /// Independent uniform draws. The multiset then leaks information: a
    /// position-blind model can learn to predict tokens that occur in the
    /// sequence and exceed `1/vocab`.
    Iid,
}

/// One training or evaluation sequence. `None` targets are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

pub const MARKER: usize = 0;

/// A seeded stream of examples for one task.
#[derive(Debug, Clone)]
pub struct TaskGenerator {
    pub kind: TaskKind,
    pub n: usize,
    pub vocab: usize,
    pub sampling: TokenSampling,
    rng: SeededRng,
}

pub fn make_task(kind: TaskKind, n: usize, vocab: usize, seed: u64) -> Result<TaskGenerator> {
    validate(kind, n, vocab)?;
    Ok(TaskGenerator {
        kind,
        n,
        vocab,
        sampling: TokenSampling::default(),
        rng: SeededRng::new(seed),
    })
}

fn validate(kind: TaskKind, n: usize, vocab: usize) -> Result<()> {
    if n == 0 || vocab == 0 {
        return Err(Error::domain("task length and vocabulary must be positive"));
    }
    match kind {
        TaskKind::ShiftCopy { offset } => {
            if offset.unsigned_abs() as usize >= n {
                return Err(Error::domain(format!(
                    "shift offset {offset} must satisfy |offset| < n = {n}"
                )));
            }
        }
        TaskKind::DistanceClass { max_distance } => {
            if vocab < 3 {
                return Err(Error::domain("distance task needs a vocabulary of at least 3"));
            }
            if max_distance == 0 || max_distance + 1 >= n {
                return Err(Error::domain(format!(
                    "distance threshold {max_distance} must be in 1..{} for n = {n}",
                    n.saturating_sub(1)
                )));
            }
        }
    }
    Ok(())
}

/// Targets for a shift-copy sequence.
pub fn shift_targets(tokens: &[usize], offset: i64) -> Vec<Option<usize>> {
    let n = tokens.len() as i64;
    (0..n)
        .map(|i| {
            let src = i + offset;
            (0..n).contains(&src).then(|| tokens[src as usize])
        })
        .collect()
}

impl TaskGenerator {
    pub fn sample(&mut self) -> Example {
        self.sample_len(self.n)
    }

    /// An example of length `n`, which may differ from the training length.
    pub fn sample_len(&mut self, n: usize) -> Example {
        match self.kind {
            TaskKind::ShiftCopy { offset } => {
                let tokens = self.draw_tokens(n);
                let targets = shift_targets(&tokens, offset);
                Example { tokens, targets }
            }
            TaskKind::DistanceClass { max_distance } => self.distance_example(n, max_distance),
        }
    }

    pub fn with_sampling(mut self, sampling: TokenSampling) -> Self {
        self.sampling = sampling;
        self
    }

    fn draw_tokens(&mut self, n: usize) -> Vec<usize> {
        match self.sampling {
            TokenSampling::Iid => (0..n).map(|_| self.rng.below(self.vocab)).collect(),
            TokenSampling::Permutation => {
                let mut tokens = Vec::with_capacity(n + self.vocab);
                while tokens.len() < n {
                    let mut block: Vec<usize> = (0..self.vocab).collect();
                    // Fisher-Yates
                    for i in (1..block.len()).rev() {
                        let j = self.rng.below(i + 1);
                        block.swap(i, j);
                    }
                    tokens.extend(block);
                }
                tokens.truncate(n);
                tokens
            }
        }
    }

    fn distance_example(&mut self, n: usize, max_distance: usize) -> Example {
        let mut tokens: Vec<usize> = (0..n).map(|_| 1 + self.rng.below(self.vocab - 1)).collect();
        let near = self.rng.below(2) == 1;
        let (first, second) = loop {
            let a = self.rng.below(n);
            let b = self.rng.below(n);
            if a == b {
                continue;
            }
            if (a.abs_diff(b) <= max_distance) == near {
                break (a, b);
            }
        };
        tokens[first] = MARKER;
        tokens[second] = MARKER;
        let mut targets = vec![None; n];
        targets[0] = Some(usize::from(near));
        Example { tokens, targets }
    }

    pub fn batch(&mut self, count: usize) -> Vec<Example> {
        (0..count).map(|_| self.sample()).collect()
    }
}
