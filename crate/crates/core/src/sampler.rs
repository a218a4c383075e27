//! Batch construction under the three sampling strategies compared in the
//! experiments: shuffled, sequential, and class-balanced.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::WindowSet;
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingStrategy {
    Shuffled,
    Sequential,
    Balanced,
}

impl SamplingStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            SamplingStrategy::Shuffled => "shuffled",
            SamplingStrategy::Sequential => "sequential",
            SamplingStrategy::Balanced => "balanced",
        }
    }
}

impl std::fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// What to do when a client has fewer windows than the requested batch size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UndersizedPolicy {
    /// Emit one batch holding every window, with the smaller declared size.
    SingleBatch,
    Error,
}

/// One training batch: indices into a [`WindowSet`] (repetition allowed under
/// balanced sampling) plus the batch size the server is told.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    window_indices: Vec<usize>,
    declared_size: usize,
}

impl Batch {
    fn new(window_indices: Vec<usize>) -> Self {
        Self {
            declared_size: window_indices.len(),
            window_indices,
        }
    }

    pub fn window_indices(&self) -> &[usize] {
        &self.window_indices
    }

    pub fn declared_size(&self) -> usize {
        self.declared_size
    }
}

/// Build batches of `n` windows under the given strategy.
///
/// Partial tail batches are dropped so every update carries the same declared
/// size. Balanced batches draw `n/K` windows per class (remainder to the
/// lowest class indices), repeating samples once a class pool is exhausted;
/// classes with no windows contribute nothing and their share is spread over
/// the remaining classes, with a warning recorded.
pub fn make_batches(
    windows: &WindowSet,
    n: usize,
    strategy: SamplingStrategy,
    rng: &mut SeededRng,
    undersized: UndersizedPolicy,
) -> Result<(Vec<Batch>, Vec<String>)> {
    if n == 0 {
        return Err(Error::Size("batch size must be at least 1".into()));
    }
    if windows.is_empty() {
        return Err(Error::Size("cannot batch an empty window set".into()));
    }
    let total = windows.len();
    if total < n {
        match undersized {
            UndersizedPolicy::Error => {
                return Err(Error::Size(format!(
                    "batch size {n} exceeds the {total} available windows"
                )));
            }
            UndersizedPolicy::SingleBatch => {
                let batch = match strategy {
                    SamplingStrategy::Sequential => Batch::new((0..total).collect()),
                    SamplingStrategy::Shuffled => {
                        let mut indices: Vec<usize> = (0..total).collect();
                        indices.shuffle(rng);
                        Batch::new(indices)
                    }
                    SamplingStrategy::Balanced => {
                        let (batches, warnings) = balanced_batches(windows, total, 1, rng)?;
                        return Ok((batches, warnings));
                    }
                };
                return Ok((vec![batch], Vec::new()));
            }
        }
    }

    let batch_count = total / n;
    match strategy {
        SamplingStrategy::Sequential => {
            let batches = (0..batch_count)
                .map(|b| Batch::new((b * n..(b + 1) * n).collect()))
                .collect();
            Ok((batches, Vec::new()))
        }
        SamplingStrategy::Shuffled => {
            let mut indices: Vec<usize> = (0..total).collect();
            indices.shuffle(rng);
            let batches = indices
                .chunks_exact(n)
                .map(|chunk| Batch::new(chunk.to_vec()))
                .collect();
            Ok((batches, Vec::new()))
        }
        SamplingStrategy::Balanced => balanced_batches(windows, n, batch_count, rng),
    }
}

fn balanced_batches(
    windows: &WindowSet,
    n: usize,
    batch_count: usize,
    rng: &mut SeededRng,
) -> Result<(Vec<Batch>, Vec<String>)> {
    let k = windows.class_count;
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (idx, w) in windows.windows.iter().enumerate() {
        pools[w.label].push(idx);
    }

    // Per-class quotas: n/K each, remainder one each to the lowest indices.
    let mut quotas: Vec<usize> = (0..k).map(|c| n / k + usize::from(c < n % k)).collect();
    let mut warnings = Vec::new();
    let empty: Vec<usize> = (0..k).filter(|&c| pools[c].is_empty()).collect();
    if !empty.is_empty() {
        let nonempty: Vec<usize> = (0..k).filter(|&c| !pools[c].is_empty()).collect();
        let shortfall: usize = empty.iter().map(|&c| std::mem::take(&mut quotas[c])).sum();
        for (i, extra) in (0..shortfall).enumerate() {
            let _ = extra;
            quotas[nonempty[i % nonempty.len()]] += 1;
        }
        warnings.push(format!(
            "balanced sampling: classes {empty:?} have no windows; redistributed {shortfall} slots per batch"
        ));
    }

    let mut batches = Vec::with_capacity(batch_count);
    for _ in 0..batch_count {
        let mut picks = Vec::with_capacity(n);
        for (class, &quota) in quotas.iter().enumerate() {
            let pool = &pools[class];
            if quota == 0 {
                continue;
            }
            if pool.len() >= quota {
                // Distinct draws via a partial shuffle of the class pool.
                let mut candidates = pool.clone();
                for i in 0..quota {
                    let j = rng.random_range(i..candidates.len());
                    candidates.swap(i, j);
                }
                picks.extend_from_slice(&candidates[..quota]);
            } else {
                picks.extend_from_slice(pool);
                for _ in pool.len()..quota {
                    picks.push(pool[rng.random_range(0..pool.len())]);
                }
            }
        }
        batches.push(Batch::new(picks));
    }
    Ok((batches, warnings))
}
