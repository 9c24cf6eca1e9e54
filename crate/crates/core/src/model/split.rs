use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, EventSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Fraction of observed pairs held out entirely.
    pub holdout_fraction: f64,
    /// Fraction of each remaining pair's events kept for training.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            holdout_fraction: 0.2,
            train_fraction: 0.7,
            seed: 0,
        }
    }
}

/// Train prefixes, future suffixes of the same pairs, and wholly held-out
/// pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    /// Suffix events of training pairs (only pairs with a nonempty suffix).
    pub partial_test: BTreeMap<(usize, usize), EventSequence>,
    /// Pairs with no training events at all.
    pub complete_test: Vec<EventSequence>,
    pub config: SplitConfig,
}

/// Splits the observed pairs of `dataset`.
///
/// `floor(holdout_fraction * |O|)` pairs are drawn uniformly (under `seed`)
/// into the completely-missing set. Every other pair keeps its first
/// `ceil(train_fraction * K)` events for training; the rest form its
/// partially-missing suffix. A training prefix followed by a suffix has its
/// observation window closed at its last kept event.
pub fn split_dataset(dataset: &Dataset, config: SplitConfig) -> Result<SplitDataset> {
    let SplitConfig {
        holdout_fraction,
        train_fraction,
        seed,
    } = config;
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(Error::InvalidArgument(format!(
            "holdout_fraction must lie in [0, 1), got {holdout_fraction}"
        )));
    }
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_fraction must lie in (0, 1], got {train_fraction}"
        )));
    }

    let mut observed: Vec<(usize, usize)> = dataset.observed().map(EventSequence::key).collect();
    let n_holdout = (holdout_fraction * observed.len() as f64).floor() as usize;
    if n_holdout >= observed.len() {
        return Err(Error::Data(format!(
            "holding out {n_holdout} of {} observed pairs leaves nothing to train on",
            observed.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    observed.shuffle(&mut rng);
    let mut held: Vec<(usize, usize)> = observed[..n_holdout].to_vec();
    held.sort_unstable();

    let mut train = Dataset {
        students: dataset.students.clone(),
        assignments: dataset.assignments.clone(),
        sequences: BTreeMap::new(),
        grades: dataset.grades.clone(),
        course_end: dataset.course_end,
    };
    let mut partial_test = BTreeMap::new();
    let complete_test = held.iter().map(|k| dataset.sequences[k].clone()).collect();

    for seq in dataset.observed() {
        if held.binary_search(&seq.key()).is_ok() {
            continue;
        }
        let k = seq.len();
        let n_train = ((train_fraction * k as f64).ceil() as usize).clamp(1, k);
        let (head, tail) = seq.timestamps.split_at(n_train);
        let window_end = if tail.is_empty() {
            seq.window_end
        } else {
            *head.last().expect("prefix is nonempty")
        };
        train.sequences.insert(
            seq.key(),
            EventSequence {
                timestamps: head.to_vec(),
                window_end: window_end.max(seq.window_start + f64::EPSILON),
                ..seq.clone()
            },
        );
        if !tail.is_empty() {
            partial_test.insert(
                seq.key(),
                EventSequence {
                    timestamps: tail.to_vec(),
                    ..seq.clone()
                },
            );
        }
    }

    Ok(SplitDataset {
        train,
        partial_test,
        complete_test,
        config,
    })
}
