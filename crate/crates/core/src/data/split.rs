use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::FeatureTable;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitMode {
    /// Train side gets `round(train_fraction * N)` rows.
    Random,
    /// Train side gets exactly this many rows.
    FixedCount(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub mode: SplitMode,
}

impl SplitSpec {
    pub fn random(train_fraction: f64, seed: u64) -> Self {
        Self {
            train_fraction,
            seed,
            mode: SplitMode::Random,
        }
    }

    pub fn fixed_count(count: usize, seed: u64) -> Self {
        Self {
            train_fraction: f64::NAN,
            seed,
            mode: SplitMode::FixedCount(count),
        }
    }

    /// Sorted train and test row indices for a table of `n` rows.
    pub fn indices(&self, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let n_train = match self.mode {
            SplitMode::Random => {
                if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
                    return Err(Error::Split(format!(
                        "train fraction {} must lie in (0, 1)",
                        self.train_fraction
                    )));
                }
                (self.train_fraction * n as f64).round() as usize
            }
            SplitMode::FixedCount(c) => c,
        };
        if n_train == 0 || n_train >= n {
            return Err(Error::Split(format!(
                "{n_train} of {n} rows for training leaves one side empty"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        let mut train = order[..n_train].to_vec();
        let mut test = order[n_train..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok((train, test))
    }
}

#[derive(Debug, Clone)]
pub struct TableSplit {
    pub train: FeatureTable,
    pub test: FeatureTable,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Disjoint, exhaustive, seed-reproducible partition of the table rows.
pub fn split(table: &FeatureTable, spec: &SplitSpec) -> Result<TableSplit> {
    let (train_indices, test_indices) = spec.indices(table.n_rows())?;
    Ok(TableSplit {
        train: table.select_rows(&train_indices),
        test: table.select_rows(&test_indices),
        train_indices,
        test_indices,
    })
}
