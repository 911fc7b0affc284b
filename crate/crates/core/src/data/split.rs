//! Seeded train/val/test partitioning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::volumes::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self::with_seed(0)
    }
}

impl SplitSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|&x| !(x > 0.0)) || ((r.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("split ratios {r:?} must be positive and sum to 1")));
        }
        Ok(())
    }
}

/// Positions of each partition into the source dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub const MIN_SPLIT_SIZE: usize = 5;

/// Shuffles `0..n` with the split seed and cuts `floor(train * n)` then
/// `floor(val * n)`; the remainder is the test set.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    if n < MIN_SPLIT_SIZE {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_SPLIT_SIZE} sequences to split, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    // the epsilon absorbs representation error such as 0.6 * 100 = 59.999..
    let n_train = (spec.train * n as f64 + 1e-9).floor() as usize;
    let n_val = (spec.val * n as f64 + 1e-9).floor() as usize;
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok(SplitIndices { train: order, val, test })
}

pub fn split_dataset<T: Scalar>(ds: &Dataset<T>, spec: &SplitSpec) -> Result<(Dataset<T>, Dataset<T>, Dataset<T>)> {
    let idx = split_indices(ds.len(), spec)?;
    Ok((ds.select(&idx.train), ds.select(&idx.val), ds.select(&idx.test)))
}
