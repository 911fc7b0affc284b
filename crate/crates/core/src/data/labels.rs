//! Popularity labels and their normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Likes per view.
pub fn compute_popularity(likes: u64, views: u64) -> Result<f64> {
    if views == 0 {
        return Err(Error::InvalidArgument("views must be at least 1".into()));
    }
    Ok(likes as f64 / views as f64)
}

/// Mean and population standard deviation of the training labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Normalizer {
    pub fn fit(labels: &[f64]) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 labels to normalize, got {}",
                labels.len()
            )));
        }
        let n = labels.len() as f64;
        let mean = labels.iter().sum::<f64>() / n;
        let var = labels.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::InvalidArgument("labels are constant (zero standard deviation)".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

pub fn fit_normalizer(train_labels: &[f64]) -> Result<Normalizer> {
    Normalizer::fit(train_labels)
}

pub fn apply_normalizer(norm: &Normalizer, label: f64) -> f64 {
    norm.apply(label)
}
