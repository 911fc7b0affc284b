//! Pooled time series descriptors over a temporal pyramid.
//!
//! Every feature dimension is treated as its own time series. Level `l` of
//! the pyramid splits the series into `2^l` contiguous windows of
//! `floor(N / 2^l)` frames, with leftover frames joining the last window of
//! the level. Each window yields five values: mean, population standard
//! deviation, max, and the positive and negative parts of the temporal
//! gradient.

use serde::{Deserialize, Serialize};

use super::records::RawVideoRecord;
use super::volumes::VolumeSequence;
use crate::channel::Channel;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_LEVELS: usize = 5;
pub const OPERATORS: usize = 5;

/// How the temporal gradient is summarized within a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradPooling {
    /// Sum of positive differences and sum of magnitudes of negative ones.
    #[default]
    Sums,
    /// Number of positive and number of negative differences.
    HistogramCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PotLayout {
    pub dims: usize,
    pub windows: usize,
    pub operators: usize,
}

impl PotLayout {
    pub fn len(&self) -> usize {
        self.dims * self.windows * self.operators
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat position: dimension-major, then window, then operator.
    pub fn offset(&self, dim: usize, window: usize, op: usize) -> usize {
        (dim * self.windows + window) * self.operators + op
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct PotVector<T: Scalar> {
    pub values: Vec<T>,
    pub layout: PotLayout,
}

/// Number of windows in a pyramid of `levels` levels.
pub fn window_count(levels: usize) -> usize {
    (1usize << levels) - 1
}

/// `[start, end)` frame ranges of every pyramid window, coarsest level first.
pub fn pyramid_windows(frames: usize, levels: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(window_count(levels));
    for level in 0..levels {
        let parts = 1usize << level;
        let width = frames / parts;
        for w in 0..parts {
            let end = if w + 1 == parts { frames } else { (w + 1) * width };
            out.push((w * width, end));
        }
    }
    out
}

fn pool_window<T: Scalar>(series: &[Option<T>], grad: GradPooling, out: &mut [T]) {
    let present: Vec<T> = series.iter().flatten().copied().collect();
    if present.is_empty() {
        out.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let n = T::lit(present.len() as f64);
    let mean = present.iter().copied().sum::<T>() / n;
    let var = present.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    let max = present.iter().copied().fold(T::neg_infinity(), T::max);
    let (mut up, mut down) = (T::zero(), T::zero());
    for pair in present.windows(2) {
        let d = pair[1] - pair[0];
        match grad {
            GradPooling::Sums if d > T::zero() => up = up + d,
            GradPooling::Sums if d < T::zero() => down = down - d,
            GradPooling::HistogramCounts if d > T::zero() => up = up + T::one(),
            GradPooling::HistogramCounts if d < T::zero() => down = down + T::one(),
            _ => {}
        }
    }
    out.copy_from_slice(&[mean, var.sqrt(), max, up, down]);
}

/// Pools per-dimension series (`columns[d][t]`, `None` when absent).
pub fn pot_from_columns<T: Scalar>(columns: &[Vec<Option<T>>], levels: usize, grad: GradPooling) -> Result<PotVector<T>> {
    if levels == 0 || levels > 16 {
        return Err(Error::InvalidArgument(format!("levels must be in 1..=16, got {levels}")));
    }
    let frames = columns.first().map_or(0, Vec::len);
    if columns.iter().any(|c| c.len() != frames) {
        return Err(Error::dim("pot", "columns differ in length"));
    }
    let needed = 1usize << (levels - 1);
    if frames < needed {
        return Err(Error::InvalidArgument(format!(
            "{levels}-level pyramid needs at least {needed} frames, got {frames}"
        )));
    }
    let windows = pyramid_windows(frames, levels);
    let layout = PotLayout {
        dims: columns.len(),
        windows: windows.len(),
        operators: OPERATORS,
    };
    let mut values = vec![T::zero(); layout.len()];
    for (d, col) in columns.iter().enumerate() {
        for (w, &(s, e)) in windows.iter().enumerate() {
            let at = layout.offset(d, w, 0);
            pool_window(&col[s..e], grad, &mut values[at..at + OPERATORS]);
        }
    }
    Ok(PotVector { values, layout })
}

/// PoT descriptor of a frame-level record; channel dimensions are
/// concatenated face, pose, hat.
pub fn pot_features(record: &RawVideoRecord, levels: usize, grad: GradPooling) -> Result<PotVector<f64>> {
    let mut columns = Vec::new();
    for c in Channel::ALL {
        let ch = &record.channels[c];
        for k in 0..ch.dim {
            columns.push(ch.frames.iter().map(|f| f.as_ref().map(|v| v[k])).collect());
        }
    }
    pot_from_columns(&columns, levels, grad)
}

/// PoT descriptor of a volume sequence.
pub fn pot_from_sequence<T: Scalar>(seq: &VolumeSequence<T>, levels: usize, grad: GradPooling) -> Result<PotVector<T>> {
    let mut columns = Vec::new();
    for c in Channel::ALL {
        let ch = &seq.channels[c];
        for k in 0..ch.dim {
            columns.push(ch.volumes.iter().map(|v| v.as_ref().map(|t| t.as_slice()[k])).collect());
        }
    }
    pot_from_columns(&columns, levels, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_length() {
        assert_eq!(window_count(5), 31);
        let cols = vec![vec![Some(1.0f64); 16]; 3];
        let p = pot_from_columns(&cols, 5, GradPooling::Sums).unwrap();
        assert_eq!(p.values.len(), 3 * 155);
        assert_eq!(p.layout.len(), 3 * 155);
    }

    #[test]
    fn constant_series() {
        let cols = vec![vec![Some(2.5f64); 40]];
        let p = pot_from_columns(&cols, 5, GradPooling::Sums).unwrap();
        for w in 0..31 {
            let o = p.layout.offset(0, w, 0);
            assert_eq!(&p.values[o..o + 5], &[2.5, 0.0, 2.5, 0.0, 0.0]);
        }
    }

    #[test]
    fn single_window_hand_values() {
        let cols = vec![vec![Some(1.0f64), Some(3.0), Some(2.0)]];
        let p = pot_from_columns(&cols, 1, GradPooling::Sums).unwrap();
        assert_eq!(p.values, vec![2.0, (2.0f64 / 3.0).sqrt(), 3.0, 2.0, 1.0]);
        let h = pot_from_columns(&cols, 1, GradPooling::HistogramCounts).unwrap();
        assert_eq!(&h.values[3..], &[1.0, 1.0]);
    }

    #[test]
    fn too_few_frames() {
        let cols = vec![vec![Some(1.0f64); 15]];
        assert!(pot_from_columns(&cols, 5, GradPooling::Sums).is_err());
    }

    #[test]
    fn remainder_joins_last_window() {
        let w = pyramid_windows(10, 3);
        assert_eq!(w, vec![(0, 10), (0, 5), (5, 10), (0, 2), (2, 4), (4, 6), (6, 10)]);
    }

    #[test]
    fn absent_frames_skipped() {
        let cols = vec![vec![Some(1.0f64), None, Some(5.0), None]];
        let p = pot_from_columns(&cols, 1, GradPooling::Sums).unwrap();
        assert_eq!(p.values, vec![3.0, 2.0, 5.0, 4.0, 0.0]);
        let empty = vec![vec![None::<f64>; 4]];
        let p = pot_from_columns(&empty, 2, GradPooling::Sums).unwrap();
        assert!(p.values.iter().all(|&v| v == 0.0));
    }
}
