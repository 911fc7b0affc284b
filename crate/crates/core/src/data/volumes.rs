//! Volume pooling and the pooled-dataset cache.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::labels::{compute_popularity, Normalizer};
use super::records::{read_jsonl, write_jsonl, LabelLine, RawVideoRecord};
use crate::channel::{Channel, ChannelSet, PerChannel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_WINDOW: usize = 11;
pub const DEFAULT_STRIDE: usize = 4;

/// Pooled vectors of one channel, `None` where the channel is absent.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelVolumes<T: Scalar> {
    pub dim: usize,
    pub volumes: Vec<Option<Tensor<T>>>,
}

/// A video as a sequence of pooled volumes with a regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSequence<T: Scalar> {
    pub id: String,
    pub channels: PerChannel<ChannelVolumes<T>>,
    pub label: T,
}

impl<T: Scalar> VolumeSequence<T> {
    pub fn len(&self) -> usize {
        self.channels.face.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels.face.dim, self.channels.pose.dim, self.channels.hat.dim]
    }

    pub fn volume(&self, c: Channel, t: usize) -> Option<&Tensor<T>> {
        self.channels[c].volumes[t].as_ref()
    }

    /// Presence of each channel at volume `t`, restricted to `enabled`.
    pub fn presence(&self, t: usize, enabled: ChannelSet) -> [bool; 3] {
        Channel::ALL.map(|c| enabled.contains(c) && self.channels[c].volumes[t].is_some())
    }

    pub fn cast<U: Scalar>(&self) -> VolumeSequence<U> {
        VolumeSequence {
            id: self.id.clone(),
            channels: self.channels.map(|_, ch| ChannelVolumes {
                dim: ch.dim,
                volumes: ch.volumes.iter().map(|v| v.as_ref().map(Tensor::cast)).collect(),
            }),
            label: U::lit(self.label.as_f64()),
        }
    }

    /// Builds a sequence from per-step channel vectors.
    pub fn from_steps(id: impl Into<String>, dims: [usize; 3], steps: Vec<[Option<Vec<T>>; 3]>, label: T) -> Result<Self> {
        let mut channels = PerChannel::from_fn(|c| ChannelVolumes {
            dim: dims[c.index()],
            volumes: Vec::with_capacity(steps.len()),
        });
        for step in steps {
            for (c, v) in Channel::ALL.into_iter().zip(step) {
                channels[c].volumes.push(v.map(Tensor::vector).transpose()?);
            }
        }
        let seq = Self {
            id: id.into(),
            channels,
            label,
        };
        seq.check()?;
        Ok(seq)
    }

    pub fn with_label(mut self, label: T) -> Self {
        self.label = label;
        self
    }

    pub(crate) fn check(&self) -> Result<()> {
        let n = self.len();
        for (c, ch) in self.channels.iter() {
            if ch.volumes.len() != n {
                return Err(Error::Record {
                    id: self.id.clone(),
                    msg: format!("{c}: {} volumes, face has {n}", ch.volumes.len()),
                });
            }
            if let Some(bad) = ch.volumes.iter().flatten().find(|v| v.len() != ch.dim) {
                return Err(Error::Record {
                    id: self.id.clone(),
                    msg: format!("{c}: volume of length {} != dim {}", bad.len(), ch.dim),
                });
            }
        }
        Ok(())
    }
}

/// Number of full windows before empty volumes are dropped.
pub fn volume_count(frames: usize, window: usize, stride: usize) -> usize {
    if frames < window {
        0
    } else {
        (frames - window) / stride + 1
    }
}

/// Max-pools each channel over full windows of `window` frames starting at
/// `0, stride, 2*stride, ...`.
///
/// Absent frames are skipped; a channel absent throughout a window is absent
/// in that volume, and volumes with no channel present are dropped. The label
/// is the record's popularity.
pub fn pool_volumes(record: &RawVideoRecord, window: usize, stride: usize) -> Result<VolumeSequence<f64>> {
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument("window and stride must be positive".into()));
    }
    let n = record.frame_count();
    if n < window {
        return Err(Error::Record {
            id: record.id.clone(),
            msg: format!("{n} frames is shorter than the {window}-frame window"),
        });
    }
    let count = volume_count(n, window, stride);
    let mut channels: PerChannel<ChannelVolumes<f64>> = record.channels.map(|_, ch| ChannelVolumes {
        dim: ch.dim,
        volumes: Vec::with_capacity(count),
    });
    for v in 0..count {
        let start = v * stride;
        let pooled: [Option<Vec<f64>>; 3] = Channel::ALL.map(|c| {
            let ch = &record.channels[c];
            ch.frames[start..start + window].iter().flatten().fold(None, |acc: Option<Vec<f64>>, f| {
                Some(match acc {
                    None => f.clone(),
                    Some(mut m) => {
                        m.iter_mut().zip(f).for_each(|(a, &b)| *a = a.max(b));
                        m
                    }
                })
            })
        });
        if pooled.iter().all(Option::is_none) {
            continue;
        }
        for (c, p) in Channel::ALL.into_iter().zip(pooled) {
            let dim = channels[c].dim;
            channels[c].volumes.push(p.map(|v| Tensor::from_raw(vec![dim], v)));
        }
    }
    Ok(VolumeSequence {
        id: record.id.clone(),
        channels,
        label: compute_popularity(record.likes, record.views)?,
    })
}

/// A collection of sequences plus the label normalizer applied to them, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Scalar> {
    pub sequences: Vec<VolumeSequence<T>>,
    pub normalizer: Option<Normalizer>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(sequences: Vec<VolumeSequence<T>>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &sequences {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Record {
                    id: s.id.clone(),
                    msg: "duplicate id".into(),
                });
            }
            s.check()?;
        }
        Ok(Self {
            sequences,
            normalizer: None,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.sequences.iter().map(|s| s.label.as_f64()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&VolumeSequence<T>> {
        self.sequences.iter().find(|s| s.id == id)
    }

    pub fn dims(&self) -> Option<[usize; 3]> {
        self.sequences.first().map(VolumeSequence::dims)
    }

    /// Subset by position, preserving the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
            normalizer: self.normalizer,
        }
    }

    /// Applies `norm` to every label. Fails if a normalizer is already applied.
    pub fn normalized(&self, norm: Normalizer) -> Result<Self> {
        if self.normalizer.is_some() {
            return Err(Error::InvalidArgument("labels are already normalized".into()));
        }
        Ok(Self {
            sequences: self
                .sequences
                .iter()
                .map(|s| s.clone().with_label(T::lit(norm.apply(s.label.as_f64()))))
                .collect(),
            normalizer: Some(norm),
        })
    }

    /// Replaces labels by id; ids not in `labels` keep their current label.
    pub fn override_labels(&mut self, labels: &[LabelLine]) {
        let map: HashMap<&str, f64> = labels.iter().map(|l| (l.id.as_str(), l.y)).collect();
        for s in &mut self.sequences {
            if let Some(&y) = map.get(s.id.as_str()) {
                s.label = T::lit(y);
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            sequences: self.sequences.iter().map(VolumeSequence::cast).collect(),
            normalizer: self.normalizer,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PooledChannelJson {
    dim: usize,
    volumes: Vec<Option<Vec<f64>>>,
    present: Vec<bool>,
}

/// Line of the pooled-dataset cache.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PooledRecordJson {
    id: String,
    likes: u64,
    views: u64,
    fps: f64,
    y: f64,
    channels: PerChannel<PooledChannelJson>,
}

/// Metadata carried through the cache for each sequence.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PooledMeta {
    pub likes: u64,
    pub views: u64,
    pub fps: f64,
}

/// Writes the pooled-dataset cache. `meta` is matched to sequences by
/// position; missing entries are written as `likes = 0, views = 1`.
pub fn save_pooled<T: Scalar>(path: impl AsRef<Path>, seqs: &[VolumeSequence<T>], meta: &[PooledMeta]) -> Result<()> {
    let lines = seqs.iter().enumerate().map(|(i, s)| {
        let m = meta.get(i).cloned().unwrap_or(PooledMeta {
            likes: 0,
            views: 1,
            fps: 5.0,
        });
        PooledRecordJson {
            id: s.id.clone(),
            likes: m.likes,
            views: m.views,
            fps: m.fps,
            y: s.label.as_f64(),
            channels: s.channels.map(|_, ch| PooledChannelJson {
                dim: ch.dim,
                volumes: ch
                    .volumes
                    .iter()
                    .map(|v| v.as_ref().map(|t| t.as_slice().iter().map(|x| x.as_f64()).collect()))
                    .collect(),
                present: ch.volumes.iter().map(Option::is_some).collect(),
            }),
        }
    });
    write_jsonl(path.as_ref(), lines)
}

/// Reads a pooled-dataset cache written by [`save_pooled`].
pub fn load_pooled<T: Scalar>(path: impl AsRef<Path>) -> Result<(Dataset<T>, Vec<PooledMeta>)> {
    let path = path.as_ref();
    let lines: Vec<PooledRecordJson> = read_jsonl(path)?;
    let mut seqs = Vec::with_capacity(lines.len());
    let mut meta = Vec::with_capacity(lines.len());
    for (i, l) in lines.into_iter().enumerate() {
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let mut chans = Vec::new();
        for c in Channel::ALL {
            let ch = &l.channels[c];
            if ch.present.len() != ch.volumes.len() {
                return Err(err(format!("{c}: presence and volume counts differ")));
            }
            let mut vols = Vec::with_capacity(ch.volumes.len());
            for (v, &p) in ch.volumes.iter().zip(&ch.present) {
                match (v, p) {
                    (Some(x), true) => {
                        let t = Tensor::new(vec![ch.dim], x.iter().map(|&a| T::lit(a)).collect())
                            .map_err(|e| err(format!("{c}: {e}")))?;
                        vols.push(Some(t));
                    }
                    (None, false) => vols.push(None),
                    _ => return Err(err(format!("{c}: presence flag disagrees with volume"))),
                }
            }
            chans.push(ChannelVolumes { dim: ch.dim, volumes: vols });
        }
        let [face, pose, hat]: [ChannelVolumes<T>; 3] = chans.try_into().expect("three channels");
        seqs.push(VolumeSequence {
            id: l.id,
            channels: PerChannel::new(face, pose, hat),
            label: T::lit(l.y),
        });
        meta.push(PooledMeta {
            likes: l.likes,
            views: l.views,
            fps: l.fps,
        });
    }
    Ok((Dataset::new(seqs)?, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::records::tests::test_record;

    #[test]
    fn volume_counts() {
        assert_eq!(volume_count(100, 11, 4), 23);
        assert_eq!(volume_count(4300, 11, 4), 1073);
        assert_eq!(volume_count(11, 11, 4), 1);
        assert_eq!(volume_count(10, 11, 4), 0);
    }

    #[test]
    fn pools_100_frames() {
        let r = test_record(100, [2, 1, 1], 5.0);
        let s = pool_volumes(&r, 11, 4).unwrap();
        assert_eq!(s.len(), 23);
        // frame t coordinate k holds 10 t + k, so the max sits at the window end
        let v = s.volume(Channel::Face, 3).unwrap();
        assert_eq!(v.as_slice(), &[(12 + 10) as f64 * 10.0, 221.0]);
        assert!((s.label - 0.3).abs() < 1e-15);
    }

    #[test]
    fn too_short_is_error() {
        let r = test_record(10, [1, 1, 1], 5.0);
        assert!(pool_volumes(&r, 11, 4).is_err());
    }

    #[test]
    fn absence_rules() {
        let mut r = test_record(15, [1, 1, 1], 5.0);
        // hat absent everywhere; face absent in the first window only
        r.channels.hat.frames.iter_mut().for_each(|f| *f = None);
        for f in &mut r.channels.face.frames[0..11] {
            *f = None;
        }
        // pose absent in the first window too, so volume 0 has nothing and is dropped
        for f in &mut r.channels.pose.frames[0..11] {
            *f = None;
        }
        let s = pool_volumes(&r, 11, 4).unwrap();
        assert_eq!(volume_count(15, 11, 4), 2);
        assert_eq!(s.len(), 1);
        assert_eq!(s.presence(0, ChannelSet::all()), [true, true, false]);
        assert_eq!(s.volume(Channel::Face, 0).unwrap().as_slice(), &[140.0]);
    }

    #[test]
    fn pooled_cache_roundtrip() {
        let mut r = test_record(30, [2, 3, 1], 5.0);
        r.channels.pose.frames.iter_mut().take(20).for_each(|f| *f = None);
        let s = pool_volumes(&r, 11, 4).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        let meta = vec![PooledMeta { likes: 3, views: 10, fps: 5.0 }];
        save_pooled(f.path(), std::slice::from_ref(&s), &meta).unwrap();
        let (ds, m) = load_pooled::<f64>(f.path()).unwrap();
        assert_eq!(ds.sequences, vec![s]);
        assert_eq!(m, meta);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let s = pool_volumes(&test_record(11, [1, 1, 1], 5.0), 11, 4).unwrap();
        assert!(Dataset::new(vec![s.clone(), s]).is_err());
    }
}
