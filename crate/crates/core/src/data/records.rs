//! Frame-level feature files (JSON Lines, one video per line).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::{Channel, PerChannel};
use crate::error::{Error, Result};

/// Per-frame feature vectors of one channel; `None` marks absence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelFrames {
    pub dim: usize,
    pub frames: Vec<Option<Vec<f64>>>,
}

/// One video as read from a feature file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawVideoRecord {
    pub id: String,
    pub likes: u64,
    pub views: u64,
    pub fps: f64,
    pub channels: PerChannel<ChannelFrames>,
}

impl RawVideoRecord {
    pub fn frame_count(&self) -> usize {
        self.channels.face.frames.len()
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels.face.dim, self.channels.pose.dim, self.channels.hat.dim]
    }

    /// Checks the per-record invariants.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Record { id: self.id.clone(), msg });
        if self.views == 0 {
            return fail("views must be at least 1".into());
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return fail(format!("fps must be positive, got {}", self.fps));
        }
        let n = self.frame_count();
        for (c, ch) in self.channels.iter() {
            if ch.dim == 0 {
                return fail(format!("{c}: dim must be positive"));
            }
            if ch.frames.len() != n {
                return fail(format!("{c}: {} frames, face has {n}", ch.frames.len()));
            }
            for (i, f) in ch.frames.iter().enumerate() {
                if let Some(v) = f {
                    if v.len() != ch.dim {
                        return fail(format!("{c} frame {i}: length {} != dim {}", v.len(), ch.dim));
                    }
                    if v.iter().any(|x| !x.is_finite()) {
                        return fail(format!("{c} frame {i}: non-finite value"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Reads JSON Lines into `T`, reporting the 1-based line of any parse error.
/// Blank lines are skipped.
pub(crate) fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Loads and validates a feature file. Channel dimensions must agree across
/// all records in the file.
pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<RawVideoRecord>> {
    let path = path.as_ref();
    let records: Vec<RawVideoRecord> = read_jsonl(path)?;
    let mut dims: Option<[usize; 3]> = None;
    for (i, r) in records.iter().enumerate() {
        r.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        match dims {
            None => dims = Some(r.dims()),
            Some(d) if d != r.dims() => {
                return Err(Error::Record {
                    id: r.id.clone(),
                    msg: format!("channel dims {:?} differ from file dims {d:?}", r.dims()),
                })
            }
            _ => {}
        }
    }
    Ok(records)
}

pub fn save_records(path: impl AsRef<Path>, records: &[RawVideoRecord]) -> Result<()> {
    write_jsonl(path.as_ref(), records)
}

/// Label override line: `{"id": str, "y": num}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelLine {
    pub id: String,
    pub y: f64,
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<LabelLine>> {
    read_jsonl(path.as_ref())
}

/// Keeps frames `round(k * fps / target_fps)` for `k = 0, 1, ...`.
pub fn downsample(record: &RawVideoRecord, target_fps: f64) -> Result<RawVideoRecord> {
    if !(target_fps > 0.0) {
        return Err(Error::InvalidArgument(format!("target fps must be positive, got {target_fps}")));
    }
    if record.fps < target_fps {
        return Err(Error::Record {
            id: record.id.clone(),
            msg: format!("fps {} below target {target_fps}", record.fps),
        });
    }
    let n = record.frame_count();
    let step = record.fps / target_fps;
    let keep: Vec<usize> = (0..)
        .map(|k| (k as f64 * step).round() as usize)
        .take_while(|&i| i < n)
        .collect();
    let mut out = record.clone();
    out.fps = target_fps;
    for c in Channel::ALL {
        let src = &record.channels[c].frames;
        out.channels[c].frames = keep.iter().map(|&i| src[i].clone()).collect();
    }
    Ok(out)
}
