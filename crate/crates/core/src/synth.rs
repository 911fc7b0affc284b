//! Synthetic channel-switching videos with known ground truth.
//!
//! Each video follows a piecewise-constant active channel. Every frame of
//! every channel is Gaussian noise; the active channel additionally carries
//! `z * u + marker * e0` with `z ~ N(0, 1)`. The label is the mean over
//! frames of the active frame's inner product with that channel's readout
//! vector. One frame corresponds to one volume, so feature files are pooled
//! with a window and stride of 1.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{Channel, PerChannel};
use crate::data::records::{read_jsonl, write_jsonl};
use crate::data::{pool_volumes, save_records, ChannelFrames, Dataset, LabelLine, RawVideoRecord};
use crate::error::{Error, Result};
use crate::model::AttentionTrace;

pub const FEATURES_FILE: &str = "features.jsonl";
pub const LABELS_FILE: &str = "labels.jsonl";
pub const MODES_FILE: &str = "modes.jsonl";

/// Marker-coordinate weights of the default readout for face, pose and hat.
/// Distinct values make the active channel matter for every label.
pub const DEFAULT_MARKER_WEIGHTS: [f64; 3] = [1.0, -1.0, 0.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_videos: usize,
    /// Inclusive bounds on frames per video.
    pub t_range: (usize, usize),
    pub dims: [usize; 3],
    /// Inclusive bounds on mode segment lengths.
    pub segment_range: (usize, usize),
    pub marker: f64,
    pub sigma: f64,
    /// Per-channel signal directions; seeded unit vectors orthogonal to
    /// coordinate 0 when absent.
    pub directions: Option<PerChannel<Vec<f64>>>,
    /// Per-channel readout vectors. When absent, channel `c` reads
    /// `(alpha_c e0 + u_c) / sqrt(1 + alpha_c^2)` with `alpha` from
    /// [`DEFAULT_MARKER_WEIGHTS`].
    pub readout: Option<PerChannel<Vec<f64>>>,
    pub seed: u64,
    pub id_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_videos: 250,
            t_range: (20, 40),
            dims: [8, 4, 4],
            segment_range: (5, 20),
            marker: 1.0,
            sigma: 0.1,
            directions: None,
            readout: None,
            seed: 0,
            id_prefix: "syn".into(),
        }
    }
}

/// Direction and readout vectors resolved from a config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthPlan {
    pub directions: PerChannel<Vec<f64>>,
    pub readout: PerChannel<Vec<f64>>,
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize, skip_first: bool) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if skip_first {
            v[0] = 0.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            return v;
        }
    }
}

/// Whether `r` frames can be cut into segments with lengths in `[lo, hi]`.
fn splittable(r: usize, lo: usize, hi: usize) -> bool {
    r == 0 || r.div_ceil(hi) <= r / lo
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("synth config: {m}")));
        if self.dims.iter().any(|&d| d < 2) {
            return bad(format!("every dim must be at least 2, got {:?}", self.dims));
        }
        let (lo, hi) = self.segment_range;
        if lo == 0 || lo > hi {
            return bad(format!("segment range {lo}..={hi} is invalid"));
        }
        let (tmin, tmax) = self.t_range;
        if tmin == 0 || tmin > tmax {
            return bad(format!("T range {tmin}..={tmax} is invalid"));
        }
        if !(tmin..=tmax).any(|t| splittable(t, lo, hi)) {
            return bad("no length in the T range splits into allowed segments".into());
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be non-negative, got {}", self.sigma));
        }
        if !self.marker.is_finite() {
            return bad("marker must be finite".into());
        }
        for (name, vecs) in [("directions", &self.directions), ("readout", &self.readout)] {
            if let Some(v) = vecs {
                for (c, x) in v.iter() {
                    if x.len() != self.dims[c.index()] {
                        return bad(format!("{name} for {c} has length {}", x.len()));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn plan(&self) -> Result<SynthPlan> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX);
        let directions = self
            .directions
            .clone()
            .unwrap_or_else(|| PerChannel::from_fn(|c| random_unit(&mut rng, self.dims[c.index()], true)));
        let readout = self.readout.clone().unwrap_or_else(|| {
            directions.map(|c, u| {
                let alpha = DEFAULT_MARKER_WEIGHTS[c.index()];
                let norm = (1.0 + alpha * alpha).sqrt();
                let mut w: Vec<f64> = u.iter().map(|x| x / norm).collect();
                w[0] += alpha / norm;
                w
            })
        });
        Ok(SynthPlan { directions, readout })
    }
}

/// One generated video with its label and per-frame active channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthVideo {
    pub record: RawVideoRecord,
    pub label: f64,
    pub modes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeLine {
    pub id: String,
    pub modes: Vec<usize>,
}

/// Segment lengths summing to `total`, each within `[lo, hi]`.
fn draw_segments(rng: &mut ChaCha8Rng, total: usize, lo: usize, hi: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut rest = total;
    while rest > 0 {
        let options: Vec<usize> = (lo..=hi.min(rest)).filter(|&l| splittable(rest - l, lo, hi)).collect();
        let len = options[rng.random_range(0..options.len())];
        out.push(len);
        rest -= len;
    }
    out
}

fn generate_one(config: &SynthConfig, plan: &SynthPlan, index: usize) -> SynthVideo {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let (lo, hi) = config.segment_range;
    let lengths: Vec<usize> = (config.t_range.0..=config.t_range.1).filter(|&t| splittable(t, lo, hi)).collect();
    let t_len = lengths[rng.random_range(0..lengths.len())];

    let mut modes = Vec::with_capacity(t_len);
    let mut mode: usize = rng.random_range(0..3);
    for (s, len) in draw_segments(&mut rng, t_len, lo, hi).into_iter().enumerate() {
        if s > 0 {
            mode = (mode + rng.random_range(1..3)) % 3;
        }
        modes.extend(std::iter::repeat_n(mode, len));
    }

    let mut frames: [Vec<Option<Vec<f64>>>; 3] = Default::default();
    let mut total = 0.0;
    for &active in &modes {
        let z: f64 = StandardNormal.sample(&mut rng);
        for c in Channel::ALL {
            let k = c.index();
            let mut f: Vec<f64> = (0..config.dims[k])
                .map(|_| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    config.sigma * e
                })
                .collect();
            if k == active {
                for (x, u) in f.iter_mut().zip(&plan.directions[c]) {
                    *x += z * u;
                }
                f[0] += config.marker;
                total += f.iter().zip(&plan.readout[c]).map(|(a, b)| a * b).sum::<f64>();
            }
            frames[k].push(Some(f));
        }
    }
    let [face, pose, hat] = frames;
    let record = RawVideoRecord {
        id: format!("{}{:05}", config.id_prefix, index),
        likes: 0,
        views: 1,
        fps: 1.0,
        channels: PerChannel::new(face, pose, hat).map(|c, f| ChannelFrames {
            dim: config.dims[c.index()],
            frames: f.clone(),
        }),
    };
    SynthVideo {
        record,
        label: total / t_len as f64,
        modes,
    }
}

/// Generates `n_videos` videos; video `i` depends only on the seed and `i`.
pub fn generate(config: &SynthConfig) -> Result<Vec<SynthVideo>> {
    let plan = config.plan()?;
    Ok((0..config.n_videos)
        .into_par_iter()
        .map(|i| generate_one(config, &plan, i))
        .collect())
}

/// Writes the feature, label and mode files into `dir`.
pub fn write_synth(dir: impl AsRef<Path>, videos: &[SynthVideo]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let records: Vec<RawVideoRecord> = videos.iter().map(|v| v.record.clone()).collect();
    save_records(dir.join(FEATURES_FILE), &records)?;
    write_jsonl(
        &dir.join(LABELS_FILE),
        videos.iter().map(|v| LabelLine {
            id: v.record.id.clone(),
            y: v.label,
        }),
    )?;
    write_jsonl(
        &dir.join(MODES_FILE),
        videos.iter().map(|v| ModeLine {
            id: v.record.id.clone(),
            modes: v.modes.clone(),
        }),
    )
}

pub fn load_modes(path: impl AsRef<Path>) -> Result<Vec<ModeLine>> {
    read_jsonl(path.as_ref())
}

/// Pools each video at one frame per volume and attaches the raw label.
pub fn to_dataset(videos: &[SynthVideo]) -> Result<Dataset<f64>> {
    let seqs = videos
        .iter()
        .map(|v| pool_volumes(&v.record, 1, 1).map(|s| s.with_label(v.label)))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(seqs)
}

/// Recomputes a label by direct summation over the stored frames.
pub fn oracle_label(record: &RawVideoRecord, modes: &[usize], config: &SynthConfig) -> Result<f64> {
    let plan = config.plan()?;
    if modes.len() != record.frame_count() || modes.is_empty() {
        return Err(Error::dim(
            "oracle_label",
            format!("{} modes for {} frames", modes.len(), record.frame_count()),
        ));
    }
    let mut sum = 0.0;
    for (t, &m) in modes.iter().enumerate() {
        let c = Channel::from_index(m).ok_or_else(|| Error::InvalidArgument(format!("mode {m} out of range")))?;
        let frame = record.channels[c].frames[t]
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("active channel absent at frame {t}")))?;
        let w = &plan.readout[c];
        let mut dot = 0.0;
        for i in 0..frame.len() {
            dot += frame[i] * w[i];
        }
        sum += dot;
    }
    Ok(sum / modes.len() as f64)
}

/// Fraction of non-dropped steps whose selected channel is the active one.
pub fn score_attention(trace: &AttentionTrace, modes: &[usize]) -> Result<f64> {
    if trace.len() != modes.len() {
        return Err(Error::dim(
            "score_attention",
            format!("trace has {} steps, mode sequence {}", trace.len(), modes.len()),
        ));
    }
    let mut scored = 0usize;
    let mut correct = 0usize;
    for (step, &m) in trace.steps.iter().zip(modes) {
        if step.is_dropped() {
            continue;
        }
        let sel = step
            .selected
            .ok_or_else(|| Error::InvalidArgument("trace has no channel selections".into()))?;
        scored += 1;
        correct += usize::from(sel == m);
    }
    if scored == 0 {
        return Err(Error::InvalidArgument("every step is dropped; score undefined".into()));
    }
    Ok(correct as f64 / scored as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{TraceKind, TraceStep};
    use proptest::prelude::{prop_assert, prop_assume, proptest};

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n_videos: 12,
            t_range: (10, 30),
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn labels_match_oracle() {
        let config = small(3);
        for v in generate(&config).unwrap() {
            let y = oracle_label(&v.record, &v.modes, &config).unwrap();
            assert!((y - v.label).abs() <= 1e-12);
        }
    }

    #[test]
    fn noise_free_marker_only() {
        let mut config = small(1);
        config.sigma = 0.0;
        config.readout = Some(PerChannel::from_fn(|c| {
            let mut w = vec![0.0; config.dims[c.index()]];
            w[0] = 2.0;
            w
        }));
        for v in generate(&config).unwrap() {
            assert_eq!(v.label, 2.0);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_synth(a.path(), &generate(&small(9)).unwrap()).unwrap();
        write_synth(b.path(), &generate(&small(9)).unwrap()).unwrap();
        for f in [FEATURES_FILE, LABELS_FILE, MODES_FILE] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
        let modes = load_modes(a.path().join(MODES_FILE)).unwrap();
        assert_eq!(modes.len(), 12);
    }

    #[test]
    fn single_frame_label_is_inner_product() {
        let config = SynthConfig {
            n_videos: 1,
            t_range: (1, 1),
            segment_range: (1, 3),
            ..SynthConfig::default()
        };
        let plan = config.plan().unwrap();
        let v = &generate(&config).unwrap()[0];
        let c = Channel::from_index(v.modes[0]).unwrap();
        let f = v.record.channels[c].frames[0].as_ref().unwrap();
        let dot: f64 = f.iter().zip(&plan.readout[c]).map(|(a, b)| a * b).sum();
        assert_eq!(oracle_label(&v.record, &v.modes, &config).unwrap(), dot);
    }

    #[test]
    fn inactive_channels_do_not_affect_label() {
        let config = small(5);
        let mut v = generate(&config).unwrap().remove(0);
        let before = oracle_label(&v.record, &v.modes, &config).unwrap();
        for (t, &m) in v.modes.clone().iter().enumerate() {
            for c in Channel::ALL.into_iter().filter(|c| c.index() != m) {
                if let Some(f) = v.record.channels[c].frames[t].as_mut() {
                    f.reverse();
                }
            }
        }
        assert_eq!(oracle_label(&v.record, &v.modes, &config).unwrap(), before);
    }

    #[test]
    fn directions_are_unit_and_skip_marker() {
        let plan = small(2).plan().unwrap();
        for (c, u) in plan.directions.iter() {
            assert_eq!(u[0], 0.0);
            assert!((u.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
            let w = &plan.readout[c];
            assert!((w.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
            let alpha = DEFAULT_MARKER_WEIGHTS[c.index()];
            assert!((w[0] - alpha / (1.0 + alpha * alpha).sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(SynthConfig { dims: [1, 4, 4], ..SynthConfig::default() }.validate().is_err());
        assert!(SynthConfig { sigma: -0.1, ..SynthConfig::default() }.validate().is_err());
        assert!(SynthConfig { segment_range: (0, 3), ..SynthConfig::default() }.validate().is_err());
        assert!(SynthConfig { t_range: (7, 7), segment_range: (5, 6), ..SynthConfig::default() }.validate().is_err());
    }

    fn trace_of(sel: &[Option<usize>]) -> AttentionTrace {
        AttentionTrace {
            kind: TraceKind::Attention,
            steps: sel
                .iter()
                .map(|s| match s {
                    Some(k) => TraceStep {
                        attention: None,
                        selected: Some(*k),
                        presence: [true; 3],
                    },
                    None => TraceStep::dropped(),
                })
                .collect(),
        }
    }

    #[test]
    fn scoring() {
        let modes = [0, 0, 1, 2];
        let exact = trace_of(&[Some(0), Some(0), Some(1), Some(2)]);
        assert_eq!(score_attention(&exact, &modes).unwrap(), 1.0);
        let partial = trace_of(&[Some(0), None, Some(2), Some(2)]);
        assert!((score_attention(&partial, &modes).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(score_attention(&trace_of(&[None; 4]), &modes).is_err());
        assert!(score_attention(&exact, &modes[..3]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let modes: Vec<usize> = (0..30_000).map(|_| rng.random_range(0..3)).collect();
        let random: Vec<Option<usize>> = (0..30_000).map(|_| Some(rng.random_range(0..3))).collect();
        let s = score_attention(&trace_of(&random), &modes).unwrap();
        assert!((s - 1.0 / 3.0).abs() < 0.02);
    }

    proptest! {
        #[test]
        fn segments_respect_bounds(seed in 0u64..500, lo in 1usize..6, extra in 0usize..6, tmin in 1usize..40) {
            let hi = lo + extra;
            let config = SynthConfig {
                n_videos: 3,
                t_range: (tmin.max(lo), tmin.max(lo) + 10),
                segment_range: (lo, hi),
                dims: [2, 2, 2],
                seed,
                ..SynthConfig::default()
            };
            prop_assume!(config.validate().is_ok());
            for v in generate(&config).unwrap() {
                let t = v.modes.len();
                prop_assert!(t >= config.t_range.0 && t <= config.t_range.1);
                let mut runs = Vec::new();
                let mut start = 0;
                for i in 1..=t {
                    if i == t || v.modes[i] != v.modes[start] {
                        runs.push(i - start);
                        start = i;
                    }
                }
                for r in runs {
                    prop_assert!(r >= lo && r <= hi, "run {} outside {}..={}", r, lo, hi);
                }
            }
        }
    }
}
