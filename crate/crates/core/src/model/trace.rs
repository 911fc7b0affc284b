//! Per-timestep attention records and their CSV export.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceKind {
    Attention,
    Concat,
    AlignedConcat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// Face, pose and hat weights; `None` for dropped steps and fusion modes
    /// without attention.
    pub attention: Option<[f64; 3]>,
    pub selected: Option<usize>,
    pub presence: [bool; 3],
}

impl TraceStep {
    pub fn dropped() -> Self {
        Self {
            attention: None,
            selected: None,
            presence: [false; 3],
        }
    }

    pub fn is_dropped(&self) -> bool {
        !self.presence.iter().any(|&p| p)
    }
}

/// One entry per input volume, dropped volumes included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub kind: TraceKind,
    pub steps: Vec<TraceStep>,
}

impl AttentionTrace {
    pub fn new(kind: TraceKind) -> Self {
        Self { kind, steps: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Selected channel per step, `None` where dropped.
    pub fn selections(&self) -> Vec<Option<usize>> {
        self.steps.iter().map(|s| s.selected).collect()
    }

    /// Writes `t,a_face,a_pose,a_hat,selected,dropped` rows.
    ///
    /// Dropped steps are written as `t,0,0,0,-1,1`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,a_face,a_pose,a_hat,selected,dropped")?;
        for (t, step) in self.steps.iter().enumerate() {
            if step.is_dropped() {
                writeln!(w, "{t},0,0,0,-1,1")?;
                continue;
            }
            let a = step.attention.unwrap_or([0.0; 3]);
            let sel = step.selected.map_or(-1, |k| k as i64);
            writeln!(w, "{t},{},{},{},{sel},0", a[0], a[1], a[2])?;
        }
        Ok(())
    }
}
