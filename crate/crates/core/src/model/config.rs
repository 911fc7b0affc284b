use serde::{Deserialize, Serialize};

use crate::channel::ChannelSet;
use crate::error::{Error, Result};

/// How the per-timestep LSTM input is formed from the channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Aligned vector of the highest-attention channel.
    #[default]
    Hard,
    /// Attention-weighted sum of aligned vectors.
    Soft,
    /// Raw channel vectors concatenated, no alignment or attention.
    Concat,
    /// Aligned channel vectors concatenated, no attention.
    AlignedConcat,
}

impl FusionMode {
    pub fn uses_alignment(self) -> bool {
        !matches!(self, FusionMode::Concat)
    }

    pub fn uses_attention(self) -> bool {
        matches!(self, FusionMode::Hard | FusionMode::Soft)
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(FusionMode::Hard),
            "soft" => Ok(FusionMode::Soft),
            "concat" => Ok(FusionMode::Concat),
            "aligned-concat" => Ok(FusionMode::AlignedConcat),
            other => Err(Error::InvalidArgument(format!("unknown fusion mode {other:?}"))),
        }
    }
}

/// Which channel wins when attention weights tie exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    /// face < pose < hat
    #[default]
    LowestIndex,
    HighestIndex,
}

/// Forward value used for hard selection.
///
/// Both variants share the same backward rule, the derivative of
/// `a_k * h_k`. `StraightThrough` feeds `h_k` forward; `Surrogate` feeds
/// `a_k * h_k` forward, which makes the whole model smooth and is what
/// finite-difference checks run against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HardSelection {
    #[default]
    StraightThrough,
    Surrogate,
    /// Feeds `h_k` forward with the backward rule of the soft mixture
    /// `sum_j a_j h_j`, so every channel's weight receives gradient.
    SoftStraightThrough,
}

/// Regression readout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    /// Linear map of the last hidden state.
    #[default]
    LastHidden,
    /// Linear map of the mean hidden state over non-dropped steps.
    MeanHidden,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Input dimensions of the face, pose and hat channels.
    pub input_dims: [usize; 3],
    /// Shared alignment space.
    pub align_dim: usize,
    /// Compressed width of each attention input.
    pub attention_dim: usize,
    /// LSTM hidden and cell width.
    pub state_dim: usize,
    pub fusion: FusionMode,
    pub tie_break: TieBreak,
    pub hard_selection: HardSelection,
    pub head: Head,
    pub channels: ChannelSet,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dims: [4096, 4096, 4096],
            align_dim: 1024,
            attention_dim: 128,
            state_dim: 50,
            fusion: FusionMode::Hard,
            tie_break: TieBreak::LowestIndex,
            hard_selection: HardSelection::StraightThrough,
            head: Head::LastHidden,
            channels: ChannelSet::all(),
        }
    }
}

impl ModelConfig {
    /// Full-size widths (1024/128/50) with the given input dimensions.
    pub fn with_inputs(input_dims: [usize; 3]) -> Self {
        Self {
            input_dims,
            ..Self::default()
        }
    }

    pub fn small(input_dims: [usize; 3], align_dim: usize, attention_dim: usize, state_dim: usize) -> Self {
        Self {
            input_dims,
            align_dim,
            attention_dim,
            state_dim,
            ..Self::default()
        }
    }

    pub fn with_fusion(mut self, fusion: FusionMode) -> Self {
        self.fusion = fusion;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.align_dim, self.attention_dim, self.state_dim];
        if self.input_dims.iter().chain(&dims).any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("model dims must be positive: {self:?}")));
        }
        if self.channels.is_empty() {
            return Err(Error::InvalidArgument("no channels enabled".into()));
        }
        Ok(())
    }

    /// Width of the LSTM input for the configured fusion mode.
    pub fn lstm_input_dim(&self) -> usize {
        match self.fusion {
            FusionMode::Hard | FusionMode::Soft => self.align_dim,
            FusionMode::Concat => self.input_dims.iter().sum(),
            FusionMode::AlignedConcat => 3 * self.align_dim,
        }
    }
}
