//! Aligned, attention-gated LSTM regressor.

mod checkpoint;
mod config;
mod forward;
mod params;
mod trace;


pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC};
pub use config::{FusionMode, HardSelection, Head, ModelConfig, TieBreak};
pub use forward::{
    align_channels, argmax_channel, attention_weights, encode_state, forward, forward_on_tape, forward_with_state,
    lstm_step, select_channel, sequence_gradients, AttentionNodes, ForwardOutput, ForwardState, LstmStep, Prediction,
    StepNodes, StepState,
};
pub(crate) use forward::FusedInput;
pub use params::{
    glorot_bound, init_params, AlignParams, AlignVars, AttentionParams, AttentionVars, HeadParams, HeadVars,
    LstmParams, LstmVars, ModelParams, ParamVars,
};
pub use trace::{AttentionTrace, TraceKind, TraceStep};
