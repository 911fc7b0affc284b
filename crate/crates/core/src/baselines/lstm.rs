//! LSTM baselines without attention: raw concatenation and aligned
//! concatenation of the three channels. Both run through the same unrolled
//! loop, cell and head as the attention model.

use crate::autodiff::{Tape, Var};
use crate::data::VolumeSequence;
use crate::error::{Error, Result};
use crate::model::{align_channels, forward, FusedInput, FusionMode, ModelConfig, ModelParams, ParamVars, Prediction};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Raw channel vectors side by side; absent channels are zero vectors.
pub(crate) fn concat_input<T: Scalar>(
    tape: &mut Tape<'_, T>,
    seq: &VolumeSequence<T>,
    inputs: [Option<Var>; 3],
    _config: &ModelConfig,
) -> Result<FusedInput> {
    let dims = seq.dims();
    let parts: Vec<Var> = inputs
        .iter()
        .zip(dims)
        .map(|(v, d)| v.unwrap_or_else(|| tape.input(Tensor::zeros(&[d]))))
        .collect();
    let x = tape.concat(&parts)?;
    Ok(FusedInput {
        aligned: [None; 3],
        state_code: None,
        attention: None,
        x,
        selected: None,
    })
}

/// Aligned channel vectors side by side; absent channels are zero vectors.
pub(crate) fn aligned_input<T: Scalar>(
    tape: &mut Tape<'_, T>,
    vars: &ParamVars,
    inputs: [Option<Var>; 3],
    config: &ModelConfig,
) -> Result<FusedInput> {
    let align = vars
        .align
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("parameters lack the alignment group".into()))?;
    let aligned = align_channels(tape, align, inputs)?;
    let m = config.align_dim;
    let parts: Vec<Var> = aligned
        .iter()
        .map(|v| v.unwrap_or_else(|| tape.input(Tensor::zeros(&[m]))))
        .collect();
    let x = tape.concat(&parts)?;
    Ok(FusedInput {
        aligned,
        state_code: None,
        attention: None,
        x,
        selected: None,
    })
}

fn expect_mode(config: &ModelConfig, mode: FusionMode) -> Result<()> {
    if config.fusion != mode {
        return Err(Error::InvalidArgument(format!(
            "expected fusion mode {mode:?}, config has {:?}",
            config.fusion
        )));
    }
    Ok(())
}

/// Concatenated raw channels into the LSTM.
pub fn concat_forward<T: Scalar>(seq: &VolumeSequence<T>, params: &ModelParams<T>, config: &ModelConfig) -> Result<Prediction<T>> {
    expect_mode(config, FusionMode::Concat)?;
    forward(seq, params, config)
}

/// Concatenated aligned channels into the LSTM.
pub fn aligned_forward<T: Scalar>(seq: &VolumeSequence<T>, params: &ModelParams<T>, config: &ModelConfig) -> Result<Prediction<T>> {
    expect_mode(config, FusionMode::AlignedConcat)?;
    forward(seq, params, config)
}
