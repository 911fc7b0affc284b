//! Unrolled forward pass of the attention-gated LSTM regressor.

use super::config::{FusionMode, HardSelection, Head, ModelConfig, TieBreak};
use super::params::{AlignVars, AttentionVars, LstmVars, ModelParams, ParamVars};
use super::trace::{AttentionTrace, TraceKind, TraceStep};
use crate::autodiff::{Gradients, Tape, Var};
use crate::channel::Channel;
use crate::data::VolumeSequence;
use crate::error::{Error, Result};
use crate::scalar::{Scalar, MASK_LOGIT};
use crate::tensor::Tensor;

/// `tanh(x W + b)` for each present channel.
pub fn align_channels<T: Scalar>(
    tape: &mut Tape<'_, T>,
    align: &AlignVars,
    inputs: [Option<Var>; 3],
) -> Result<[Option<Var>; 3]> {
    let maps = [(align.w_f, align.b_f), (align.w_p, align.b_p), (align.w_c, align.b_c)];
    let mut out = [None; 3];
    for (j, input) in inputs.into_iter().enumerate() {
        if let Some(x) = input {
            let (w, b) = maps[j];
            let xw = tape.matmul(x, w)?;
            let pre = tape.add(xw, b)?;
            out[j] = Some(tape.tanh(pre));
        }
    }
    Ok(out)
}

/// Encodes the previous hidden state into the alignment space:
/// `tanh(h_prev W_s + b_s)`.
pub fn encode_state<T: Scalar>(tape: &mut Tape<'_, T>, att: &AttentionVars, h_prev: Var) -> Result<Var> {
    let hw = tape.matmul(h_prev, att.w_s)?;
    let pre = tape.add(hw, att.b_s)?;
    Ok(tape.tanh(pre))
}

/// Intermediate nodes of one attention evaluation.
#[derive(Debug, Clone, Copy)]
pub struct AttentionNodes {
    /// Compressed face, pose, hat and state vectors.
    pub hidden: [Var; 4],
    pub stacked: Var,
    pub logits: Var,
    pub weights: Var,
}

/// Attention distribution over the three channels.
///
/// Absent channels enter the shared compression layer as zero vectors and
/// their logits are pushed down by [`MASK_LOGIT`] before the softmax.
pub fn attention_weights<T: Scalar>(
    tape: &mut Tape<'_, T>,
    att: &AttentionVars,
    aligned: [Option<Var>; 3],
    state: Var,
    present: [bool; 3],
) -> Result<AttentionNodes> {
    if !present.iter().any(|&p| p) {
        return Err(Error::AllChannelsMasked);
    }
    let m = tape.value(state).len();
    let mut sources = [state; 4];
    for j in 0..3 {
        sources[j] = match aligned[j] {
            Some(h) if present[j] => h,
            _ => tape.input(Tensor::zeros(&[m])),
        };
    }
    let mut hidden = [state; 4];
    for (slot, &h) in hidden.iter_mut().zip(&sources) {
        let hw = tape.matmul(h, att.w_a)?;
        let pre = tape.add(hw, att.b_a)?;
        *slot = tape.tanh(pre);
    }
    let stacked = tape.concat(&hidden)?;
    let sw = tape.matmul(stacked, att.w_sm)?;
    let logits = tape.add(sw, att.b_sm)?;
    let masked = if present.iter().all(|&p| p) {
        logits
    } else {
        let mask = present.map(|p| if p { T::zero() } else { T::lit(MASK_LOGIT) });
        let mv = tape.input(Tensor::from_raw(vec![3], mask.to_vec()));
        tape.add(logits, mv)?
    };
    let weights = tape.softmax(masked)?;
    Ok(AttentionNodes {
        hidden,
        stacked,
        logits,
        weights,
    })
}

/// Index of the largest weight among present channels.
pub fn argmax_channel<T: Scalar>(weights: &[T], present: [bool; 3], tie: TieBreak) -> Option<usize> {
    let mut best: Option<usize> = None;
    for j in 0..3 {
        if !present[j] {
            continue;
        }
        best = match best {
            None => Some(j),
            Some(b) if weights[j] > weights[b] => Some(j),
            Some(b) if weights[j] == weights[b] && tie == TieBreak::HighestIndex => Some(j),
            keep => keep,
        };
    }
    best
}

/// LSTM input from attention weights and aligned channels.
///
/// Hard mode returns the aligned vector of the winning channel (see
/// [`HardSelection`] for its gradient); soft mode returns the weighted sum.
pub fn select_channel<T: Scalar>(
    tape: &mut Tape<'_, T>,
    weights: Var,
    aligned: [Option<Var>; 3],
    present: [bool; 3],
    config: &ModelConfig,
) -> Result<(Var, usize)> {
    let a = tape.value(weights).as_slice().to_vec();
    let k = argmax_channel(&a, present, config.tie_break).ok_or(Error::AllChannelsMasked)?;
    let missing = || Error::InvalidArgument("present channel without aligned vector".into());
    let mixture = |tape: &mut Tape<'_, T>| -> Result<Var> {
        let mut acc: Option<Var> = None;
        for j in (0..3).filter(|&j| present[j]) {
            let h = aligned[j].ok_or_else(missing)?;
            let w = tape.index(weights, j)?;
            let term = tape.scale(h, w)?;
            acc = Some(match acc {
                None => term,
                Some(prev) => tape.add(prev, term)?,
            });
        }
        Ok(acc.expect("at least one present channel"))
    };
    if config.fusion == FusionMode::Soft {
        return Ok((mixture(tape)?, k));
    }
    let h = aligned[k].ok_or_else(missing)?;
    let x = match config.hard_selection {
        HardSelection::StraightThrough => {
            let w = tape.index(weights, k)?;
            tape.straight_through(h, w)?
        }
        HardSelection::Surrogate => {
            let w = tape.index(weights, k)?;
            tape.scale(h, w)?
        }
        HardSelection::SoftStraightThrough => {
            let soft = mixture(tape)?;
            tape.detour(h, soft)?
        }
    };
    Ok((x, k))
}

#[derive(Debug, Clone, Copy)]
pub struct LstmStep {
    pub forget: Var,
    pub input: Var,
    pub output: Var,
    pub cell: Var,
    pub hidden: Var,
}

fn gate<T: Scalar>(tape: &mut Tape<'_, T>, u: Var, r: Var, b: Var, x: Var, h: Var) -> Result<Var> {
    let xu = tape.matmul(x, u)?;
    let hr = tape.matmul(h, r)?;
    let s = tape.add(xu, hr)?;
    tape.add(s, b)
}

/// One LSTM update with separate input and recurrent maps per gate.
pub fn lstm_step<T: Scalar>(
    tape: &mut Tape<'_, T>,
    l: &LstmVars,
    x: Var,
    h_prev: Var,
    s_prev: Var,
) -> Result<LstmStep> {
    let pre_g = gate(tape, l.u_g, l.r_g, l.b_g, x, h_prev)?;
    let forget = tape.sigmoid(pre_g);
    let pre_i = gate(tape, l.u_i, l.r_i, l.b_i, x, h_prev)?;
    let input = tape.sigmoid(pre_i);
    let pre_z = gate(tape, l.u_z, l.r_z, l.b_z, x, h_prev)?;
    let cand = tape.tanh(pre_z);
    let carried = tape.hadamard(forget, s_prev)?;
    let written = tape.hadamard(input, cand)?;
    let cell = tape.add(carried, written)?;
    let pre_o = gate(tape, l.u_o, l.r_o, l.b_o, x, h_prev)?;
    let output = tape.sigmoid(pre_o);
    let squashed = tape.tanh(cell);
    let hidden = tape.hadamard(output, squashed)?;
    Ok(LstmStep {
        forget,
        input,
        output,
        cell,
        hidden,
    })
}

/// Nodes recorded for one non-dropped timestep.
#[derive(Debug, Clone)]
pub struct StepNodes {
    pub t: usize,
    pub aligned: [Option<Var>; 3],
    pub state_code: Option<Var>,
    pub attention: Option<AttentionNodes>,
    pub x: Var,
    pub lstm: LstmStep,
}

/// Per-step LSTM input produced by a fusion strategy.
pub(crate) struct FusedInput {
    pub aligned: [Option<Var>; 3],
    pub state_code: Option<Var>,
    pub attention: Option<AttentionNodes>,
    pub x: Var,
    pub selected: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub y_hat: Var,
    pub trace: AttentionTrace,
    pub steps: Vec<StepNodes>,
}

fn channel_inputs<T: Scalar>(tape: &mut Tape<'_, T>, seq: &VolumeSequence<T>, t: usize, present: [bool; 3]) -> [Option<Var>; 3] {
    Channel::ALL.map(|c| {
        if present[c.index()] {
            seq.volume(c, t).map(|v| tape.input(v.clone()))
        } else {
            None
        }
    })
}

/// Records the full forward pass of `seq` on `tape`.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    vars: &ParamVars,
    seq: &VolumeSequence<T>,
    config: &ModelConfig,
) -> Result<ForwardOutput> {
    if seq.is_empty() {
        return Err(Error::EmptySequence);
    }
    if seq.dims() != config.input_dims {
        return Err(Error::dim(
            "forward",
            format!("sequence dims {:?} vs config {:?}", seq.dims(), config.input_dims),
        ));
    }
    let ds = config.state_dim;
    let mut h = tape.input(Tensor::zeros(&[ds]));
    let mut s = tape.input(Tensor::zeros(&[ds]));
    let mut hiddens = Vec::new();
    let mut steps = Vec::new();
    let kind = match config.fusion {
        FusionMode::Hard | FusionMode::Soft => TraceKind::Attention,
        FusionMode::Concat => TraceKind::Concat,
        FusionMode::AlignedConcat => TraceKind::AlignedConcat,
    };
    let mut trace = AttentionTrace::new(kind);

    for t in 0..seq.len() {
        let present = seq.presence(t, config.channels);
        if !present.iter().any(|&p| p) {
            trace.steps.push(TraceStep::dropped());
            continue;
        }
        let inputs = channel_inputs(tape, seq, t, present);
        let fused = match config.fusion {
            FusionMode::Hard | FusionMode::Soft => attention_input(tape, vars, inputs, h, present, config)?,
            FusionMode::Concat => crate::baselines::concat_input(tape, seq, inputs, config)?,
            FusionMode::AlignedConcat => crate::baselines::aligned_input(tape, vars, inputs, config)?,
        };
        let step = lstm_step(tape, &vars.lstm, fused.x, h, s)?;
        h = step.hidden;
        s = step.cell;
        hiddens.push(h);
        trace.steps.push(TraceStep {
            attention: fused.attention.map(|a| {
                let w = tape.value(a.weights).as_slice();
                [w[0].as_f64(), w[1].as_f64(), w[2].as_f64()]
            }),
            selected: fused.selected,
            presence: present,
        });
        steps.push(StepNodes {
            t,
            aligned: fused.aligned,
            state_code: fused.state_code,
            attention: fused.attention,
            x: fused.x,
            lstm: step,
        });
    }

    let summary = match config.head {
        Head::LastHidden => h,
        Head::MeanHidden if hiddens.is_empty() => h,
        Head::MeanHidden => tape.mean(&hiddens)?,
    };
    let y_hat = readout(tape, vars, summary)?;
    Ok(ForwardOutput { y_hat, trace, steps })
}

pub(crate) fn readout<T: Scalar>(tape: &mut Tape<'_, T>, vars: &ParamVars, summary: Var) -> Result<Var> {
    let d = tape.dot(vars.head.w_out, summary)?;
    tape.add(d, vars.head.b_out)
}

fn attention_input<T: Scalar>(
    tape: &mut Tape<'_, T>,
    vars: &ParamVars,
    inputs: [Option<Var>; 3],
    h_prev: Var,
    present: [bool; 3],
    config: &ModelConfig,
) -> Result<FusedInput> {
    let missing = |g: &str| Error::InvalidArgument(format!("parameters lack the {g} group"));
    let align = vars.align.as_ref().ok_or_else(|| missing("alignment"))?;
    let att = vars.attention.as_ref().ok_or_else(|| missing("attention"))?;
    let aligned = align_channels(tape, align, inputs)?;
    let state_code = encode_state(tape, att, h_prev)?;
    let nodes = attention_weights(tape, att, aligned, state_code, present)?;
    let (x, k) = select_channel(tape, nodes.weights, aligned, present, config)?;
    Ok(FusedInput {
        aligned,
        state_code: Some(state_code),
        attention: Some(nodes),
        x,
        selected: Some(k),
    })
}

/// Regression output with its per-timestep trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T: Scalar> {
    pub y_hat: T,
    pub trace: AttentionTrace,
}

pub fn forward<T: Scalar>(seq: &VolumeSequence<T>, params: &ModelParams<T>, config: &ModelConfig) -> Result<Prediction<T>> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let out = forward_on_tape(&mut tape, &vars, seq, config)?;
    Ok(Prediction {
        y_hat: tape.value(out.y_hat).item(),
        trace: out.trace,
    })
}

/// Squared error of one sequence and its gradients.
pub fn sequence_gradients<T: Scalar>(
    seq: &VolumeSequence<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<(T, Gradients<T>, Prediction<T>)> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let out = forward_on_tape(&mut tape, &vars, seq, config)?;
    let target = tape.input(Tensor::from_raw(vec![1], vec![seq.label]));
    let loss = tape.mse(out.y_hat, target)?;
    let grads = tape.backward(loss)?;
    let prediction = Prediction {
        y_hat: tape.value(out.y_hat).item(),
        trace: out.trace,
    };
    Ok((tape.value(loss).item(), grads, prediction))
}

/// Materialized values of every intermediate quantity at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct StepState<T: Scalar> {
    pub t: usize,
    pub aligned: [Option<Tensor<T>>; 3],
    pub state_code: Option<Tensor<T>>,
    pub attention_hidden: Option<[Tensor<T>; 4]>,
    pub stacked: Option<Tensor<T>>,
    pub attention: Option<Tensor<T>>,
    pub x: Tensor<T>,
    pub forget: Tensor<T>,
    pub input: Tensor<T>,
    pub output: Tensor<T>,
    pub cell: Tensor<T>,
    pub hidden: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardState<T: Scalar> {
    pub steps: Vec<StepState<T>>,
    pub prediction: Prediction<T>,
}

/// Forward pass that also returns every intermediate tensor.
pub fn forward_with_state<T: Scalar>(
    seq: &VolumeSequence<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<ForwardState<T>> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let out = forward_on_tape(&mut tape, &vars, seq, config)?;
    let val = |v: Var| tape.value(v).clone();
    let steps = out
        .steps
        .iter()
        .map(|s| StepState {
            t: s.t,
            aligned: s.aligned.map(|a| a.map(val)),
            state_code: s.state_code.map(val),
            attention_hidden: s.attention.map(|a| a.hidden.map(val)),
            stacked: s.attention.map(|a| val(a.stacked)),
            attention: s.attention.map(|a| val(a.weights)),
            x: val(s.x),
            forget: val(s.lstm.forget),
            input: val(s.lstm.input),
            output: val(s.lstm.output),
            cell: val(s.lstm.cell),
            hidden: val(s.lstm.hidden),
        })
        .collect();
    Ok(ForwardState {
        steps,
        prediction: Prediction {
            y_hat: tape.value(out.y_hat).item(),
            trace: out.trace,
        },
    })
}
