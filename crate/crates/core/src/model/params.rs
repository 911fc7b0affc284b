//! Learnable tensors of the regressor, grouped by role.
//!
//! Weight matrices are stored `[in, out]` and applied to row vectors, so
//! `W_f` has shape `[d_f, m]` and maps a face vector to the alignment space.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::autodiff::{ParamId, ParamTensors, Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

macro_rules! param_group {
    ($(#[$m:meta])* $name:ident, $vars:ident { $($field:ident => $label:literal),* $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name<T: Scalar> {
            $(pub $field: Tensor<T>,)*
        }

        /// Tape handles of the matching parameter group.
        #[derive(Debug, Clone, Copy)]
        pub struct $vars {
            $(pub $field: Var,)*
        }

        impl<T: Scalar> $name<T> {
            pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
                vec![$(($label, &self.$field)),*]
            }

            pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
                vec![$(($label, &mut self.$field)),*]
            }

            fn register<'a>(&'a self, tape: &mut Tape<'a, T>, next: &mut usize) -> $vars {
                $vars {
                    $($field: {
                        let v = tape.param(ParamId(*next), &self.$field);
                        *next += 1;
                        v
                    },)*
                }
            }
        }
    };
}

param_group!(
    /// Per-channel projections into the shared alignment space.
    AlignParams, AlignVars {
        w_f => "W_f", b_f => "b_f",
        w_p => "W_p", b_p => "b_p",
        w_c => "W_c", b_c => "b_c",
    }
);

param_group!(
    /// State encoder, shared compression layer and attention logits.
    AttentionParams, AttentionVars {
        w_s => "W_s", b_s => "b_s",
        w_a => "W_a", b_a => "b_a",
        w_sm => "W_sm", b_sm => "b_sm",
    }
);

param_group!(
    /// LSTM cell: `g` forget, `i` input, `z` candidate, `o` output.
    LstmParams, LstmVars {
        u_g => "U_g", u_i => "U_i", u_z => "U_z", u_o => "U_o",
        r_g => "R_g", r_i => "R_i", r_z => "R_z", r_o => "R_o",
        b_g => "b_g", b_i => "b_i", b_z => "b_z", b_o => "b_o",
    }
);

param_group!(
    HeadParams, HeadVars {
        w_out => "w_out", b_out => "b_out",
    }
);

/// All trainable tensors. Alignment and attention groups exist only for
/// fusion modes that use them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Scalar> {
    pub align: Option<AlignParams<T>>,
    pub attention: Option<AttentionParams<T>>,
    pub lstm: LstmParams<T>,
    pub head: HeadParams<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub align: Option<AlignVars>,
    pub attention: Option<AttentionVars>,
    pub lstm: LstmVars,
    pub head: HeadVars,
}

impl<T: Scalar> ModelParams<T> {
    /// All-zero parameters shaped for `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let [df, dp, dc] = config.input_dims;
        let (m, n, ds) = (config.align_dim, config.attention_dim, config.state_dim);
        let z = |s: &[usize]| Tensor::zeros(s);
        let x = config.lstm_input_dim();
        Self {
            align: config.fusion.uses_alignment().then(|| AlignParams {
                w_f: z(&[df, m]),
                b_f: z(&[m]),
                w_p: z(&[dp, m]),
                b_p: z(&[m]),
                w_c: z(&[dc, m]),
                b_c: z(&[m]),
            }),
            attention: config.fusion.uses_attention().then(|| AttentionParams {
                w_s: z(&[ds, m]),
                b_s: z(&[m]),
                w_a: z(&[m, n]),
                b_a: z(&[n]),
                w_sm: z(&[4 * n, 3]),
                b_sm: z(&[3]),
            }),
            lstm: LstmParams {
                u_g: z(&[x, ds]),
                u_i: z(&[x, ds]),
                u_z: z(&[x, ds]),
                u_o: z(&[x, ds]),
                r_g: z(&[ds, ds]),
                r_i: z(&[ds, ds]),
                r_z: z(&[ds, ds]),
                r_o: z(&[ds, ds]),
                b_g: z(&[ds]),
                b_i: z(&[ds]),
                b_z: z(&[ds]),
                b_o: z(&[ds]),
            },
            head: HeadParams {
                w_out: z(&[ds]),
                b_out: z(&[1]),
            },
        }
    }

    /// Registers every tensor on `tape` with ids in [`ParamTensors::named`] order.
    pub fn register<'a>(&'a self, tape: &mut Tape<'a, T>) -> ParamVars {
        let mut next = 0;
        let align = self.align.as_ref().map(|g| g.register(tape, &mut next));
        let attention = self.attention.as_ref().map(|g| g.register(tape, &mut next));
        let lstm = self.lstm.register(tape, &mut next);
        let head = self.head.register(tape, &mut next);
        ParamVars {
            align,
            attention,
            lstm,
            head,
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros_like(self);
        for ((_, dst), (_, src)) in out.named_mut().into_iter().zip(self.named()) {
            *dst = src.cast();
        }
        out
    }

    fn zeros_like<S: Scalar>(other: &ModelParams<S>) -> Self {
        fn zg<S: Scalar, U: Scalar>(named: Vec<(&'static str, &Tensor<S>)>) -> Vec<Tensor<U>> {
            named.into_iter().map(|(_, t)| Tensor::zeros(t.shape())).collect()
        }
        let mut out = Self {
            align: None,
            attention: None,
            lstm: LstmParams::from_tensors(zg(other.lstm.named())),
            head: HeadParams::from_tensors(zg(other.head.named())),
        };
        out.align = other.align.as_ref().map(|a| AlignParams::from_tensors(zg(a.named())));
        out.attention = other.attention.as_ref().map(|a| AttentionParams::from_tensors(zg(a.named())));
        out
    }
}

macro_rules! from_tensors {
    ($name:ident { $($field:ident),* }) => {
        impl<T: Scalar> $name<T> {
            fn from_tensors(v: Vec<Tensor<T>>) -> Self {
                let mut it = v.into_iter();
                Self { $($field: it.next().expect("tensor count"),)* }
            }
        }
    };
}

from_tensors!(AlignParams { w_f, b_f, w_p, b_p, w_c, b_c });
from_tensors!(AttentionParams { w_s, b_s, w_a, b_a, w_sm, b_sm });
from_tensors!(LstmParams { u_g, u_i, u_z, u_o, r_g, r_i, r_z, r_o, b_g, b_i, b_z, b_o });
from_tensors!(HeadParams { w_out, b_out });

impl<T: Scalar> ParamTensors<T> for ModelParams<T> {
    fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(a) = &self.align {
            out.extend(a.named());
        }
        if let Some(a) = &self.attention {
            out.extend(a.named());
        }
        out.extend(self.lstm.named());
        out.extend(self.head.named());
        out
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(a) = &mut self.align {
            out.extend(a.named_mut());
        }
        if let Some(a) = &mut self.attention {
            out.extend(a.named_mut());
        }
        out.extend(self.lstm.named_mut());
        out.extend(self.head.named_mut());
        out
    }
}

/// Glorot-uniform bound for a `fan_in x fan_out` weight.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Glorot-uniform weights, zero biases except the forget-gate bias `b_g = 1`.
/// Tensors are drawn in [`ParamTensors::named`] order from one seeded stream.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut params = ModelParams::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in params.named_mut() {
        if name == "b_g" {
            t.as_mut_slice().iter_mut().for_each(|v| *v = T::one());
        } else if name.starts_with("b_") {
            continue;
        } else {
            let (fan_in, fan_out) = match t.shape() {
                [r, c] => (*r, *c),
                [n] => (*n, 1),
                s => unreachable!("parameter {name} has rank {}", s.len()),
            };
            let bound = glorot_bound(fan_in, fan_out);
            for v in t.as_mut_slice() {
                *v = T::lit(rng.random_range(-bound..bound));
            }
        }
    }
    Ok(params)
}
