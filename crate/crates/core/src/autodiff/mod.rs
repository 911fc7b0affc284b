//! Reverse-mode automatic differentiation.

mod grad_check;
mod tape;

pub use grad_check::{grad_check, relative_error, GradCheckReport, ParamCheck, ParamTensors, REL_ERR_FLOOR};
pub use tape::{sigmoid, softmax, Elementwise, Gradients, OpKind, ParamId, Tape, TapeNode, Var};
