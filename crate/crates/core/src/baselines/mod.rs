//! Comparison systems: LSTMs without attention and linear SVR on PoT features.

mod lstm;
mod svr;

pub(crate) use lstm::{aligned_input, concat_input};
pub use lstm::{aligned_forward, concat_forward};
pub use svr::{
    load_svr, save_svr, svr_objective, svr_predict, svr_train, svr_train_standardized, svr_train_traced, SvrConfig,
    SvrParams, SVR_MAGIC,
};
