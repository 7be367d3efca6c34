//! Differentiable building blocks: parameter storage, layers, loss,
//! dropout, Adam, gradient checking and checkpoints.

mod adam;
mod checkpoint;
mod dropout;
mod gradcheck;
mod layers;
mod loss;
mod params;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::Checkpoint;
pub use dropout::{dropout, dropout_mask, Mode};
pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport};
pub use layers::{
    sigmoid, softmax_vec, AttentivePooling, Blstm, BlstmCache, Linear, Lstm, LstmCache,
    PoolingCache, Standardize,
};
pub use loss::{softmax_ce, softmax_ce_weighted, softmax_rows, CrossEntropy};
pub use params::{Gradients, Param, ParamSet};

/// Global-norm clipping threshold applied before every optimizer step.
pub const DEFAULT_CLIP_NORM: f64 = 5.0;
