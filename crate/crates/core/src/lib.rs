pub mod augment;
pub mod corpus;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod nn;
pub mod pvad;
pub mod rng;
pub mod schedule;
pub mod speaker;
pub mod training;

pub use error::{PvadError, Result};
