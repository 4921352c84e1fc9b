//! Multimodal time-series modelling: a patched RWKV sequence encoder, a
//! clinical-tabular pipeline and a sigmoid-gated fusion head, with the
//! training, evaluation and interpretability tooling around them.

pub mod autodiff;
pub mod error;
pub mod fusion;
pub mod interpret;
pub mod io;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod rwkv;
pub mod tabular;
pub mod train;

pub use error::{Error, Result};
