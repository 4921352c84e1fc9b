//! File formats, data alignment, model bundles and the end-to-end pipeline.

pub mod align;
pub mod bundle;
pub mod config;
pub mod env;
pub mod events;
pub mod pipeline;
pub mod synth;

pub use bundle::{ModelBundle, Preprocessing};
pub use config::{DataConfig, EventData, InterpretConfig, RunConfig, SeriesData};
pub use pipeline::{evaluate_bundle, prepare, run_training, sensitivity_imputation, TrainOutcome};
