//! Physics-informed scour forecasting.
//!
//! Reverse-mode autodiff, three base forecasters, calibratable hydraulic
//! equations, the sensor data pipeline, composite-loss training, calibrated
//! equation export and a synthetic record generator.

pub mod autodiff;
pub mod cee;
pub mod datapipe;
pub mod models;
pub mod physics;
pub mod synth;
pub mod training;

pub use autodiff::{Tape, Tensor, Var};
pub use datapipe::{ERefMode, Scaler, SequencePair, TimeSeriesFrame};
pub use models::{Architecture, Forecaster, ModelConfig};
pub use physics::{BridgeAttributes, EquationVariant, LatentParams, PhysicsParams};
pub use training::{Method, Metrics, Scope, TrainConfig};
