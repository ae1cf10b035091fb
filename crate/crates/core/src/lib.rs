//! Drift-compensated low-bit inference on resistive crossbar arrays.
//!
//! A quantized backbone is programmed once into the array and its conductances
//! drift over time. Small per-layer scaling vectors, trained for a handful of
//! drift times and applied through frozen shared random projections, restore
//! accuracy without reprogramming.

// `!(x > 0.0)` style checks are how NaN gets rejected throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod archive;
pub mod backbone;
mod bytes;
pub mod compensation;
pub mod cost;
pub mod data;
pub mod drift;
pub mod error;
pub mod evaluate;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod quant;
pub mod rng;
pub mod scheduler;
pub mod training;

pub use archive::CompensationArchive;
pub use backbone::Backbone;
pub use compensation::{CompensationConfig, ScalingVectorSet, SharedProjections, Variant};
pub use cost::{CostReport, HardwareProfile};
pub use data::LabeledDataset;
pub use drift::{AnalyticDriftParams, ConductanceMap, DriftModel, DriftedWeights, MeasuredDriftTable};
pub use error::{Error, Result};
pub use model::{ModelSpec, ModelWeights, Shape};
pub use quant::{QuantScheme, QuantizedTensor};
pub use scheduler::{EvalStats, SchedulerConfig};
pub use training::TrainConfig;
