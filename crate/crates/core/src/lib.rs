//! Spatio-temporal state space models for change detection.
//!
//! A small, dependency-light implementation of selective state space models
//! and the MambaBCD / MambaSCD / MambaBDA change-detection networks built on
//! them: a define-by-run autodiff engine in `f64`, the selective scan and its
//! four-way 2D cross-scan, VSS and spatio-temporal blocks, the three task
//! models with their losses and metric suites, a synthetic dataset
//! generator, training and evaluation, gradient checking and a scan scaling
//! benchmark.

pub mod bench;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod label;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod scan2d;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, PrimitiveKind, Var};
pub use label::{LabelMap, IGNORE};
pub use models::{Model, ModelConfig, Task, Variant};
pub use tensor::Tensor;
