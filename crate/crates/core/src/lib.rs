//! Fault-injection and reliability analysis for neural-network inference.
//!
//! The library instruments a minimal forward-only compute graph with
//! configurable quantizers, fault selectors, error models, and observers,
//! and runs reliability experiments (bit-error-rate sweeps, bit/channel/
//! pixel/layer sensitivity studies) driven entirely by external
//! configuration files.
//!
//! Layering, bottom to top:
//!
//! - [`tensor`]: dense n-dimensional arrays with bit-level element access
//! - [`graph`]: forward-only inference with pre/post hook points
//! - [`quant`]: simulated quantization wrapping the fault site
//! - [`fault`]: site selectors, error models, and the injector pipeline
//! - [`observe`]: min/max tracking and golden-run divergence metrics
//! - [`config`]: flat and hierarchical injection configuration files
//! - [`experiment`]: prebuilt experiment runners emitting CSV tables
//! - [`model_io`] / [`fixture`]: on-disk model, weight, and dataset formats

pub mod config;
pub mod error;
pub mod experiment;
pub mod f16;
pub mod fault;
pub mod fixture;
pub mod graph;
pub mod model_io;
pub mod observe;
pub mod ops;
pub mod pattern;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Tensor};
