//! Steerable, multi-core spiking neural network simulation.
//!
//! The crate is split bottom-up: [`models`] holds the per-neuron dynamics,
//! [`network`] compiles declarative configs into a flat topology,
//! [`engine`] advances it tick by tick across worker threads, [`control`]
//! carries steering commands in and telemetry out, and [`explore`] runs
//! offline parameter sweeps.

// `!(x > 0.0)` forms are deliberate: NaN must fail validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod control;
pub mod engine;
pub mod explore;
pub mod models;
pub mod network;

pub use config::{ConfigDocument, ConfigError};
pub use engine::{run, EngineConfig, EngineError, SimCommand, World};
pub use network::{build_network, validate_config, BuiltNetwork, NetworkConfig};
