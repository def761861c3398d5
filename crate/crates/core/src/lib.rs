//! Mean-field variational neural networks and lottery-ticket pruning pipelines.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod models;
pub mod objective;
pub mod optim;
pub mod pruning;
pub mod rng;
pub mod tensor;
pub mod tickets;
pub mod train;
pub mod variational;

pub use error::{Error, Result};
