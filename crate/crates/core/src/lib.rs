//! Personalized federated learning with a shared backbone and per-client
//! linear heads, plus the FedAvg, FedPer and FedRecon baselines.
//!
//! The crate is organized bottom-up: [`nn`] holds the dense network
//! substrate, [`model`] the split into backbone and heads, [`optim`] the update
//! rules, [`data`] dataset construction, [`fl`] the per-round client and server
//! logic, and [`orchestrator`] whole experiments and the verification oracles.

pub mod data;
mod error;
pub mod fl;
pub mod model;
pub mod nn;
pub mod optim;
pub mod orchestrator;
pub mod rng;

pub use error::{Error, Result};
