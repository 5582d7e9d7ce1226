//! Federated-learning simulator with validation-weighted robust
//! aggregation.
//!
//! A synchronous controller trains a community model across N learners and
//! weights each local model by its performance on every learner's held-out
//! validation set (micro accuracy, macro accuracy, or geometric mean of
//! per-class accuracies). Label-shuffling and targeted label-flipping
//! poisoning attacks are built in, alongside the plain FedAvg baseline and
//! a corrupted-learner exclusion oracle. Runs are deterministic under a
//! fixed master seed, in-process or over the TCP transport.

pub mod aggregation;
pub mod attacks;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod metrics;
pub mod nn;
pub mod transport;

pub use error::{Error, Result};
