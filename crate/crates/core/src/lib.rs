//! Deterministic federated-learning simulator for fairness-aware server
//! aggregation: variance-regularized rules (VRed, Semi-VRed) alongside
//! FedAvg, GiFair, q-FFL, TERM, AFL, PropFair and ΔFL.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregate;
pub mod cli;
pub mod datagen;
pub mod engine;
pub mod error;
pub mod localtrain;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod oracles;

pub use error::{Error, Result};
