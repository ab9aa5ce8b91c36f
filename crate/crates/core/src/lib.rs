//! Student/teacher acoustic-model training at desk scale.
//!
//! The crate holds a small feedforward reference model, two data-parallel
//! trainers (gradient threshold compression and blockwise model update
//! filtering), an in-process cluster simulator with a communication ledger
//! and cost model, the sharded data pipeline, and the training schedule.

pub mod bmuf;
pub mod cli;
pub mod cluster;
pub mod datapipe;
pub mod error;
pub mod fsutil;
pub mod gtc;
pub mod model;
pub mod model_file;
pub mod recipe;
pub mod schedule;

pub use error::{Error, Result};
