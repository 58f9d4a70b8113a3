//! Class-incremental learning with per-task adapters on a frozen backbone,
//! merged into a single global adapter by curvature-aware fusion.

pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod report;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
