//! Cross-domain confidence transfer: a predictor learned on labeled source
//! demonstrations is carried to a target environment by adversarial
//! partial-trajectory matching and used to weight imitation.

pub mod cli;
pub mod config;
pub mod demo;
pub mod env;
pub mod error;
pub mod evalstats;
pub mod imitate;
pub mod io;
pub mod nn;
pub mod par;
pub mod seed;
pub mod transfer;

pub use error::{Error, Result};
