//! Probabilistic vision-language weakly supervised temporal action localization.

pub mod distlearn;
pub mod error;
pub mod evaluate;
pub mod features;
pub mod localize;
pub mod milhead;
pub mod numcore;
pub mod params;
pub mod probembed;
pub mod rng;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
