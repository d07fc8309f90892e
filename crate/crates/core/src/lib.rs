//! Hand and active-object segmentation with interaction-aware dynamic queries.

pub mod config;
pub mod data;
pub mod decoder;
pub mod domain;
pub mod dqg;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod ipp;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;

pub use error::{Error, Result};
