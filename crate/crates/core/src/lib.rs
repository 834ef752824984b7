//! Set-equivariant mixture models for electrolyte conductivity.

pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod frames;
pub mod geometry;
pub mod gin;
pub mod harness;
pub mod model;
pub mod nn;
pub mod readout;
pub mod synthetic;
pub mod training;

pub use config::Config;
pub use error::{Error, Result};
pub use model::Model;
