//! Feature-space diffusion for restoring a missing modality embedding from the
//! available one.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod dit;
pub mod error;
pub mod evaluation;
pub mod optim;
pub mod params;
pub mod restoration;
pub mod schedule;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
