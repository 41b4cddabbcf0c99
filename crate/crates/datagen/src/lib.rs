//! Instruction-following dataset generation for the MAEMI assistant:
//! teacher-model client (live HTTP or offline mock), the ten question
//! templates, deterministic dataset assembly, and similarity-driven
//! demonstration sampling.

pub mod client;
pub mod dataset;
pub mod error;
pub mod sampling;
pub mod templates;

pub use error::{Error, Result};
