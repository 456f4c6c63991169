//! Module-level battery state-of-health estimation from charging curves.

pub mod curvefit;
pub mod data;
pub mod error;
pub mod features;
pub mod info;
pub mod pipeline;
pub mod rvr;
pub mod select;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
