//! Boundary-matching temporal proposal generation: sampling masks, the
//! network and its training loop, proposal decoding and recall metrics.

pub mod bm;
pub mod config;
pub mod data_io;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod labeling;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod real;
pub mod synthetic;

pub use config::RunConfig;
pub use error::{BmnError, Result};
