pub mod delta;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod nn;
pub mod prob;
pub mod seed;
pub mod split;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;
