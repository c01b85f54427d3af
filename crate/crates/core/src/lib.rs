pub mod data;
pub mod dsp;
pub mod error;
pub mod likelihood;
pub mod masks;
pub mod nn;
pub mod policy;
pub mod scorers;
pub mod train;

pub use error::{Error, Result};
