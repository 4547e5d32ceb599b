pub mod align;
pub mod decoders;
pub mod error;
pub mod fusion;
pub mod io;
pub mod mapnet;
pub mod metrics;
pub mod nn;
pub mod numcore;
pub mod pipeline;
pub mod polyprep;
pub mod synthgen;
pub mod train;

pub use error::{Error, Result};
