pub mod baseline;
pub mod checkpoint;
pub mod codec;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod freq_embed;
pub mod gradcheck;
pub mod mapper;
pub mod nn;
pub mod pipeline;
pub mod report;
pub mod store;
pub mod train;

pub use error::{Error, Result};
