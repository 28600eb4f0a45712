pub mod acts;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
