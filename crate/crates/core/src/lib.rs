pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod model;
pub mod numkernel;
pub mod pipeline;
pub mod seed;
pub mod slots;
pub mod textcore;
pub mod train;

pub use error::{Error, Result};
pub use exec::Execution;
