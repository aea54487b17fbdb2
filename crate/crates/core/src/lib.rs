pub mod config;
pub mod data;
pub mod dependence;
pub mod error;
pub mod grid;
pub mod marginal;
pub mod optimize;
pub mod pipeline;
pub mod preprocess;
pub mod returns;
pub mod risk;
pub mod simulate;
pub mod spatial;
pub mod stats;
pub mod trend;

pub use error::{Error, Result};
