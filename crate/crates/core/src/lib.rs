pub mod cli;
pub mod config;
pub mod env;
pub mod error;
pub mod export;
pub mod imagination;
pub mod impact;
pub mod qnet;
pub mod replay;
pub mod trainer;

pub use config::RunConfig;
pub use error::{Error, Result};
