//! Pipeline orchestration: file-backed commands and the experiment runners
//! behind them.

mod error;
pub mod commands;
pub mod experiments;

pub use error::{exit, Error, Result};
