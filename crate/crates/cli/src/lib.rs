//! File formats, configuration, pipeline orchestration and the `ablb`
//! command line on top of `ablb-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;

pub use cli::{run_command, run_with_env};
pub use error::{AppError, AppResult};
