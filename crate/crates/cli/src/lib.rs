//! Pipeline orchestration behind the `ptprobe` binary: configuration, the stage commands
//! and their summary files.

pub mod config;
pub mod pipeline;
pub mod schema;

pub use config::{Overrides, PipelineConfig};
pub use pipeline::{exit_code, Command, Pipeline, Status, Summary};
