//! Pipeline stages, configuration and error reporting behind the `pulsebp`
//! executable.

pub mod config;
pub mod error;
pub mod stages;

pub use config::PipelineConfig;
pub use error::{classify, AtPath, ErrorKind, ErrorReport, Failure};
