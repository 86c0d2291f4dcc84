//! Library surface of the `morseflow` binary: configuration, pipeline
//! orchestration, and report rendering, split out so integration tests
//! can drive the pipeline in process.

pub mod config;
pub mod pipeline;
pub mod report;
