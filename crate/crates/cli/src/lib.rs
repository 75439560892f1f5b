//! Configuration, synthetic scenes, stage orchestration and run reports for
//! the hyperlapse planner.

pub mod config;
pub mod pipeline;
pub mod report;
pub mod synth;

pub use config::PipelineConfig;
pub use pipeline::{Pipeline, PipelineError, Stage};
