//! Pipeline orchestration: configuration, the run manifest, stage
//! execution and report emission.

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod store;

pub use config::{BackendKind, MockSettings, RunConfig};
pub use manifest::{RunManifest, Stage, StageStatus};
pub use pipeline::{ImportSummary, Pipeline, StageOutcome};
