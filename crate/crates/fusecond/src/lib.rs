//! File formats, configuration, pipeline orchestration and checks around
//! the `fusecond-core` kernels.

pub mod config;
pub mod error;
pub mod inspect;
pub mod mask;
pub mod oracle;
pub mod pipeline;
pub mod records;
pub mod scene;
pub mod selftest;
pub mod slat;
pub mod tensor;

pub use config::{Mode, PipelineConfig};
pub use error::{Error, Result};
pub use inspect::{inspect, InspectReport};
pub use pipeline::{run_alignment, run_pipeline, RunArtifacts};
