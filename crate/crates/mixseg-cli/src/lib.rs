//! Library surface of the experiment-orchestration tool: configuration,
//! the resumable pipeline, sweeps, plotting, and the NIfTI import adapter.

pub mod config;
pub mod nifti;
pub mod pipeline;
pub mod plot;
pub mod sweep;
