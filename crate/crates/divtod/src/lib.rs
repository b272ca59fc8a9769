//! File formats, backends and orchestration around `divtod-core`.

pub use divtod_core as core;

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod io;
pub mod mock;
pub mod parallel;
pub mod report;
pub mod synth;
pub mod wire;
