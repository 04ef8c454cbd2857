//! File formats, the pipeline commands and the `fodfnet` command line built
//! on `fodfnet-core`.

pub mod cache;
pub mod cli;
pub mod commands;
pub mod error;
pub mod files;
pub mod gradients;
pub mod manifest;
pub mod model_io;
pub mod nifti;
pub mod report;
