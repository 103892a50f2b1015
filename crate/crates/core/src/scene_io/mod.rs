//! File formats, run configuration and synthetic data.

mod binio;
pub mod checkpoint;
pub mod config;
pub mod image_io;
pub mod scene;
pub mod synthetic;

pub use binio::write_atomic;
pub use checkpoint::{Checkpoint, GroupState};
pub use config::{DatasetConfig, RunConfig};
pub use scene::SceneFile;
