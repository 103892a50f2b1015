pub mod error;
pub mod autodiff;
pub mod encoding;
pub mod pipeline;
pub mod quantum;
pub mod render;
pub mod scene_io;
pub mod train;

pub use error::{Error, Result};
