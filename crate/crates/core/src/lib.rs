//! Pseudo-label refinement for semi-supervised voxel segmentation.

pub mod error;
pub mod grid;
pub mod kvfile;
pub mod losses;
pub mod net;
pub mod parallel;
pub mod pipeline;
pub mod refine;
pub mod scenegen;
pub mod theory;

mod binio;

pub use error::{Error, Result};
