//! Mixed-supervision teacher-student segmentation of tumors in 3D CT.

pub mod dataset;
pub mod distill;
pub mod error;
pub mod eval;
pub mod infer;
pub mod ingest;
pub mod models;
pub mod nn;
pub mod phantoms;
pub mod pipeline;
pub mod preprocess;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{real_extent, AxialBox, Volume};
