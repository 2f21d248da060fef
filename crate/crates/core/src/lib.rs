//! Trajectory representation learning with blurred encoding.
//!
//! Raw GPS trajectories are grouped into a three-level patch pyramid by
//! rounding coordinates to fewer decimals. A pyramid transformer encoder
//! compresses the sequence level by level with attention pooling, and a
//! decoder restores it with cross-attention; the model is pretrained by
//! reconstructing spatial and temporal features of every point.

pub mod batch;
pub mod blur;
pub mod error;
pub mod geo;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod preprocess;
pub mod tasks;

pub use error::{Error, Result};
pub use geo::{BoundingBox, GpsPoint, SpatialContext, TemporalContext, Trajectory};
