//! Weakly supervised arbitrary-shape polygon detection.
//!
//! Geometry, weak-label generation, evaluation and budget planning are
//! generic over the scalar type; the detector, scene synthesis and EM loop
//! work in `f64`.

pub mod budget;
pub mod detector;
pub mod em;
pub mod evaluation;
pub mod geometry;
pub mod scalar;
pub mod scene;
pub mod seeds;
pub mod weak_labels;

pub use scalar::Scalar;

pub type Point32 = geometry::Point<f32>;
pub type Point64 = geometry::Point<f64>;
pub type BBox32 = geometry::BBox<f32>;
pub type BBox64 = geometry::BBox<f64>;
pub type Polygon32 = geometry::Polygon<f32>;
pub type Polygon64 = geometry::Polygon<f64>;
