//! Pixel-space primitives shared by every stage: boxes, IoU, crops and the
//! target marker drawn for the chat model.
//!
//! Coordinates are 0-based with a top-left origin; boxes are `(x, y, w, h)`.

mod bbox;
mod raster;

use thiserror::Error;

pub use self::bbox::{iou, BBox};
pub use self::raster::{annotate, annotation_thickness, crop, crop_region, Image, PixelRect, Rgb, GREEN};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("box has non-finite coordinates: {0}")]
    NonFinite(BBox),
    #[error("box has negative extent: {0}")]
    NegativeExtent(BBox),
    #[error("pixel buffer length {actual}, expected {expected}")]
    BufferSize { expected: usize, actual: usize },
    #[error("crop of {0} is empty after clamping to the image")]
    EmptyCrop(BBox),
    #[error("context factor must be finite and >= 1, got {0}")]
    ContextFactor(f64),
    #[error("image decode failed: {0}")]
    Decode(String),
    #[error("image encode failed: {0}")]
    Encode(String),
}
