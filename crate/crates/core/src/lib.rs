//! Field-boundary delineation and evaluation.
//!
//! The pipeline runs in five stages:
//!
//! 1. **raster** – patches, geo-transforms and overlapping tile grids.
//! 2. **backend** – per-tile instance segmentation (classical baseline or an external model).
//! 3. **stitch** – tile detections merged into one scene-level set.
//! 4. **vector** – masks traced into closed polygons and exported as GeoJSON.
//! 5. **eval** – COCO-style mAP, boundary IoU and latency measurement.
//!
//! **mask** provides the run-length mask algebra everything else builds on;
//! **datagen** builds annotated patch datasets from parcel vectors.

pub mod backend;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod mask;
pub mod pipeline;
pub mod raster;
pub mod stitch;
pub mod vector;

pub use backend::{DetectionSet, FieldInstance};
pub use error::{Error, Result};
pub use mask::InstanceMask;
pub use raster::{GeoTransform, RasterPatch, TileGrid};
