//! Streaming-perception evaluation harness.
//!
//! A detector consuming a fixed-rate video stream is simulated as a
//! discrete-event process; its timestamped output is scored with COCO-style
//! AP both offline (every frame against its own detections) and in
//! streaming mode (every frame against the newest output available at that
//! instant). Alongside the evaluator the crate carries the numeric building
//! blocks of the detector side: GIoU, convolution branch fusion, scaled
//! dot-product attention, the Lookahead optimizer, class resampling,
//! anchor clustering and Mosaic/Mixup box geometry.

pub mod anchors;
pub mod attention;
pub mod augment;
pub mod cli;
pub mod dataset;
pub mod detection;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod optimizer;
pub mod reparam;
pub mod stream;
pub mod synth;

pub use error::{Error, Result};
