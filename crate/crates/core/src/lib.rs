//! Joint object detection and attribute (color + material) recognition.
//!
//! The crate contains a small two-stage detector in the R-CNN family together
//! with the wiring variants needed to compare a single shared feature stream
//! against two disentangled streams (one for object category and box, one for
//! attributes) that only share region proposals.
//!
//! Module map:
//!
//! - [`geometry`]: boxes, IoU, box coding, NMS.
//! - [`datamodel`]: vocabularies, annotations, manifests, category splits.
//! - [`synthdata`]: a deterministic synthetic shapes benchmark.
//! - [`model`]: backbone, FPN, RPN, RoI align, heads and the stream variants.
//! - [`targets`]: anchor and RoI target assignment.
//! - [`losses`]: RPN, detection, and attribute objectives (SCE / UCE).
//! - [`training`]: the optimization loop, checkpoints and gradient audits.
//! - [`evaluation`]: mAP@0.5, attribute recall@0.5 and the transfer protocol.

pub mod datamodel;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod synthdata;
pub mod targets;
pub mod training;

pub use error::{Error, Result};
