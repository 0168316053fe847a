//! Pseudo ground-truth generation for weakly supervised object detection.
//!
//! The pipeline turns per-class activation heatmaps plus region proposals
//! into pseudo ground-truth boxes for training a detector from image-level
//! labels only:
//!
//! * [`geometry`] — axis-aligned box arithmetic (IoU, containment, scaling, NMS).
//! * [`heatmap`] — normalization, bilinear upsampling, dual thresholding,
//!   connected components, and the region-level subordinate relation.
//! * [`hgps`] — the heatmap-guided proposal selector: builds pseudo-GT
//!   clusters from dual-threshold boxes, selects pseudo-GT boxes per
//!   refinement stage, and assigns per-proposal labels and weights.
//! * [`midn`] — multiple-instance scoring stacks (WSBDN and the WSDDN/OICR
//!   baselines), every loss term, analytic gradients, and a
//!   finite-difference gradient checker.
//! * [`metrics`] — VOC-protocol AP / mAP / CorLoc and pseudo-GT quality
//!   diagnostics.
//! * [`synth`] — deterministic synthetic scenes with analytically known
//!   threshold geometry, plus the brute-force oracles used for verification.
//! * [`trainer`] — a toy SGD loop wiring everything together.

pub mod error;
pub mod geometry;
pub mod heatmap;
pub mod hgps;
pub mod metrics;
pub mod midn;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
