//! Toolkit for turning point-annotated 3D two-channel fluorescence stacks
//! into weak pixel labels and per-nucleus 2D projections.
//!
//! The core chain: a 3D distance map from the point annotations, a
//! two-component feature map, k-means clustering with background
//! identification against dilated points, a per-pixel Voronoi partition,
//! and an extended maximum-intensity projection (EMIP) that restricts each
//! Voronoi cell's projection to the slices actually containing its
//! nucleus. Around it: training-loss numerics with gradient checking,
//! detection/classification metrics with slice integration, a synthetic
//! volume generator with exact ground truth, and TIFF/CSV/JSON plumbing.

pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub mod model;
pub(crate) mod par;
pub mod pipeline;
pub mod projection;
pub mod synth;
pub mod voronoi;
pub mod weaklabel;

pub use error::{Error, Result};
