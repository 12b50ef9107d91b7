//! Toolkit for text-prompted pathology image segmentation at desk scale.
//!
//! - [`taxonomy`]: three-level `region-structure-object` labels and prompt rendering.
//! - [`pipeline`]: magnification normalization, overlapping patch grids, resizing and splits.
//! - [`metrics`]: Dice, shape and instance metrics, bootstrap intervals.
//! - [`prompts`]: oracle box prompts and prompt-efficiency accounting.
//! - [`model`]: reference joint-interaction segmentation model with hand-written gradients.
//! - [`explain`]: object-aware MIL classification, CAMs and perturbation importance.
//! - [`synthetic`]: seeded shapes-on-noise corpora and synthetic slides.

pub mod explain;
pub mod metrics;
pub mod model;
mod optim;
pub mod pipeline;
pub mod prompts;
pub mod raster;
pub mod synthetic;
pub mod taxonomy;
