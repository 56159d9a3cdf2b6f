//! Patch-constrained dense correspondence and 6D pose estimation.
//!
//! The pipeline operates on dense per-pixel feature maps of an anchor view
//! and a query view of the same rigid object and estimates the SE(3)
//! transform between them:
//!
//! 1. [`cpgp`] — cross-view transformer forward pass producing
//!    view-interacted token features.
//! 2. [`pcp`] — patch correlation predictor: a per-anchor-patch probability
//!    map over query patch cells, used as a spatial prior.
//! 3. [`matcher`] — pixel-level cosine matching, either constrained to
//!    correlated patches or global over the masked query image.
//! 4. [`registration`] — robust rigid estimation from the 3D-lifted
//!    correspondence set (spectral spatial-consistency solver + RANSAC).
//! 5. [`metrics`] — ADD / VSD / MSSD / MSPD / AR / mIoU evaluation.
//!
//! Feature maps are either synthesized with ground truth by [`synthgen`]
//! or ingested from FTZ tensor files via [`tensor_io`]. No neural backbone
//! is required; every stage is a deterministic forward computation.

pub mod cpgp;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod params;
pub mod matcher;
pub mod metrics;
pub mod pcp;
pub mod pipeline;
pub mod registration;
pub mod scene;
pub mod synthgen;
pub mod tensor_io;
pub mod viz;

pub use error::{FicopError, Result};
