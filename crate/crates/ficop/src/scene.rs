//! In-memory scene representation shared by the generator, the matcher and
//! the evaluation harness.

use nalgebra::Vector3;
use ndarray::{Array2, Array3};

use crate::error::{FicopError, Result};
use crate::geometry::{PinholeCamera, Pixel, RigidTransform};

/// One camera view: dense per-pixel descriptors plus mask, depth and
/// intrinsics at the same resolution.
#[derive(Debug, Clone)]
pub struct ViewData {
    /// H x W x C descriptor grid.
    pub features: Array3<f32>,
    /// H x W, nonzero = object pixel.
    pub mask: Array2<u8>,
    /// H x W depth in meters; 0 = invalid pixel.
    pub depth: Array2<f32>,
    pub cam: PinholeCamera,
}

impl ViewData {
    pub fn resolution(&self) -> (usize, usize) {
        let (h, w, _) = self.features.dim();
        (h, w)
    }

    pub fn feature_dim(&self) -> usize {
        self.features.dim().2
    }

    /// Mask of every depth-valid pixel (object and clutter alike). Stands in
    /// for a loose detection mask when evaluating matching under clutter.
    pub fn valid_depth_mask(&self) -> Array2<u8> {
        self.depth.mapv(|d| u8::from(d > 0.0))
    }
}

/// Sampled object surface with its diameter and declared symmetries.
#[derive(Debug, Clone)]
pub struct ObjectModel {
    pub points: Vec<Vector3<f64>>,
    pub diameter: f64,
    pub symmetries: Vec<RigidTransform>,
}

impl ObjectModel {
    pub fn new(
        points: Vec<Vector3<f64>>,
        diameter: f64,
        symmetries: Vec<RigidTransform>,
    ) -> Result<Self> {
        if points.len() < 100 {
            return Err(FicopError::Validation(format!(
                "object model needs >= 100 points, got {}",
                points.len()
            )));
        }
        if diameter <= 0.0 {
            return Err(FicopError::Validation("object diameter must be positive".into()));
        }
        let max_dist = max_pairwise_distance(&points);
        if (max_dist - diameter).abs() > 0.01 * diameter {
            return Err(FicopError::Validation(format!(
                "declared diameter {diameter:.6} vs measured max pairwise distance {max_dist:.6} (>1% off)"
            )));
        }
        let symmetries = if symmetries.is_empty() {
            vec![RigidTransform::identity()]
        } else {
            symmetries
        };
        Ok(Self { points, diameter, symmetries })
    }
}

pub fn max_pairwise_distance(points: &[Vector3<f64>]) -> f64 {
    let mut best = 0.0f64;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            let d = (points[i] - points[j]).norm_squared();
            if d > best {
                best = d;
            }
        }
    }
    best.sqrt()
}

/// Anchor/query instance with ground truth where available.
#[derive(Debug, Clone)]
pub struct ScenePair {
    pub scene_id: String,
    pub anchor: ViewData,
    pub query: ViewData,
    /// Rigid transform taking anchor-camera-frame points to the query frame.
    pub gt_pose: RigidTransform,
    /// Pixel pairs ((uA,vA), (uQ,vQ)) observing the same object point.
    /// Empty for inference-only scenes.
    pub gt_corr: Vec<(Pixel, Pixel)>,
    pub model: ObjectModel,
    pub prompt_text: String,
}

impl ScenePair {
    pub fn validate(&self) -> Result<()> {
        self.gt_pose.validate(1e-6)?;
        for (name, view) in [("anchor", &self.anchor), ("query", &self.query)] {
            let (h, w) = view.resolution();
            if view.mask.dim() != (h, w) {
                return Err(FicopError::Validation(format!(
                    "{name}: mask {:?} vs features {h}x{w}",
                    view.mask.dim()
                )));
            }
            if view.depth.dim() != (h, w) {
                return Err(FicopError::Validation(format!(
                    "{name}: depth {:?} vs features {h}x{w}",
                    view.depth.dim()
                )));
            }
            if (view.cam.height, view.cam.width) != (h, w) {
                return Err(FicopError::Validation(format!(
                    "{name}: camera {}x{} vs features {h}x{w}",
                    view.cam.height, view.cam.width
                )));
            }
        }
        if self.anchor.feature_dim() != self.query.feature_dim() {
            return Err(FicopError::Validation(format!(
                "feature dims differ: anchor {}, query {}",
                self.anchor.feature_dim(),
                self.query.feature_dim()
            )));
        }
        for &((ua, va), (uq, vq)) in &self.gt_corr {
            let (ha, wa) = self.anchor.resolution();
            let (hq, wq) = self.query.resolution();
            if ua >= wa || va >= ha || uq >= wq || vq >= hq {
                return Err(FicopError::Validation(format!(
                    "gt correspondence ({ua},{va})->({uq},{vq}) out of bounds"
                )));
            }
        }
        Ok(())
    }
}
