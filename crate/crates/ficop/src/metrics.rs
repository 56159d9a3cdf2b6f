//! Pose and segmentation evaluation: ADD, VSD, MSSD, MSPD, their recall
//! aggregate AR, and mask mIoU. VSD renders the object model with the same
//! point-splat depth renderer the scene generator uses (a deliberate
//! deviation from mesh rasterization — no mesh dependency, consistent
//! geometry end to end).

use nalgebra::Vector3;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{FicopError, Result};
use crate::geometry::{PinholeCamera, RigidTransform};
use crate::scene::ObjectModel;
use crate::synthgen::splat_depth;

/// ADD: mean model-point distance between the two poses; correct strictly
/// below 10% of the object diameter.
pub fn add_error(model: &ObjectModel, t_gt: &RigidTransform, t_est: &RigidTransform) -> (f64, bool) {
    let n = model.points.len() as f64;
    let mean = model
        .points
        .iter()
        .map(|p| (t_gt.apply(*p) - t_est.apply(*p)).norm())
        .sum::<f64>()
        / n;
    // Strictly below threshold; the relative guard keeps a pose exactly at
    // the boundary from flipping to correct through summation rounding.
    let thr = 0.1 * model.diameter;
    (mean, thr - mean > 1e-12 * thr)
}

/// Maximum symmetry-aware surface distance (meters) and projection distance
/// (pixels): min over declared symmetries S of the max over model points of
/// the 3D / projected distance between T_gt(p) and T_est(S(p)). Points that
/// land behind the camera are excluded from MSPD and counted.
pub fn mssd_mspd(
    model: &ObjectModel,
    t_gt: &RigidTransform,
    t_est: &RigidTransform,
    cam: &PinholeCamera,
) -> (f64, f64, usize) {
    let mut mssd = f64::INFINITY;
    let mut mspd = f64::INFINITY;
    let mut behind_total = 0usize;
    for sym in &model.symmetries {
        let mut max_surf = 0.0f64;
        let mut max_proj = 0.0f64;
        let mut behind = 0usize;
        for p in &model.points {
            let a = t_gt.apply(*p);
            let b = t_est.apply(sym.apply(*p));
            max_surf = max_surf.max((a - b).norm());
            match (cam.project(a), cam.project(b)) {
                (Some((ua, va)), Some((ub, vb))) => {
                    max_proj = max_proj.max(((ua - ub).powi(2) + (va - vb).powi(2)).sqrt());
                }
                _ => behind += 1,
            }
        }
        mssd = mssd.min(max_surf);
        mspd = mspd.min(max_proj);
        behind_total = behind_total.max(behind);
    }
    (mssd, mspd, behind_total)
}

/// BOP-style recall of one error metric over a threshold grid: fraction of
/// thresholds the error is strictly below.
fn recall_over<T: Copy + Into<f64>>(err: f64, thresholds: &[T]) -> f64 {
    let hit = thresholds.iter().filter(|&&t| err < t.into()).count();
    hit as f64 / thresholds.len() as f64
}

/// MSSD recall: thresholds 5%..50% of the diameter, step 5%.
pub fn mssd_recall(mssd: f64, diameter: f64) -> f64 {
    let th: Vec<f64> = (1..=10).map(|k| 0.05 * k as f64 * diameter).collect();
    recall_over(mssd, &th)
}

/// MSPD recall: thresholds 5..50 px step 5, scaled by image_width / 640.
pub fn mspd_recall(mspd: f64, image_width: usize) -> f64 {
    let scale = image_width as f64 / 640.0;
    let th: Vec<f64> = (1..=10).map(|k| 5.0 * k as f64 * scale).collect();
    recall_over(mspd, &th)
}

/// Visible surface discrepancy over the (tau_v, theta) grid:
/// tau_v in {5%..50% of diameter}, theta in {0.05..0.50}. For each tau_v,
/// e_VSD = fraction of pixels in the union of the two rendered visibility
/// masks where only one pose is visible or the depths differ by more than
/// tau_v; the recall is the fraction of grid cells with e_VSD < theta.
pub fn vsd_recall(
    model: &ObjectModel,
    t_gt: &RigidTransform,
    t_est: &RigidTransform,
    cam: &PinholeCamera,
) -> Result<f64> {
    let render = |t: &RigidTransform| -> Vec<Vector3<f64>> {
        model.points.iter().map(|p| t.apply(*p)).collect()
    };
    let d_gt = splat_depth(&render(t_gt), cam);
    let d_est = splat_depth(&render(t_est), cam);
    if d_gt.iter().all(|&d| d <= 0.0) {
        return Err(FicopError::Degenerate(
            "GT pose renders an empty mask; VSD undefined".into(),
        ));
    }
    if d_est.iter().all(|&d| d <= 0.0) {
        // Estimated pose completely out of frame: maximal discrepancy.
        return Ok(0.0);
    }

    // Per-pixel absolute depth differences over the union mask; pixels where
    // visibility differs count as infinite error.
    let mut union = 0usize;
    let mut diffs: Vec<f64> = Vec::new();
    let mut vis_mismatch = 0usize;
    for (a, b) in d_gt.iter().zip(d_est.iter()) {
        let (va, vb) = (*a > 0.0, *b > 0.0);
        if va || vb {
            union += 1;
            if va && vb {
                diffs.push((f64::from(*a) - f64::from(*b)).abs());
            } else {
                vis_mismatch += 1;
            }
        }
    }

    let mut hits = 0usize;
    let mut cells = 0usize;
    for k in 1..=10 {
        let tau_v = 0.05 * k as f64 * model.diameter;
        let bad = vis_mismatch + diffs.iter().filter(|&&d| d > tau_v).count();
        let e_vsd = bad as f64 / union as f64;
        for j in 1..=10 {
            let theta = 0.05 * j as f64;
            cells += 1;
            if e_vsd < theta {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / cells as f64)
}

/// Mean IoU over scene mask pairs; a scene with an empty union counts 1.0.
pub fn miou(masks_pred: &[Array2<u8>], masks_gt: &[Array2<u8>]) -> Result<f64> {
    if masks_pred.len() != masks_gt.len() || masks_pred.is_empty() {
        return Err(FicopError::Validation(format!(
            "mIoU needs equal nonzero mask counts, got {} vs {}",
            masks_pred.len(),
            masks_gt.len()
        )));
    }
    let mut acc = 0.0;
    for (p, g) in masks_pred.iter().zip(masks_gt) {
        if p.dim() != g.dim() {
            return Err(FicopError::Validation(format!(
                "mask shape mismatch {:?} vs {:?}",
                p.dim(),
                g.dim()
            )));
        }
        let mut inter = 0usize;
        let mut union = 0usize;
        for (a, b) in p.iter().zip(g.iter()) {
            let (a, b) = (*a != 0, *b != 0);
            if a && b {
                inter += 1;
            }
            if a || b {
                union += 1;
            }
        }
        acc += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    Ok(acc / masks_pred.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene_id: String,
    pub add: f64,
    pub add_correct: bool,
    pub vsd_recall: f64,
    pub mssd_recall: f64,
    pub mspd_recall: f64,
    pub ar: f64,
    pub iou: f64,
}

impl SceneMetrics {
    pub fn compute(
        scene_id: &str,
        model: &ObjectModel,
        t_gt: &RigidTransform,
        t_est: &RigidTransform,
        cam: &PinholeCamera,
        iou: f64,
    ) -> Result<Self> {
        let (add, add_correct) = add_error(model, t_gt, t_est);
        let (mssd, mspd, _) = mssd_mspd(model, t_gt, t_est, cam);
        let vsd = vsd_recall(model, t_gt, t_est, cam)?;
        let mssd_r = mssd_recall(mssd, model.diameter);
        let mspd_r = mspd_recall(mspd, cam.width);
        Ok(Self {
            scene_id: scene_id.to_string(),
            add,
            add_correct,
            vsd_recall: vsd,
            mssd_recall: mssd_r,
            mspd_recall: mspd_r,
            ar: (vsd + mssd_r + mspd_r) / 3.0,
            iou,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: Vec<SceneMetrics>,
    pub mean_add: f64,
    pub add_accuracy: f64,
    pub mean_ar: f64,
    pub mean_iou: f64,
}

impl EvalReport {
    pub fn aggregate(mut scenes: Vec<SceneMetrics>) -> Result<Self> {
        if scenes.is_empty() {
            return Err(FicopError::Validation("no scenes to aggregate".into()));
        }
        scenes.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
        for s in &scenes {
            let expect = (s.vsd_recall + s.mssd_recall + s.mspd_recall) / 3.0;
            if s.ar != expect {
                return Err(FicopError::Validation(format!(
                    "scene {}: ar {} != mean of recalls {}",
                    s.scene_id, s.ar, expect
                )));
            }
            for (name, r) in [
                ("vsd", s.vsd_recall),
                ("mssd", s.mssd_recall),
                ("mspd", s.mspd_recall),
                ("iou", s.iou),
            ] {
                if !(0.0..=1.0).contains(&r) {
                    return Err(FicopError::Validation(format!(
                        "scene {}: {name} recall {r} outside [0,1]",
                        s.scene_id
                    )));
                }
            }
        }
        let n = scenes.len() as f64;
        let mean_add = scenes.iter().map(|s| s.add).sum::<f64>() / n;
        let add_accuracy = scenes.iter().filter(|s| s.add_correct).count() as f64 / n;
        let mean_ar = scenes.iter().map(|s| s.ar).sum::<f64>() / n;
        let mean_iou = scenes.iter().map(|s| s.iou).sum::<f64>() / n;
        Ok(Self { scenes, mean_add, add_accuracy, mean_ar, mean_iou })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_scene, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_scene() -> crate::scene::ScenePair {
        generate_scene(&SynthConfig {
            seed: 21,
            height: 64,
            width: 64,
            feature_dim: 16,
            n_object_points: 1500,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn identical_poses_are_perfect() {
        let scene = test_scene();
        let t = &scene.gt_pose;
        let (add, ok) = add_error(&scene.model, t, t);
        assert_eq!(add, 0.0);
        assert!(ok);
        let (mssd, mspd, _) = mssd_mspd(&scene.model, t, t, &scene.anchor.cam);
        assert_eq!((mssd, mspd), (0.0, 0.0));
        assert_eq!(vsd_recall(&scene.model, t, t, &scene.anchor.cam).unwrap(), 1.0);
        let m = SceneMetrics::compute("s", &scene.model, t, t, &scene.anchor.cam, 1.0).unwrap();
        assert_eq!(m.ar, 1.0);
    }

    #[test]
    fn pure_translation_add_is_shift_and_strict() {
        let scene = test_scene();
        let d = scene.model.diameter;
        let shift = RigidTransform {
            rotation: scene.gt_pose.rotation,
            translation: scene.gt_pose.translation + Vector3::new(0.1 * d, 0.0, 0.0),
        };
        let (add, ok) = add_error(&scene.model, &scene.gt_pose, &shift);
        assert!((add - 0.1 * d).abs() < 1e-12);
        assert!(!ok, "boundary case must not count as correct");
    }

    #[test]
    fn add_matches_double_loop_oracle() {
        let scene = test_scene();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pert = crate::geometry::random_rigid(&mut rng, 5f64.to_radians(), 0.01);
        let t_est = pert.compose(&scene.gt_pose);
        let (add, _) = add_error(&scene.model, &scene.gt_pose, &t_est);
        let mut acc = 0.0;
        for p in &scene.model.points {
            let a = scene.gt_pose.apply(*p);
            let b = t_est.apply(*p);
            let mut s = 0.0;
            for k in 0..3 {
                s += (a[k] - b[k]) * (a[k] - b[k]);
            }
            acc += s.sqrt();
        }
        acc /= scene.model.points.len() as f64;
        assert!((add - acc).abs() < 1e-9);
    }

    #[test]
    fn mssd_mspd_match_brute_force() {
        let scene = test_scene();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pert = crate::geometry::random_rigid(&mut rng, 3f64.to_radians(), 0.005);
        let t_est = pert.compose(&scene.gt_pose);
        let cam = &scene.anchor.cam;
        let (mssd, mspd, _) = mssd_mspd(&scene.model, &scene.gt_pose, &t_est, cam);
        let mut bs = 0.0f64;
        let mut bp = 0.0f64;
        for p in &scene.model.points {
            let a = scene.gt_pose.apply(*p);
            let b = t_est.apply(*p);
            bs = bs.max((a - b).norm());
            let (ua, va) = cam.project(a).unwrap();
            let (ub, vb) = cam.project(b).unwrap();
            bp = bp.max(((ua - ub).powi(2) + (va - vb).powi(2)).sqrt());
        }
        assert!((mssd - bs).abs() < 1e-9);
        assert!((mspd - bp).abs() < 1e-9);
    }

    #[test]
    fn declared_symmetry_absorbs_symmetric_pose() {
        let scene = test_scene();
        let rz180 = RigidTransform::from_axis_angle(
            Vector3::new(0.0, 0.0, 1.0),
            std::f64::consts::PI,
            Vector3::zeros(),
        );
        let mut model = scene.model.clone();
        model.symmetries.push(rz180.clone());
        let t_est = scene.gt_pose.compose(&rz180);
        let (mssd, _, _) = mssd_mspd(&model, &scene.gt_pose, &t_est, &scene.anchor.cam);
        assert!(mssd < 1e-12, "mssd {mssd}");
    }

    #[test]
    fn far_displacement_zero_recall() {
        let scene = test_scene();
        let far = RigidTransform {
            rotation: scene.gt_pose.rotation,
            translation: scene.gt_pose.translation + Vector3::new(10.0, 0.0, 0.0),
        };
        let vsd = vsd_recall(&scene.model, &scene.gt_pose, &far, &scene.anchor.cam).unwrap();
        assert_eq!(vsd, 0.0);
    }

    #[test]
    fn vsd_monotone_under_growing_perturbation() {
        let scene = test_scene();
        let mut prev = f64::INFINITY;
        let mut saw_interior = false;
        for step in 1..=5 {
            let shift = 0.06 * step as f64 * scene.model.diameter;
            let t_est = RigidTransform {
                rotation: scene.gt_pose.rotation,
                translation: scene.gt_pose.translation + Vector3::new(shift, 0.0, 0.0),
            };
            let vsd = vsd_recall(&scene.model, &scene.gt_pose, &t_est, &scene.anchor.cam).unwrap();
            assert!(vsd <= prev + 1e-12, "step {step}: {vsd} > {prev}");
            if vsd > 0.0 && vsd < 1.0 {
                saw_interior = true;
            }
            prev = vsd;
        }
        assert!(saw_interior, "ramp never produced an interior recall value");
    }

    #[test]
    fn metrics_invariant_to_global_frame_change() {
        let scene = test_scene();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pert = crate::geometry::random_rigid(&mut rng, 4f64.to_radians(), 0.01);
        let t_est = pert.compose(&scene.gt_pose);
        let frame = crate::geometry::random_rigid(&mut rng, 1.0, 0.3);
        let (add_a, _) = add_error(&scene.model, &scene.gt_pose, &t_est);
        let (add_b, _) = add_error(
            &scene.model,
            &frame.compose(&scene.gt_pose),
            &frame.compose(&t_est),
        );
        assert!((add_a - add_b).abs() < 1e-9);
        let cam = &scene.anchor.cam;
        let (mssd_a, _, _) = mssd_mspd(&scene.model, &scene.gt_pose, &t_est, cam);
        let (mssd_b, _, _) = mssd_mspd(
            &scene.model,
            &frame.compose(&scene.gt_pose),
            &frame.compose(&t_est),
            cam,
        );
        assert!((mssd_a - mssd_b).abs() < 1e-9);
    }

    #[test]
    fn miou_cases() {
        let a = Array2::from_elem((4, 4), 1u8);
        assert_eq!(miou(&[a.clone()], &[a.clone()]).unwrap(), 1.0);
        let mut b = Array2::zeros((4, 4));
        b[(0, 0)] = 1;
        let mut c = Array2::zeros((4, 4));
        c[(3, 3)] = 1;
        assert_eq!(miou(&[b], &[c]).unwrap(), 0.0);
        // Half-overlap rectangles: area a each, overlap a/2 -> IoU 1/3.
        let mut p = Array2::zeros((4, 8));
        let mut g = Array2::zeros((4, 8));
        for v in 0..4 {
            for u in 0..4 {
                p[(v, u)] = 1;
                g[(v, u + 2)] = 1;
            }
        }
        assert!((miou(&[p], &[g]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        // Empty union scene contributes 1.0.
        let z = Array2::zeros((4, 4));
        assert_eq!(miou(&[z.clone()], &[z]).unwrap(), 1.0);
        // Shape mismatch is an error.
        assert!(miou(&[Array2::zeros((2, 2))], &[Array2::zeros((3, 3))]).is_err());
    }

    #[test]
    fn report_enforces_ar_identity() {
        let good = SceneMetrics {
            scene_id: "a".into(),
            add: 0.0,
            add_correct: true,
            vsd_recall: 0.9,
            mssd_recall: 0.6,
            mspd_recall: 0.3,
            ar: (0.9 + 0.6 + 0.3) / 3.0,
            iou: 1.0,
        };
        let rep = EvalReport::aggregate(vec![good.clone()]).unwrap();
        assert_eq!(rep.mean_ar, good.ar);
        let mut bad = good;
        bad.ar = 0.5;
        assert!(EvalReport::aggregate(vec![bad]).is_err());
    }
}
