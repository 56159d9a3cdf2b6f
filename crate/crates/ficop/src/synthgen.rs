//! Synthetic scene-pair generation with exact ground truth: an asymmetric
//! rigid object observed from two views with known relative pose, point-splat
//! depth maps, masks, pixel correspondences and a controllable descriptor
//! model with clutter distractors.

use nalgebra::Vector3;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::path::Path;

use crate::error::{FicopError, Result};
use crate::geometry::{PinholeCamera, Pixel, RigidTransform};
use crate::scene::{max_pairwise_distance, ObjectModel, ScenePair, ViewData};
use crate::tensor_io::{write_tensor, SceneManifest, TensorBlob, ViewManifest};

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub feature_dim: usize,
    pub n_object_points: usize,
    pub n_clutter_points: usize,
    /// Descriptor-space Gaussian noise std added to object pixel descriptors.
    pub feature_noise_sigma: f64,
    /// Fraction of clutter descriptors cloned from object base descriptors.
    pub clutter_similarity: f64,
    /// Full object copies placed at unrelated poses in the query view.
    /// Decoys carry the exact object descriptors, so they hand global
    /// matching a geometrically coherent distractor consensus.
    pub n_decoys: usize,
    /// Max relative view rotation, degrees, about a random axis.
    pub view_rotation_range: f64,
    /// Max relative view translation per axis, meters.
    pub view_translation_range: f64,
    /// Characteristic object extent, meters.
    pub object_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 128,
            width: 128,
            feature_dim: 64,
            n_object_points: 2000,
            n_clutter_points: 0,
            feature_noise_sigma: 0.0,
            clutter_similarity: 0.0,
            n_decoys: 0,
            view_rotation_range: 30.0,
            view_translation_range: 0.05,
            object_scale: 0.2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.feature_dim == 0 {
            return Err(FicopError::Validation(
                "resolution and feature_dim must be positive".into(),
            ));
        }
        if self.n_object_points == 0 {
            return Err(FicopError::Validation("n_object_points must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.clutter_similarity) {
            return Err(FicopError::Validation(format!(
                "clutter_similarity {} outside [0,1]",
                self.clutter_similarity
            )));
        }
        if self.feature_noise_sigma < 0.0 {
            return Err(FicopError::Validation("feature_noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

fn unit_descriptor(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Sample points on the asymmetric composite surface: an unequal-sided box
/// with a sphere cap fused onto one face. The shape has no nontrivial
/// symmetry, so the ground-truth pose is unique.
fn sample_object_surface(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<Vector3<f64>> {
    let half = Vector3::new(0.5 * scale, 0.35 * scale, 0.22 * scale);
    let cap_center = Vector3::new(0.25 * scale, 0.35 * scale, 0.05 * scale);
    let cap_radius = 0.2 * scale;
    let n_cap = n / 4;
    let n_box = n - n_cap;
    let mut pts = Vec::with_capacity(n);

    // Box faces weighted by area.
    let areas = [
        half.y * half.z, // x faces
        half.x * half.z, // y faces
        half.x * half.y, // z faces
    ];
    let total: f64 = areas.iter().map(|a| 2.0 * a).sum();
    for _ in 0..n_box {
        let mut pick = rng.gen::<f64>() * total;
        let mut axis = 0;
        let mut sign = 1.0;
        'outer: for ax in 0..3 {
            for s in [1.0f64, -1.0] {
                if pick < areas[ax] {
                    axis = ax;
                    sign = s;
                    break 'outer;
                }
                pick -= areas[ax];
            }
        }
        let a = rng.gen::<f64>() * 2.0 - 1.0;
        let b = rng.gen::<f64>() * 2.0 - 1.0;
        let p = match axis {
            0 => Vector3::new(sign * half.x, a * half.y, b * half.z),
            1 => Vector3::new(a * half.x, sign * half.y, b * half.z),
            _ => Vector3::new(a * half.x, b * half.y, sign * half.z),
        };
        pts.push(p);
    }
    // Sphere cap: upper hemisphere of a small sphere poking out of the +y face.
    for _ in 0..n_cap {
        let d = unit_descriptor(rng, 3);
        let mut dir = Vector3::new(d[0], d[1], d[2]);
        if dir.y < 0.0 {
            dir.y = -dir.y;
        }
        pts.push(cap_center + cap_radius * dir);
    }
    pts
}

/// Z-buffer point splatting with 1px splat radius. Returns per-pixel depth
/// (0 = no hit) and the index of the winning point (-1 = no hit).
fn splat_points(
    points: &[Vector3<f64>],
    cam: &PinholeCamera,
) -> (Array2<f32>, Array2<i64>) {
    let mut depth = Array2::<f32>::zeros((cam.height, cam.width));
    let mut winner = Array2::<i64>::from_elem((cam.height, cam.width), -1);
    for (idx, p) in points.iter().enumerate() {
        let Some((u, v)) = cam.project(*p) else { continue };
        let uc = u.round() as i64;
        let vc = v.round() as i64;
        for dv in -1..=1i64 {
            for du in -1..=1i64 {
                let (uu, vv) = (uc + du, vc + dv);
                if uu < 0 || vv < 0 || uu >= cam.width as i64 || vv >= cam.height as i64 {
                    continue;
                }
                let (uu, vv) = (uu as usize, vv as usize);
                let z = p.z as f32;
                if depth[(vv, uu)] == 0.0 || z < depth[(vv, uu)] {
                    depth[(vv, uu)] = z;
                    winner[(vv, uu)] = idx as i64;
                }
            }
        }
    }
    // Refinement: among points on the front surface (within 1% depth of the
    // z-buffer minimum), let the one projecting nearest the pixel center own
    // the pixel. The plain z-buffer assigns whole 3x3 splats one depth,
    // which makes back-projected pixel lifts off by up to half a splat; the
    // refinement keeps those errors sub-pixel and uncorrelated.
    let mut best_off = Array2::<f64>::from_elem((cam.height, cam.width), f64::INFINITY);
    for (idx, p) in points.iter().enumerate() {
        let Some((u, v)) = cam.project(*p) else { continue };
        let (uc, vc) = (u.round() as i64, v.round() as i64);
        if uc < 0 || vc < 0 || uc >= cam.width as i64 || vc >= cam.height as i64 {
            continue;
        }
        let (uu, vv) = (uc as usize, vc as usize);
        let front = depth[(vv, uu)] as f64;
        if front <= 0.0 || p.z > front * 1.01 {
            continue;
        }
        let off = (u - uc as f64).powi(2) + (v - vc as f64).powi(2);
        if off < best_off[(vv, uu)] {
            best_off[(vv, uu)] = off;
            depth[(vv, uu)] = p.z as f32;
            winner[(vv, uu)] = idx as i64;
        }
    }
    (depth, winner)
}

/// Point-splat depth render of a bare point cloud (no identity tracking).
/// Shared with the VSD metric.
pub fn splat_depth(points: &[Vector3<f64>], cam: &PinholeCamera) -> Array2<f32> {
    splat_points(points, cam).0
}

struct RenderedView {
    depth: Array2<f32>,
    winner: Array2<i64>,
    mask: Array2<u8>,
    /// canonical pixel of each visible object point, else None
    canonical: Vec<Option<Pixel>>,
}

fn render_view(
    all_points: &[Vector3<f64>],
    n_object: usize,
    cam: &PinholeCamera,
    depth_tol: f64,
) -> RenderedView {
    let (depth, winner) = splat_points(all_points, cam);
    let mask = winner.mapv(|w| u8::from(w >= 0 && (w as usize) < n_object));
    // A point is visible at its rounded projection if the pixel shows the
    // object surface at a consistent depth. Requiring the point to win the
    // z-buffer outright would discard most points of a dense splat.
    let mut canonical = vec![None; n_object];
    for (idx, p) in all_points.iter().take(n_object).enumerate() {
        let Some((u, v)) = cam.project(*p) else { continue };
        let (uc, vc) = (u.round() as i64, v.round() as i64);
        if uc < 0 || vc < 0 || uc >= cam.width as i64 || vc >= cam.height as i64 {
            continue;
        }
        let (uc, vc) = (uc as usize, vc as usize);
        if mask[(vc, uc)] != 0 && (depth[(vc, uc)] as f64 - p.z).abs() <= depth_tol {
            canonical[idx] = Some((uc, vc));
        }
    }
    RenderedView { depth, winner, mask, canonical }
}

fn build_features(
    rng: &mut ChaCha8Rng,
    view: &RenderedView,
    descriptors: &[Vec<f64>],
    n_object: usize,
    sigma: f64,
    dim: usize,
) -> Array3<f32> {
    let (h, w) = view.depth.dim();
    let mut feats = Array3::<f32>::zeros((h, w, dim));
    for v in 0..h {
        for u in 0..w {
            let idx = view.winner[(v, u)];
            if idx < 0 {
                continue;
            }
            let idx = idx as usize;
            let base = &descriptors[idx];
            let mut d: Vec<f64> = if idx < n_object && sigma > 0.0 {
                base.iter()
                    .map(|&x| x + sigma * { let z: f64 = StandardNormal.sample(rng); z })
                    .collect()
            } else {
                base.clone()
            };
            let norm: f64 = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                for x in d.iter_mut() {
                    *x /= norm;
                }
            }
            for (c, &x) in d.iter().enumerate() {
                feats[(v, u, c)] = x as f32;
            }
        }
    }
    feats
}

pub fn generate_scene(cfg: &SynthConfig) -> Result<ScenePair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let model_points = sample_object_surface(&mut rng, cfg.n_object_points, cfg.object_scale);
    let n_object = model_points.len();

    // Anchor camera: object centered on the optical axis.
    let f = 1.2 * cfg.width.max(cfg.height) as f64;
    let cam = PinholeCamera::new(
        f,
        f,
        (cfg.width as f64 - 1.0) / 2.0,
        (cfg.height as f64 - 1.0) / 2.0,
        cfg.width,
        cfg.height,
    )?;
    let z0 = 3.5 * cfg.object_scale;
    let anchor_pose = RigidTransform {
        rotation: nalgebra::Matrix3::identity(),
        translation: Vector3::new(0.0, 0.0, z0),
    };
    let anchor_obj: Vec<Vector3<f64>> =
        model_points.iter().map(|p| anchor_pose.apply(*p)).collect();

    // Relative pose: rotation about the object centroid plus a small
    // translation, so the object stays in frame.
    let centroid = anchor_obj.iter().sum::<Vector3<f64>>() / n_object as f64;
    let axis = Vector3::new(
        rng.gen::<f64>() - 0.5,
        rng.gen::<f64>() - 0.5,
        rng.gen::<f64>() - 0.5,
    );
    let angle = (rng.gen::<f64>() * 2.0 - 1.0) * cfg.view_rotation_range.to_radians();
    let delta = Vector3::new(
        (rng.gen::<f64>() * 2.0 - 1.0) * cfg.view_translation_range,
        (rng.gen::<f64>() * 2.0 - 1.0) * cfg.view_translation_range,
        (rng.gen::<f64>() * 2.0 - 1.0) * cfg.view_translation_range,
    );
    let rot = RigidTransform::from_axis_angle(axis, angle, Vector3::zeros());
    // T = Trans(centroid + delta) ∘ R ∘ Trans(-centroid)
    let gt_pose = RigidTransform {
        rotation: rot.rotation,
        translation: centroid + delta - rot.rotation * centroid,
    };
    let query_obj: Vec<Vector3<f64>> = anchor_obj.iter().map(|p| gt_pose.apply(*p)).collect();

    // Clutter: points scattered in a slab behind the object in each view's
    // own frame, so they surround the silhouette without occluding it. The
    // cloud is sampled independently per view, making clutter geometrically
    // inconsistent with the object motion.
    let clutter_box = 2.2 * cfg.object_scale;
    let sample_clutter = |rng: &mut ChaCha8Rng| -> Vec<Vector3<f64>> {
        (0..cfg.n_clutter_points)
            .map(|_| {
                Vector3::new(
                    (rng.gen::<f64>() - 0.5) * clutter_box,
                    (rng.gen::<f64>() - 0.5) * clutter_box,
                    z0 + (0.3 + 0.8 * rng.gen::<f64>()) * cfg.object_scale,
                )
            })
            .collect()
    };
    let clutter_anchor = sample_clutter(&mut rng);
    let clutter_query = sample_clutter(&mut rng);

    // Descriptors: object base descriptors, then per-view clutter descriptors.
    let object_desc: Vec<Vec<f64>> = (0..n_object)
        .map(|_| unit_descriptor(&mut rng, cfg.feature_dim))
        .collect();
    let clutter_desc = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..cfg.n_clutter_points)
            .map(|_| {
                if rng.gen::<f64>() < cfg.clutter_similarity {
                    object_desc[rng.gen_range(0..n_object)].clone()
                } else {
                    unit_descriptor(rng, cfg.feature_dim)
                }
            })
            .collect()
    };
    let clutter_desc_anchor = clutter_desc(&mut rng);
    let clutter_desc_query = clutter_desc(&mut rng);

    let mut anchor_all = anchor_obj.clone();
    anchor_all.extend_from_slice(&clutter_anchor);
    let mut query_all = query_obj.clone();
    query_all.extend_from_slice(&clutter_query);

    // Decoys: the same surface points under an unrelated pose, off to the
    // side and slightly behind so they never occlude the real object.
    let mut decoy_poses = Vec::with_capacity(cfg.n_decoys);
    for d in 0..cfg.n_decoys {
        let axis = Vector3::new(
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
        );
        let angle = rng.gen::<f64>() * std::f64::consts::PI;
        let side = if d % 2 == 0 { 1.0 } else { -1.0 };
        let offset = Vector3::new(
            side * (0.9 + 0.3 * rng.gen::<f64>()) * cfg.object_scale,
            (rng.gen::<f64>() - 0.5) * 0.6 * cfg.object_scale,
            (0.3 + 0.4 * rng.gen::<f64>()) * cfg.object_scale,
        );
        let rot = RigidTransform::from_axis_angle(axis, angle, Vector3::zeros());
        decoy_poses.push(RigidTransform {
            rotation: rot.rotation,
            translation: centroid + offset - rot.rotation * centroid,
        });
    }
    for pose in &decoy_poses {
        query_all.extend(anchor_obj.iter().map(|p| pose.apply(*p)));
    }

    let depth_tol = 0.05 * cfg.object_scale;
    let anchor_render = render_view(&anchor_all, n_object, &cam, depth_tol);
    let query_render = render_view(&query_all, n_object, &cam, depth_tol);
    if anchor_render.mask.iter().all(|&m| m == 0) || query_render.mask.iter().all(|&m| m == 0) {
        return Err(FicopError::Generation(format!(
            "seed {} produced an empty object mask",
            cfg.seed
        )));
    }

    let mut anchor_descs = object_desc.clone();
    anchor_descs.extend(clutter_desc_anchor);
    let mut query_descs = object_desc.clone();
    query_descs.extend(clutter_desc_query);
    for _ in 0..cfg.n_decoys {
        query_descs.extend(object_desc.iter().cloned());
    }

    let anchor_feats = build_features(
        &mut rng,
        &anchor_render,
        &anchor_descs,
        n_object,
        cfg.feature_noise_sigma,
        cfg.feature_dim,
    );
    let query_feats = build_features(
        &mut rng,
        &query_render,
        &query_descs,
        n_object,
        cfg.feature_noise_sigma,
        cfg.feature_dim,
    );

    // GT pixel correspondences: object points visible in both views.
    let gt_corr: Vec<(Pixel, Pixel)> = (0..n_object)
        .filter_map(|i| match (anchor_render.canonical[i], query_render.canonical[i]) {
            (Some(pa), Some(pq)) => Some((pa, pq)),
            _ => None,
        })
        .collect();

    // Model points are stored in the anchor camera frame so anchor-to-query
    // poses (GT and estimated alike) apply to them directly.
    let diameter = max_pairwise_distance(&anchor_obj);
    let model = ObjectModel::new(anchor_obj, diameter, vec![RigidTransform::identity()])?;

    let scene = ScenePair {
        scene_id: format!("synth_{:016x}", cfg.seed),
        anchor: ViewData {
            features: anchor_feats,
            mask: anchor_render.mask,
            depth: anchor_render.depth,
            cam,
        },
        query: ViewData {
            features: query_feats,
            mask: query_render.mask,
            depth: query_render.depth,
            cam,
        },
        gt_pose,
        gt_corr,
        model,
        prompt_text: "an asymmetric boxy object with a dome".into(),
    };
    scene.validate()?;
    Ok(scene)
}

/// Ground-truth patch correlation map: C_gt[n, i, j] = 1 iff at least
/// `min_count` GT correspondences map a pixel of anchor patch n into query
/// patch (i, j). Anchor patches are indexed row-major over the GxG grid.
pub fn gt_patch_correlation(
    scene: &ScenePair,
    grid: usize,
    min_count: usize,
) -> Result<Array3<f64>> {
    let (ha, wa) = scene.anchor.resolution();
    let (hq, wq) = scene.query.resolution();
    for (name, h, w) in [("anchor", ha, wa), ("query", hq, wq)] {
        if h % grid != 0 || w % grid != 0 {
            return Err(FicopError::Validation(format!(
                "{name} resolution {h}x{w} not divisible by grid {grid}"
            )));
        }
    }
    let n_patches = grid * grid;
    let mut counts = Array3::<usize>::zeros((n_patches, grid, grid));
    for &((ua, va), (uq, vq)) in &scene.gt_corr {
        let n = (va / (ha / grid)) * grid + ua / (wa / grid);
        let i = vq / (hq / grid);
        let j = uq / (wq / grid);
        counts[(n, i, j)] += 1;
    }
    Ok(counts.mapv(|c| if c >= min_count.max(1) { 1.0 } else { 0.0 }))
}

pub fn write_scene(scene: &ScenePair, dir: &Path) -> Result<SceneManifest> {
    std::fs::create_dir_all(dir).map_err(|e| FicopError::io(dir, e))?;
    let write_view = |view: &ViewData, prefix: &str| -> Result<ViewManifest> {
        let feature_path = format!("{prefix}_features.ftz");
        let mask_path = format!("{prefix}_mask.ftz");
        let depth_path = format!("{prefix}_depth.ftz");
        write_tensor(&TensorBlob::from_array3_f32(&view.features), &dir.join(&feature_path))?;
        write_tensor(&TensorBlob::from_array2_u8(&view.mask), &dir.join(&mask_path))?;
        write_tensor(&TensorBlob::from_array2_f32(&view.depth), &dir.join(&depth_path))?;
        Ok(ViewManifest {
            feature_path,
            mask_path,
            depth_path,
            rgb_path: None,
            intrinsics: view.cam.intrinsics_matrix(),
        })
    };
    let anchor = write_view(&scene.anchor, "anchor")?;
    let query = write_view(&scene.query, "query")?;

    let gt_corr_path = if scene.gt_corr.is_empty() {
        None
    } else {
        let rows: Vec<f64> = scene
            .gt_corr
            .iter()
            .flat_map(|&((ua, va), (uq, vq))| [ua as f64, va as f64, uq as f64, vq as f64])
            .collect();
        let blob = TensorBlob::new(
            vec![scene.gt_corr.len(), 4],
            crate::tensor_io::TensorData::F64(rows),
        )?;
        write_tensor(&blob, &dir.join("gt_corr.ftz"))?;
        Some("gt_corr.ftz".to_string())
    };

    let model_rows: Vec<f64> = scene
        .model
        .points
        .iter()
        .flat_map(|p| [p.x, p.y, p.z])
        .collect();
    let model_blob = TensorBlob::new(
        vec![scene.model.points.len(), 3],
        crate::tensor_io::TensorData::F64(model_rows),
    )?;
    write_tensor(&model_blob, &dir.join("model.ftz"))?;

    let manifest = SceneManifest {
        scene_id: scene.scene_id.clone(),
        anchor,
        query,
        gt_pose_a_to_q: scene.gt_pose.to_matrix4(),
        gt_corr_path,
        object_model_path: "model.ftz".into(),
        object_diameter: scene.model.diameter,
        prompt_text: scene.prompt_text.clone(),
    };
    manifest.validate()?;
    manifest.write(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Geometric audit tolerance for a correspondence at depth z with object
/// scale s: each view's pixel can be displaced ~1.5px laterally by splat
/// radius plus rounding, and its depth by the splat consistency tolerance.
pub fn lift_tolerance(cam: &PinholeCamera, z: f64, object_scale: f64) -> f64 {
    2.0 * (2.2 * z / cam.fx.min(cam.fy) + 0.05 * object_scale)
}
