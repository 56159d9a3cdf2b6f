//! Per-scene orchestration: correlation map (ground-truth oracle or the
//! seeded network forward path), matching, registration and metrics, plus a
//! batch runner that isolates per-scene failures and aggregates a report.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cpgp::{cpgp_forward, decode, fuse_text};
use crate::error::{FicopError, Result};
use crate::params::ParamSet;
use crate::matcher::{match_global, match_patch_constrained, precision_against_gt, CorrespondenceSet};
use crate::metrics::{EvalReport, SceneMetrics};
use crate::pcp::{binarize, pcp_forward, PatchCorrelationMap};
use crate::registration::{register_spectral, PoseEstimate, RegistrationConfig};
use crate::scene::{ScenePair, ViewData};
use crate::synthgen::{gt_patch_correlation, lift_tolerance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMode {
    /// C_p derived from ground-truth correspondences; isolates the matching
    /// and registration stages from network quality.
    Oracle,
    /// Seeded (untrained) CPGP + PCP forward pass; exercises the full path.
    Predicted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    PatchConstrained,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMaskMode {
    /// GT object mask: the clean-detection setting.
    Object,
    /// Every depth-valid pixel, clutter included: the setting where the
    /// patch constraint has to do the filtering.
    ValidDepth,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Patch side length on the coarse feature grid.
    pub patch: usize,
    /// Binarization threshold for C_p rows.
    pub tau: f64,
    /// Cosine-similarity acceptance threshold for pairs.
    pub d_th: f64,
    pub correlation_mode: CorrelationMode,
    pub match_mode: MatchMode,
    pub query_mask_mode: QueryMaskMode,
    pub registration: RegistrationConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            patch: 2,
            tau: 0.04,
            d_th: 0.75,
            correlation_mode: CorrelationMode::Oracle,
            match_mode: MatchMode::PatchConstrained,
            query_mask_mode: QueryMaskMode::Object,
            registration: RegistrationConfig::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.tau) || self.tau <= 0.0 {
            return Err(FicopError::Config(format!("tau {} outside (0,1)", self.tau)));
        }
        if !(-1.0..1.0).contains(&self.d_th) {
            return Err(FicopError::Config(format!("d_th {} outside [-1,1)", self.d_th)));
        }
        if self.patch == 0 {
            return Err(FicopError::Config("patch must be positive".into()));
        }
        self.registration.validate()
    }

    /// Patch grid size per axis for a full resolution `h`: the coarse grid
    /// is h/8 and each patch covers `patch` coarse cells.
    pub fn grid_for(&self, h: usize) -> Result<usize> {
        let coarse = h / 8;
        if h % 8 != 0 || coarse % self.patch != 0 {
            return Err(FicopError::Config(format!(
                "resolution {h} incompatible with coarse grid {coarse} and patch {}",
                self.patch
            )));
        }
        Ok(coarse / self.patch)
    }
}

#[derive(Debug, Clone)]
pub struct SceneOutcome {
    pub metrics: SceneMetrics,
    pub estimate: PoseEstimate,
    pub n_pairs: usize,
    /// Fraction of pairs consistent with GT, when GT correspondences exist.
    pub precision: Option<f64>,
}

/// Oracle correlation map from GT correspondences.
pub fn oracle_correlation(scene: &ScenePair, grid: usize) -> Result<PatchCorrelationMap> {
    let c_gt = gt_patch_correlation(scene, grid, 1)?;
    PatchCorrelationMap::from_binary(&c_gt, grid, grid)
}

fn pool8(features: &Array3<f32>) -> Array3<f32> {
    let (h, w, c) = features.dim();
    let (gh, gw) = (h / 8, w / 8);
    let mut out = Array3::zeros((gh, gw, c));
    for y in 0..gh {
        for x in 0..gw {
            for ch in 0..c {
                let mut acc = 0.0f32;
                for dy in 0..8 {
                    for dx in 0..8 {
                        acc += features[(y * 8 + dy, x * 8 + dx, ch)];
                    }
                }
                out[(y, x, ch)] = acc / 64.0;
            }
        }
    }
    out
}

fn text_embedding(prompt: &str, dim: usize) -> Array1<f64> {
    // Deterministic embedding from the prompt bytes; no trained text encoder
    // exists in this artifact.
    let mut h = 0xcbf29ce484222325u64;
    for b in prompt.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    Array1::from_shape_fn(dim, |_| rng.gen::<f64>() * 2.0 - 1.0)
}

/// Network forward path with seeded parameters: pooled features are fused
/// with the prompt embedding, refined by the cross-perspective transformer,
/// decoded back to full resolution and correlated patch-wise.
pub fn predicted_correlation(
    scene: &ScenePair,
    params: &ParamSet,
) -> Result<(PatchCorrelationMap, Array3<f32>, Array3<f32>)> {
    let (h, w) = scene.anchor.resolution();
    let embed = text_embedding(&scene.prompt_text, params.text_dim);
    let anchor_tokens = fuse_text(&params.fuse, &pool8(&scene.anchor.features), &embed)?;
    let query_tokens = fuse_text(&params.fuse, &pool8(&scene.query.features), &embed)?;

    let (fa, fq) = cpgp_forward(&params.cpgp, &anchor_tokens, &query_tokens)?;
    let c_p = pcp_forward(&params.pcp, &fa, &fq)?;

    let ea = decode(&params.decoder, &fa, &scene.anchor.mask, (h, w))?;
    let eq = decode(&params.decoder, &fq, &scene.query.mask, (h, w))?;
    Ok((c_p, ea, eq))
}

/// Union of the binarized per-patch query masks, nearest-neighbor upsampled
/// to full resolution and limited to depth-valid pixels: the query-side
/// object mask the pipeline itself produces.
pub fn predicted_query_mask(
    c_p: &PatchCorrelationMap,
    tau: f64,
    query: &ViewData,
) -> Result<Array2<u8>> {
    let bin = binarize(c_p, tau)?;
    let (h, w) = query.resolution();
    let grid = c_p.g2;
    let (ch, cw) = (h / grid, w / grid);
    let mut mask = Array2::zeros((h, w));
    for v in 0..h {
        for u in 0..w {
            if query.depth[(v, u)] <= 0.0 {
                continue;
            }
            let (i, j) = (v / ch, u / cw);
            if (0..c_p.n_patches()).any(|n| bin[(n, i, j)] != 0) {
                mask[(v, u)] = 1;
            }
        }
    }
    Ok(mask)
}

/// Tolerance for counting a pair GT-consistent: the pixel-quantization lift
/// error at the scene's working distance.
pub fn scene_precision_tol(scene: &ScenePair) -> f64 {
    // The generator frames objects at z = 3.5x their characteristic scale;
    // the diameter of its box-plus-dome object is ~1.3x the scale.
    let scale = scene.model.diameter / 1.3;
    lift_tolerance(&scene.query.cam, 3.5 * scale, scale)
}

pub fn run_scene(scene: &ScenePair, cfg: &PipelineConfig) -> Result<SceneOutcome> {
    cfg.validate()?;
    scene.validate()?;
    let (h, _) = scene.anchor.resolution();
    let grid = cfg.grid_for(h)?;

    let (c_p, anchor_view, query_view);
    match cfg.correlation_mode {
        CorrelationMode::Oracle => {
            c_p = oracle_correlation(scene, grid)?;
            anchor_view = scene.anchor.clone();
            query_view = scene.query.clone();
        }
        CorrelationMode::Predicted => {
            let params = ParamSet::seeded(scene.anchor.feature_dim(), cfg.patch, cfg.seed)?;
            let (p, ea, eq) = predicted_correlation(scene, &params)?;
            c_p = p;
            anchor_view = ViewData { features: ea, ..scene.anchor.clone() };
            query_view = ViewData { features: eq, ..scene.query.clone() };
        }
    }

    let mask_a = scene.anchor.mask.clone();
    let mask_q = match cfg.query_mask_mode {
        QueryMaskMode::Object => scene.query.mask.clone(),
        QueryMaskMode::ValidDepth => scene.query.valid_depth_mask(),
    };

    let corr: CorrespondenceSet = match cfg.match_mode {
        MatchMode::PatchConstrained => match_patch_constrained(
            &anchor_view,
            &query_view,
            &mask_a,
            &mask_q,
            &c_p,
            cfg.tau,
            cfg.d_th,
        )?,
        MatchMode::Global => {
            match_global(&anchor_view, &query_view, &mask_a, &mask_q, cfg.d_th)?
        }
    };

    // Correct pairs carry lateral lift error of about one pixel footprint
    // at the working depth; truncating the reweighting there cuts the
    // mask-dilation pairs near the silhouette that would otherwise bias
    // the pose. The configured threshold stays as a ceiling.
    let mut reg_cfg = cfg.registration.clone();
    let (mut z_sum, mut z_n) = (0.0, 0usize);
    for &z in scene.query.depth.iter() {
        if z > 0.0 {
            z_sum += f64::from(z);
            z_n += 1;
        }
    }
    if z_n > 0 {
        let quantum = (z_sum / z_n as f64) / scene.query.cam.fx;
        reg_cfg.inlier_threshold = reg_cfg.inlier_threshold.min(quantum.max(0.002));
    }
    let estimate = register_spectral(&corr, &reg_cfg)?;

    let precision = if scene.gt_corr.is_empty() {
        None
    } else {
        Some(precision_against_gt(&corr, &scene.gt_pose, scene_precision_tol(scene)).0)
    };

    let pred_mask = predicted_query_mask(&c_p, cfg.tau, &scene.query)?;
    let iou = crate::metrics::miou(&[pred_mask], &[scene.query.mask.clone()])?;

    let metrics = SceneMetrics::compute(
        &scene.scene_id,
        &scene.model,
        &scene.gt_pose,
        &estimate.pose,
        &scene.query.cam,
        iou,
    )?;

    Ok(SceneOutcome { metrics, estimate, n_pairs: corr.len(), precision })
}

#[derive(Debug)]
pub struct PipelineRun {
    pub outcomes: Vec<SceneOutcome>,
    /// (scene_id, error message) for scenes that failed; the batch continues.
    pub failures: Vec<(String, String)>,
    pub report: Option<EvalReport>,
}

/// Batch driver: scenes run independently in parallel; failures are
/// collected, never propagated. Outcomes are sorted by scene id so the
/// report is order-independent.
pub fn run_scenes(scenes: &[ScenePair], cfg: &PipelineConfig) -> PipelineRun {
    let mut results: Vec<(String, Result<SceneOutcome>)> = scenes
        .par_iter()
        .map(|s| (s.scene_id.clone(), run_scene(s, cfg)))
        .collect();
    results.sort_by(|a, b| a.0.cmp(&b.0));

    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok(o) => outcomes.push(o),
            Err(e) => failures.push((id, e.to_string())),
        }
    }
    let report = if outcomes.is_empty() {
        None
    } else {
        EvalReport::aggregate(outcomes.iter().map(|o| o.metrics.clone()).collect()).ok()
    };
    PipelineRun { outcomes, failures, report }
}
