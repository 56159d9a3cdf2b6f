//! Inference-time correspondence assembly. The patch-constrained matcher
//! restricts each anchor patch's search space to the query patches its
//! binarized correlation row switches on; the global matcher searches the
//! whole masked query image and exists as the baseline to compare against.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::Vector3;
use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FicopError, Result};
use crate::geometry::Pixel;
use crate::pcp::{binarize, PatchCorrelationMap};
use crate::scene::ViewData;

pub const DEFAULT_D_TH: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    PatchConstrained,
    Global,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Correspondence {
    pub anchor_pixel: Pixel,
    pub query_pixel: Pixel,
    pub src_point: [f64; 3],
    pub dst_point: [f64; 3],
    pub similarity: f64,
}

impl Correspondence {
    pub fn src(&self) -> Vector3<f64> {
        Vector3::new(self.src_point[0], self.src_point[1], self.src_point[2])
    }

    pub fn dst(&self) -> Vector3<f64> {
        Vector3::new(self.dst_point[0], self.dst_point[1], self.dst_point[2])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    pub pairs: Vec<Correspondence>,
    pub provenance: Provenance,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn validate(&self, d_th: f64) -> Result<()> {
        for c in &self.pairs {
            if c.similarity <= d_th {
                return Err(FicopError::Validation(format!(
                    "pair {:?}->{:?} similarity {} violates threshold {}",
                    c.anchor_pixel, c.query_pixel, c.similarity, d_th
                )));
            }
            if !c.src_point.iter().chain(&c.dst_point).all(|x| x.is_finite()) {
                return Err(FicopError::Validation("non-finite 3D point in pair".into()));
            }
        }
        let mut keys: Vec<(Pixel, Pixel)> =
            self.pairs.iter().map(|c| (c.anchor_pixel, c.query_pixel)).collect();
        keys.sort_unstable();
        keys.dedup();
        if keys.len() != self.pairs.len() {
            return Err(FicopError::Validation("duplicate (anchor, query) pixel pair".into()));
        }
        Ok(())
    }

    /// One JSON object per line; reader is the inverse.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| FicopError::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        for c in &self.pairs {
            let line = serde_json::to_string(c)
                .map_err(|e| FicopError::format(path, e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| FicopError::io(path, e))?;
        }
        w.flush().map_err(|e| FicopError::io(path, e))
    }

    pub fn read_jsonl(path: &Path, provenance: Provenance) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| FicopError::io(path, e))?;
        let mut pairs = Vec::new();
        for line in std::io::BufReader::new(f).lines() {
            let line = line.map_err(|e| FicopError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            pairs.push(
                serde_json::from_str(&line)
                    .map_err(|e| FicopError::format(path, e.to_string()))?,
            );
        }
        Ok(Self { pairs, provenance })
    }
}

/// Candidate pixels of one view: positions, 3D lifts and an N x C matrix of
/// their descriptors for batched similarity computation.
struct CandidatePool {
    pixels: Vec<Pixel>,
    points: Vec<Vector3<f64>>,
    feats: Array2<f32>,
}

fn collect_pool(view: &ViewData, mask: &Array2<u8>, keep: impl Fn(Pixel) -> bool) -> CandidatePool {
    let (h, w) = view.resolution();
    let c = view.feature_dim();
    let mut pixels = Vec::new();
    let mut points = Vec::new();
    for v in 0..h {
        for u in 0..w {
            let d = view.depth[(v, u)] as f64;
            if mask[(v, u)] != 0 && d > 0.0 && keep((u, v)) {
                pixels.push((u, v));
                points.push(view.cam.unproject(u as f64, v as f64, d));
            }
        }
    }
    let mut feats = Array2::zeros((pixels.len(), c));
    for (row, &(u, v)) in pixels.iter().enumerate() {
        for k in 0..c {
            feats[(row, k)] = view.features[(v, u, k)];
        }
    }
    CandidatePool { pixels, points, feats }
}

/// Best-similarity query candidate for every anchor candidate; pairs kept
/// iff similarity is strictly above d_th.
fn best_matches(a: &CandidatePool, q: &CandidatePool, d_th: f64) -> Vec<Correspondence> {
    if a.pixels.is_empty() || q.pixels.is_empty() {
        return Vec::new();
    }
    let sims = a.feats.dot(&q.feats.t());
    let mut out = Vec::new();
    for i in 0..a.pixels.len() {
        let row = sims.row(i);
        let (mut best_j, mut best) = (0usize, f32::NEG_INFINITY);
        for (j, &s) in row.iter().enumerate() {
            if s > best {
                best = s;
                best_j = j;
            }
        }
        if f64::from(best) <= d_th {
            continue;
        }
        // Duplicated descriptors (one surface point covering several query
        // pixels) tie exactly; averaging their lifted positions removes the
        // scan-order bias a first-wins pick would introduce.
        let ties: Vec<usize> = (0..q.pixels.len()).filter(|&j| row[j] == best).collect();
        let dst = if ties.len() > 1 {
            ties.iter().map(|&j| q.points[j]).sum::<Vector3<f64>>() / ties.len() as f64
        } else {
            q.points[best_j]
        };
        out.push(Correspondence {
            anchor_pixel: a.pixels[i],
            query_pixel: q.pixels[best_j],
            src_point: a.points[i].into(),
            dst_point: dst.into(),
            similarity: f64::from(best),
        });
    }
    out
}

fn check_grid(view: &ViewData, grid: usize, name: &str) -> Result<(usize, usize)> {
    let (h, w) = view.resolution();
    if grid == 0 || h % grid != 0 || w % grid != 0 {
        return Err(FicopError::Validation(format!(
            "{name} resolution {h}x{w} not divisible by patch grid {grid}"
        )));
    }
    Ok((h / grid, w / grid))
}

/// Patch-constrained matching: anchor patch n is matched only against query
/// pixels inside its binarized correlation mask, nearest-neighbor upsampled
/// to full resolution. Patches with an empty side are skipped; an empty
/// result over all patches is an error carrying diagnostics.
pub fn match_patch_constrained(
    anchor: &ViewData,
    query: &ViewData,
    mask_a: &Array2<u8>,
    mask_q: &Array2<u8>,
    c_p: &PatchCorrelationMap,
    tau: f64,
    d_th: f64,
) -> Result<CorrespondenceSet> {
    let grid = c_p.g1;
    if c_p.g2 != grid {
        return Err(FicopError::Validation(format!(
            "non-square patch grids unsupported by the matcher: {}x{}",
            c_p.g1, c_p.g2
        )));
    }
    let (cell_ha, cell_wa) = check_grid(anchor, grid, "anchor")?;
    let (cell_hq, cell_wq) = check_grid(query, grid, "query")?;
    let masks: Array3<u8> = binarize(c_p, tau)?;

    let mut pairs: Vec<Correspondence> = (0..c_p.n_patches())
        .into_par_iter()
        .flat_map(|n| {
            let (pi, pj) = (n / grid, n % grid);
            let a_pool = collect_pool(anchor, mask_a, |(u, v)| {
                v / cell_ha == pi && u / cell_wa == pj
            });
            let q_pool = collect_pool(query, mask_q, |(u, v)| {
                masks[(n, v / cell_hq, u / cell_wq)] != 0
            });
            best_matches(&a_pool, &q_pool, d_th)
        })
        .collect();
    pairs.sort_unstable_by_key(|c| (c.anchor_pixel, c.query_pixel));
    pairs.dedup_by_key(|c| (c.anchor_pixel, c.query_pixel));

    if pairs.is_empty() {
        let active = masks.iter().filter(|&&m| m != 0).count();
        return Err(FicopError::EmptyMatch(format!(
            "no correspondences above d_th={d_th}: {} of {} patch cells active at tau={tau}",
            active,
            masks.len()
        )));
    }
    let set = CorrespondenceSet { pairs, provenance: Provenance::PatchConstrained };
    set.validate(d_th)?;
    Ok(set)
}

/// Unconstrained baseline: every anchor pixel searches the entire masked
/// query image.
pub fn match_global(
    anchor: &ViewData,
    query: &ViewData,
    mask_a: &Array2<u8>,
    mask_q: &Array2<u8>,
    d_th: f64,
) -> Result<CorrespondenceSet> {
    let a_pool = collect_pool(anchor, mask_a, |_| true);
    let q_pool = collect_pool(query, mask_q, |_| true);
    let mut pairs = best_matches(&a_pool, &q_pool, d_th);
    pairs.sort_unstable_by_key(|c| (c.anchor_pixel, c.query_pixel));
    if pairs.is_empty() {
        return Err(FicopError::EmptyMatch(format!(
            "global matching found nothing above d_th={d_th} ({} anchor x {} query candidates)",
            a_pool.pixels.len(),
            q_pool.pixels.len()
        )));
    }
    let set = CorrespondenceSet { pairs, provenance: Provenance::Global };
    set.validate(d_th)?;
    Ok(set)
}

/// Fraction of pairs whose query-side 3D point lies within `tol` meters of
/// the anchor point mapped through the GT pose. Returns (precision, kept).
pub fn precision_against_gt(
    corr: &CorrespondenceSet,
    gt_pose: &crate::geometry::RigidTransform,
    tol: f64,
) -> (f64, usize) {
    if corr.is_empty() {
        return (0.0, 0);
    }
    let good = corr
        .pairs
        .iter()
        .filter(|c| (gt_pose.apply(c.src()) - c.dst()).norm() <= tol)
        .count();
    (good as f64 / corr.len() as f64, good)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_scene, gt_patch_correlation, lift_tolerance, SynthConfig};

    fn small_cfg(seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            height: 64,
            width: 64,
            feature_dim: 32,
            n_object_points: 1500,
            ..SynthConfig::default()
        }
    }

    fn oracle_cp(scene: &crate::scene::ScenePair, grid: usize) -> PatchCorrelationMap {
        let c_gt = gt_patch_correlation(scene, grid, 1).unwrap();
        PatchCorrelationMap::from_binary(&c_gt, grid, grid).unwrap()
    }

    fn scene_tol(scene: &crate::scene::ScenePair, object_scale: f64) -> f64 {
        lift_tolerance(&scene.query.cam, 3.5 * object_scale, object_scale)
    }

    #[test]
    fn noise_free_patch_constrained_high_precision() {
        let cfg = small_cfg(11);
        let scene = generate_scene(&cfg).unwrap();
        let c_p = oracle_cp(&scene, 8);
        let set = match_patch_constrained(
            &scene.anchor,
            &scene.query,
            &scene.anchor.mask.clone(),
            &scene.query.mask.clone(),
            &c_p,
            0.04,
            0.75,
        )
        .unwrap();
        assert!(set.len() > 50, "only {} pairs", set.len());
        let (prec, _) = precision_against_gt(&set, &scene.gt_pose, scene_tol(&scene, cfg.object_scale));
        assert!(prec >= 0.99, "precision {prec}");
    }

    #[test]
    fn noise_free_global_high_precision() {
        let cfg = small_cfg(12);
        let scene = generate_scene(&cfg).unwrap();
        let set = match_global(
            &scene.anchor,
            &scene.query,
            &scene.anchor.mask.clone(),
            &scene.query.mask.clone(),
            0.75,
        )
        .unwrap();
        let (prec, _) = precision_against_gt(&set, &scene.gt_pose, scene_tol(&scene, cfg.object_scale));
        assert!(prec >= 0.99, "precision {prec}");
    }

    #[test]
    fn all_zero_binarization_is_empty_match_error() {
        let cfg = small_cfg(13);
        let scene = generate_scene(&cfg).unwrap();
        // Uniform rows (1/G^2 each) with tau = 0.5: binarization is all-zero.
        let grid = 8;
        let on = Array3::from_elem((grid * grid, grid, grid), 1.0);
        let c_p = PatchCorrelationMap::from_binary(&on, grid, grid).unwrap();
        let err = match_patch_constrained(
            &scene.anchor,
            &scene.query,
            &scene.anchor.mask.clone(),
            &scene.query.mask.clone(),
            &c_p,
            0.5,
            0.75,
        )
        .unwrap_err();
        assert!(matches!(err, FicopError::EmptyMatch(_)), "got {err:?}");
    }

    #[test]
    fn fully_on_correlation_equals_global() {
        let cfg = small_cfg(14);
        let scene = generate_scene(&cfg).unwrap();
        let grid = 8;
        let on = Array3::from_elem((grid * grid, grid, grid), 1.0);
        let c_p = PatchCorrelationMap::from_binary(&on, grid, grid).unwrap();
        // Every row is uniform 1/G^2; any tau below that keeps all cells on.
        let constrained = match_patch_constrained(
            &scene.anchor,
            &scene.query,
            &scene.anchor.mask.clone(),
            &scene.query.mask.clone(),
            &c_p,
            1.0 / (grid * grid) as f64 / 2.0,
            0.75,
        )
        .unwrap();
        let global = match_global(
            &scene.anchor,
            &scene.query,
            &scene.anchor.mask.clone(),
            &scene.query.mask.clone(),
            0.75,
        )
        .unwrap();
        assert_eq!(constrained.len(), global.len());
        for (a, b) in constrained.pairs.iter().zip(&global.pairs) {
            assert_eq!(a.anchor_pixel, b.anchor_pixel);
            assert_eq!(a.query_pixel, b.query_pixel);
            assert!((a.similarity - b.similarity).abs() < 1e-12);
        }
    }

    #[test]
    fn tightening_thresholds_never_adds_pairs() {
        let cfg = small_cfg(15);
        let scene = generate_scene(&cfg).unwrap();
        let c_p = oracle_cp(&scene, 8);
        let run = |tau: f64, d_th: f64| {
            match_patch_constrained(
                &scene.anchor,
                &scene.query,
                &scene.anchor.mask.clone(),
                &scene.query.mask.clone(),
                &c_p,
                tau,
                d_th,
            )
            .map(|s| s.len())
            .unwrap_or(0)
        };
        let mut prev = usize::MAX;
        for tau in [0.01, 0.02, 0.03, 0.04, 0.05] {
            let n = run(tau, 0.75);
            assert!(n <= prev, "tau {tau}: {n} > {prev}");
            prev = n;
        }
        let mut prev = usize::MAX;
        for d_th in [0.5, 0.6, 0.7, 0.8, 0.9] {
            let n = run(0.04, d_th);
            assert!(n <= prev, "d_th {d_th}: {n} > {prev}");
            prev = n;
        }
    }

    #[test]
    fn constrained_query_pixels_lie_in_active_patches() {
        let cfg = small_cfg(16);
        let scene = generate_scene(&cfg).unwrap();
        let grid = 8;
        let c_p = oracle_cp(&scene, grid);
        let tau = 0.04;
        let masks = binarize(&c_p, tau).unwrap();
        let set = match_patch_constrained(
            &scene.anchor,
            &scene.query,
            &scene.anchor.mask.clone(),
            &scene.query.mask.clone(),
            &c_p,
            tau,
            0.75,
        )
        .unwrap();
        let (ha, wa) = scene.anchor.resolution();
        let (hq, wq) = scene.query.resolution();
        for c in &set.pairs {
            let (ua, va) = c.anchor_pixel;
            let n = (va / (ha / grid)) * grid + ua / (wa / grid);
            let (uq, vq) = c.query_pixel;
            assert_eq!(masks[(n, vq / (hq / grid), uq / (wq / grid))], 1);
        }
    }

    #[test]
    fn high_clutter_constrained_beats_global() {
        // Identical descriptor clones in the clutter make global matching
        // fail; oracle patch constraints keep the search local.
        let mut wins = 0;
        let mut ties_or_wins = 0;
        let n_seeds = 20;
        for seed in 0..n_seeds {
            let cfg = SynthConfig {
                clutter_similarity: 1.0,
                n_clutter_points: 4000,
                feature_noise_sigma: 0.12,
                ..small_cfg(100 + seed)
            };
            let scene = generate_scene(&cfg).unwrap();
            let c_p = oracle_cp(&scene, 8);
            let mask_a = scene.anchor.mask.clone();
            let mask_q = scene.query.valid_depth_mask();
            let tol = scene_tol(&scene, cfg.object_scale);
            let con = match_patch_constrained(
                &scene.anchor, &scene.query, &mask_a, &mask_q, &c_p, 0.04, 0.5,
            )
            .unwrap();
            let glo = match_global(&scene.anchor, &scene.query, &mask_a, &mask_q, 0.5).unwrap();
            let (pc, _) = precision_against_gt(&con, &scene.gt_pose, tol);
            let (pg, _) = precision_against_gt(&glo, &scene.gt_pose, tol);
            if pc >= pg {
                ties_or_wins += 1;
            }
            if pc > pg {
                wins += 1;
            }
        }
        assert_eq!(ties_or_wins, n_seeds, "constrained lost on some seed");
        assert!(wins >= n_seeds * 8 / 10, "strict wins only {wins}/{n_seeds}");
    }

    #[test]
    fn jsonl_roundtrip() {
        let set = CorrespondenceSet {
            pairs: vec![Correspondence {
                anchor_pixel: (3, 4),
                query_pixel: (5, 6),
                src_point: [0.1, -0.2, 1.5],
                dst_point: [0.11, -0.19, 1.52],
                similarity: 0.93,
            }],
            provenance: Provenance::PatchConstrained,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        set.write_jsonl(&path).unwrap();
        let back = CorrespondenceSet::read_jsonl(&path, Provenance::PatchConstrained).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back.pairs[0].anchor_pixel, (3, 4));
        assert_eq!(back.pairs[0].similarity, 0.93);
    }
}
