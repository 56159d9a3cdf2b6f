//! Robust SE(3) estimation from noisy correspondence sets: a spectral
//! spatial-consistency solver (compatibility graph, power-iteration seeding,
//! weighted alignment with iterative reweighting) plus a seeded RANSAC
//! baseline used as an independent cross-check.

use nalgebra::Vector3;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FicopError, Result};
use crate::geometry::{kabsch_weighted, RigidTransform};
use crate::matcher::CorrespondenceSet;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistrationConfig {
    /// Pairwise length-consistency scale, meters.
    pub sigma_d: f64,
    pub n_power_iters: usize,
    pub n_reweight_iters: usize,
    /// Residual below which a pair counts as an inlier, meters.
    pub inlier_threshold: f64,
    pub ransac_iters: usize,
    pub min_pairs: usize,
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            sigma_d: 0.02,
            n_power_iters: 50,
            n_reweight_iters: 5,
            inlier_threshold: 0.015,
            ransac_iters: 2048,
            min_pairs: 3,
            seed: 0,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_d <= 0.0 || self.inlier_threshold <= 0.0 {
            return Err(FicopError::Validation(
                "sigma_d and inlier_threshold must be positive".into(),
            ));
        }
        if self.n_power_iters == 0 || self.n_reweight_iters == 0 || self.ransac_iters == 0 {
            return Err(FicopError::Validation("iteration counts must be positive".into()));
        }
        if self.min_pairs < 3 {
            return Err(FicopError::Validation("min_pairs must be >= 3".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PoseEstimate {
    pub pose: RigidTransform,
    pub inlier_count: usize,
    pub rms_residual: f64,
    /// Set when the final inlier support fell below min_pairs; the pose is
    /// the best effort, not trustworthy.
    pub low_confidence: bool,
}

/// Wire form: the pose as a 4x4 row-major matrix plus diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PoseEstimateWire {
    pose: [[f64; 4]; 4],
    inlier_count: usize,
    rms_residual: f64,
    low_confidence: bool,
}

impl Serialize for PoseEstimate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PoseEstimateWire {
            pose: self.pose.to_matrix4(),
            inlier_count: self.inlier_count,
            rms_residual: self.rms_residual,
            low_confidence: self.low_confidence,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PoseEstimate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let w = PoseEstimateWire::deserialize(d)?;
        Ok(PoseEstimate {
            pose: RigidTransform::from_matrix4(&w.pose).map_err(serde::de::Error::custom)?,
            inlier_count: w.inlier_count,
            rms_residual: w.rms_residual,
            low_confidence: w.low_confidence,
        })
    }
}

fn gather(corr: &CorrespondenceSet) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let src = corr.pairs.iter().map(|c| c.src()).collect();
    let dst = corr.pairs.iter().map(|c| c.dst()).collect();
    (src, dst)
}

/// M[i][j] = max(0, 1 - (|src_i - src_j| - |dst_i - dst_j|)^2 / sigma_d^2),
/// zero diagonal. Rigid-consistent pairs preserve pairwise lengths, so
/// mutually consistent inliers form a strongly connected block.
pub fn compatibility_matrix(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    sigma_d: f64,
) -> Array2<f64> {
    let n = src.len();
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let ls = (src[i] - src[j]).norm();
            let ld = (dst[i] - dst[j]).norm();
            let c = (1.0 - ((ls - ld) / sigma_d).powi(2)).max(0.0);
            m[(i, j)] = c;
            m[(j, i)] = c;
        }
    }
    m
}

/// Leading eigenvector by power iteration, normalized each step. Starts from
/// the uniform vector; entries of the result are clamped to be nonnegative
/// (the Perron vector of a nonnegative matrix is sign-consistent).
pub fn power_iteration(m: &Array2<f64>, iters: usize) -> Vec<f64> {
    let n = m.nrows();
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    for _ in 0..iters {
        let mut next = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += m[(i, j)] * v[j];
            }
            next[i] = acc;
        }
        let norm: f64 = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-300 {
            // Zero matrix: stay at the uniform vector.
            return v;
        }
        for x in next.iter_mut() {
            *x /= norm;
        }
        v = next;
    }
    // Fix overall sign so the dominant mass is positive, then clamp noise.
    let s: f64 = v.iter().sum();
    if s < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
    for x in v.iter_mut() {
        *x = x.max(0.0);
    }
    v
}

fn residuals(pose: &RigidTransform, src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Vec<f64> {
    src.iter()
        .zip(dst)
        .map(|(s, d)| (pose.apply(*s) - d).norm())
        .collect()
}

fn inlier_stats(res: &[f64], thr: f64) -> (usize, f64) {
    let mut count = 0;
    let mut acc = 0.0;
    for &r in res {
        if r < thr {
            count += 1;
            acc += r * r;
        }
    }
    let rms = if count > 0 { (acc / count as f64).sqrt() } else { f64::INFINITY };
    (count, rms)
}

/// Spectral spatial-consistency registration: per-pair weights from the
/// leading eigenvector of the compatibility matrix seed a weighted alignment,
/// refined by truncated-linear reweighting on residuals.
pub fn register_spectral(corr: &CorrespondenceSet, cfg: &RegistrationConfig) -> Result<PoseEstimate> {
    cfg.validate()?;
    if corr.len() < cfg.min_pairs {
        return Err(FicopError::Insufficient { have: corr.len(), need: cfg.min_pairs });
    }
    let (src, dst) = gather(corr);
    let m = compatibility_matrix(&src, &dst, cfg.sigma_d);
    let mut weights = power_iteration(&m, cfg.n_power_iters);
    if weights.iter().all(|&w| w <= 0.0) {
        weights = vec![1.0; src.len()];
    }
    // Seed the alignment from the top quartile of eigenvector mass: the
    // long tail of small-but-nonzero outlier entries otherwise drags the
    // initial fit outside the reweighting basin.
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].partial_cmp(&weights[a]).unwrap());
    let keep = (weights.len() / 4).max(cfg.min_pairs).min(weights.len());
    let mut seed_weights = vec![0.0; weights.len()];
    for &i in order.iter().take(keep) {
        seed_weights[i] = weights[i];
    }
    let mut pose = kabsch_weighted(&src, &dst, &seed_weights)?;

    for _ in 0..cfg.n_reweight_iters {
        let res = residuals(&pose, &src, &dst);
        let w: Vec<f64> = res
            .iter()
            .map(|&r| if r < cfg.inlier_threshold { 1.0 - r / cfg.inlier_threshold } else { 0.0 })
            .collect();
        if w.iter().filter(|&&x| x > 0.0).count() < cfg.min_pairs {
            break;
        }
        pose = kabsch_weighted(&src, &dst, &w)?;
    }

    let res = residuals(&pose, &src, &dst);
    let (inlier_count, rms_residual) = inlier_stats(&res, cfg.inlier_threshold);
    Ok(PoseEstimate {
        pose,
        inlier_count,
        rms_residual,
        low_confidence: inlier_count < cfg.min_pairs,
    })
}

/// Seeded 3-point hypothesize-and-verify with a consensus refit. Hypotheses
/// are evaluated in a fixed order, so a fixed seed gives a bit-identical
/// estimate.
pub fn register_ransac(corr: &CorrespondenceSet, cfg: &RegistrationConfig) -> Result<PoseEstimate> {
    cfg.validate()?;
    let n = corr.len();
    if n < cfg.min_pairs {
        return Err(FicopError::Insufficient { have: n, need: cfg.min_pairs });
    }
    let (src, dst) = gather(corr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ones = vec![1.0; 3];
    let mut best: Option<(usize, f64, RigidTransform)> = None;

    for _ in 0..cfg.ransac_iters {
        // Three distinct indices.
        let i = rng.gen_range(0..n);
        let mut j = rng.gen_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let mut k = rng.gen_range(0..n - 2);
        for taken in [i.min(j), i.max(j)] {
            if k >= taken {
                k += 1;
            }
        }
        let s3 = [src[i], src[j], src[k]];
        let d3 = [dst[i], dst[j], dst[k]];
        let Ok(hyp) = kabsch_weighted(&s3, &d3, &ones) else { continue };
        let res = residuals(&hyp, &src, &dst);
        let (count, rms) = inlier_stats(&res, cfg.inlier_threshold);
        if count >= 3
            && best
                .as_ref()
                .map_or(true, |(bc, br, _)| count > *bc || (count == *bc && rms < *br))
        {
            best = Some((count, rms, hyp));
        }
    }

    let Some((_, _, hyp)) = best else {
        return Err(FicopError::Degenerate(
            "no RANSAC hypothesis reached 3 inliers".into(),
        ));
    };
    // Refit on the consensus set.
    let res = residuals(&hyp, &src, &dst);
    let w: Vec<f64> = res
        .iter()
        .map(|&r| f64::from(u8::from(r < cfg.inlier_threshold)))
        .collect();
    let pose = if w.iter().filter(|&&x| x > 0.0).count() >= cfg.min_pairs {
        kabsch_weighted(&src, &dst, &w)?
    } else {
        hyp
    };
    let res = residuals(&pose, &src, &dst);
    let (inlier_count, rms_residual) = inlier_stats(&res, cfg.inlier_threshold);
    Ok(PoseEstimate {
        pose,
        inlier_count,
        rms_residual,
        low_confidence: inlier_count < cfg.min_pairs,
    })
}

/// Seeded correspondence-set generator with a controlled outlier fraction;
/// shared by the robustness tests and the acceptance suite.
pub fn synthetic_correspondences(
    seed: u64,
    n_inliers: usize,
    n_outliers: usize,
    noise: f64,
) -> (CorrespondenceSet, RigidTransform) {
    use crate::matcher::{Correspondence, Provenance};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = Vector3::new(
        rng.gen::<f64>() - 0.5,
        rng.gen::<f64>() - 0.5,
        rng.gen::<f64>() - 0.5,
    );
    let angle = rng.gen::<f64>() * std::f64::consts::PI / 4.0;
    let trans = Vector3::new(
        (rng.gen::<f64>() - 0.5) * 0.2,
        (rng.gen::<f64>() - 0.5) * 0.2,
        (rng.gen::<f64>() - 0.5) * 0.2,
    );
    let gt = RigidTransform::from_axis_angle(axis, angle, trans);
    let scale = 0.2;
    let point = |rng: &mut ChaCha8Rng| {
        Vector3::new(
            (rng.gen::<f64>() - 0.5) * scale,
            (rng.gen::<f64>() - 0.5) * scale,
            (rng.gen::<f64>() - 0.5) * scale,
        )
    };
    let mut pairs = Vec::new();
    for idx in 0..(n_inliers + n_outliers) {
        let s = point(&mut rng);
        let d = if idx < n_inliers {
            let jitter = Vector3::new(
                (rng.gen::<f64>() - 0.5) * 2.0 * noise,
                (rng.gen::<f64>() - 0.5) * 2.0 * noise,
                (rng.gen::<f64>() - 0.5) * 2.0 * noise,
            );
            gt.apply(s) + jitter
        } else {
            point(&mut rng)
        };
        pairs.push(Correspondence {
            anchor_pixel: (idx, 0),
            query_pixel: (idx, 1),
            src_point: s.into(),
            dst_point: d.into(),
            similarity: 1.0,
        });
    }
    (CorrespondenceSet { pairs, provenance: Provenance::Global }, gt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_inliers_recover_gt() {
        for seed in 0..5 {
            let (corr, gt) = synthetic_correspondences(seed, 100, 0, 0.0);
            for est in [
                register_spectral(&corr, &RegistrationConfig::default()).unwrap(),
                register_ransac(&corr, &RegistrationConfig::default()).unwrap(),
            ] {
                assert!(est.pose.rotation_angle_to(&gt) < 1e-6);
                assert!(est.pose.translation_distance_to(&gt) < 1e-6);
                assert!(!est.low_confidence);
                assert_eq!(est.inlier_count, 100);
            }
        }
    }

    #[test]
    fn majority_outliers_still_recovered() {
        let scene_scale = 0.2;
        let mut ok = 0;
        let n_seeds = 30;
        for seed in 0..n_seeds {
            let (corr, gt) = synthetic_correspondences(seed, 40, 60, 0.001);
            let est = register_spectral(&corr, &RegistrationConfig::default()).unwrap();
            let rot_deg = est.pose.rotation_angle_to(&gt).to_degrees();
            let trans = est.pose.translation_distance_to(&gt);
            if rot_deg < 1.0 && trans < 0.01 * scene_scale {
                ok += 1;
            }
        }
        assert!(ok * 100 >= n_seeds * 95, "only {ok}/{n_seeds} seeds recovered");
    }

    #[test]
    fn spectral_and_ransac_agree() {
        let mut agree = 0;
        let n_seeds = 30;
        for seed in 0..n_seeds {
            let (corr, _) = synthetic_correspondences(seed, 40, 60, 0.001);
            let cfg = RegistrationConfig { seed, ..Default::default() };
            let a = register_spectral(&corr, &cfg).unwrap();
            let b = register_ransac(&corr, &cfg).unwrap();
            if a.pose.rotation_angle_to(&b.pose).to_degrees() < 0.5
                && a.pose.translation_distance_to(&b.pose) < 0.005 * 0.2
            {
                agree += 1;
            }
        }
        assert!(agree * 100 >= n_seeds * 90, "agreement on {agree}/{n_seeds}");
    }

    #[test]
    fn all_outliers_flagged_not_crashed() {
        let (corr, _) = synthetic_correspondences(7, 0, 50, 0.0);
        let est = register_spectral(&corr, &RegistrationConfig::default()).unwrap();
        // Either a (meaningless) pose with almost no support, or a flagged
        // low-confidence result; never an error.
        assert!(est.low_confidence || est.inlier_count < 10);
        est.pose.validate(1e-9).unwrap();
    }

    #[test]
    fn too_few_pairs_is_insufficient() {
        let (mut corr, _) = synthetic_correspondences(1, 2, 0, 0.0);
        corr.pairs.truncate(2);
        let err = register_spectral(&corr, &RegistrationConfig::default()).unwrap_err();
        assert!(matches!(err, FicopError::Insufficient { have: 2, need: 3 }));
    }

    #[test]
    fn compatibility_matrix_structure() {
        let (corr, _) = synthetic_correspondences(3, 20, 20, 0.0);
        let (src, dst) = gather(&corr);
        let m = compatibility_matrix(&src, &dst, 0.02);
        for i in 0..m.nrows() {
            assert_eq!(m[(i, i)], 0.0);
            for j in 0..m.ncols() {
                assert!(m[(i, j)] >= 0.0);
                assert_eq!(m[(i, j)], m[(j, i)]);
            }
        }
    }

    #[test]
    fn power_iteration_start_invariance() {
        // Constructed matrix with a clear spectral gap.
        let mut m = Array2::zeros((4, 4));
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    m[(i, j)] = 1.0;
                }
            }
        }
        m[(3, 0)] = 0.01;
        m[(0, 3)] = 0.01;
        let v = power_iteration(&m, 200);
        // Reference: explicit eigenvector of the 3-block dominates.
        for i in 0..3 {
            assert!(v[i] > 0.5, "v[{i}] = {}", v[i]);
        }
        assert!(v[3] < 0.1);
        // Perturbed start should converge to the same vector; emulate by
        // running from a different normalization (power iteration here always
        // starts uniform, so instead check idempotence under more iterations).
        let v2 = power_iteration(&m, 400);
        for (a, b) in v.iter().zip(&v2) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn ransac_deterministic_per_seed() {
        let (corr, _) = synthetic_correspondences(11, 30, 70, 0.002);
        let cfg = RegistrationConfig { seed: 42, ..Default::default() };
        let a = register_ransac(&corr, &cfg).unwrap();
        let b = register_ransac(&corr, &cfg).unwrap();
        assert_eq!(a.pose.rotation, b.pose.rotation);
        assert_eq!(a.pose.translation, b.pose.translation);
        assert_eq!(a.inlier_count, b.inlier_count);
    }

    #[test]
    fn duplicate_inlier_is_stable() {
        let (corr, gt) = synthetic_correspondences(5, 50, 20, 0.0);
        let base = register_spectral(&corr, &RegistrationConfig::default()).unwrap();
        let mut dup = corr.clone();
        let mut extra = dup.pairs[0].clone();
        extra.anchor_pixel = (9999, 9999);
        dup.pairs.push(extra);
        let with_dup = register_spectral(&dup, &RegistrationConfig::default()).unwrap();
        let base_err = base.pose.rotation_angle_to(&gt);
        let dup_err = with_dup.pose.rotation_angle_to(&gt);
        assert!(dup_err <= base_err + 1e-6, "{dup_err} vs {base_err}");
    }
}
