//! Training objectives: the hardest-contrastive feature matching loss and
//! the weighted BCE patch-correlation loss, with exact analytic gradients
//! with respect to their direct inputs. Finite-difference verification
//! utilities live here too so the CLI gradcheck and the tests share them.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{FicopError, Result};

pub const DEFAULT_MARGIN_POS: f64 = 0.2;
pub const DEFAULT_MARGIN_NEG: f64 = 0.9;
pub const DEFAULT_SAFE_RADIUS: f64 = 4.0;
const CLAMP_EPS: f64 = 1e-7;

/// Inputs to the feature-matching loss: anchors with their ground-truth
/// positive partners plus a pool of candidate negatives with pixel
/// positions (negatives inside `safe_radius` of the true match are not
/// mined).
#[derive(Debug, Clone)]
pub struct MatchBatch {
    /// N_m x C, unit-norm rows.
    pub anchor_feats: Array2<f64>,
    /// N_m x C, unit-norm rows; row i is the GT partner of anchor i.
    pub query_feats_pos: Array2<f64>,
    /// Pixel position of each positive in the query image.
    pub positive_pixels: Vec<(f64, f64)>,
    /// M x C candidate negative descriptors.
    pub negatives: Array2<f64>,
    /// Pixel position of each candidate negative.
    pub negative_pixels: Vec<(f64, f64)>,
}

impl MatchBatch {
    pub fn validate(&self) -> Result<()> {
        let n = self.anchor_feats.nrows();
        if n == 0 {
            return Err(FicopError::Validation("match batch is empty".into()));
        }
        if self.query_feats_pos.nrows() != n || self.positive_pixels.len() != n {
            return Err(FicopError::Validation(
                "positive partner count does not match anchor count".into(),
            ));
        }
        if self.negatives.nrows() != self.negative_pixels.len() {
            return Err(FicopError::Validation(
                "negative pixel count does not match negative descriptor count".into(),
            ));
        }
        // Cosine distance normalizes internally, so descriptors only need to
        // be finite and nonzero.
        for (name, feats) in [
            ("anchor", &self.anchor_feats),
            ("positive", &self.query_feats_pos),
            ("negative", &self.negatives),
        ] {
            for (i, row) in feats.rows().into_iter().enumerate() {
                let norm: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if !norm.is_finite() || norm < 1e-9 {
                    return Err(FicopError::Validation(format!(
                        "{name} row {i} has degenerate norm {norm}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FeatureLossResult {
    pub loss: f64,
    pub grad_anchor: Array2<f64>,
    pub grad_positive: Array2<f64>,
    pub grad_negative: Array2<f64>,
    /// Anchors whose candidate pool was empty after the safe-radius filter;
    /// they contribute zero to the negative term.
    pub anchors_without_negatives: usize,
}

fn cosine(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb), na, nb)
}

/// d(a,b) = 1 - cos(a,b); accumulates coef * ∂d/∂a and coef * ∂d/∂b.
fn add_distance_grad(a: &[f64], b: &[f64], coef: f64, ga: &mut [f64], gb: &mut [f64]) {
    let (cos, na, nb) = cosine(a, b);
    for i in 0..a.len() {
        let dcos_da = b[i] / (na * nb) - cos * a[i] / (na * na);
        let dcos_db = a[i] / (na * nb) - cos * b[i] / (nb * nb);
        ga[i] -= coef * dcos_da;
        gb[i] -= coef * dcos_db;
    }
}

/// Hardest-contrastive hinge loss L_F = L_P + L_N with per-anchor hardest
/// negative mining outside `safe_radius` pixels of the true match.
pub fn loss_feature(
    batch: &MatchBatch,
    m_p: f64,
    m_n: f64,
    safe_radius: f64,
) -> Result<FeatureLossResult> {
    if !(0.0 < m_p && m_p < m_n && m_n < 2.0) {
        return Err(FicopError::Validation(format!(
            "margins must satisfy 0 < m_p < m_n < 2, got {m_p}, {m_n}"
        )));
    }
    batch.validate()?;
    let n = batch.anchor_feats.nrows();
    let mut grad_anchor = Array2::zeros(batch.anchor_feats.raw_dim());
    let mut grad_positive = Array2::zeros(batch.query_feats_pos.raw_dim());
    let mut grad_negative = Array2::zeros(batch.negatives.raw_dim());
    let mut loss_p = 0.0;
    let mut loss_n = 0.0;
    let mut anchors_without_negatives = 0;

    for i in 0..n {
        let a = batch.anchor_feats.row(i);
        let a = a.as_slice().unwrap();
        let q = batch.query_feats_pos.row(i);
        let q = q.as_slice().unwrap();
        let (cos_pos, _, _) = cosine(a, q);
        let d_pos = 1.0 - cos_pos;
        let hinge = (d_pos - m_p).max(0.0);
        loss_p += hinge * hinge;
        if hinge > 0.0 {
            add_distance_grad(
                a,
                q,
                2.0 * hinge / n as f64,
                grad_anchor.row_mut(i).as_slice_mut().unwrap(),
                grad_positive.row_mut(i).as_slice_mut().unwrap(),
            );
        }

        // Hardest negative outside the safe radius around the GT match.
        let (pu, pv) = batch.positive_pixels[i];
        let mut hardest: Option<(usize, f64)> = None;
        for (j, &(nu, nv)) in batch.negative_pixels.iter().enumerate() {
            if ((nu - pu).powi(2) + (nv - pv).powi(2)).sqrt() <= safe_radius {
                continue;
            }
            let neg = batch.negatives.row(j);
            let (cos_neg, _, _) = cosine(a, neg.as_slice().unwrap());
            let d = 1.0 - cos_neg;
            if hardest.map_or(true, |(_, best)| d < best) {
                hardest = Some((j, d));
            }
        }
        match hardest {
            None => anchors_without_negatives += 1,
            Some((j, d_neg)) => {
                let hinge = (m_n - d_neg).max(0.0);
                loss_n += hinge * hinge;
                if hinge > 0.0 {
                    let neg = batch.negatives.row(j).to_owned();
                    add_distance_grad(
                        a,
                        neg.as_slice().unwrap(),
                        -2.0 * hinge / n as f64,
                        grad_anchor.row_mut(i).as_slice_mut().unwrap(),
                        grad_negative.row_mut(j).as_slice_mut().unwrap(),
                    );
                }
            }
        }
    }

    Ok(FeatureLossResult {
        loss: (loss_p + loss_n) / n as f64,
        grad_anchor,
        grad_positive,
        grad_negative,
        anchors_without_negatives,
    })
}

#[derive(Debug, Clone)]
pub struct CorrelationLossResult {
    pub loss: f64,
    pub grad: Array3<f64>,
    pub positive_weight: f64,
    /// True when C_gt had no positive entry and w_p fell back to 1.
    pub degenerate_weight: bool,
}

/// Weighted binary cross-entropy over all N = N_p * G1 * G2 entries:
/// -(1/N) Σ [w_p · g · log p + (1 - g) · log(1 - p)], w_p = N_neg / N_pos.
/// Predictions are clamped to [ε, 1-ε] before the logs.
pub fn loss_correlation(c_p: &Array3<f64>, c_gt: &Array3<f64>) -> Result<CorrelationLossResult> {
    if c_p.dim() != c_gt.dim() {
        return Err(FicopError::Validation(format!(
            "loss_correlation: shape mismatch {:?} vs {:?}",
            c_p.dim(),
            c_gt.dim()
        )));
    }
    let n_total = c_p.len() as f64;
    let n_pos = c_gt.iter().filter(|&&g| g > 0.5).count() as f64;
    let n_neg = n_total - n_pos;
    let degenerate_weight = n_pos == 0.0;
    let w_p = if degenerate_weight { 1.0 } else { n_neg / n_pos };

    let mut loss = 0.0;
    let mut grad = Array3::zeros(c_p.raw_dim());
    for ((idx, &p), &g) in c_p.indexed_iter().zip(c_gt.iter()) {
        let clamped = p.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
        let positive = g > 0.5;
        if positive {
            loss -= w_p * clamped.ln();
        } else {
            loss -= (1.0 - clamped).ln();
        }
        // Clamped entries sit on a flat of the clamp, so their gradient is 0.
        if (CLAMP_EPS..=1.0 - CLAMP_EPS).contains(&p) {
            grad[idx] = if positive {
                -w_p / clamped / n_total
            } else {
                1.0 / (1.0 - clamped) / n_total
            };
        }
    }
    Ok(CorrelationLossResult {
        loss: loss / n_total,
        grad,
        positive_weight: w_p,
        degenerate_weight,
    })
}

/// Scalar reference implementation used as the brute-force oracle in tests
/// and the acceptance suite; deliberately written as a plain double loop
/// over the flattened entries.
pub fn loss_correlation_scalar_oracle(c_p: &Array3<f64>, c_gt: &Array3<f64>) -> f64 {
    let flat_p: Vec<f64> = c_p.iter().copied().collect();
    let flat_g: Vec<f64> = c_gt.iter().copied().collect();
    let n = flat_p.len();
    let mut n_pos = 0usize;
    for &g in &flat_g {
        if g > 0.5 {
            n_pos += 1;
        }
    }
    let w_p = if n_pos == 0 { 1.0 } else { (n - n_pos) as f64 / n_pos as f64 };
    let mut acc = 0.0;
    for k in 0..n {
        let p = flat_p[k].clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
        if flat_g[k] > 0.5 {
            acc += w_p * p.ln();
        } else {
            acc += (1.0 - p).ln();
        }
    }
    -acc / n as f64
}

/// Total objective λ1 · L_F + λ2 · L_C.
pub fn loss_total(l_f: f64, l_c: f64, lambda1: f64, lambda2: f64) -> Result<f64> {
    if lambda1 < 0.0 || lambda2 < 0.0 {
        return Err(FicopError::Validation("loss weights must be nonnegative".into()));
    }
    Ok(lambda1 * l_f + lambda2 * l_c)
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Array2<f64> {
    let mut a = Array2::from_shape_fn((n, c), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z
    });
    for mut row in a.rows_mut() {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.mapv_inplace(|x| x / norm);
    }
    a
}

pub fn random_match_batch(seed: u64, n: usize, pool: usize, c: usize) -> MatchBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchor_feats = unit_rows(&mut rng, n, c);
    // Positives near their anchors so both hinges are usually active.
    let mut query_feats_pos = &anchor_feats + &(unit_rows(&mut rng, n, c) * 0.5);
    for mut row in query_feats_pos.rows_mut() {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.mapv_inplace(|x| x / norm);
    }
    let positive_pixels = (0..n)
        .map(|_| (rng.gen::<f64>() * 64.0, rng.gen::<f64>() * 64.0))
        .collect();
    let negatives = unit_rows(&mut rng, pool, c);
    let negative_pixels = (0..pool)
        .map(|_| (rng.gen::<f64>() * 64.0, rng.gen::<f64>() * 64.0))
        .collect();
    MatchBatch {
        anchor_feats,
        query_feats_pos,
        positive_pixels,
        negatives,
        negative_pixels,
    }
}

/// Central finite differences (h = 1e-5) of the feature loss with respect
/// to every descriptor entry; returns the max relative error against the
/// analytic gradient.
pub fn fd_check_feature(seed: u64) -> Result<f64> {
    let h = 1e-5;
    let batch = random_match_batch(seed, 6, 12, 8);
    let base = loss_feature(&batch, DEFAULT_MARGIN_POS, DEFAULT_MARGIN_NEG, DEFAULT_SAFE_RADIUS)?;
    let mut max_rel = 0.0f64;
    let mut check = |analytic: &Array2<f64>,
                     write: &mut dyn FnMut(&mut MatchBatch) -> &mut Array2<f64>|
     -> Result<()> {
        let dims = analytic.dim();
        for i in 0..dims.0 {
            for j in 0..dims.1 {
                let mut bp = batch.clone();
                write(&mut bp)[(i, j)] += h;
                let lp = loss_feature(&bp, DEFAULT_MARGIN_POS, DEFAULT_MARGIN_NEG, DEFAULT_SAFE_RADIUS)?
                    .loss;
                let mut bm = batch.clone();
                write(&mut bm)[(i, j)] -= h;
                let lm = loss_feature(&bm, DEFAULT_MARGIN_POS, DEFAULT_MARGIN_NEG, DEFAULT_SAFE_RADIUS)?
                    .loss;
                let fd = (lp - lm) / (2.0 * h);
                let an = analytic[(i, j)];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                max_rel = max_rel.max(rel);
            }
        }
        Ok(())
    };
    check(&base.grad_anchor, &mut |b| &mut b.anchor_feats)?;
    check(&base.grad_positive, &mut |b| &mut b.query_feats_pos)?;
    check(&base.grad_negative, &mut |b| &mut b.negatives)?;
    Ok(max_rel)
}

/// Detection fixture: same check as [`fd_check_feature`] but with the
/// analytic gradient deliberately corrupted; callers use it to verify the
/// checker actually catches a wrong gradient.
pub fn fd_check_feature_injected_bug(seed: u64) -> Result<f64> {
    let batch = random_match_batch(seed, 6, 12, 8);
    let base = loss_feature(&batch, DEFAULT_MARGIN_POS, DEFAULT_MARGIN_NEG, DEFAULT_SAFE_RADIUS)?;
    let h = 1e-5;
    let mut corrupted = base.grad_anchor.clone();
    corrupted[(0, 0)] += 0.05;
    let mut max_rel = 0.0f64;
    for i in 0..corrupted.nrows() {
        for j in 0..corrupted.ncols() {
            let mut bp = batch.clone();
            bp.anchor_feats[(i, j)] += h;
            let lp =
                loss_feature(&bp, DEFAULT_MARGIN_POS, DEFAULT_MARGIN_NEG, DEFAULT_SAFE_RADIUS)?.loss;
            let mut bm = batch.clone();
            bm.anchor_feats[(i, j)] -= h;
            let lm =
                loss_feature(&bm, DEFAULT_MARGIN_POS, DEFAULT_MARGIN_NEG, DEFAULT_SAFE_RADIUS)?.loss;
            let fd = (lp - lm) / (2.0 * h);
            let an = corrupted[(i, j)];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

/// Same finite-difference check for the correlation loss.
pub fn fd_check_correlation(seed: u64) -> Result<f64> {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c_p = Array3::from_shape_fn((4, 3, 3), |_| 0.02 + 0.96 * rng.gen::<f64>());
    let c_gt = Array3::from_shape_fn((4, 3, 3), |_| f64::from(rng.gen::<f64>() < 0.2));
    let base = loss_correlation(&c_p, &c_gt)?;
    let mut max_rel = 0.0f64;
    for idx in ndarray::indices(c_p.raw_dim()) {
        let mut cp = c_p.clone();
        cp[idx] += h;
        let lp = loss_correlation(&cp, &c_gt)?.loss;
        let mut cm = c_p.clone();
        cm[idx] -= h;
        let lm = loss_correlation(&cm, &c_gt)?.loss;
        let fd = (lp - lm) / (2.0 * h);
        let an = base.grad[idx];
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inactive_hinges_give_zero_loss_and_grad() {
        // Positives identical to anchors (d = 0). Orthonormal anchors with
        // negated copies as the pool: any cross pairing is orthogonal
        // (d = 1 > m_n) and the negated self is at d = 2, so no hinge fires.
        let mut anchors = Array2::zeros((4, 6));
        for i in 0..4 {
            anchors[(i, i)] = 1.0;
        }
        let negatives = anchors.mapv(|x: f64| -x);
        let batch = MatchBatch {
            anchor_feats: anchors.clone(),
            query_feats_pos: anchors,
            positive_pixels: vec![(0.0, 0.0); 4],
            negatives,
            negative_pixels: vec![(50.0, 50.0); 4],
        };
        let r = loss_feature(&batch, 0.2, 0.9, 4.0).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r.grad_anchor.iter().all(|&g| g == 0.0));
        assert!(r.grad_negative.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_pair_hinge_arithmetic() {
        // One pair at d_pos = m_p + 0.1, no negatives in range: L = 0.01.
        let m_p = 0.2;
        let target_cos: f64 = 1.0 - (m_p + 0.1);
        let a = ndarray::array![[1.0, 0.0]];
        let angle = target_cos.acos();
        let q = ndarray::array![[angle.cos(), angle.sin()]];
        let batch = MatchBatch {
            anchor_feats: a,
            query_feats_pos: q,
            positive_pixels: vec![(0.0, 0.0)],
            negatives: Array2::zeros((0, 2)).into_dimensionality().unwrap(),
            negative_pixels: vec![],
        };
        let r = loss_feature(&batch, m_p, 0.9, 4.0).unwrap();
        assert!((r.loss - 0.01).abs() < 1e-12);
        assert_eq!(r.anchors_without_negatives, 1);
    }

    #[test]
    fn feature_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let rel = fd_check_feature(seed).unwrap();
            assert!(rel < 1e-4, "seed {seed}: max rel err {rel}");
        }
    }

    #[test]
    fn correlation_perfect_prediction_near_zero() {
        let mut c_gt = Array3::zeros((2, 2, 2));
        c_gt[(0, 0, 0)] = 1.0;
        c_gt[(1, 1, 1)] = 1.0;
        let r = loss_correlation(&c_gt, &c_gt).unwrap();
        assert!(r.loss >= 0.0 && r.loss < 1e-6, "loss {}", r.loss);
    }

    #[test]
    fn correlation_hand_case_four_entries() {
        // N = 4, one positive -> w_p = 3; C_p = 0.5 everywhere:
        // loss = -(1/4)(3 ln 0.5 + 3 ln 0.5) = (6/4) ln 2.
        let mut c_gt = Array3::zeros((1, 2, 2));
        c_gt[(0, 0, 0)] = 1.0;
        let c_p = Array3::from_elem((1, 2, 2), 0.5);
        let r = loss_correlation(&c_p, &c_gt).unwrap();
        let expect = 1.5 * std::f64::consts::LN_2;
        assert!((r.loss - expect).abs() < 1e-12);
        assert_eq!(r.positive_weight, 3.0);
    }

    #[test]
    fn correlation_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let c_p = Array3::from_shape_fn((6, 4, 4), |_| rng.gen::<f64>());
            let c_gt = Array3::from_shape_fn((6, 4, 4), |_| f64::from(rng.gen::<f64>() < 0.3));
            let r = loss_correlation(&c_p, &c_gt).unwrap();
            let oracle = loss_correlation_scalar_oracle(&c_p, &c_gt);
            assert!((r.loss - oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn correlation_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let rel = fd_check_correlation(seed).unwrap();
            assert!(rel < 1e-4, "seed {seed}: max rel err {rel}");
        }
    }

    #[test]
    fn correlation_all_negative_falls_back_to_unit_weight() {
        let c_gt = Array3::zeros((2, 2, 2));
        let c_p = Array3::from_elem((2, 2, 2), 0.3);
        let r = loss_correlation(&c_p, &c_gt).unwrap();
        assert!(r.degenerate_weight);
        assert_eq!(r.positive_weight, 1.0);
        assert!(r.loss > 0.0);
    }

    #[test]
    fn correlation_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c_p = Array3::from_shape_fn((2, 3, 3), |_| rng.gen::<f64>());
        let c_gt = Array3::from_shape_fn((2, 3, 3), |_| f64::from(rng.gen::<f64>() < 0.4));
        let base = loss_correlation(&c_p, &c_gt).unwrap().loss;
        // Reverse the flattened order of both tensors.
        let mut rev_p: Vec<f64> = c_p.iter().copied().collect();
        rev_p.reverse();
        let mut rev_g: Vec<f64> = c_gt.iter().copied().collect();
        rev_g.reverse();
        let c_p2 = Array3::from_shape_vec((2, 3, 3), rev_p).unwrap();
        let c_gt2 = Array3::from_shape_vec((2, 3, 3), rev_g).unwrap();
        let permuted = loss_correlation(&c_p2, &c_gt2).unwrap().loss;
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn weight_identity_wp_npos_equals_nneg() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c_gt = Array3::from_shape_fn((4, 4, 4), |_| f64::from(rng.gen::<f64>() < 0.3));
        let c_p = Array3::from_elem((4, 4, 4), 0.5);
        let r = loss_correlation(&c_p, &c_gt).unwrap();
        let n_pos = c_gt.iter().filter(|&&g| g > 0.5).count() as f64;
        let n_neg = c_gt.len() as f64 - n_pos;
        assert_eq!(r.positive_weight * n_pos, n_neg);
    }

    #[test]
    fn losses_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..10 {
            let batch = random_match_batch(seed, 5, 10, 8);
            let r = loss_feature(&batch, 0.2, 0.9, 4.0).unwrap();
            assert!(r.loss >= 0.0);
            let c_p = Array3::from_shape_fn((3, 3, 3), |_| rng.gen::<f64>());
            let c_gt = Array3::from_shape_fn((3, 3, 3), |_| f64::from(rng.gen::<f64>() < 0.5));
            assert!(loss_correlation(&c_p, &c_gt).unwrap().loss >= 0.0);
        }
    }

    #[test]
    fn total_loss_weighted_sum() {
        assert_eq!(loss_total(0.3, 0.7, 1.0, 0.0).unwrap(), 0.3);
        assert_eq!(loss_total(0.3, 0.7, 1.0, 1.0).unwrap(), 1.0);
        let (a, b, l1, l2) = (1.7, 2.3, 0.4, 0.6);
        assert!((loss_total(a, b, l1, l2).unwrap() - (l1 * a + l2 * b)).abs() < 1e-15);
        assert!(loss_total(1.0, 1.0, -0.1, 1.0).is_err());
    }
}
