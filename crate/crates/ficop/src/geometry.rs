//! SE(3) poses, pinhole camera math and the weighted Kabsch alignment
//! kernel. All geometry runs in f64 regardless of how tensors are stored.

use nalgebra::{Matrix3, Vector3};

use crate::error::{FicopError, Result};

pub const ROTATION_TOL: f64 = 1e-9;

/// Rigid body transform p -> R p + t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = Self { rotation, translation };
        t.validate(1e-6)?;
        Ok(t)
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let axis = if axis.norm() < 1e-12 { Vector3::z() } else { axis.normalize() };
        let rotation = nalgebra::Rotation3::from_axis_angle(
            &nalgebra::Unit::new_normalize(axis),
            angle,
        )
        .into_inner();
        Self { rotation, translation }
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        let gram = self.rotation.transpose() * self.rotation;
        let ortho_err = (gram - Matrix3::identity()).abs().max();
        if ortho_err > tol {
            return Err(FicopError::Validation(format!(
                "rotation not orthonormal: |R'R - I| = {ortho_err:.3e}"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > tol {
            return Err(FicopError::Validation(format!(
                "rotation determinant {det:.9} != +1"
            )));
        }
        Ok(())
    }

    pub fn apply(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        // self ∘ other: apply `other` first.
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Geodesic angle between the rotation parts, in radians.
    pub fn rotation_angle_to(&self, other: &RigidTransform) -> f64 {
        let trace = (self.rotation.transpose() * other.rotation).trace();
        ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    pub fn translation_distance_to(&self, other: &RigidTransform) -> f64 {
        (self.translation - other.translation).norm()
    }

    pub fn to_matrix4(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0]],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1]],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn from_matrix4(m: &[[f64; 4]; 4]) -> Result<Self> {
        let rotation = Matrix3::new(
            m[0][0], m[0][1], m[0][2],
            m[1][0], m[1][1], m[1][2],
            m[2][0], m[2][1], m[2][2],
        );
        let translation = Vector3::new(m[0][3], m[1][3], m[2][3]);
        Self::new(rotation, translation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl PinholeCamera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(FicopError::Validation(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(FicopError::Validation(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    /// Forward pinhole projection; `None` for points at or behind the camera.
    pub fn project(&self, p: Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Lift pixel (u, v) with depth d (meters) to a camera-frame point.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        )
    }

    pub fn intrinsics_matrix(&self) -> [[f64; 3]; 3] {
        [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
    }
}

/// Integer pixel coordinate, (u, v) = (column, row).
pub type Pixel = (usize, usize);

/// Lift every pixel with mask=1 and depth>0 to a 3D camera-frame point.
pub fn backproject(
    depth: &ndarray::Array2<f32>,
    mask: &ndarray::Array2<u8>,
    cam: &PinholeCamera,
) -> Result<Vec<(Pixel, Vector3<f64>)>> {
    let (h, w) = depth.dim();
    if mask.dim() != (h, w) {
        return Err(FicopError::Validation(format!(
            "depth {h}x{w} vs mask {:?} shape mismatch",
            mask.dim()
        )));
    }
    if (h, w) != (cam.height, cam.width) {
        return Err(FicopError::Validation(format!(
            "depth {h}x{w} does not match camera {}x{}",
            cam.height, cam.width
        )));
    }
    let mut out = Vec::new();
    for v in 0..h {
        for u in 0..w {
            let d = depth[(v, u)] as f64;
            if mask[(v, u)] != 0 && d > 0.0 {
                out.push(((u, v), cam.unproject(u as f64, v as f64, d)));
            }
        }
    }
    Ok(out)
}

pub fn apply_transform(t: &RigidTransform, pts: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    pts.iter().map(|p| t.apply(*p)).collect()
}

/// Eigen-decomposition of a symmetric 3x3 matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns), sorted descending.
fn jacobi_eigen_sym3(m: &Matrix3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
    let mut a = *m;
    let mut v = Matrix3::identity();
    for _ in 0..32 {
        let off = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
        if off < 1e-30 {
            break;
        }
        for &(p, q) in &[(0usize, 1usize), (0, 2), (1, 2)] {
            let apq = a[(p, q)];
            if apq.abs() < 1e-300 {
                continue;
            }
            let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let mut rot = Matrix3::identity();
            rot[(p, p)] = c;
            rot[(q, q)] = c;
            rot[(p, q)] = s;
            rot[(q, p)] = -s;
            a = rot.transpose() * a * rot;
            v *= rot;
        }
    }
    let mut idx = [0usize, 1, 2];
    let evals = [a[(0, 0)], a[(1, 1)], a[(2, 2)]];
    idx.sort_by(|&i, &j| evals[j].partial_cmp(&evals[i]).unwrap());
    let vals = Vector3::new(evals[idx[0]], evals[idx[1]], evals[idx[2]]);
    let vecs = Matrix3::from_columns(&[
        v.column(idx[0]).into_owned(),
        v.column(idx[1]).into_owned(),
        v.column(idx[2]).into_owned(),
    ]);
    (vals, vecs)
}

/// Weighted least-squares rigid alignment: argmin_T sum w_i |T(src_i) - dst_i|^2.
///
/// The 3x3 SVD of the cross-covariance is obtained from a Jacobi
/// eigen-decomposition of its Gram matrix, with the usual reflection
/// correction so the result is a proper rotation.
pub fn kabsch_weighted(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    weights: &[f64],
) -> Result<RigidTransform> {
    if src.len() != dst.len() || src.len() != weights.len() {
        return Err(FicopError::Validation(format!(
            "kabsch length mismatch: src {}, dst {}, weights {}",
            src.len(),
            dst.len(),
            weights.len()
        )));
    }
    if src.len() < 3 {
        return Err(FicopError::Insufficient { have: src.len(), need: 3 });
    }
    let positive = weights.iter().filter(|&&w| w > 0.0).count();
    if positive < 3 {
        return Err(FicopError::Insufficient { have: positive, need: 3 });
    }
    let wsum: f64 = weights.iter().sum();
    let mut src_c = Vector3::zeros();
    let mut dst_c = Vector3::zeros();
    for ((s, d), &w) in src.iter().zip(dst).zip(weights) {
        src_c += w * s;
        dst_c += w * d;
    }
    src_c /= wsum;
    dst_c /= wsum;

    // Cross-covariance H = sum w (s - s̄)(d - d̄)ᵀ.
    let mut h = Matrix3::zeros();
    for ((s, d), &w) in src.iter().zip(dst).zip(weights) {
        h += w * (s - src_c) * (d - dst_c).transpose();
    }

    let (evals, vmat) = jacobi_eigen_sym3(&(h.transpose() * h));
    let sigma0 = evals[0].max(0.0).sqrt();
    let sigma1 = evals[1].max(0.0).sqrt();
    if sigma1 <= 1e-12 * sigma0.max(1e-300) || sigma0 <= 0.0 {
        return Err(FicopError::Degenerate(
            "cross-covariance rank < 2 (colinear or zero-spread points)".into(),
        ));
    }
    let u0 = ((h * vmat.column(0)) / sigma0).normalize();
    let u1 = (h * vmat.column(1)) / sigma1;
    let u1 = (u1 - u0.dot(&u1) * u0).normalize();
    let u2 = u0.cross(&u1);
    let umat = Matrix3::from_columns(&[u0, u1, u2]);

    // H = U Σ Vᵀ with H mapping centered dst-space ... we built H = Σ w ŝ d̂ᵀ,
    // so the maximizer of tr(R H) is R = V diag(1,1,det(VUᵀ)) Uᵀ.
    let d = (vmat.determinant() * umat.determinant()).signum();
    let rotation = vmat * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * umat.transpose();
    let translation = dst_c - rotation * src_c;
    let t = RigidTransform { rotation, translation };
    t.validate(1e-7).map_err(|_| {
        FicopError::Degenerate("kabsch produced a non-orthonormal rotation".into())
    })?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn random_rigid(rng: &mut impl Rng, max_angle: f64, max_trans: f64) -> RigidTransform {
        let axis = Vector3::new(
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
        );
        let angle = (rng.gen::<f64>() * 2.0 - 1.0) * max_angle;
        let t = Vector3::new(
            (rng.gen::<f64>() * 2.0 - 1.0) * max_trans,
            (rng.gen::<f64>() * 2.0 - 1.0) * max_trans,
            (rng.gen::<f64>() * 2.0 - 1.0) * max_trans,
        );
        RigidTransform::from_axis_angle(axis, angle, t)
    }

    fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5,
                )
            })
            .collect()
    }

    #[test]
    fn identity_leaves_points_unchanged() {
        let t = RigidTransform::identity();
        let p = Vector3::new(1.0, -2.0, 3.0);
        assert_eq!(t.apply(p), p);
    }

    #[test]
    fn inverse_composes_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_rigid(&mut rng, 3.0, 1.0);
        let p = Vector3::new(0.3, 0.7, -1.2);
        let q = t.inverse().apply(t.apply(p));
        assert!((q - p).norm() < 1e-9);
    }

    #[test]
    fn z_rotation_quarter_turn() {
        let t = RigidTransform::from_axis_angle(
            Vector3::z(),
            std::f64::consts::FRAC_PI_2,
            Vector3::zeros(),
        );
        let q = t.apply(Vector3::new(1.0, 0.0, 0.0));
        assert!((q - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn backproject_principal_point() {
        let cam = PinholeCamera::new(100.0, 100.0, 2.0, 2.0, 5, 5).unwrap();
        let mut depth = Array2::<f32>::zeros((5, 5));
        let mut mask = Array2::<u8>::zeros((5, 5));
        depth[(2, 2)] = 2.0;
        mask[(2, 2)] = 1;
        let pts = backproject(&depth, &mask, &cam).unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].0, (2, 2));
        assert!((pts[0].1 - Vector3::new(0.0, 0.0, 2.0)).norm() < 1e-12);
    }

    #[test]
    fn backproject_all_zero_depth_is_empty() {
        let cam = PinholeCamera::new(100.0, 100.0, 2.0, 2.0, 4, 4).unwrap();
        let depth = Array2::<f32>::zeros((4, 4));
        let mask = Array2::<u8>::ones((4, 4));
        assert!(backproject(&depth, &mask, &cam).unwrap().is_empty());
    }

    #[test]
    fn backproject_unit_tangent() {
        let cam = PinholeCamera::new(100.0, 100.0, 0.0, 0.0, 128, 128).unwrap();
        let mut depth = Array2::<f32>::zeros((128, 128));
        let mut mask = Array2::<u8>::zeros((128, 128));
        depth[(0, 100)] = 1.0;
        mask[(0, 100)] = 1;
        let pts = backproject(&depth, &mask, &cam).unwrap();
        assert!((pts[0].1 - Vector3::new(1.0, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn backproject_shape_mismatch_rejected() {
        let cam = PinholeCamera::new(100.0, 100.0, 2.0, 2.0, 4, 4).unwrap();
        let depth = Array2::<f32>::zeros((4, 4));
        let mask = Array2::<u8>::zeros((5, 5));
        assert!(matches!(
            backproject(&depth, &mask, &cam),
            Err(FicopError::Validation(_))
        ));
    }

    #[test]
    fn project_unproject_roundtrip() {
        let cam = PinholeCamera::new(111.0, 123.0, 63.5, 60.0, 128, 128).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let p = Vector3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() + 0.5,
            );
            let (u, v) = cam.project(p).unwrap();
            let q = cam.unproject(u, v, p.z);
            assert!((q - p).norm() < 1e-9);
        }
    }

    #[test]
    fn kabsch_identity_on_equal_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = random_points(&mut rng, 20);
        let w = vec![1.0; 20];
        let t = kabsch_weighted(&pts, &pts, &w).unwrap();
        assert!(t.rotation_angle_to(&RigidTransform::identity()) < 1e-9);
        assert!(t.translation.norm() < 1e-9);
    }

    #[test]
    fn kabsch_recovers_random_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let t0 = random_rigid(&mut rng, 3.0, 2.0);
            let src = random_points(&mut rng, 30);
            let dst = apply_transform(&t0, &src);
            let w = vec![1.0; 30];
            let t = kabsch_weighted(&src, &dst, &w).unwrap();
            assert!(t.rotation_angle_to(&t0) < 1e-7);
            assert!((t.translation - t0.translation).norm() < 1e-7);
        }
    }

    #[test]
    fn kabsch_ignores_zero_weight_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t0 = random_rigid(&mut rng, 2.0, 1.0);
        let src = random_points(&mut rng, 40);
        let mut dst = apply_transform(&t0, &src);
        let mut w = vec![1.0; 40];
        for i in 0..20 {
            dst[i] += Vector3::new(10.0 * rng.gen::<f64>(), -7.0, 3.0);
            w[i] = 0.0;
        }
        let t = kabsch_weighted(&src, &dst, &w).unwrap();
        assert!(t.rotation_angle_to(&t0) < 1e-7);
        assert!((t.translation - t0.translation).norm() < 1e-7);
    }

    #[test]
    fn kabsch_equivariance_under_left_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let g = random_rigid(&mut rng, 3.0, 1.0);
            let src = random_points(&mut rng, 25);
            let t0 = random_rigid(&mut rng, 2.0, 0.5);
            let dst = apply_transform(&t0, &src);
            let w: Vec<f64> = (0..25).map(|_| rng.gen::<f64>() + 0.1).collect();
            let base = kabsch_weighted(&src, &dst, &w).unwrap();
            let moved = kabsch_weighted(&src, &apply_transform(&g, &dst), &w).unwrap();
            let expect = g.compose(&base);
            assert!(moved.rotation_angle_to(&expect) < 1e-7);
            assert!((moved.translation - expect.translation).norm() < 1e-7);
        }
    }

    #[test]
    fn kabsch_colinear_degenerate() {
        let src: Vec<_> = (0..10)
            .map(|i| Vector3::new(i as f64, 0.0, 0.0))
            .collect();
        let dst = src.clone();
        let w = vec![1.0; 10];
        assert!(matches!(
            kabsch_weighted(&src, &dst, &w),
            Err(FicopError::Degenerate(_))
        ));
    }

    #[test]
    fn kabsch_output_is_proper_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let src = random_points(&mut rng, 10);
            let dst = random_points(&mut rng, 10);
            let w: Vec<f64> = (0..10).map(|_| rng.gen::<f64>()).collect();
            if let Ok(t) = kabsch_weighted(&src, &dst, &w) {
                t.validate(1e-9).unwrap();
            }
        }
    }
}

#[cfg(test)]
pub use tests::random_rigid;
