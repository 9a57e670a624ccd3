//! Pinhole camera model, rigid transforms, and plane-induced homographies.
//!
//! Conventions used throughout the crate:
//! - Camera frame: x right, y down, z forward (looking along +z).
//! - Pixel coordinates (u, v) at pixel centers, origin at the top-left
//!   pixel center, u rightward, v downward. Projection of a camera-frame
//!   point (X, Y, Z), Z > 0: u = fx·X/Z + cx, v = fy·Y/Z + cy.
//! - A [`RigidPose`] (R, t) acts on points as X' = R·X + t. A pose named
//!   `pose_tgt_to_src` maps target-camera coordinates into source-camera
//!   coordinates.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CameraError {
    #[error("focal lengths must be positive and finite (fx={fx}, fy={fy})")]
    InvalidFocalLength { fx: f64, fy: f64 },
    #[error("principal point must be finite (cx={cx}, cy={cy})")]
    InvalidPrincipalPoint { cx: f64, cy: f64 },
    #[error("matrix is not a rotation (orthonormality or det(R)=1 violated beyond 1e-9)")]
    NotARotation,
    #[error("plane depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("homography is singular or non-finite")]
    SingularHomography,
    #[error("homography maps pixel to infinity (|w| <= 1e-12)")]
    PointAtInfinity,
}

/// Pinhole intrinsics in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, CameraError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(CameraError::InvalidFocalLength { fx, fy });
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(CameraError::InvalidPrincipalPoint { cx, cy });
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Projects a camera-frame point; `None` if it is not in front of the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Back-projects a pixel to the unit-depth ray direction in the camera frame.
    pub fn backproject(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Intrinsics consistent with resampling the image from `(w, h)` pixels to
    /// `(new_w, new_h)`, with box/area alignment: full-resolution coordinate
    /// x = x' · (w/w') + ((w/w') − 1)/2 for a resized coordinate x'.
    pub fn rescaled(&self, w: usize, h: usize, new_w: usize, new_h: usize) -> CameraIntrinsics {
        let rx = new_w as f64 / w as f64;
        let ry = new_h as f64 / h as f64;
        CameraIntrinsics {
            fx: self.fx * rx,
            fy: self.fy * ry,
            cx: (self.cx + 0.5) * rx - 0.5,
            cy: (self.cy + 0.5) * ry - 0.5,
        }
    }
}

/// Rigid SE(3) transform acting as X' = R·X + t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

const ROTATION_TOL: f64 = 1e-9;

impl RigidPose {
    /// Validates RᵀR = I (per entry) and det(R) = 1, both within 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, CameraError> {
        let gram = rotation.transpose() * rotation;
        let identity = Matrix3::<f64>::identity();
        for i in 0..3 {
            for j in 0..3 {
                if (gram[(i, j)] - identity[(i, j)]).abs() > ROTATION_TOL {
                    return Err(CameraError::NotARotation);
                }
            }
        }
        if (rotation.determinant() - 1.0).abs() > ROTATION_TOL || !translation.iter().all(|v| v.is_finite()) {
            return Err(CameraError::NotARotation);
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// (Rᵀ, −Rᵀt); a two-sided inverse under [`RigidPose::compose`].
    pub fn inverse(&self) -> RigidPose {
        let rt = self.rotation.transpose();
        RigidPose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// The transform applying `other` first, then `self`.
    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == Matrix3::identity() && self.translation == Vector3::zeros()
    }
}

/// 3×3 projective map from homogeneous target pixels to source pixels.
/// Invertible by construction (|det| > 1e-12).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, CameraError> {
        if !m.iter().all(|v| v.is_finite()) || m.determinant().abs() <= 1e-12 {
            return Err(CameraError::SingularHomography);
        }
        Ok(Self { m })
    }

    pub fn identity() -> Self {
        Self {
            m: Matrix3::identity(),
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn is_identity(&self) -> bool {
        self.m == Matrix3::identity()
    }
}

/// Homography mapping target pixels to source pixels for a plane that is
/// fronto-parallel in the source frame at depth `plane_depth` (more
/// generally: the plane {X : nᵀX = depth} with `plane_normal` = n given in
/// source-camera coordinates).
///
/// With (R, t) = `pose_tgt_to_src` the plane expressed in the target frame
/// has normal n_t = Rᵀn and offset d_t = depth − nᵀt, and the exact map is
///
///   H = K_s (R + t·n_tᵀ / d_t) K_t⁻¹,
///
/// which satisfies det(H) = (fx_s·fy_s)/(fx_t·fy_t) · depth/d_t. The sign of
/// the rank-one term was validated against the 3D point-projection oracle
/// (see tests); d_t ≤ 0 means the plane does not lie in front of the target
/// camera and surfaces as `SingularHomography`.
pub fn homography_source_from_target(
    k_s: &CameraIntrinsics,
    k_t: &CameraIntrinsics,
    pose_tgt_to_src: &RigidPose,
    plane_depth: f64,
    plane_normal: &Vector3<f64>,
) -> Result<Homography, CameraError> {
    homography_and_depth_jacobian(k_s, k_t, pose_tgt_to_src, plane_depth, plane_normal)
        .map(|(h, _)| h)
}

/// Same as [`homography_source_from_target`] but also returns ∂H/∂depth,
/// needed by the renderer's adjoint pass. For H = A + B/d_t with
/// B = K_s·t·n_tᵀ·K_t⁻¹ and d_t = depth − nᵀt, the derivative is −B/d_t².
pub fn homography_and_depth_jacobian(
    k_s: &CameraIntrinsics,
    k_t: &CameraIntrinsics,
    pose_tgt_to_src: &RigidPose,
    plane_depth: f64,
    plane_normal: &Vector3<f64>,
) -> Result<(Homography, Matrix3<f64>), CameraError> {
    if !(plane_depth > 0.0) || !plane_depth.is_finite() {
        return Err(CameraError::NonPositiveDepth(plane_depth));
    }
    debug_assert!(
        (plane_normal.norm() - 1.0).abs() < 1e-9,
        "plane normal must be unit length"
    );

    // Identity configuration maps every pixel to itself; keep it bit-exact.
    if pose_tgt_to_src.is_identity() && k_s == k_t {
        return Ok((Homography::identity(), Matrix3::zeros()));
    }

    let r = pose_tgt_to_src.rotation();
    let t = pose_tgt_to_src.translation();
    let n_t = r.transpose() * plane_normal;
    let d_t = plane_depth - plane_normal.dot(t);

    let b = k_s.matrix() * (t * n_t.transpose()) * k_t.inverse_matrix();
    let a = k_s.matrix() * r * k_t.inverse_matrix();
    let h = a + b / d_t;
    let dh_ddepth = -b / (d_t * d_t);

    Ok((Homography::from_matrix(h)?, dh_ddepth))
}

/// Applies H to a pixel and dehomogenizes.
pub fn apply_homography(h: &Homography, pixel: (f64, f64)) -> Result<(f64, f64), CameraError> {
    let p = h.matrix() * Vector3::new(pixel.0, pixel.1, 1.0);
    if p.z.abs() <= 1e-12 {
        return Err(CameraError::PointAtInfinity);
    }
    Ok((p.x / p.z, p.y / p.z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let axis = nalgebra::Unit::new_normalize(Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ));
        let angle = rng.random_range(-0.3..0.3);
        nalgebra::Rotation3::from_axis_angle(&axis, angle).into_inner()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> RigidPose {
        RigidPose::new(
            random_rotation(rng),
            Vector3::new(
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
            ),
        )
        .unwrap()
    }

    fn random_intrinsics(rng: &mut ChaCha8Rng) -> CameraIntrinsics {
        CameraIntrinsics::new(
            rng.random_range(50.0..200.0),
            rng.random_range(50.0..200.0),
            rng.random_range(-5.0..70.0),
            rng.random_range(-5.0..70.0),
        )
        .unwrap()
    }

    /// Places the 3D point hit by the target-pixel ray on the source-frame
    /// plane, transforms it with the pose, and projects it with the pinhole
    /// model. Independent of the homography algebra.
    fn project_through_plane(
        k_s: &CameraIntrinsics,
        k_t: &CameraIntrinsics,
        pose_tgt_to_src: &RigidPose,
        depth: f64,
        normal: &Vector3<f64>,
        pixel: (f64, f64),
    ) -> Option<(f64, f64)> {
        let dir_t = k_t.backproject(pixel.0, pixel.1);
        // n·(R·(λ·dir) + t) = depth  =>  λ = (depth − n·t) / (n·(R·dir))
        let r_dir = pose_tgt_to_src.rotation() * dir_t;
        let denom = normal.dot(&r_dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let lambda = (depth - normal.dot(pose_tgt_to_src.translation())) / denom;
        if lambda <= 0.0 {
            return None;
        }
        let x_s = pose_tgt_to_src.transform_point(&(dir_t * lambda));
        k_s.project(&x_s)
    }

    #[test]
    fn identity_configuration_gives_identity_matrix() {
        let k = CameraIntrinsics::new(100.0, 100.0, 31.7, 24.2).unwrap();
        let h = homography_source_from_target(
            &k,
            &k,
            &RigidPose::identity(),
            2.5,
            &Vector3::new(0.0, 0.0, 1.0),
        )
        .unwrap();
        assert!(h.is_identity());
        let p = apply_homography(&h, (3.5, 7.25)).unwrap();
        assert_eq!(p, (3.5, 7.25));
    }

    #[test]
    fn translation_example_matches_projection_oracle() {
        // fx=fy=100, cx=cy=0; pose_tgt_to_src = pure translation (0.1, 0, 0);
        // plane z=2. The ray through target pixel (0,0) hits (0,0,2) in the
        // target frame, lands at (0.1, 0, 2) in the source frame, and
        // projects to (+5, 0). The homography must agree.
        let k = CameraIntrinsics::new(100.0, 100.0, 0.0, 0.0).unwrap();
        let pose = RigidPose::from_translation(Vector3::new(0.1, 0.0, 0.0));
        let n = Vector3::new(0.0, 0.0, 1.0);
        let h = homography_source_from_target(&k, &k, &pose, 2.0, &n).unwrap();

        let oracle = project_through_plane(&k, &k, &pose, 2.0, &n, (0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(oracle.0, 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(oracle.1, 0.0, epsilon = 1e-12);

        let mapped = apply_homography(&h, (0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(mapped.0, oracle.0, epsilon = 1e-9);
        assert_abs_diff_eq!(mapped.1, oracle.1, epsilon = 1e-9);
    }

    #[test]
    fn nonpositive_depth_is_rejected() {
        let k = CameraIntrinsics::new(100.0, 100.0, 0.0, 0.0).unwrap();
        let n = Vector3::new(0.0, 0.0, 1.0);
        let err = homography_source_from_target(&k, &k, &RigidPose::identity(), 0.0, &n);
        assert_eq!(err.unwrap_err(), CameraError::NonPositiveDepth(0.0));
    }

    #[test]
    fn pure_scaling_homography() {
        let h = Homography::from_matrix(Matrix3::new(
            2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0,
        ))
        .unwrap();
        assert_eq!(apply_homography(&h, (1.0, 1.0)).unwrap(), (2.0, 2.0));
    }

    #[test]
    fn point_at_infinity_is_reported() {
        let h = Homography::from_matrix(Matrix3::new(
            1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0,
        ))
        .unwrap();
        assert_eq!(
            apply_homography(&h, (-1.0, 5.0)).unwrap_err(),
            CameraError::PointAtInfinity
        );
    }

    #[test]
    fn depth_consistency_over_random_configurations() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = Vector3::new(0.0, 0.0, 1.0);
        let mut checked = 0;
        while checked < 100 {
            let k_s = random_intrinsics(&mut rng);
            let k_t = random_intrinsics(&mut rng);
            let pose = random_pose(&mut rng);
            let depth = rng.random_range(1.0..8.0);
            let pixel = (rng.random_range(0.0..64.0), rng.random_range(0.0..64.0));

            let Some(expected) = project_through_plane(&k_s, &k_t, &pose, depth, &n, pixel) else {
                continue;
            };
            let h = homography_source_from_target(&k_s, &k_t, &pose, depth, &n).unwrap();
            let got = apply_homography(&h, pixel).unwrap();
            assert_abs_diff_eq!(got.0, expected.0, epsilon = 1e-6);
            assert_abs_diff_eq!(got.1, expected.1, epsilon = 1e-6);
            checked += 1;
        }
    }

    #[test]
    fn depth_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = Vector3::new(0.0, 0.0, 1.0);
        for _ in 0..20 {
            let k_s = random_intrinsics(&mut rng);
            let k_t = random_intrinsics(&mut rng);
            let pose = random_pose(&mut rng);
            let depth = rng.random_range(1.0..8.0);
            let h = 1e-5;

            let (_, jac) =
                homography_and_depth_jacobian(&k_s, &k_t, &pose, depth, &n).unwrap();
            let hp = homography_source_from_target(&k_s, &k_t, &pose, depth + h, &n).unwrap();
            let hm = homography_source_from_target(&k_s, &k_t, &pose, depth - h, &n).unwrap();
            let fd = (hp.matrix() - hm.matrix()) / (2.0 * h);
            for i in 0..3 {
                for j in 0..3 {
                    assert_abs_diff_eq!(jac[(i, j)], fd[(i, j)], epsilon = 1e-4);
                }
            }
        }
    }

    #[test]
    fn pose_inverse_examples() {
        assert!(RigidPose::identity().inverse().is_identity());
        let p = RigidPose::from_translation(Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(
            *p.inverse().translation(),
            Vector3::new(-1.0, -2.0, -3.0)
        );
    }

    #[test]
    fn pose_compose_examples() {
        let p = RigidPose::from_translation(Vector3::new(0.3, -0.1, 0.9));
        let id = RigidPose::identity();
        assert_eq!(id.compose(&p), p);
        let a = RigidPose::from_translation(Vector3::new(0.0, 0.0, 1.0));
        let b = RigidPose::from_translation(Vector3::new(0.0, 0.0, 2.0));
        assert_eq!(
            *a.compose(&b).translation(),
            Vector3::new(0.0, 0.0, 3.0)
        );
    }

    #[test]
    fn pose_compose_matches_homogeneous_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let c = a.compose(&b);

            let to4 = |p: &RigidPose| {
                let mut m = nalgebra::Matrix4::<f64>::identity();
                m.fixed_view_mut::<3, 3>(0, 0).copy_from(p.rotation());
                m.fixed_view_mut::<3, 1>(0, 3).copy_from(p.translation());
                m
            };
            let m = to4(&a) * to4(&b);
            for i in 0..3 {
                for j in 0..3 {
                    assert_abs_diff_eq!(c.rotation()[(i, j)], m[(i, j)], epsilon = 1e-12);
                }
                assert_abs_diff_eq!(c.translation()[i], m[(i, 3)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn pose_inverse_is_two_sided_and_compose_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let c = random_pose(&mut rng);

            for p in [a.compose(&a.inverse()), a.inverse().compose(&a)] {
                for i in 0..3 {
                    for j in 0..3 {
                        let expect = if i == j { 1.0 } else { 0.0 };
                        assert_abs_diff_eq!(p.rotation()[(i, j)], expect, epsilon = 1e-9);
                    }
                    assert_abs_diff_eq!(p.translation()[i], 0.0, epsilon = 1e-9);
                }
            }

            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            for i in 0..3 {
                for j in 0..3 {
                    assert_abs_diff_eq!(
                        left.rotation()[(i, j)],
                        right.rotation()[(i, j)],
                        epsilon = 1e-9
                    );
                }
                assert_abs_diff_eq!(left.translation()[i], right.translation()[i], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn rotation_validation_rejects_non_orthonormal() {
        let m = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert_eq!(
            RigidPose::new(m, Vector3::zeros()).unwrap_err(),
            CameraError::NotARotation
        );
    }
}
