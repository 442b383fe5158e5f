//! Pinhole projection, inverse projection, and reprojection Jacobians.
//!
//! Poses are world-to-camera. The relative transform of an edge from source
//! frame `i` to target frame `j` is `T_ij = T_j * T_i^-1`, mapping camera-i
//! coordinates into camera-j coordinates.

use nalgebra::{Matrix2x3, Matrix2x6, Matrix3x6, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::{hat, Pose};

pub const DEFAULT_Z_MIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::InvalidInput(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }

    /// Unit-depth ray through pixel `p`.
    #[inline]
    pub fn ray(&self, p: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy, 1.0)
    }

    #[inline]
    fn pinhole(&self, x: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * x.x / x.z + self.cx,
            self.fy * x.y / x.z + self.cy,
        )
    }

    /// Derivative of the pinhole map at camera point `x`.
    #[inline]
    fn pinhole_jacobian(&self, x: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / x.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * x.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * x.y * iz2,
        )
    }
}

/// Jacobians of one reprojected coordinate `p_hat_jk`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjJacobians {
    /// With respect to the left-perturbation twist of the target pose `T_j`.
    pub j_target: Matrix2x6<f64>,
    /// With respect to the left-perturbation twist of the source pose `T_i`.
    pub j_source: Matrix2x6<f64>,
    /// With respect to the patch depth `d_k`.
    pub j_depth: Vector2<f64>,
}

/// Inverse projection `d * K^-1 [p; 1]`.
pub fn unproject(p: &Vector2<f64>, depth: f64, k: &Intrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::InvalidDepth(depth));
    }
    Ok(k.ray(p) * depth)
}

/// Pinhole projection of `t * x`.
pub fn project(t: &Pose, x: &Vector3<f64>, k: &Intrinsics, z_min: f64) -> Result<Vector2<f64>> {
    let xc = t.transform_point(x);
    if !(xc.z > z_min) {
        return Err(Error::Cheirality { z: xc.z });
    }
    Ok(k.pinhole(&xc))
}

/// `T_j * T_i^-1`.
#[inline]
pub fn relative_pose(source: &Pose, target: &Pose) -> Pose {
    target.compose(&source.inverse())
}

/// Reprojection of a patch centered at `p` with depth `depth` in its source
/// frame into the target frame.
pub fn reproject(
    p: &Vector2<f64>,
    depth: f64,
    source: &Pose,
    target: &Pose,
    k: &Intrinsics,
    z_min: f64,
) -> Result<Vector2<f64>> {
    let x = unproject(p, depth, k)?;
    project(&relative_pose(source, target), &x, k, z_min)
}

/// Reprojection together with its analytic Jacobians.
pub fn reproject_with_jacobians(
    p: &Vector2<f64>,
    depth: f64,
    source: &Pose,
    target: &Pose,
    k: &Intrinsics,
    z_min: f64,
) -> Result<(Vector2<f64>, ProjJacobians)> {
    if !(depth > 0.0) {
        return Err(Error::InvalidDepth(depth));
    }
    let ray = k.ray(p);
    let xi = ray * depth;
    let tij = relative_pose(source, target);
    let rij = tij.rotation_matrix();
    let xj = rij * xi + tij.translation();
    if !(xj.z > z_min) {
        return Err(Error::Cheirality { z: xj.z });
    }
    let dpi = k.pinhole_jacobian(&xj);

    let mut dxj = Matrix3x6::zeros();
    dxj.fixed_view_mut::<3, 3>(0, 0).fill_with_identity();
    dxj.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-hat(&xj)));

    let mut dxi = Matrix3x6::zeros();
    dxi.fixed_view_mut::<3, 3>(0, 0).fill_with_identity();
    dxi.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-hat(&xi)));

    let jac = ProjJacobians {
        j_target: dpi * dxj,
        j_source: -(dpi * rij) * dxi,
        j_depth: dpi * (rij * ray),
    };
    Ok((k.pinhole(&xj), jac))
}

/// Analytic Jacobians of the reprojection.
pub fn proj_jacobians(
    p: &Vector2<f64>,
    depth: f64,
    source: &Pose,
    target: &Pose,
    k: &Intrinsics,
    z_min: f64,
) -> Result<ProjJacobians> {
    reproject_with_jacobians(p, depth, source, target, k, z_min).map(|(_, j)| j)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::Twist;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(200.0, 210.0, 160.0, 120.0).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng, t: f64, r: f64) -> Pose {
        Pose::exp(&Twist::from_fn(|i, _| {
            if i < 3 {
                rng.random_range(-t..t)
            } else {
                rng.random_range(-r..r)
            }
        }))
    }

    #[test]
    fn unproject_principal_point_and_unit_offset() {
        let k = k();
        let x = unproject(&Vector2::new(k.cx, k.cy), 2.0, &k).unwrap();
        assert_eq!(x, Vector3::new(0.0, 0.0, 2.0));
        let x = unproject(&Vector2::new(k.cx + k.fx, k.cy), 1.0, &k).unwrap();
        assert_relative_eq!(x, Vector3::new(1.0, 0.0, 1.0));
        assert!(matches!(
            unproject(&Vector2::new(1.0, 1.0), 0.0, &k),
            Err(Error::InvalidDepth(_))
        ));
    }

    #[test]
    fn project_identity_and_round_trip() {
        let k = k();
        let p = project(&Pose::identity(), &Vector3::new(0.0, 0.0, 1.0), &k, DEFAULT_Z_MIN).unwrap();
        assert_eq!(p, Vector2::new(k.cx, k.cy));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let p = Vector2::new(rng.random_range(0.0..320.0), rng.random_range(0.0..240.0));
            let d = rng.random_range(0.2..50.0);
            let x = unproject(&p, d, &k).unwrap();
            let q = project(&Pose::identity(), &x, &k, DEFAULT_Z_MIN).unwrap();
            assert!((p - q).norm() < 1e-10);
        }
    }

    #[test]
    fn project_matches_independent_formula() {
        let k = k();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let t = random_pose(&mut rng, 0.5, 0.3);
            let x = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(3.0..6.0),
            );
            let m = t.to_homogeneous_check();
            let xc = m * x.push(1.0);
            let expected = Vector2::new(
                k.fx * xc.x / xc.z + k.cx,
                k.fy * xc.y / xc.z + k.cy,
            );
            let got = project(&t, &x, &k, DEFAULT_Z_MIN).unwrap();
            assert!((got - expected).norm() < 1e-12 * (1.0 + expected.norm()));
        }
    }

    trait Homogeneous {
        fn to_homogeneous_check(&self) -> nalgebra::Matrix3x4<f64>;
    }

    impl Homogeneous for Pose {
        fn to_homogeneous_check(&self) -> nalgebra::Matrix3x4<f64> {
            let mut m = nalgebra::Matrix3x4::zeros();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
            m.set_column(3, self.translation());
            m
        }
    }

    #[test]
    fn behind_camera_is_reported() {
        let k = k();
        let r = project(&Pose::identity(), &Vector3::new(0.0, 0.0, -1.0), &k, DEFAULT_Z_MIN);
        assert!(matches!(r, Err(Error::Cheirality { .. })));
    }

    #[test]
    fn same_frame_reprojection_is_exact_and_depth_blind() {
        let k = k();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let t = random_pose(&mut rng, 1.0, 0.5);
            let p = Vector2::new(rng.random_range(0.0..320.0), rng.random_range(0.0..240.0));
            let (q, j) = reproject_with_jacobians(&p, 3.0, &t, &t, &k, DEFAULT_Z_MIN).unwrap();
            assert!((q - p).norm() < 1e-9);
            assert!(j.j_depth.norm() < 1e-9);
        }
    }

    #[test]
    fn forward_motion_pushes_points_outward() {
        let k = k();
        let p = Vector2::new(k.cx + 40.0, k.cy - 25.0);
        // target camera 0.5 m closer to the scene along +z
        let target = Pose::from_translation(Vector3::new(0.0, 0.0, -0.5));
        let q = reproject(&p, 4.0, &Pose::identity(), &target, &k, DEFAULT_Z_MIN).unwrap();
        let c = Vector2::new(k.cx, k.cy);
        assert!((q - c).norm() > (p - c).norm());
        let expected = c + (p - c) * (4.0 / 3.5);
        assert!((q - expected).norm() < 1e-9);
    }

    #[test]
    fn jacobians_match_central_differences() {
        let k = k();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let src = random_pose(&mut rng, 0.3, 0.1);
            let tgt = random_pose(&mut rng, 0.3, 0.1);
            let p = Vector2::new(rng.random_range(20.0..300.0), rng.random_range(20.0..220.0));
            let d = rng.random_range(2.0..8.0);
            let (_, j) = reproject_with_jacobians(&p, d, &src, &tgt, &k, DEFAULT_Z_MIN).unwrap();
            let f = |s: &Pose, t: &Pose, d: f64| reproject(&p, d, s, t, &k, DEFAULT_Z_MIN).unwrap();
            let mut num_t = Matrix2x6::zeros();
            let mut num_s = Matrix2x6::zeros();
            for c in 0..6 {
                let mut e = Twist::zeros();
                e[c] = h;
                num_t.set_column(
                    c,
                    &((f(&src, &tgt.retract(&e), d) - f(&src, &tgt.retract(&-e), d)) / (2.0 * h)),
                );
                num_s.set_column(
                    c,
                    &((f(&src.retract(&e), &tgt, d) - f(&src.retract(&-e), &tgt, d)) / (2.0 * h)),
                );
            }
            let num_d = (f(&src, &tgt, d + h) - f(&src, &tgt, d - h)) / (2.0 * h);
            let rel = |a: f64, b: f64| (a - b).abs() / (1.0 + b.abs());
            for (a, b) in j.j_target.iter().zip(num_t.iter()) {
                worst = worst.max(rel(*a, *b));
            }
            for (a, b) in j.j_source.iter().zip(num_s.iter()) {
                worst = worst.max(rel(*a, *b));
            }
            for (a, b) in j.j_depth.iter().zip(num_d.iter()) {
                worst = worst.max(rel(*a, *b));
            }
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn doubling_fx_doubles_first_rows() {
        let k1 = k();
        let k2 = Intrinsics::new(2.0 * k1.fx, k1.fy, k1.cx, k1.cy).unwrap();
        let src = Pose::identity();
        let tgt = Pose::exp(&Twist::new(0.1, -0.05, 0.2, 0.02, 0.03, -0.01));
        // same camera-frame point under both intrinsics
        let x = Vector3::new(0.3, -0.2, 4.0);
        let p1 = Vector2::new(k1.fx * x.x / x.z + k1.cx, k1.fy * x.y / x.z + k1.cy);
        let p2 = Vector2::new(k2.fx * x.x / x.z + k2.cx, k2.fy * x.y / x.z + k2.cy);
        let j1 = proj_jacobians(&p1, 4.0, &src, &tgt, &k1, DEFAULT_Z_MIN).unwrap();
        let j2 = proj_jacobians(&p2, 4.0, &src, &tgt, &k2, DEFAULT_Z_MIN).unwrap();
        for c in 0..6 {
            assert_relative_eq!(j2.j_target[(0, c)], 2.0 * j1.j_target[(0, c)], max_relative = 1e-12);
            assert_relative_eq!(j2.j_target[(1, c)], j1.j_target[(1, c)], max_relative = 1e-12);
        }
        assert_relative_eq!(j2.j_depth[0], 2.0 * j1.j_depth[0], max_relative = 1e-12);
    }

    #[test]
    fn depth_jacobian_depends_on_linearization_depth() {
        let k = k();
        let tgt = Pose::from_translation(Vector3::new(0.2, 0.0, 0.1));
        let p = Vector2::new(180.0, 100.0);
        let a = proj_jacobians(&p, 3.0, &Pose::identity(), &tgt, &k, DEFAULT_Z_MIN).unwrap();
        let b = proj_jacobians(&p, 6.0, &Pose::identity(), &tgt, &k, DEFAULT_Z_MIN).unwrap();
        assert!((a.j_depth - b.j_depth).norm() > 1e-3);
    }
}
