//! Rigid and similarity transforms in 3D.
//!
//! Poses are stored as a unit quaternion plus a translation and act on points
//! as `x' = R x + t`. Tangent vectors ([`Twist`]) are ordered translation
//! first: `(v, w)`. Every pose Jacobian in this crate uses the left
//! perturbation `T <- exp(xi) * T`.

use nalgebra::{Matrix3, Matrix6, Quaternion, UnitQuaternion, Vector3, Vector6, SVD};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Tangent coordinates of SE(3): `[v_x, v_y, v_z, w_x, w_y, w_z]`.
pub type Twist = Vector6<f64>;

/// Margin below pi beyond which the logarithm is refused.
pub const LOG_PI_MARGIN: f64 = 1e-6;

const SMALL_ANGLE: f64 = 1e-8;
const SERIES_ANGLE: f64 = 1e-2;

/// Skew-symmetric matrix of `w`, so that `hat(w) * x == w.cross(&x)`.
#[inline]
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// `(1 - cos t) / t^2`, stable for small `t`.
fn one_minus_cos_over_sq(theta: f64) -> f64 {
    if theta < SMALL_ANGLE {
        0.5
    } else {
        let s = (0.5 * theta).sin();
        2.0 * s * s / (theta * theta)
    }
}

/// `(t - sin t) / t^3`.
fn t_minus_sin_over_cube(theta: f64) -> f64 {
    if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    } else {
        (theta - theta.sin()) / (theta * theta * theta)
    }
}

/// Rotation exponential from a rotation vector, as a unit quaternion.
pub fn so3_exp(w: &Vector3<f64>) -> UnitQuaternion<f64> {
    let theta = w.norm();
    let half = 0.5 * theta;
    // sin(theta/2) / theta
    let k = if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        0.5 - t2 / 48.0 + t2 * t2 / 3840.0
    } else {
        half.sin() / theta
    };
    UnitQuaternion::new_normalize(Quaternion::new(half.cos(), k * w.x, k * w.y, k * w.z))
}

/// Rotation logarithm. The result has norm in `[0, pi]`.
pub fn so3_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let mut w = q.w;
    let mut v = q.imag();
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let n = v.norm();
    let theta = 2.0 * n.atan2(w);
    // theta / |v|
    let k = if n < SERIES_ANGLE {
        // 2 atan(n/w)/n = (2/w)(1 - n^2/(3w^2) + n^4/(5w^4))
        let r2 = n * n / (w * w);
        2.0 / w * (1.0 - r2 / 3.0 + r2 * r2 / 5.0)
    } else {
        theta / n
    };
    v * k
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let h = hat(w);
    Matrix3::identity() + h * one_minus_cos_over_sq(theta) + h * h * t_minus_sin_over_cube(theta)
}

/// Inverse of the SO(3) left Jacobian.
pub fn so3_left_jacobian_inv(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let h = hat(w);
    // (1 - (t/2) cot(t/2)) / t^2
    let c = if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / (theta * theta)
    };
    Matrix3::identity() - h * 0.5 + h * h * c
}

/// The coupling block of the SE(3) left Jacobian.
fn se3_q_block(v: &Vector3<f64>, w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let (c1, c2, c3) = if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        (
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
            1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0,
            1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        (
            (theta - s) / (t2 * theta),
            (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta),
        )
    };
    let vx = hat(v);
    let wx = hat(w);
    let wv = wx * vx;
    let vw = vx * wx;
    let wvw = wv * wx;
    vx * 0.5 + (wv + vw + wvw) * c1 + (wx * wv + vw * wx - wvw * 3.0) * c2
        + (wvw * wx + wx * wvw) * c3
}

/// Left Jacobian of SE(3): `exp(xi + e) ~= exp(J_l(xi) e) exp(xi)`.
pub fn se3_left_jacobian(xi: &Twist) -> Matrix6<f64> {
    let v = xi.fixed_rows::<3>(0).into_owned();
    let w = xi.fixed_rows::<3>(3).into_owned();
    let j = so3_left_jacobian(&w);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&se3_q_block(&v, &w));
    out
}

/// Inverse of the SE(3) left Jacobian, in closed block form.
pub fn se3_left_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    let v = xi.fixed_rows::<3>(0).into_owned();
    let w = xi.fixed_rows::<3>(3).into_owned();
    let ji = so3_left_jacobian_inv(&w);
    let q = se3_q_block(&v, &w);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&ji);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&ji);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-ji * q * ji));
    out
}

/// Inverse of the SE(3) right Jacobian, `J_r(xi) = J_l(-xi)`.
pub fn se3_right_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    se3_left_jacobian_inv(&(-xi))
}

/// Rigid transform in SE(3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Closed-form SE(3) exponential.
    pub fn exp(xi: &Twist) -> Self {
        let v = xi.fixed_rows::<3>(0).into_owned();
        let w = xi.fixed_rows::<3>(3).into_owned();
        let rotation = so3_exp(&w);
        let translation = so3_left_jacobian(&w) * v;
        Self {
            rotation,
            translation,
        }
    }

    /// SE(3) logarithm. Fails when the rotation angle is within
    /// [`LOG_PI_MARGIN`] of pi.
    pub fn log(&self) -> Result<Twist> {
        let w = so3_log(&self.rotation);
        let angle = w.norm();
        if angle >= std::f64::consts::PI - LOG_PI_MARGIN {
            return Err(Error::AmbiguousLog { angle });
        }
        let v = so3_left_jacobian_inv(&w) * self.translation;
        Ok(Twist::new(v.x, v.y, v.z, w.x, w.y, w.z))
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let q = self.rotation.into_inner() * other.rotation.into_inner();
        Pose {
            rotation: UnitQuaternion::new_normalize(q),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            rotation: UnitQuaternion::new_normalize(inv.into_inner()),
            translation: -(inv * self.translation),
        }
    }

    #[inline]
    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// Left retraction `exp(xi) * self`.
    pub fn retract(&self, xi: &Twist) -> Pose {
        Pose::exp(xi).compose(self)
    }

    /// Position of the frame origin: for a world-to-camera pose this is the
    /// camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Adjoint matrix, `T exp(xi) T^-1 = exp(Ad_T xi)`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation_matrix();
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(hat(&self.translation) * r));
        ad
    }

    /// Geodesic distance `|log(other^-1 * self)|`.
    pub fn distance(&self, other: &Pose) -> Result<f64> {
        Ok(other.inverse().compose(self).log()?.norm())
    }

    /// `[qw, qx, qy, qz, tx, ty, tz]`.
    pub fn to_array(&self) -> [f64; 7] {
        let q = self.rotation.quaternion();
        let t = &self.translation;
        [q.w, q.i, q.j, q.k, t.x, t.y, t.z]
    }

    /// Inverse of [`Pose::to_array`]. Quaternions already on the unit sphere
    /// (to 1e-12) are kept bit-for-bit; others are renormalized.
    pub fn from_array(a: [f64; 7]) -> Result<Pose> {
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite pose component".into()));
        }
        let q = Quaternion::new(a[0], a[1], a[2], a[3]);
        let n = q.norm();
        if n < 1e-12 {
            return Err(Error::InvalidInput("zero quaternion".into()));
        }
        let rotation = if (n - 1.0).abs() < 1e-12 {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::new_normalize(q)
        };
        Ok(Pose::new(rotation, Vector3::new(a[4], a[5], a[6])))
    }
}

impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let a = <[f64; 7]>::deserialize(d)?;
        Pose::from_array(a).map_err(serde::de::Error::custom)
    }
}

/// Similarity transform `x -> s R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sim3 {
    pub scale: f64,
    pub pose: Pose,
}

impl Sim3 {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            pose: Pose::identity(),
        }
    }

    pub fn new(scale: f64, pose: Pose) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidInput(format!("sim3 scale must be positive, got {scale}")));
        }
        Ok(Self { scale, pose })
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.pose.rotation() * x * self.scale + self.pose.translation()
    }

    pub fn inverse(&self) -> Sim3 {
        let rinv = self.pose.rotation().inverse();
        let s = 1.0 / self.scale;
        Sim3 {
            scale: s,
            pose: Pose::new(rinv, -(rinv * self.pose.translation()) * s),
        }
    }
}

/// Closed-form similarity alignment (Umeyama): returns `S` minimizing
/// `sum |gt_i - S(est_i)|^2`.
pub fn umeyama_sim3(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<Sim3> {
    if est.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "alignment needs equal lengths, got {} and {}",
            est.len(),
            gt.len()
        )));
    }
    if est.len() < 3 {
        return Err(Error::DegenerateAlignment("fewer than three point pairs"));
    }
    let n = est.len() as f64;
    let mu_e = est.iter().sum::<Vector3<f64>>() / n;
    let mu_g = gt.iter().sum::<Vector3<f64>>() / n;

    let mut cov = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    let mut var_e = 0.0;
    for (e, g) in est.iter().zip(gt) {
        let de = e - mu_e;
        let dg = g - mu_g;
        cov += dg * de.transpose();
        scatter += de * de.transpose();
        var_e += de.norm_squared();
    }
    cov /= n;
    scatter /= n;
    var_e /= n;

    let mut ev = scatter.symmetric_eigenvalues().as_slice().to_vec();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 1e-300) || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::DegenerateAlignment("source points are collinear or coincident"));
    }

    let svd = SVD::new(cov, true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::DegenerateAlignment("SVD failed")),
    };
    // reflection fix goes on the smallest singular value
    let sv = svd.singular_values;
    let smallest = (0..3)
        .min_by(|&a, &b| sv[a].total_cmp(&sv[b]))
        .unwrap_or(2);
    let mut dd = Vector3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        dd[smallest] = -1.0;
    }
    let r = u * Matrix3::from_diagonal(&dd) * v_t;
    let trace_ds: f64 = (0..3).map(|i| sv[i] * dd[i]).sum();
    let scale = trace_ds / var_e;
    if !(scale > 0.0) {
        return Err(Error::DegenerateAlignment("non-positive scale"));
    }
    let rotation = UnitQuaternion::from_matrix(&r);
    let t = mu_g - rotation * mu_e * scale;
    Sim3::new(scale, Pose::new(rotation, t))
}

/// Root-mean-square distance between `gt` and `est` after similarity
/// alignment of `est` onto `gt`.
pub fn aligned_rmse(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    let s = umeyama_sim3(est, gt)?;
    let sum: f64 = est
        .iter()
        .zip(gt)
        .map(|(e, g)| (g - s.transform_point(e)).norm_squared())
        .sum();
    Ok((sum / est.len() as f64).sqrt())
}

/// Absolute trajectory error: RMSE of camera centers after Sim(3) alignment.
pub fn ate(est: &[Pose], gt: &[Pose]) -> Result<f64> {
    if est.len() != gt.len() {
        return Err(Error::InvalidInput("trajectories differ in length".into()));
    }
    let e: Vec<_> = est.iter().map(Pose::center).collect();
    let g: Vec<_> = gt.iter().map(Pose::center).collect();
    aligned_rmse(&e, &g)
}
