//! Rotation and Euler-angle kinematics shared by every other module.
//!
//! Conventions, fixed once here and assumed everywhere else:
//! - Euler angles are ZYX: `R(th) = Rz(yaw) * Ry(pitch) * Rx(roll)`, with
//!   `th = (roll, pitch, yaw)`.
//! - Angular velocity `w` is expressed in the world frame, so
//!   `Rdot = skew(w) * R` and Euler rates follow `thdot = A(th) * w`.
//! - The Euler-rate map `A(th)` is singular at `|pitch| = pi/2`; calls inside
//!   the guard band `|pitch| >= pi/2 - GIMBAL_GUARD` are rejected instead of
//!   silently amplifying noise.
//!
//! Besides the maps themselves this module carries their first and second
//! partial derivatives (hand-derived, used by the constraint linearizations)
//! and [`finite_difference_jacobian`], the central-difference oracle used by
//! the test suite to cross-check every analytic Jacobian in the crate.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Width of the pitch guard band around the kinematic singularity, rad.
pub const GIMBAL_GUARD: f64 = 0.05;

/// Errors raised by the kinematic maps.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpatialError {
    /// Pitch is within [`GIMBAL_GUARD`] of +-pi/2 where `A(th)` blows up.
    #[error("pitch {pitch:.4} rad is within {GIMBAL_GUARD} rad of the Euler-rate singularity")]
    GimbalProximity { pitch: f64 },
}

/// ZYX Euler angles (roll about x, pitch about y, yaw about z), radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EulerAngles {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl EulerAngles {
    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self { roll, pitch, yaw }
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self { roll: v.x, pitch: v.y, yaw: v.z }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.roll, self.pitch, self.yaw)
    }

    /// True when pitch sits inside the singularity guard band.
    pub fn near_gimbal(&self) -> bool {
        self.pitch.abs() >= std::f64::consts::FRAC_PI_2 - GIMBAL_GUARD
    }
}

/// Skew-symmetric (cross-product) matrix: `skew(a) * b == a.cross(&b)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// World-from-body rotation `Rz(yaw) * Ry(pitch) * Rx(roll)`.
pub fn rotation_from_euler(th: &EulerAngles) -> Matrix3<f64> {
    let (sr, cr) = th.roll.sin_cos();
    let (sp, cp) = th.pitch.sin_cos();
    let (sy, cy) = th.yaw.sin_cos();
    Matrix3::new(
        cy * cp,
        cy * sp * sr - sy * cr,
        cy * sp * cr + sy * sr,
        sy * cp,
        sy * sp * sr + cy * cr,
        sy * sp * cr - cy * sr,
        -sp,
        cp * sr,
        cp * cr,
    )
}

/// Inverse of [`rotation_from_euler`] with pitch in (-pi/2, pi/2).
pub fn euler_from_rotation(r: &Matrix3<f64>) -> EulerAngles {
    EulerAngles {
        roll: r[(2, 1)].atan2(r[(2, 2)]),
        pitch: (-r[(2, 0)]).clamp(-1.0, 1.0).asin(),
        yaw: r[(1, 0)].atan2(r[(0, 0)]),
    }
}

/// Max abs deviation of `R^T R` from identity plus `|det - 1|`; 0 for a
/// perfect rotation. Used by validity checks and tests.
pub fn rotation_defect(r: &Matrix3<f64>) -> f64 {
    let gram = r.transpose() * r - Matrix3::identity();
    gram.amax() + (r.determinant() - 1.0).abs()
}

/// Partial derivatives of `R(th)` with respect to (roll, pitch, yaw).
///
/// Closed forms follow from `dRx/droll = Rx * skew(ex)` (and cyclic):
/// `dR/droll = R*skew(ex)`, `dR/dpitch = Rz*Ry*skew(ey)*Rx`,
/// `dR/dyaw = skew(ez)*R`.
pub fn rotation_partials(th: &EulerAngles) -> [Matrix3<f64>; 3] {
    let r = rotation_from_euler(th);
    let (sr, cr) = th.roll.sin_cos();
    let (sp, cp) = th.pitch.sin_cos();
    let (sy, cy) = th.yaw.sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr);
    let rzry = Matrix3::new(cy * cp, -sy, cy * sp, sy * cp, cy, sy * sp, -sp, 0.0, cp);
    let ex = skew(&Vector3::x());
    let ey = skew(&Vector3::y());
    let ez = skew(&Vector3::z());
    [r * ex, rzry * ey * rx, ez * r]
}

/// Euler-rate map `A(th)`: `thdot = A(th) * w` with `w` in the world frame.
///
/// Rows are ordered (roll, pitch, yaw). At `th = 0` the map is the identity;
/// it is invertible away from `|pitch| = pi/2` and this function refuses the
/// guard band around that singularity.
pub fn euler_rate_map(th: &EulerAngles) -> Result<Matrix3<f64>, SpatialError> {
    if th.near_gimbal() {
        return Err(SpatialError::GimbalProximity { pitch: th.pitch });
    }
    Ok(euler_rate_map_unchecked(th))
}

fn euler_rate_map_unchecked(th: &EulerAngles) -> Matrix3<f64> {
    let (sp, cp) = th.pitch.sin_cos();
    let (sy, cy) = th.yaw.sin_cos();
    let tp = sp / cp;
    Matrix3::new(cy / cp, sy / cp, 0.0, -sy, cy, 0.0, cy * tp, sy * tp, 1.0)
}

/// Inverse Euler-rate map: `w = euler_rate_map_inverse(th) * thdot`.
///
/// Columns are the world-frame axes each Euler rate rotates about:
/// `[Rz*Ry*ex | Rz*ey | ez]`.
pub fn euler_rate_map_inverse(th: &EulerAngles) -> Matrix3<f64> {
    let (sp, cp) = th.pitch.sin_cos();
    let (sy, cy) = th.yaw.sin_cos();
    Matrix3::new(cy * cp, -sy, 0.0, sy * cp, cy, 0.0, -sp, 0.0, 1.0)
}

/// Euler rates for a world-frame angular velocity.
pub fn euler_rate(th: &EulerAngles, w: &Vector3<f64>) -> Result<Vector3<f64>, SpatialError> {
    Ok(euler_rate_map(th)? * w)
}

/// 2-norm condition number of `A(th)`; finite inside the guard band.
pub fn euler_rate_condition(th: &EulerAngles) -> f64 {
    let svd = euler_rate_map_unchecked(th).svd(false, false);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Partials of `A(th)` with respect to (roll, pitch, yaw).
///
/// `A` does not depend on roll, so the first entry is zero.
pub fn euler_rate_map_partials(th: &EulerAngles) -> [Matrix3<f64>; 3] {
    let (sp, cp) = th.pitch.sin_cos();
    let (sy, cy) = th.yaw.sin_cos();
    let cp2 = cp * cp;
    let tp = sp / cp;
    let d_pitch = Matrix3::new(
        cy * sp / cp2,
        sy * sp / cp2,
        0.0,
        0.0,
        0.0,
        0.0,
        cy / cp2,
        sy / cp2,
        0.0,
    );
    let d_yaw = Matrix3::new(
        -sy / cp,
        cy / cp,
        0.0,
        -cy,
        -sy,
        0.0,
        -sy * tp,
        cy * tp,
        0.0,
    );
    [Matrix3::zeros(), d_pitch, d_yaw]
}

/// Second partials `d^2 A / dth_i dth_j` as a symmetric 3x3 grid of 3x3
/// blocks. Every block touching roll is zero.
pub fn euler_rate_map_second_partials(th: &EulerAngles) -> [[Matrix3<f64>; 3]; 3] {
    let (sp, cp) = th.pitch.sin_cos();
    let (sy, cy) = th.yaw.sin_cos();
    let cp2 = cp * cp;
    let cp3 = cp2 * cp;
    let tp = sp / cp;
    let d_pp = Matrix3::new(
        cy * (1.0 + sp * sp) / cp3,
        sy * (1.0 + sp * sp) / cp3,
        0.0,
        0.0,
        0.0,
        0.0,
        2.0 * cy * sp / cp3,
        2.0 * sy * sp / cp3,
        0.0,
    );
    let d_py = Matrix3::new(
        -sy * sp / cp2,
        cy * sp / cp2,
        0.0,
        0.0,
        0.0,
        0.0,
        -sy / cp2,
        cy / cp2,
        0.0,
    );
    let d_yy = Matrix3::new(
        -cy / cp,
        -sy / cp,
        0.0,
        sy,
        -cy,
        0.0,
        -cy * tp,
        -sy * tp,
        0.0,
    );
    let z = Matrix3::zeros();
    [[z, z, z], [z, d_pp, d_py], [z, d_py, d_yy]]
}

/// Central-difference Jacobian of `f` at `x` with half-step `step`.
///
/// Column `j` is `(f(x + step*e_j) - f(x - step*e_j)) / (2*step)`. This is
/// the oracle every analytic Jacobian in the crate is tested against; it is
/// O(step^2) accurate, so `step` around 1e-6 resolves smooth maps to ~1e-9.
pub fn finite_difference_jacobian<F>(f: F, x: &DVector<f64>, step: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let fx = f(x);
    let mut jac = DMatrix::zeros(fx.len(), x.len());
    let mut xp = x.clone();
    for j in 0..x.len() {
        let base = x[j];
        xp[j] = base + step;
        let fp = f(&xp);
        xp[j] = base - step;
        let fm = f(&xp);
        xp[j] = base;
        jac.set_column(j, &((fp - fm) / (2.0 * step)));
    }
    jac
}

/// Relative deviation `max|a - b| / max(1, |a|_inf, |b|_inf)` between two
/// Jacobians; shared by the derivative cross-check tests.
pub fn jacobian_relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "jacobian shapes must agree");
    let scale = 1.0_f64.max(a.amax()).max(b.amax());
    (a - b).amax() / scale
}
