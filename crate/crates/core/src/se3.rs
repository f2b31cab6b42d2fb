//! Quaternion and rigid-transform algebra.
//!
//! Quaternions are scalar-first Hamilton quaternions `(a, b, c, d)` with
//! `a = cos(θ/2)`. Poses are camera-from-map transforms: applying a pose to a
//! map point yields its coordinates in the camera frame (x right, y down,
//! z along the optical axis).

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum norm deviation accepted where a unit quaternion is required.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Tolerance for accepting a 3×3 matrix as a rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseError {
    #[error("quaternion is not unit-norm (norm {norm})")]
    NonUnitQuaternion { norm: f64 },
    #[error("quaternion has zero norm")]
    ZeroQuaternion,
    #[error("matrix is not a rotation (orthonormality deviation {deviation:.3e}, det {det})")]
    NotARotation { deviation: f64, det: f64 },
    #[error("noise bounds must be finite and non-negative")]
    InvalidNoise,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Scalar-first quaternion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        a: 1.0,
        b: 0.0,
        c: 0.0,
        d: 0.0,
    };

    pub const fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        Self { a, b, c, d }
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::IDENTITY;
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let k = s / n;
        Self::new(c, axis.x * k, axis.y * k, axis.z * k)
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.a, self.b, self.c, self.d]
    }

    pub fn vector(&self) -> Vector3<f64> {
        Vector3::new(self.b, self.c, self.d)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Four-dimensional inner product.
    pub fn dot(&self, other: &Quat) -> f64 {
        self.a * other.a + self.b * other.b + self.c * other.c + self.d * other.d
    }

    pub fn scale(&self, k: f64) -> Quat {
        Quat::new(self.a * k, self.b * k, self.c * k, self.d * k)
    }

    pub fn neg(&self) -> Quat {
        self.scale(-1.0)
    }

    pub fn conjugate(&self) -> Quat {
        Quat::new(self.a, -self.b, -self.c, -self.d)
    }

    pub fn normalize(&self) -> Result<Quat, PoseError> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(PoseError::ZeroQuaternion);
        }
        Ok(self.scale(1.0 / n))
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_TOLERANCE
    }

    pub fn ensure_unit(&self) -> Result<(), PoseError> {
        if self.is_unit() {
            Ok(())
        } else {
            Err(PoseError::NonUnitQuaternion { norm: self.norm() })
        }
    }

    /// Inverse of a unit quaternion (its conjugate).
    pub fn inv(&self) -> Result<Quat, PoseError> {
        self.ensure_unit()?;
        Ok(self.conjugate())
    }

    /// Sign representative with non-negative scalar part.
    pub fn canonical(&self) -> Quat {
        if self.a < 0.0 {
            self.neg()
        } else {
            *self
        }
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        2.0 * self.vector().norm().atan2(self.a.abs())
    }

    /// Rotates a vector (assumes unit norm).
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        let u = self.vector();
        let t = 2.0 * u.cross(v);
        v + self.a * t + u.cross(&t)
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let Quat { a, b, c, d } = *self;
        Matrix3::new(
            a * a + b * b - c * c - d * d,
            2.0 * (b * c - a * d),
            2.0 * (b * d + a * c),
            2.0 * (b * c + a * d),
            a * a - b * b + c * c - d * d,
            2.0 * (c * d - a * b),
            2.0 * (b * d - a * c),
            2.0 * (c * d + a * b),
            a * a - b * b - c * c + d * d,
        )
    }

    /// Converts a rotation matrix, rejecting anything that is not
    /// orthonormal with determinant +1 within [`ROTATION_TOLERANCE`].
    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Quat, PoseError> {
        check_rotation(m, ROTATION_TOLERANCE)?;
        Ok(Self::from_matrix_unchecked(m))
    }

    /// Shepperd's method: branch on the largest diagonal term for stability.
    pub(crate) fn from_matrix_unchecked(m: &Matrix3<f64>) -> Quat {
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let q = if trace > 0.0 {
            let s = 2.0 * (trace + 1.0).sqrt();
            Quat::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = 2.0 * (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt();
            Quat::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = 2.0 * (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt();
            Quat::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = 2.0 * (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt();
            Quat::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        let n = q.norm();
        q.scale(1.0 / n)
    }

    /// Rotation `R = Rz(z) · Ry(y) · Rx(x)` (intrinsic Z-Y-X).
    pub fn from_euler_zyx(e: EulerZyx) -> Quat {
        let qz = Quat::from_axis_angle(&Vector3::z(), e.z);
        let qy = Quat::from_axis_angle(&Vector3::y(), e.y);
        let qx = Quat::from_axis_angle(&Vector3::x(), e.x);
        qz * qy * qx
    }

    pub fn to_euler_zyx(&self) -> EulerZyx {
        EulerZyx::from_matrix(&self.to_matrix())
    }

    /// Rotation scaled along its own geodesic from the identity: `t = 0`
    /// gives identity, `t = 1` gives `self` (shortest-arc representative).
    pub fn pow(&self, t: f64) -> Quat {
        let q = self.canonical();
        let v = q.vector();
        let s = v.norm();
        if s == 0.0 {
            return Quat::IDENTITY;
        }
        let half = s.atan2(q.a);
        let (sn, cs) = (t * half).sin_cos();
        let k = sn / s;
        Quat::new(cs, v.x * k, v.y * k, v.z * k)
    }
}

impl Mul for Quat {
    type Output = Quat;

    /// Hamilton product.
    fn mul(self, r: Quat) -> Quat {
        quat_mul(&self, &r)
    }
}

pub fn quat_mul(p: &Quat, q: &Quat) -> Quat {
    Quat::new(
        p.a * q.a - p.b * q.b - p.c * q.c - p.d * q.d,
        p.a * q.b + p.b * q.a + p.c * q.d - p.d * q.c,
        p.a * q.c - p.b * q.d + p.c * q.a + p.d * q.b,
        p.a * q.d + p.b * q.c - p.c * q.b + p.d * q.a,
    )
}

/// Angular distance between two rotations: `atan2(|v|, |a|)` of the relative
/// quaternion `q * inv(q̃)`, in `[0, π/2]`. This is half the geodesic angle.
///
/// `q` must be unit-norm; `q_tilde` is normalized before use.
pub fn angular_distance(q: &Quat, q_tilde: &Quat) -> Result<f64, PoseError> {
    q.ensure_unit()?;
    let qt = q_tilde.normalize()?;
    Ok(relative_angle(&(*q * qt.conjugate())))
}

#[inline]
pub(crate) fn relative_angle(m: &Quat) -> f64 {
    let y = (m.b * m.b + m.c * m.c + m.d * m.d).sqrt();
    y.atan2(m.a.abs())
}

fn check_rotation(m: &Matrix3<f64>, tol: f64) -> Result<(), PoseError> {
    let det = m.determinant();
    let deviation = (m.transpose() * m - Matrix3::identity()).abs().max();
    if !det.is_finite() || !deviation.is_finite() || deviation > tol || (det - 1.0).abs() > tol {
        return Err(PoseError::NotARotation { deviation, det });
    }
    Ok(())
}

/// Projects a near-rotation onto SO(3) (closest rotation in Frobenius norm)
/// if it lies within `tol` of one.
pub fn orthonormalize(m: &Matrix3<f64>, tol: f64) -> Result<Matrix3<f64>, PoseError> {
    check_rotation(m, tol)?;
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * vt;
    }
    Ok(r)
}

/// Intrinsic Z-Y-X Euler angles in radians about the camera axes.
///
/// With the camera convention (x right, y down, z forward), `z` is roll about
/// the optical axis, `y` is yaw about the vertical axis and `x` is pitch
/// about the lateral axis.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EulerZyx {
    pub z: f64,
    pub y: f64,
    pub x: f64,
}

impl EulerZyx {
    pub fn new(z: f64, y: f64, x: f64) -> Self {
        Self { z, y, x }
    }

    pub fn from_matrix(r: &Matrix3<f64>) -> Self {
        let y = (-r[(2, 0)]).atan2((r[(2, 1)].powi(2) + r[(2, 2)].powi(2)).sqrt());
        let z = r[(1, 0)].atan2(r[(0, 0)]);
        let x = r[(2, 1)].atan2(r[(2, 2)]);
        Self { z, y, x }
    }
}

/// Rigid transform: rotation quaternion plus translation in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSE3 {
    pub rotation: Quat,
    pub translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl PoseSE3 {
    pub const IDENTITY: PoseSE3 = PoseSE3 {
        rotation: Quat::IDENTITY,
        translation: Vector3::new(0.0, 0.0, 0.0),
    };

    /// Builds a pose, normalizing the rotation. Fails for non-unit input
    /// beyond [`UNIT_TOLERANCE`].
    pub fn new(rotation: Quat, translation: Vector3<f64>) -> Result<Self, PoseError> {
        rotation.ensure_unit()?;
        Ok(Self {
            rotation: rotation.normalize()?,
            translation,
        })
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Quat::IDENTITY,
            translation: t,
        }
    }

    pub fn from_parts(r: &Matrix3<f64>, t: Vector3<f64>) -> Result<Self, PoseError> {
        Ok(Self {
            rotation: Quat::from_matrix(r)?,
            translation: t,
        })
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_matrix()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Upper 3×4 block `[R | T]`.
    pub fn to_matrix3x4(&self) -> Matrix3x4<f64> {
        self.to_matrix().fixed_view::<3, 4>(0, 0).into_owned()
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self, PoseError> {
        let bottom = m.fixed_view::<1, 4>(3, 0);
        let expected = [0.0, 0.0, 0.0, 1.0];
        let deviation = bottom
            .iter()
            .zip(expected)
            .map(|(x, e)| (x - e).abs())
            .fold(0.0, f64::max);
        if deviation > ROTATION_TOLERANCE {
            return Err(PoseError::NotARotation {
                deviation,
                det: f64::NAN,
            });
        }
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let t: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into_owned();
        Self::from_parts(&r, t)
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        pose_compose(self, other)
    }

    pub fn inverse(&self) -> PoseSE3 {
        pose_inverse(self)
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }
}

impl Mul for PoseSE3 {
    type Output = PoseSE3;

    fn mul(self, rhs: PoseSE3) -> PoseSE3 {
        pose_compose(&self, &rhs)
    }
}

impl fmt::Display for PoseSE3 {
    /// 12 values, row-major `[R | T]`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.to_matrix3x4();
        for row in 0..3 {
            for col in 0..4 {
                if row + col > 0 {
                    f.write_str(" ")?;
                }
                write!(f, "{:e}", m[(row, col)])?;
            }
        }
        Ok(())
    }
}

pub fn pose_compose(h1: &PoseSE3, h2: &PoseSE3) -> PoseSE3 {
    let q = h1.rotation * h2.rotation;
    // Renormalize so long composition chains stay on the sphere.
    let n = q.norm();
    let q = if (n - 1.0).abs() > 8.0 * f64::EPSILON { q.scale(1.0 / n) } else { q };
    PoseSE3 {
        rotation: q,
        translation: h1.rotation.rotate(&h2.translation) + h1.translation,
    }
}

pub fn pose_inverse(h: &PoseSE3) -> PoseSE3 {
    let qi = h.rotation.conjugate();
    PoseSE3 {
        rotation: qi,
        translation: -qi.rotate(&h.translation),
    }
}

/// Parses one KITTI-style pose line (12 row-major values of `[R | T]`).
///
/// `R` is projected onto SO(3) if within `tol` of a rotation.
pub fn parse_pose_line(line: &str, tol: f64) -> Result<PoseSE3, String> {
    let vals = line
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| format!("invalid number {tok:?}"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if vals.len() != 12 {
        return Err(format!("expected 12 values, found {}", vals.len()));
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err("non-finite value".to_string());
    }
    pose_from_3x4(&Matrix3x4::from_row_slice(&vals), tol).map_err(|e| e.to_string())
}

/// Pose from a `[R | T]` block, projecting `R` onto SO(3) if within `tol`.
pub fn pose_from_3x4(m: &Matrix3x4<f64>, tol: f64) -> Result<PoseSE3, PoseError> {
    let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
    let t: Vector3<f64> = m.column(3).into_owned();
    let r = orthonormalize(&r, tol)?;
    Ok(PoseSE3 {
        rotation: Quat::from_matrix_unchecked(&r),
        translation: t,
    })
}

/// Uniform pose-noise bounds: per-axis translation (m) and per Euler axis
/// rotation (rad).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub max_translation: f64,
    pub max_rotation: f64,
}

impl NoiseSpec {
    pub fn new(max_translation: f64, max_rotation: f64) -> Result<Self, PoseError> {
        let s = Self {
            max_translation,
            max_rotation,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn from_degrees(max_translation: f64, max_rotation_deg: f64) -> Result<Self, PoseError> {
        Self::new(max_translation, max_rotation_deg.to_radians())
    }

    pub fn validate(&self) -> Result<(), PoseError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(self.max_translation) && ok(self.max_rotation) {
            Ok(())
        } else {
            Err(PoseError::InvalidNoise)
        }
    }
}

/// A sampled displacement of the camera, expressed in the camera's own frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Displacement {
    /// Camera-frame offset (x lateral, y vertical, z longitudinal), meters.
    pub translation: Vector3<f64>,
    pub euler: EulerZyx,
}

impl Displacement {
    /// The transform mapping displaced-camera coordinates into the original
    /// camera frame.
    pub fn to_pose(&self) -> PoseSE3 {
        PoseSE3 {
            rotation: Quat::from_euler_zyx(self.euler),
            translation: self.translation,
        }
    }

    /// Applies the displacement to a camera-from-map pose.
    pub fn apply_to(&self, h: &PoseSE3) -> PoseSE3 {
        self.to_pose().inverse().compose(h)
    }
}

fn uniform(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    if bound == 0.0 {
        0.0
    } else {
        rng.random_range(-bound..=bound)
    }
}

/// Draws a displacement with each component uniform in its bound.
pub fn sample_displacement(spec: &NoiseSpec, seed: u64) -> Displacement {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Vector3::new(
        uniform(&mut rng, spec.max_translation),
        uniform(&mut rng, spec.max_translation),
        uniform(&mut rng, spec.max_translation),
    );
    let euler = EulerZyx::new(
        uniform(&mut rng, spec.max_rotation),
        uniform(&mut rng, spec.max_rotation),
        uniform(&mut rng, spec.max_rotation),
    );
    Displacement {
        translation: t,
        euler,
    }
}

/// Perturbs a ground-truth pose with uniform noise in the camera's local
/// frame. The returned pose satisfies `pose_error(h_gt, result)` equal to the
/// sampled offsets and angles.
pub fn sample_init_pose(h_gt: &PoseSE3, spec: &NoiseSpec, seed: u64) -> PoseSE3 {
    if spec.max_translation == 0.0 && spec.max_rotation == 0.0 {
        return *h_gt;
    }
    sample_displacement(spec, seed).apply_to(h_gt)
}

/// Six-component pose error of an estimate with respect to ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseErrorVec {
    pub longitudinal: f64,
    pub lateral: f64,
    pub vertical: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    /// Geodesic rotation angle, `2 · angular_distance`.
    pub total_angle: f64,
}

impl PoseErrorVec {
    pub const COMPONENTS: [&'static str; 6] = [
        "longitudinal",
        "lateral",
        "vertical",
        "roll",
        "pitch",
        "yaw",
    ];

    pub fn components(&self) -> [f64; 6] {
        [
            self.longitudinal,
            self.lateral,
            self.vertical,
            self.roll,
            self.pitch,
            self.yaw,
        ]
    }

    pub fn translation_norm(&self) -> f64 {
        (self.longitudinal.powi(2) + self.lateral.powi(2) + self.vertical.powi(2)).sqrt()
    }
}

/// Transform taking estimated-camera coordinates into the ground-truth camera
/// frame. It is also the exact correction for `h_est`.
pub fn relative_to_gt(h_gt: &PoseSE3, h_est: &PoseSE3) -> PoseSE3 {
    h_gt.compose(&h_est.inverse())
}

/// Error of `h_est` expressed in the ground-truth camera frame.
pub fn pose_error(h_gt: &PoseSE3, h_est: &PoseSE3) -> PoseErrorVec {
    let delta = relative_to_gt(h_gt, h_est);
    let t = delta.translation;
    let e = delta.rotation.to_euler_zyx();
    let m = h_gt.rotation * h_est.rotation.conjugate();
    PoseErrorVec {
        longitudinal: t.z,
        lateral: t.x,
        vertical: t.y,
        roll: e.z,
        pitch: e.x,
        yaw: e.y,
        total_angle: 2.0 * relative_angle(&m),
    }
}

/// Formats poses one per line (KITTI convention).
pub fn write_poses(poses: &[PoseSE3]) -> String {
    let mut out = String::new();
    for p in poses {
        out.push_str(&p.to_string());
        out.push('\n');
    }
    out
}
