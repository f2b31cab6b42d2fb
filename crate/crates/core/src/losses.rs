//! Pose-regression objective: smooth-L1 on translation plus the quaternion
//! angular distance on rotation.
//!
//! The rotation term `atan2(|v|, |a|)` of the relative quaternion `m` could
//! only hit the non-differentiable set of `atan2(y, x)` (`y = 0, x <= 0`) when
//! `a = 0` and `|v| = 0` simultaneously, which no unit quaternion satisfies.
//! Near `a = 0` only the `|a|` kink remains, where the loss stays finite and
//! its one-sided derivatives are bounded.

use nalgebra::{Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::se3::{relative_angle, PoseError, Quat};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("predicted quaternion has zero norm")]
    ZeroPrediction,
    #[error(transparent)]
    Pose(#[from] PoseError),
}

/// Regression target: translation (m) and unit rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseTarget {
    pub translation: Vector3<f64>,
    pub rotation: Quat,
}

impl PoseTarget {
    pub fn identity() -> Self {
        Self {
            translation: Vector3::zeros(),
            rotation: Quat::IDENTITY,
        }
    }
}

/// Elementwise smooth-L1 with transition at 1.
#[inline]
pub fn smooth_l1(x: f64) -> f64 {
    let ax = x.abs();
    if ax < 1.0 {
        0.5 * x * x
    } else {
        ax - 0.5
    }
}

/// Sum of smooth-L1 over the three translation components.
pub fn translation_loss(t_pred: &Vector3<f64>, t_gt: &Vector3<f64>) -> f64 {
    (t_pred - t_gt).iter().map(|&d| smooth_l1(d)).sum()
}

/// Angular distance between `q_gt` and the normalized raw prediction.
pub fn rotation_loss(q_gt: &Quat, q_pred_raw: &[f64; 4]) -> Result<f64, LossError> {
    q_gt.ensure_unit()?;
    let q_pred = normalized(q_pred_raw)?;
    Ok(relative_angle(&(*q_gt * q_pred.conjugate())))
}

/// Unweighted sum of translation and rotation losses.
pub fn total_loss(
    t_pred: &Vector3<f64>,
    t_gt: &Vector3<f64>,
    q_gt: &Quat,
    q_pred_raw: &[f64; 4],
) -> Result<f64, LossError> {
    Ok(translation_loss(t_pred, t_gt) + rotation_loss(q_gt, q_pred_raw)?)
}

/// Loss with an optional weight on the rotation term (1.0 reproduces
/// [`total_loss`]).
pub fn weighted_total_loss(
    t_pred: &Vector3<f64>,
    t_gt: &Vector3<f64>,
    q_gt: &Quat,
    q_pred_raw: &[f64; 4],
    rotation_weight: f64,
) -> Result<f64, LossError> {
    Ok(translation_loss(t_pred, t_gt) + rotation_weight * rotation_loss(q_gt, q_pred_raw)?)
}

fn normalized(raw: &[f64; 4]) -> Result<Quat, LossError> {
    Quat::from_array(*raw)
        .normalize()
        .map_err(|_| LossError::ZeroPrediction)
}

/// Analytic (sub)gradient of [`rotation_loss`] with respect to the raw,
/// unnormalized prediction. At the kinks (`a = 0` or `v = 0`) the zero
/// subgradient is used for the non-smooth factor.
pub fn rotation_loss_grad(q_gt: &Quat, q_pred_raw: &[f64; 4]) -> Result<[f64; 4], LossError> {
    q_gt.ensure_unit()?;
    let raw = Vector4::from(*q_pred_raw);
    let n = raw.norm();
    if n == 0.0 || !n.is_finite() {
        return Err(LossError::ZeroPrediction);
    }
    let p = raw / n;
    let m = *q_gt * Quat::new(p[0], -p[1], -p[2], -p[3]);

    // D = atan2(y, x), y = |v|, x = |a|.
    let y = (m.b * m.b + m.c * m.c + m.d * m.d).sqrt();
    let x = m.a.abs();
    let r2 = x * x + y * y;
    let dd_dx = -y / r2;
    let dd_dy = x / r2;
    let sign_a = if m.a > 0.0 {
        1.0
    } else if m.a < 0.0 {
        -1.0
    } else {
        0.0
    };
    let dy_dv = if y > 0.0 {
        Vector3::new(m.b, m.c, m.d) / y
    } else {
        Vector3::zeros()
    };
    let g_m = Vector4::new(
        dd_dx * sign_a,
        dd_dy * dy_dv.x,
        dd_dy * dy_dv.y,
        dd_dy * dy_dv.z,
    );

    // m = L(q_gt) · diag(1, -1, -1, -1) · p, with L the left-multiplication matrix.
    let (a, b, c, d) = (q_gt.a, q_gt.b, q_gt.c, q_gt.d);
    #[rustfmt::skip]
    let left = Matrix4::new(
        a, -b, -c, -d,
        b,  a, -d,  c,
        c,  d,  a, -b,
        d, -c,  b,  a,
    );
    let conj = Matrix4::from_diagonal(&Vector4::new(1.0, -1.0, -1.0, -1.0));
    let g_p = (left * conj).transpose() * g_m;
    // Normalization Jacobian: (I - p pᵀ) / |raw|.
    let g_raw = (g_p - p * p.dot(&g_p)) / n;
    Ok([g_raw[0], g_raw[1], g_raw[2], g_raw[3]])
}

/// Central-difference gradient `(f(x + ε e_i) − f(x − ε e_i)) / 2ε`.
pub fn numerical_gradient<F>(f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let hi = f(&probe);
            probe[i] = x[i] - eps;
            let lo = f(&probe);
            probe[i] = x[i];
            (hi - lo) / (2.0 * eps)
        })
        .collect()
}
