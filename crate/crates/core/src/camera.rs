//! Pinhole camera described by a 3×4 projection matrix.

use nalgebra::{Matrix3, Matrix3x4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Image sizes are padded up to multiples of this.
pub const PAD_MULTIPLE: u32 = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("projection matrix has non-finite entries")]
    NonFinite,
    #[error("focal lengths must be positive (fx={fx}, fy={fy})")]
    BadFocal { fx: f64, fy: f64 },
    #[error("left 3×3 block of the projection matrix is singular")]
    Singular,
    #[error("image dimensions must be nonzero")]
    EmptyImage,
}

/// Projection matrix `P` plus image size and padding state.
///
/// `P` maps camera-frame homogeneous points to homogeneous pixels. Its 4th
/// column carries any stereo-rig offset (KITTI `P2`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub projection: Matrix3x4<f64>,
    pub width: u32,
    pub height: u32,
    pub pad_right: u32,
    pub pad_bottom: u32,
}

impl CameraModel {
    pub fn new(projection: Matrix3x4<f64>, width: u32, height: u32) -> Result<Self, CameraError> {
        let cam = Self {
            projection,
            width,
            height,
            pad_right: 0,
            pad_bottom: 0,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera with no rig offset: `P = [K | 0]`.
    pub fn pinhole(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, CameraError> {
        #[rustfmt::skip]
        let p = Matrix3x4::new(
            fx, 0.0, cx, 0.0,
            0.0, fy, cy, 0.0,
            0.0, 0.0, 1.0, 0.0,
        );
        Self::new(p, width, height)
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if self.projection.iter().any(|v| !v.is_finite()) {
            return Err(CameraError::NonFinite);
        }
        let (fx, fy) = (self.fx(), self.fy());
        if !(fx > 0.0 && fy > 0.0) {
            return Err(CameraError::BadFocal { fx, fy });
        }
        if self.left_block().try_inverse().is_none() {
            return Err(CameraError::Singular);
        }
        if self.width == 0 || self.height == 0 {
            return Err(CameraError::EmptyImage);
        }
        Ok(())
    }

    pub fn fx(&self) -> f64 {
        self.projection[(0, 0)]
    }

    pub fn fy(&self) -> f64 {
        self.projection[(1, 1)]
    }

    pub fn cx(&self) -> f64 {
        self.projection[(0, 2)]
    }

    pub fn cy(&self) -> f64 {
        self.projection[(1, 2)]
    }

    pub fn padded_width(&self) -> u32 {
        self.width + self.pad_right
    }

    pub fn padded_height(&self) -> u32 {
        self.height + self.pad_bottom
    }

    /// Copy with padding set so both padded dimensions are multiples of 64.
    pub fn padded(&self) -> CameraModel {
        let up = |v: u32| v.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE - v;
        CameraModel {
            pad_right: up(self.width),
            pad_bottom: up(self.height),
            ..*self
        }
    }

    fn left_block(&self) -> Matrix3<f64> {
        self.projection.fixed_view::<3, 3>(0, 0).into_owned()
    }

    /// Precomputed inverse data for back-projection.
    pub fn back_projector(&self) -> BackProjector {
        let m_inv = self
            .left_block()
            .try_inverse()
            .unwrap_or_else(Matrix3::zeros);
        let p4: Vector3<f64> = self.projection.column(3).into_owned();
        BackProjector {
            m_inv,
            m_inv_p4: m_inv * p4,
        }
    }

    /// Camera-frame position of the projection centre.
    pub fn center(&self) -> Vector3<f64> {
        -self.back_projector().m_inv_p4
    }
}

/// Inverts `P · [X; 1] = w · (u, v, 1)` for points of known camera-frame z.
#[derive(Debug, Clone, Copy)]
pub struct BackProjector {
    m_inv: Matrix3<f64>,
    m_inv_p4: Vector3<f64>,
}

impl BackProjector {
    pub fn center(&self) -> Vector3<f64> {
        -self.m_inv_p4
    }

    /// Camera-frame point at pixel `(u, v)` with camera-frame depth `z`.
    pub fn point(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        let ray = self.m_inv * Vector3::new(u, v, 1.0);
        let w = (z + self.m_inv_p4.z) / ray.z;
        ray * w - self.m_inv_p4
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn padding_to_multiples_of_64() {
        let cam = CameraModel::pinhole(700.0, 700.0, 600.0, 180.0, 1224, 370)
            .unwrap()
            .padded();
        assert_eq!((cam.padded_width(), cam.padded_height()), (1280, 384));
        let cam = CameraModel::pinhole(1.0, 1.0, 0.0, 0.0, 1280, 384)
            .unwrap()
            .padded();
        assert_eq!((cam.pad_right, cam.pad_bottom), (0, 0));
    }

    #[test]
    fn rejects_invalid() {
        assert!(matches!(
            CameraModel::pinhole(0.0, 1.0, 0.0, 0.0, 4, 4),
            Err(CameraError::BadFocal { .. })
        ));
        assert!(matches!(
            CameraModel::pinhole(1.0, 1.0, f64::NAN, 0.0, 4, 4),
            Err(CameraError::NonFinite)
        ));
        assert!(matches!(
            CameraModel::pinhole(1.0, 1.0, 0.0, 0.0, 0, 4),
            Err(CameraError::EmptyImage)
        ));
    }

    #[test]
    fn back_projection_inverts_projection_with_rig_offset() {
        #[rustfmt::skip]
        let p = Matrix3x4::new(
            718.0, 0.0, 607.0, 45.0,
            0.0, 718.0, 185.0, -0.1,
            0.0, 0.0, 1.0, 0.004,
        );
        let cam = CameraModel::new(p, 1241, 376).unwrap();
        let x = Vector3::new(1.5, -0.7, 12.0);
        let h = p * x.push(1.0);
        let (u, v) = (h.x / h.z, h.y / h.z);
        let back = cam.back_projector().point(u, v, x.z);
        assert_abs_diff_eq!(back, x, epsilon = 1e-9);
        let c = cam.center();
        assert_abs_diff_eq!(p * c.push(1.0), Vector3::zeros(), epsilon = 1e-9);
    }
}
