//! Occlusion estimation on rendered depth images.
//!
//! A pixel `p_j` with back-projected point `P_j` is hidden when some strictly
//! closer pixel `p_i` in its `window × window` neighbourhood lies within
//! `angle_min` of the line of sight from `P_j` to the projection centre,
//! i.e. `ϑ = arccos(v · c) < angle_min` with `v` the unit vector from `P_j`
//! to the centre and `c` the unit vector from `P_j` to `P_i`.

use std::f64::consts::FRAC_PI_2;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::projection::DepthImage;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OcclusionError {
    #[error("occlusion window must be odd and >= 3, got {0}")]
    BadWindow(usize),
    #[error("occlusion angle must lie in (0, pi/2), got {0}")]
    BadAngle(f64),
    #[error("occlusion threshold must be positive and finite, got {0}")]
    BadThreshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionParams {
    /// Neighbourhood side in pixels (odd).
    pub window: usize,
    /// Opaque threshold value carried from configuration.
    pub threshold: f64,
    /// Cone half-aperture in radians used by the decision rule.
    pub angle_min: f64,
}

impl Default for OcclusionParams {
    fn default() -> Self {
        Self::from_threshold(5, 3.0).expect("default occlusion params are valid")
    }
}

/// Maps the configured threshold onto the cone aperture:
/// `angle_min = π/2 − atan(threshold)`. Larger thresholds filter less.
pub fn threshold_to_angle(threshold: f64) -> f64 {
    FRAC_PI_2 - threshold.atan()
}

impl OcclusionParams {
    pub fn from_threshold(window: usize, threshold: f64) -> Result<Self, OcclusionError> {
        if !(threshold > 0.0 && threshold.is_finite()) {
            return Err(OcclusionError::BadThreshold(threshold));
        }
        let p = Self {
            window,
            threshold,
            angle_min: threshold_to_angle(threshold),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_angle(window: usize, angle_min: f64) -> Result<Self, OcclusionError> {
        let p = Self {
            window,
            threshold: angle_min.tan().recip(),
            angle_min,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), OcclusionError> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(OcclusionError::BadWindow(self.window));
        }
        if !(self.angle_min > 0.0 && self.angle_min < FRAC_PI_2) {
            return Err(OcclusionError::BadAngle(self.angle_min));
        }
        Ok(())
    }
}

/// Zeroes hidden pixels. Returns a fresh image; the input is untouched.
pub fn occlusion_filter(
    img: &DepthImage,
    params: &OcclusionParams,
) -> Result<DepthImage, OcclusionError> {
    let mask = visibility_mask(img, params)?;
    let mut out = img.clone();
    for (d, visible) in out.depth.iter_mut().zip(mask) {
        if !visible {
            *d = 0.0;
        }
    }
    Ok(out)
}

/// Visibility of every pixel (`false` for empty pixels).
pub fn visibility_mask(
    img: &DepthImage,
    params: &OcclusionParams,
) -> Result<Vec<bool>, OcclusionError> {
    params.validate()?;
    let (w, h) = (img.width as usize, img.height as usize);
    let bp = img.camera.back_projector();
    let center = bp.center();

    // Back-project once; empty pixels keep a zero point and are skipped by depth.
    let mut points = vec![Vector3::zeros(); w * h];
    for (i, &d) in img.depth.iter().enumerate() {
        if d > 0.0 {
            points[i] = bp.point((i % w) as f64, (i / w) as f64, d as f64);
        }
    }

    let r = params.window / 2;
    let cos_min = params.angle_min.cos();
    let cos2 = cos_min * cos_min;
    let mut mask = vec![false; w * h];
    mask.par_chunks_mut(w).enumerate().for_each(|(v, row)| {
        let (v0, v1) = (v.saturating_sub(r), (v + r).min(h - 1));
        for (u, out) in row.iter_mut().enumerate() {
            let j = v * w + u;
            let dj = img.depth[j];
            if dj <= 0.0 {
                continue;
            }
            let pj = points[j];
            let view = (center - pj).normalize();
            let (u0, u1) = (u.saturating_sub(r), (u + r).min(w - 1));
            let mut hidden = false;
            'scan: for nv in v0..=v1 {
                for nu in u0..=u1 {
                    let i = nv * w + nu;
                    let di = img.depth[i];
                    if !(di > 0.0 && di < dj) {
                        continue;
                    }
                    let diff = points[i] - pj;
                    let dot = view.dot(&diff);
                    // ϑ < angle_min  ⇔  cos ϑ > cos(angle_min) with cos(angle_min) > 0.
                    if dot > 0.0 && dot * dot > cos2 * diff.norm_squared() {
                        hidden = true;
                        break 'scan;
                    }
                }
            }
            *out = !hidden;
        }
    });
    Ok(mask)
}

/// Reference implementation: direct double loop evaluating `ϑ` with
/// `arccos` for every neighbour, no precomputation or early exit.
pub fn brute_force_visibility(
    img: &DepthImage,
    params: &OcclusionParams,
) -> Result<Vec<bool>, OcclusionError> {
    params.validate()?;
    let (w, h) = (img.width as i64, img.height as i64);
    let r = (params.window / 2) as i64;
    let bp = img.camera.back_projector();
    let mut mask = vec![false; (w * h) as usize];
    for v in 0..h {
        for u in 0..w {
            let dj = img.depth[(v * w + u) as usize];
            if dj <= 0.0 {
                continue;
            }
            let pj = bp.point(u as f64, v as f64, dj as f64);
            let view = (bp.center() - pj).normalize();
            let mut min_angle = f64::INFINITY;
            for dv in -r..=r {
                for du in -r..=r {
                    let (nu, nv) = (u + du, v + dv);
                    if (du == 0 && dv == 0) || nu < 0 || nv < 0 || nu >= w || nv >= h {
                        continue;
                    }
                    let di = img.depth[(nv * w + nu) as usize];
                    if di <= 0.0 || di >= dj {
                        continue;
                    }
                    let pi = bp.point(nu as f64, nv as f64, di as f64);
                    let c = (pi - pj) / (pi - pj).norm();
                    let angle = view.dot(&c).clamp(-1.0, 1.0).acos();
                    min_angle = min_angle.min(angle);
                }
            }
            mask[(v * w + u) as usize] = min_angle >= params.angle_min;
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraModel;
    use crate::se3::PoseSE3;

    fn blank(w: u32, h: u32) -> DepthImage {
        let cam = CameraModel::pinhole(50.0, 50.0, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap();
        DepthImage::zeros(cam, PoseSE3::IDENTITY)
    }

    #[test]
    fn params_validation_and_mapping() {
        assert!(matches!(
            OcclusionParams::from_threshold(4, 3.0),
            Err(OcclusionError::BadWindow(4))
        ));
        assert!(matches!(
            OcclusionParams::from_threshold(1, 3.0),
            Err(OcclusionError::BadWindow(1))
        ));
        assert!(OcclusionParams::from_threshold(5, 0.0).is_err());
        assert!(OcclusionParams::with_angle(5, FRAC_PI_2).is_err());
        let p = OcclusionParams::default();
        assert_eq!((p.window, p.threshold), (5, 3.0));
        assert!((p.angle_min - (FRAC_PI_2 - 3f64.atan())).abs() < 1e-15);
        // Larger threshold, smaller aperture, laxer filter.
        assert!(threshold_to_angle(3.9999) < threshold_to_angle(3.0));
    }

    #[test]
    fn lone_pixel_survives() {
        let mut img = blank(16, 16);
        let i = img.index(8, 8);
        img.depth[i] = 10.0;
        assert_eq!(
            occlusion_filter(&img, &OcclusionParams::default()).unwrap(),
            img
        );
    }

    #[test]
    fn point_behind_near_plane_removed() {
        // A 5×5 patch at 5 m with one pixel in the middle pushed back to 20 m.
        let mut img = blank(16, 16);
        for v in 6..11 {
            for u in 6..11 {
                let i = img.index(u, v);
                img.depth[i] = 5.0;
            }
        }
        let c = img.index(8, 8);
        img.depth[c] = 20.0;
        let params = OcclusionParams::default();
        let out = occlusion_filter(&img, &params).unwrap();
        assert_eq!(out.depth[c], 0.0);
        assert_eq!(out.nonzero_count(), 24);
        assert_eq!(
            visibility_mask(&img, &params).unwrap(),
            brute_force_visibility(&img, &params).unwrap()
        );
    }

    #[test]
    fn equal_depths_never_occlude() {
        let mut img = blank(16, 16);
        for u in [7, 8] {
            let i = img.index(u, 8);
            img.depth[i] = 10.0;
        }
        assert_eq!(
            occlusion_filter(&img, &OcclusionParams::default())
                .unwrap()
                .nonzero_count(),
            2
        );
    }

    #[test]
    fn brute_force_edge_cases() {
        let params = OcclusionParams::default();
        let img = blank(8, 8);
        assert!(brute_force_visibility(&img, &params)
            .unwrap()
            .iter()
            .all(|v| !v));
        let mut plane = blank(8, 8);
        plane.depth.iter_mut().for_each(|d| *d = 4.0);
        assert!(brute_force_visibility(&plane, &params)
            .unwrap()
            .iter()
            .all(|&v| v));
        assert!(visibility_mask(&plane, &params).unwrap().iter().all(|&v| v));
    }
}
