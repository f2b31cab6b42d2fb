//! Training-time augmentation that keeps the RGB frame, the map and the pose
//! label consistent.
//!
//! Mirroring is geometric: the map x axis is negated and the pose conjugated
//! by `diag(-1, 1, 1)`, which negates camera-frame x. The RGB frame is
//! flipped about the principal point column so it stays aligned with the
//! rendered LiDAR-image. This is exact for projection matrices without a
//! horizontal rig offset.

use std::borrow::Cow;

use image::{Rgb, RgbImage};
use nalgebra::{Matrix3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::map::PointCloudMap;
use crate::se3::{PoseSE3, Quat};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
    pub mirror_probability: f64,
    /// Bound on the optical-axis rotation, radians.
    pub max_rotation: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            brightness: (0.9, 1.1),
            contrast: (0.9, 1.1),
            saturation: (0.9, 1.1),
            mirror_probability: 0.5,
            max_rotation: 5f64.to_radians(),
        }
    }
}

/// One concrete draw of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentDraw {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub mirror: bool,
    /// Rotation about the optical axis, radians.
    pub rotation: f64,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        mirror: false,
        rotation: 0.0,
    };
}

impl AugmentParams {
    pub fn draw(&self, seed: u64) -> AugmentDraw {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut range = |(lo, hi): (f64, f64)| {
            if lo < hi {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        };
        let brightness = range(self.brightness);
        let contrast = range(self.contrast);
        let saturation = range(self.saturation);
        let rotation = range((-self.max_rotation, self.max_rotation));
        let mirror = rng.random_bool(self.mirror_probability.clamp(0.0, 1.0));
        AugmentDraw {
            brightness,
            contrast,
            saturation,
            mirror,
            rotation,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Augmented<'a> {
    pub rgb: RgbImage,
    pub cloud: Cow<'a, PointCloudMap>,
    pub pose: PoseSE3,
}

/// Draws parameters from `seed` and applies them.
pub fn augment<'a>(
    rgb: &RgbImage,
    cloud: &'a PointCloudMap,
    h_gt: &PoseSE3,
    cam: &CameraModel,
    params: &AugmentParams,
    seed: u64,
) -> Augmented<'a> {
    apply_augmentation(rgb, cloud, h_gt, cam, &params.draw(seed))
}

/// Color jitter, then mirroring, then rotation about the optical axis.
pub fn apply_augmentation<'a>(
    rgb: &RgbImage,
    cloud: &'a PointCloudMap,
    h_gt: &PoseSE3,
    cam: &CameraModel,
    draw: &AugmentDraw,
) -> Augmented<'a> {
    let mut image = color_jitter(rgb, draw.brightness, draw.contrast, draw.saturation);
    let mut cloud = Cow::Borrowed(cloud);
    let mut pose = *h_gt;
    if draw.mirror {
        image = mirror_image(&image, cam.cx());
        cloud = Cow::Owned(mirror_cloud(&cloud));
        pose = mirror_pose(&pose);
    }
    if draw.rotation != 0.0 {
        image = rotate_image(&image, cam.cx(), cam.cy(), draw.rotation);
        pose = optical_axis_rotation(draw.rotation).compose(&pose);
    }
    Augmented {
        rgb: image,
        cloud,
        pose,
    }
}

pub fn optical_axis_rotation(angle: f64) -> PoseSE3 {
    PoseSE3::new(
        Quat::from_axis_angle(&Vector3::z(), angle),
        Vector3::zeros(),
    )
    .expect("unit rotation")
}

const MIRROR: [f64; 3] = [-1.0, 1.0, 1.0];

/// `M · H · M` with `M = diag(-1, 1, 1)`.
pub fn mirror_pose(h: &PoseSE3) -> PoseSE3 {
    let m = Matrix3::from_diagonal(&Vector3::from(MIRROR));
    let r = m * h.rotation_matrix() * m;
    let t = m * h.translation;
    PoseSE3::from_parts(&r, t).expect("conjugated rotation stays in SO(3)")
}

pub fn mirror_cloud(cloud: &PointCloudMap) -> PointCloudMap {
    let points: Vec<Point3<f32>> = cloud
        .points()
        .iter()
        .map(|p| Point3::new(-p.x, p.y, p.z))
        .collect();
    match cloud.intensity() {
        Some(v) => PointCloudMap::with_intensity(points, v.to_vec()).expect("lengths unchanged"),
        None => PointCloudMap::new(points),
    }
}

/// Brightness scale, contrast about the mean gray level, saturation about the
/// per-pixel gray level. Factors of exactly 1 leave the image untouched.
pub fn color_jitter(rgb: &RgbImage, brightness: f64, contrast: f64, saturation: f64) -> RgbImage {
    let gray = |p: &[f32; 3]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    let mut px: Vec<[f32; 3]> = rgb.pixels().map(|p| p.0.map(f32::from)).collect();
    if brightness != 1.0 {
        let b = brightness as f32;
        px.iter_mut()
            .for_each(|p| *p = p.map(|c| (c * b).clamp(0.0, 255.0)));
    }
    if contrast != 1.0 && !px.is_empty() {
        let mean = px.iter().map(gray).sum::<f32>() / px.len() as f32;
        let k = contrast as f32;
        px.iter_mut()
            .for_each(|p| *p = p.map(|c| (mean + k * (c - mean)).clamp(0.0, 255.0)));
    }
    if saturation != 1.0 {
        let s = saturation as f32;
        px.iter_mut().for_each(|p| {
            let g = gray(p);
            *p = p.map(|c| (g + s * (c - g)).clamp(0.0, 255.0));
        });
    }
    let mut out = RgbImage::new(rgb.width(), rgb.height());
    for (dst, src) in out.pixels_mut().zip(&px) {
        *dst = Rgb(src.map(|c| c.round() as u8));
    }
    out
}

/// Horizontal flip about column `cx` (`u → 2·cx − u`), nearest sampling.
pub fn mirror_image(rgb: &RgbImage, cx: f64) -> RgbImage {
    let (w, h) = rgb.dimensions();
    RgbImage::from_fn(w, h, |u, v| {
        let src = (2.0 * cx - u as f64).round();
        if src >= 0.0 && src < w as f64 {
            *rgb.get_pixel(src as u32, v)
        } else {
            Rgb([0, 0, 0])
        }
    })
}

/// Rotates image content by `angle` about `(cx, cy)` in pixel coordinates
/// (u right, v down), matching a camera rotation of `angle` about its optical
/// axis when `fx = fy`. Nearest sampling, black fill.
pub fn rotate_image(rgb: &RgbImage, cx: f64, cy: f64, angle: f64) -> RgbImage {
    let (w, h) = rgb.dimensions();
    let (s, c) = angle.sin_cos();
    RgbImage::from_fn(w, h, |u, v| {
        let (du, dv) = (u as f64 - cx, v as f64 - cy);
        // Inverse rotation finds the source pixel.
        let su = (c * du + s * dv + cx).round();
        let sv = (-s * du + c * dv + cy).round();
        if su >= 0.0 && su < w as f64 && sv >= 0.0 && sv < h as f64 {
            *rgb.get_pixel(su as u32, sv as u32)
        } else {
            Rgb([0, 0, 0])
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::project;
    use approx::assert_abs_diff_eq;

    fn test_image() -> RgbImage {
        RgbImage::from_fn(32, 16, |u, v| {
            Rgb([(u * 7) as u8, (v * 13) as u8, ((u + v) * 5) as u8])
        })
    }

    fn cam() -> CameraModel {
        CameraModel::pinhole(20.0, 20.0, 16.0, 8.0, 32, 16).unwrap()
    }

    #[test]
    fn identity_draw_changes_nothing() {
        let rgb = test_image();
        let cloud = PointCloudMap::new(vec![Point3::new(1.0, 2.0, 3.0)]);
        let h = PoseSE3::new(
            Quat::from_axis_angle(&Vector3::y(), 0.3),
            Vector3::new(1.0, 0.0, 2.0),
        )
        .unwrap();
        let out = apply_augmentation(&rgb, &cloud, &h, &cam(), &AugmentDraw::IDENTITY);
        assert_eq!(out.rgb, rgb);
        assert_eq!(out.pose, h);
        assert!(matches!(out.cloud, Cow::Borrowed(_)));
        // Unit factors also leave pixels unchanged when not short-circuited.
        assert_eq!(color_jitter(&rgb, 1.0, 1.0, 1.0), rgb);
    }

    #[test]
    fn mirror_is_an_involution() {
        let h = PoseSE3::new(
            Quat::from_axis_angle(&Vector3::new(0.3, 1.0, -0.4), 0.9),
            Vector3::new(1.0, -2.0, 3.0),
        )
        .unwrap();
        let back = mirror_pose(&mirror_pose(&h));
        assert_abs_diff_eq!(back.to_matrix(), h.to_matrix(), epsilon = 1e-9);
        let rgb = test_image();
        // Integer principal column: flipping twice restores interior columns.
        let twice = mirror_image(&mirror_image(&rgb, 16.0), 16.0);
        for v in 0..16 {
            for u in 1..32 {
                assert_eq!(twice.get_pixel(u, v), rgb.get_pixel(u, v));
            }
        }
    }

    #[test]
    fn mirrored_render_is_flipped_render() {
        let pts: Vec<Point3<f32>> = (0..40)
            .map(|i| {
                Point3::new(
                    (i % 8) as f32 - 3.5,
                    (i / 8) as f32 - 2.0,
                    5.0 + i as f32 * 0.1,
                )
            })
            .collect();
        let cloud = PointCloudMap::new(pts);
        let h = PoseSE3::new(
            Quat::from_axis_angle(&Vector3::y(), 0.05),
            Vector3::new(0.2, 0.1, 0.0),
        )
        .unwrap();
        let plain = project(&cloud, &h, &cam());
        let draw = AugmentDraw {
            mirror: true,
            ..AugmentDraw::IDENTITY
        };
        let aug = apply_augmentation(&test_image(), &cloud, &h, &cam(), &draw);
        let mirrored = project(&aug.cloud, &aug.pose, &cam());
        for (u, v, d) in plain.nonzero_pixels() {
            let mu = 32 - u; // 2·cx − u
            if mu < 32 {
                assert_eq!(mirrored.get(mu, v), d);
            }
        }
    }

    #[test]
    fn draws_respect_ranges_and_seed() {
        let p = AugmentParams::default();
        for seed in 0..200 {
            let d = p.draw(seed);
            assert_eq!(d, p.draw(seed));
            for f in [d.brightness, d.contrast, d.saturation] {
                assert!((0.9..=1.1).contains(&f));
            }
            assert!(d.rotation.abs() <= 5f64.to_radians());
        }
    }
}
