//! LiDAR-image synthesis: z-buffered point projection, padding and export.

use std::io::{Read, Write};

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraModel;
use crate::map::{CropSpec, PointCloudMap, PoseRows};
use crate::se3::PoseSE3;

/// Points closer than this along the optical axis are not rendered.
pub const DEFAULT_Z_NEAR: f64 = 0.05;

/// 16-bit PNG export scale: counts per meter (covers 0 to 256 m).
pub const PNG_COUNTS_PER_METER: f64 = 256.0;

/// Magic of the raw depth dump (first 8 of the 16-byte header).
pub const DEPTH_RAW_MAGIC: &[u8; 8] = b"LLDEPTH1";

#[derive(Debug, Error)]
pub enum DepthIoError {
    #[error("depth dump format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error("png encoding failed: {0}")]
    Png(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-pixel metric depth, row-major; 0 means no return.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    pub depth: Vec<f32>,
    pub generating_pose: PoseSE3,
    pub camera: CameraModel,
}

impl DepthImage {
    pub fn zeros(camera: CameraModel, pose: PoseSE3) -> Self {
        let (width, height) = (camera.padded_width(), camera.padded_height());
        Self {
            width,
            height,
            depth: vec![0.0; (width * height) as usize],
            generating_pose: pose,
            camera,
        }
    }

    #[inline]
    pub fn index(&self, u: u32, v: u32) -> usize {
        (v * self.width + u) as usize
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> f32 {
        self.depth[self.index(u, v)]
    }

    pub fn nonzero_count(&self) -> usize {
        self.depth.iter().filter(|&&d| d > 0.0).count()
    }

    /// `(u, v, depth)` of every nonzero pixel in row-major order.
    pub fn nonzero_pixels(&self) -> impl Iterator<Item = (u32, u32, f32)> + '_ {
        self.depth
            .iter()
            .enumerate()
            .filter(|(_, &d)| d > 0.0)
            .map(|(i, &d)| (i as u32 % self.width, i as u32 / self.width, d))
    }
}

/// Point-splat renderer with a configurable near plane and worker count.
///
/// Worker-local z-buffers are merged by per-pixel minimum, so the output is
/// bit-identical for any number of workers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projector {
    pub z_near: f64,
    pub workers: usize,
}

impl Default for Projector {
    fn default() -> Self {
        Self {
            z_near: DEFAULT_Z_NEAR,
            workers: 1,
        }
    }
}

impl Projector {
    pub fn new(z_near: f64, workers: usize) -> Self {
        Self {
            z_near,
            workers: workers.max(1),
        }
    }

    pub fn project(&self, cloud: &PointCloudMap, pose: &PoseSE3, cam: &CameraModel) -> DepthImage {
        self.project_cropped(cloud, pose, cam, None)
    }

    /// Projects only the points `crop` keeps, in a single pass. Same result
    /// as `crop_local` followed by `project`.
    pub fn project_cropped(
        &self,
        cloud: &PointCloudMap,
        pose: &PoseSE3,
        cam: &CameraModel,
        crop: Option<&CropSpec>,
    ) -> DepthImage {
        let cam = CameraModel {
            pad_right: 0,
            pad_bottom: 0,
            ..*cam
        };
        let mut img = DepthImage::zeros(cam, *pose);
        let kernel = ProjectionKernel::new(pose, &cam, self.z_near, crop.copied());
        let points = cloud.points();

        let mut zbuf = if self.workers <= 1 || points.len() < 2 {
            let mut buf = vec![f32::INFINITY; img.depth.len()];
            kernel.splat(points, &mut buf);
            buf
        } else {
            let chunk = points.len().div_ceil(self.workers);
            points
                .par_chunks(chunk)
                .map(|part| {
                    let mut buf = vec![f32::INFINITY; img.depth.len()];
                    kernel.splat(part, &mut buf);
                    buf
                })
                .reduce_with(|mut a, b| {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x = x.min(y);
                    }
                    a
                })
                .unwrap_or_else(|| vec![f32::INFINITY; img.depth.len()])
        };
        for d in zbuf.iter_mut() {
            if !d.is_finite() {
                *d = 0.0;
            }
        }
        img.depth = zbuf;
        img
    }
}

/// Renders with the default near plane on one worker.
pub fn project(cloud: &PointCloudMap, pose: &PoseSE3, cam: &CameraModel) -> DepthImage {
    Projector::default().project(cloud, pose, cam)
}

/// `K · H` folded into one 3×4 matrix plus the rows of `H` itself.
struct ProjectionKernel {
    kh: [[f64; 4]; 3],
    rows: PoseRows,
    crop: Option<CropSpec>,
    z_near: f64,
    width: u32,
    height: u32,
}

impl ProjectionKernel {
    fn new(pose: &PoseSE3, cam: &CameraModel, z_near: f64, crop: Option<CropSpec>) -> Self {
        let kh = cam.projection * pose.to_matrix();
        let row = |r: usize| [kh[(r, 0)], kh[(r, 1)], kh[(r, 2)], kh[(r, 3)]];
        Self {
            kh: [row(0), row(1), row(2)],
            rows: PoseRows::new(pose),
            crop,
            z_near,
            width: cam.width,
            height: cam.height,
        }
    }

    #[inline]
    fn splat(&self, points: &[nalgebra::Point3<f32>], buf: &mut [f32]) {
        let dot = |r: &[f64; 4], x: f64, y: f64, z: f64| r[0] * x + r[1] * y + r[2] * z + r[3];
        let (w, h) = (self.width as f64, self.height as f64);
        for p in points {
            let c = self.rows.apply(p);
            if self.crop.as_ref().is_some_and(|crop| !crop.contains(&c)) {
                continue;
            }
            let zc = c.z;
            if !(zc > self.z_near) {
                continue;
            }
            let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
            let hw = dot(&self.kh[2], x, y, z);
            if !(hw > 0.0) {
                continue;
            }
            let u = (dot(&self.kh[0], x, y, z) / hw).round();
            let v = (dot(&self.kh[1], x, y, z) / hw).round();
            if !(u >= 0.0 && u < w && v >= 0.0 && v < h) {
                continue;
            }
            let idx = v as usize * self.width as usize + u as usize;
            let d = zc as f32;
            if d < buf[idx] {
                buf[idx] = d;
            }
        }
    }
}

/// Zero-pads right and bottom to multiples of 64. The principal point is
/// unchanged since padding only appends pixels.
pub fn pad_image(img: &DepthImage) -> DepthImage {
    let camera = img.camera.padded();
    let mut out = DepthImage::zeros(camera, img.generating_pose);
    for v in 0..img.height {
        let src = &img.depth[(v * img.width) as usize..((v + 1) * img.width) as usize];
        let start = out.index(0, v);
        out.depth[start..start + img.width as usize].copy_from_slice(src);
    }
    out
}

// Export formats.

/// 16-bit grayscale PNG, 256 counts per meter, saturating at 65535.
pub fn write_depth_png16<W: Write>(img: &DepthImage, w: W) -> Result<(), DepthIoError> {
    let png_err = |e: png::EncodingError| DepthIoError::Png(e.to_string());
    let mut enc = png::Encoder::new(w, img.width, img.height);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    enc.add_text_chunk(
        "depth_scale".to_string(),
        format!("{PNG_COUNTS_PER_METER} counts per meter; 0 = no return"),
    )
    .map_err(png_err)?;
    let mut writer = enc.write_header().map_err(png_err)?;
    let mut data = Vec::with_capacity(img.depth.len() * 2);
    for &d in &img.depth {
        let counts = (d as f64 * PNG_COUNTS_PER_METER)
            .round()
            .clamp(0.0, u16::MAX as f64) as u16;
        data.extend_from_slice(&counts.to_be_bytes());
    }
    writer.write_image_data(&data).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}

/// Raw dump: 8-byte magic, width u32, height u32, then f32 depths, all
/// little-endian, row-major.
pub fn write_depth_raw<W: Write>(img: &DepthImage, mut w: W) -> Result<(), DepthIoError> {
    let mut buf = Vec::with_capacity(16 + img.depth.len() * 4);
    buf.extend_from_slice(DEPTH_RAW_MAGIC);
    buf.extend_from_slice(&img.width.to_le_bytes());
    buf.extend_from_slice(&img.height.to_le_bytes());
    for d in &img.depth {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads a raw dump into `(width, height, depths)`.
pub fn read_depth_raw<R: Read>(mut r: R) -> Result<(u32, u32, Vec<f32>), DepthIoError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let err = |offset: usize, msg: &str| DepthIoError::Format {
        offset,
        msg: msg.to_string(),
    };
    if bytes.len() < 16 {
        return Err(err(bytes.len(), "truncated header"));
    }
    if &bytes[..8] != DEPTH_RAW_MAGIC {
        return Err(err(0, "bad magic"));
    }
    let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let height = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let expected = width as usize * height as usize * 4;
    if bytes.len() - 16 != expected {
        return Err(err(
            16 + (bytes.len() - 16).min(expected),
            "body size does not match dimensions",
        ));
    }
    let depth = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((width, height, depth))
}

/// Near-blue to far-red color for a depth in `[0, max_depth]`.
pub fn depth_color(depth: f32, max_depth: f32) -> Rgb<u8> {
    let t = (depth / max_depth).clamp(0.0, 1.0);
    let g = 1.0 - (2.0 * t - 1.0).abs();
    Rgb([
        (255.0 * t) as u8,
        (255.0 * g) as u8,
        (255.0 * (1.0 - t)) as u8,
    ])
}

/// Paints nonzero depth pixels over an RGB frame (or black when absent).
pub fn overlay(img: &DepthImage, rgb: Option<&RgbImage>, max_depth: f32) -> RgbImage {
    let mut out = RgbImage::new(img.width, img.height);
    if let Some(rgb) = rgb {
        for (u, v, px) in out.enumerate_pixels_mut() {
            if u < rgb.width() && v < rgb.height() {
                *px = *rgb.get_pixel(u, v);
            }
        }
    }
    for (u, v, d) in img.nonzero_pixels() {
        out.put_pixel(u, v, depth_color(d, max_depth));
    }
    out
}
