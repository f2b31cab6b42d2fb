//! LiDAR map storage: voxel downsampling, local cropping and persistence.

use std::collections::HashMap;
use std::io::{self, BufRead, Read, Write};

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::se3::PoseSE3;

/// Magic bytes of the binary map container (first 8 of the 16-byte header).
pub const MAP_MAGIC: &[u8; 8] = b"LLMAPBIN";
pub const MAP_VERSION: u32 = 1;
const FLAG_INTENSITY: u32 = 1;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("voxel resolution must be positive and finite, got {0}")]
    InvalidResolution(f64),
    #[error("crop extents must be positive and finite")]
    InvalidCrop,
    #[error("intensity count {intensity} does not match point count {points}")]
    IntensityMismatch { points: usize, intensity: usize },
    #[error("map format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("map text error at line {line}: {msg}")]
    Text { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A point cloud in the map frame, optionally with per-point intensity.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloudMap {
    points: Vec<Point3<f32>>,
    intensity: Option<Vec<f32>>,
    voxel_resolution: f64,
}

impl PointCloudMap {
    pub fn new(points: Vec<Point3<f32>>) -> Self {
        Self {
            points,
            intensity: None,
            voxel_resolution: 0.0,
        }
    }

    pub fn with_intensity(points: Vec<Point3<f32>>, intensity: Vec<f32>) -> Result<Self, MapError> {
        if points.len() != intensity.len() {
            return Err(MapError::IntensityMismatch {
                points: points.len(),
                intensity: intensity.len(),
            });
        }
        Ok(Self {
            points,
            intensity: Some(intensity),
            voxel_resolution: 0.0,
        })
    }

    pub fn points(&self) -> &[Point3<f32>] {
        &self.points
    }

    pub fn intensity(&self) -> Option<&[f32]> {
        self.intensity.as_deref()
    }

    /// Side of the voxel grid the map was downsampled with, 0 if never.
    pub fn voxel_resolution(&self) -> f64 {
        self.voxel_resolution
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Applies a rigid transform to every point.
    pub fn transformed(&self, pose: &PoseSE3) -> PointCloudMap {
        let r = pose.rotation_matrix();
        let t = pose.translation;
        let points = self
            .points
            .iter()
            .map(|p| {
                let q = r * p.coords.cast::<f64>() + t;
                Point3::from(q.cast::<f32>())
            })
            .collect();
        PointCloudMap {
            points,
            intensity: self.intensity.clone(),
            voxel_resolution: 0.0,
        }
    }

    /// Concatenates clouds. Intensity is kept only if every part has it.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a PointCloudMap>) -> PointCloudMap {
        let parts: Vec<&PointCloudMap> = parts.into_iter().collect();
        let keep_intensity = !parts.is_empty() && parts.iter().all(|p| p.intensity.is_some());
        let mut points = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut intensity = keep_intensity.then(Vec::new);
        for part in parts {
            points.extend_from_slice(&part.points);
            if let (Some(dst), Some(src)) = (intensity.as_mut(), part.intensity.as_ref()) {
                dst.extend_from_slice(src);
            }
        }
        PointCloudMap {
            points,
            intensity,
            voxel_resolution: 0.0,
        }
    }

    fn select(&self, keep: impl Fn(usize) -> bool) -> PointCloudMap {
        let idx: Vec<usize> = (0..self.points.len()).filter(|&i| keep(i)).collect();
        PointCloudMap {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            intensity: self
                .intensity
                .as_ref()
                .map(|v| idx.iter().map(|&i| v[i]).collect()),
            voxel_resolution: self.voxel_resolution,
        }
    }
}

pub(crate) fn voxel_key(p: &Point3<f32>, resolution: f64) -> [i64; 3] {
    [
        (p.x as f64 / resolution).floor() as i64,
        (p.y as f64 / resolution).floor() as i64,
        (p.z as f64 / resolution).floor() as i64,
    ]
}

/// Replaces the points of every occupied voxel by their centroid. Output is
/// ordered by voxel index, so it does not depend on hash iteration order.
pub fn voxel_downsample(cloud: &PointCloudMap, resolution: f64) -> Result<PointCloudMap, MapError> {
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(MapError::InvalidResolution(resolution));
    }
    struct Cell {
        sum: Vector3<f64>,
        intensity: f64,
        count: usize,
    }
    let mut cells: HashMap<[i64; 3], Cell> = HashMap::with_capacity(cloud.len() / 2 + 1);
    for (i, p) in cloud.points.iter().enumerate() {
        let cell = cells.entry(voxel_key(p, resolution)).or_insert(Cell {
            sum: Vector3::zeros(),
            intensity: 0.0,
            count: 0,
        });
        cell.sum += p.coords.cast::<f64>();
        if let Some(v) = &cloud.intensity {
            cell.intensity += v[i] as f64;
        }
        cell.count += 1;
    }
    let mut cells: Vec<([i64; 3], Cell)> = cells.into_iter().collect();
    cells.sort_unstable_by_key(|(k, _)| *k);

    let points = cells
        .iter()
        .map(|(_, c)| Point3::from((c.sum / c.count as f64).cast::<f32>()))
        .collect();
    let intensity = cloud.intensity.as_ref().map(|_| {
        cells
            .iter()
            .map(|(_, c)| (c.intensity / c.count as f64) as f32)
            .collect()
    });
    Ok(PointCloudMap {
        points,
        intensity,
        voxel_resolution: resolution,
    })
}

/// Half-widths of the crop box in the virtual-camera frame. The box extends
/// only forward along the optical axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub forward: f64,
    pub lateral: f64,
    pub vertical: f64,
}

impl Default for CropSpec {
    fn default() -> Self {
        Self {
            forward: 100.0,
            lateral: 50.0,
            vertical: 25.0,
        }
    }
}

impl CropSpec {
    pub fn new(forward: f64, lateral: f64, vertical: f64) -> Result<Self, MapError> {
        let s = Self {
            forward,
            lateral,
            vertical,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), MapError> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if ok(self.forward) && ok(self.lateral) && ok(self.vertical) {
            Ok(())
        } else {
            Err(MapError::InvalidCrop)
        }
    }

    #[inline]
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        p.z > 0.0 && p.z <= self.forward && p.x.abs() <= self.lateral && p.y.abs() <= self.vertical
    }
}

/// Keeps the points that fall inside `spec` once moved into the frame of the
/// camera at `h_init`. Points behind the image plane are always dropped.
pub fn crop_local(map: &PointCloudMap, h_init: &PoseSE3, spec: &CropSpec) -> PointCloudMap {
    let rows = PoseRows::new(h_init);
    map.select(|i| spec.contains(&rows.apply(&map.points[i])))
}

/// `[R | t]` unpacked into rows for repeated point transforms. Cropping and
/// projection share it so both see bit-identical camera-frame coordinates.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PoseRows([[f64; 4]; 3]);

impl PoseRows {
    pub(crate) fn new(pose: &PoseSE3) -> Self {
        let m = pose.to_matrix();
        let row = |r: usize| [m[(r, 0)], m[(r, 1)], m[(r, 2)], m[(r, 3)]];
        Self([row(0), row(1), row(2)])
    }

    #[inline]
    pub(crate) fn apply(&self, p: &Point3<f32>) -> Vector3<f64> {
        let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
        let d = |r: &[f64; 4]| r[0] * x + r[1] * y + r[2] * z + r[3];
        Vector3::new(d(&self.0[0]), d(&self.0[1]), d(&self.0[2]))
    }
}

// Persistence.

/// Writes the binary container: 16-byte header (8 magic bytes, version u32,
/// flags u32), u64 point count, then packed f32 `x y z [intensity]` records,
/// all little-endian.
pub fn write_map_binary<W: Write>(map: &PointCloudMap, mut w: W) -> Result<(), MapError> {
    let flags = if map.intensity.is_some() {
        FLAG_INTENSITY
    } else {
        0
    };
    w.write_all(MAP_MAGIC)?;
    w.write_all(&MAP_VERSION.to_le_bytes())?;
    w.write_all(&flags.to_le_bytes())?;
    w.write_all(&(map.points.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(map.points.len() * 16);
    for (i, p) in map.points.iter().enumerate() {
        for v in [p.x, p.y, p.z] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(intensity) = &map.intensity {
            buf.extend_from_slice(&intensity[i].to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_map_binary<R: Read>(mut r: R) -> Result<PointCloudMap, MapError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse_map_binary(&bytes)
}

pub fn parse_map_binary(bytes: &[u8]) -> Result<PointCloudMap, MapError> {
    let fmt = |offset: usize, msg: &str| MapError::Format {
        offset: offset as u64,
        msg: msg.to_string(),
    };
    if bytes.len() < 24 {
        return Err(fmt(bytes.len(), "truncated header"));
    }
    if &bytes[..8] != MAP_MAGIC {
        return Err(fmt(0, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != MAP_VERSION {
        return Err(fmt(8, &format!("unsupported version {version}")));
    }
    let flags = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    if flags & !FLAG_INTENSITY != 0 {
        return Err(fmt(12, &format!("unknown flags {flags:#x}")));
    }
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let has_intensity = flags & FLAG_INTENSITY != 0;
    let stride = if has_intensity { 16 } else { 12 };
    let body = &bytes[24..];
    let expected = count
        .checked_mul(stride as u64)
        .ok_or_else(|| fmt(16, "point count overflow"))?;
    if body.len() as u64 != expected {
        let at = 24 + (body.len() / stride) * stride;
        return Err(fmt(
            at,
            &format!(
                "expected {count} records of {stride} bytes, body has {} bytes",
                body.len()
            ),
        ));
    }
    let f = |b: &[u8]| f32::from_le_bytes(b.try_into().unwrap());
    let mut points = Vec::with_capacity(count as usize);
    let mut intensity = has_intensity.then(|| Vec::with_capacity(count as usize));
    for rec in body.chunks_exact(stride) {
        points.push(Point3::new(f(&rec[0..4]), f(&rec[4..8]), f(&rec[8..12])));
        if let Some(v) = intensity.as_mut() {
            v.push(f(&rec[12..16]));
        }
    }
    Ok(PointCloudMap {
        points,
        intensity,
        voxel_resolution: 0.0,
    })
}

/// ASCII debug format: one `x y z [intensity]` line per point.
pub fn write_map_ascii<W: Write>(map: &PointCloudMap, mut w: W) -> Result<(), MapError> {
    for (i, p) in map.points.iter().enumerate() {
        match &map.intensity {
            Some(v) => writeln!(w, "{} {} {} {}", p.x, p.y, p.z, v[i])?,
            None => writeln!(w, "{} {} {}", p.x, p.y, p.z)?,
        }
    }
    Ok(())
}

pub fn read_map_ascii<R: BufRead>(r: R) -> Result<PointCloudMap, MapError> {
    let mut points = Vec::new();
    let mut intensity: Option<Vec<f32>> = None;
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f32>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| MapError::Text {
                line: n + 1,
                msg: e.to_string(),
            })?;
        let with_intensity = match vals.len() {
            3 => false,
            4 => true,
            k => {
                return Err(MapError::Text {
                    line: n + 1,
                    msg: format!("expected 3 or 4 values, found {k}"),
                })
            }
        };
        if points.is_empty() {
            intensity = with_intensity.then(Vec::new);
        } else if with_intensity != intensity.is_some() {
            return Err(MapError::Text {
                line: n + 1,
                msg: "inconsistent column count".into(),
            });
        }
        points.push(Point3::new(vals[0], vals[1], vals[2]));
        if let Some(v) = intensity.as_mut() {
            v.push(vals[3]);
        }
    }
    Ok(PointCloudMap {
        points,
        intensity,
        voxel_resolution: 0.0,
    })
}
