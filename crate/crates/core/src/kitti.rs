//! KITTI odometry inputs: Velodyne scans, trajectory files and calibration.
//!
//! Expected layout below a dataset root:
//!
//! ```text
//! sequences/NN/velodyne/XXXXXX.bin
//! sequences/NN/calib.txt
//! poses/NN.txt
//! ```

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3x4, Point3};
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::{CameraError, CameraModel};
use crate::map::{voxel_downsample, MapError, PointCloudMap};
use crate::se3::{parse_pose_line, pose_from_3x4, PoseSE3};

/// Bytes per Velodyne record: four little-endian f32 (x, y, z, intensity).
pub const VELODYNE_RECORD: usize = 16;

/// Training and validation sequences used by default.
pub const TRAIN_SEQUENCES: [&str; 7] = ["03", "04", "05", "06", "07", "08", "09"];
pub const VALIDATION_SEQUENCE: &str = "00";

/// Rotation blocks farther than this from SO(3) are rejected.
pub const POSE_ORTHONORMAL_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum KittiError {
    #[error("velodyne scan truncated: partial record at byte {offset} ({len} bytes total)")]
    PartialRecord { offset: usize, len: usize },
    #[error("poses line {line}: {msg}")]
    PoseLine { line: usize, msg: String },
    #[error("calibration is missing key {0:?}")]
    MissingKey(String),
    #[error("calibration line {line} ({key}): {msg}")]
    CalibLine {
        line: usize,
        key: String,
        msg: String,
    },
    #[error("{scans} scans but {poses} poses")]
    LengthMismatch { scans: usize, poses: usize },
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub fn read_velodyne_scan(bytes: &[u8]) -> Result<PointCloudMap, KittiError> {
    if bytes.len() % VELODYNE_RECORD != 0 {
        return Err(KittiError::PartialRecord {
            offset: bytes.len() - bytes.len() % VELODYNE_RECORD,
            len: bytes.len(),
        });
    }
    let n = bytes.len() / VELODYNE_RECORD;
    let mut points = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    for rec in bytes.chunks_exact(VELODYNE_RECORD) {
        points.push(Point3::new(f(&rec[0..4]), f(&rec[4..8]), f(&rec[8..12])));
        intensity.push(f(&rec[12..16]));
    }
    Ok(PointCloudMap::with_intensity(points, intensity)?)
}

pub fn write_velodyne_scan(cloud: &PointCloudMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * VELODYNE_RECORD);
    for (i, p) in cloud.points().iter().enumerate() {
        let r = cloud.intensity().map_or(0.0, |v| v[i]);
        for v in [p.x, p.y, p.z, r] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses a trajectory file: one pose per nonempty line.
pub fn read_poses(text: &str) -> Result<Vec<PoseSE3>, KittiError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_pose_line(l, POSE_ORTHONORMAL_TOLERANCE)
                .map_err(|msg| KittiError::PoseLine { line: i + 1, msg })
        })
        .collect()
}

/// Finds a `KEY: v1 ... v12` line and parses it as a row-major 3×4 matrix.
pub fn read_calib_matrix(text: &str, key: &str) -> Result<Matrix3x4<f64>, KittiError> {
    for (i, line) in text.lines().enumerate() {
        let Some((k, rest)) = line.split_once(':') else {
            continue;
        };
        if k.trim() != key {
            continue;
        }
        let err = |msg: String| KittiError::CalibLine {
            line: i + 1,
            key: key.to_string(),
            msg,
        };
        let vals = rest
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| err(format!("invalid number {t:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if vals.len() != 12 {
            return Err(err(format!("expected 12 values, found {}", vals.len())));
        }
        return Ok(Matrix3x4::from_row_slice(&vals));
    }
    Err(KittiError::MissingKey(key.to_string()))
}

/// Camera model from the `P2` (left color camera) entry.
pub fn read_calib(text: &str, width: u32, height: u32) -> Result<CameraModel, KittiError> {
    let p2 = read_calib_matrix(text, "P2")?;
    Ok(CameraModel::new(p2, width, height)?)
}

/// Velodyne-to-camera extrinsics (`Tr` entry), if present.
pub fn read_velo_to_cam(text: &str) -> Result<Option<PoseSE3>, KittiError> {
    match read_calib_matrix(text, "Tr") {
        Ok(m) => pose_from_3x4(&m, POSE_ORTHONORMAL_TOLERANCE)
            .map(Some)
            .map_err(|e| KittiError::CalibLine {
                line: 0,
                key: "Tr".into(),
                msg: e.to_string(),
            }),
        Err(KittiError::MissingKey(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Moves every scan into the map frame (poses are map-from-sensor),
/// concatenates in input order and voxel-downsamples.
pub fn build_map(
    scans: &[PointCloudMap],
    scan_poses: &[PoseSE3],
    resolution: f64,
) -> Result<PointCloudMap, KittiError> {
    if scans.len() != scan_poses.len() {
        return Err(KittiError::LengthMismatch {
            scans: scans.len(),
            poses: scan_poses.len(),
        });
    }
    let moved: Vec<PointCloudMap> = scans
        .par_iter()
        .zip(scan_poses.par_iter())
        .map(|(scan, pose)| scan.transformed(pose))
        .collect();
    Ok(voxel_downsample(
        &PointCloudMap::concat(&moved),
        resolution,
    )?)
}

/// Paths of one odometry sequence.
#[derive(Debug, Clone)]
pub struct SequencePaths {
    pub velodyne_dir: PathBuf,
    pub calib: PathBuf,
    pub poses: PathBuf,
}

impl SequencePaths {
    pub fn new(root: &Path, sequence: &str) -> Self {
        let seq = root.join("sequences").join(sequence);
        Self {
            velodyne_dir: seq.join("velodyne"),
            calib: seq.join("calib.txt"),
            poses: root.join("poses").join(format!("{sequence}.txt")),
        }
    }

    pub fn scan(&self, index: usize) -> PathBuf {
        self.velodyne_dir.join(format!("{index:06}.bin"))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, KittiError> {
    std::fs::read(path).map_err(|source| KittiError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_text(path: &Path) -> Result<String, KittiError> {
    std::fs::read_to_string(path).map_err(|source| KittiError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads the scans `0..count` of a sequence. Files are parsed in parallel and
/// returned in index order.
pub fn load_scans(paths: &SequencePaths, count: usize) -> Result<Vec<PointCloudMap>, KittiError> {
    (0..count)
        .into_par_iter()
        .map(|i| read_velodyne_scan(&read_file(&paths.scan(i))?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::Quat;
    use nalgebra::Vector3;

    fn record(v: [f32; 4]) -> Vec<u8> {
        v.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    #[test]
    fn velodyne_records() {
        let scan = read_velodyne_scan(&record([1.0, 2.0, 3.0, 0.5])).unwrap();
        assert_eq!(scan.points(), &[Point3::new(1.0, 2.0, 3.0)]);
        assert_eq!(scan.intensity().unwrap(), &[0.5]);
        assert!(read_velodyne_scan(&[]).unwrap().is_empty());
        let mut bytes = record([1.0, 2.0, 3.0, 0.5]);
        bytes.push(0);
        assert!(matches!(
            read_velodyne_scan(&bytes),
            Err(KittiError::PartialRecord {
                offset: 16,
                len: 17
            })
        ));
        assert_eq!(write_velodyne_scan(&scan), record([1.0, 2.0, 3.0, 0.5]));
    }

    #[test]
    fn poses_file() {
        let poses = read_poses("1 0 0 0 0 1 0 0 0 0 1 0\n\n1 0 0 1 0 1 0 2 0 0 1 3\n").unwrap();
        assert_eq!(poses.len(), 2);
        assert_eq!(poses[0], PoseSE3::IDENTITY);
        assert_eq!(poses[1].translation, Vector3::new(1.0, 2.0, 3.0));
        let err = read_poses("1 0 0 0 0 1 0 0 0 0 1 0\n2 0 0 0 0 2 0 0 0 0 2 0\n").unwrap_err();
        assert!(matches!(err, KittiError::PoseLine { line: 2, .. }), "{err}");
        assert!(matches!(
            read_poses("1 0 0\n"),
            Err(KittiError::PoseLine { line: 1, .. })
        ));
    }

    #[test]
    fn calib_uses_p2_only() {
        let text = "P0: 1 0 0 0 0 1 0 0 0 0 1 0\n\
                    P1: 1 0 0 0 0 1 0 0 0 0 1 0\n\
                    P2: 100 0 64 0 0 100 32 0 0 0 1 0\n\
                    P3: 5 0 0 0 0 5 0 0 0 0 1 0\n";
        let cam = read_calib(text, 128, 64).unwrap();
        assert_eq!(
            (cam.fx(), cam.fy(), cam.cx(), cam.cy()),
            (100.0, 100.0, 64.0, 32.0)
        );
        let err = read_calib("P0: 1 0 0 0 0 1 0 0 0 0 1 0\n", 128, 64).unwrap_err();
        assert!(matches!(&err, KittiError::MissingKey(k) if k == "P2"));
        assert!(err.to_string().contains("P2"));
        assert!(matches!(
            read_calib("P2: 1 2 3\n", 1, 1),
            Err(KittiError::CalibLine { line: 1, .. })
        ));
    }

    #[test]
    fn velo_to_cam_is_row_major() {
        let tr = read_velo_to_cam("Tr: 0 -1 0 0.1 0 0 -1 0.2 1 0 0 0.3\n")
            .unwrap()
            .unwrap();
        assert_eq!(tr.translation, Vector3::new(0.1, 0.2, 0.3));
        // Velodyne x (forward) maps to camera z.
        let p = tr.apply(&Vector3::new(1.0, 0.0, 0.0));
        assert!((p - Vector3::new(0.1, 0.2, 1.3)).norm() < 1e-12);
        assert!(read_velo_to_cam("P2: 1 0 0 0 0 1 0 0 0 0 1 0\n")
            .unwrap()
            .is_none());
    }

    #[test]
    fn build_map_checks_lengths() {
        let scan = PointCloudMap::new(vec![Point3::new(0.05, 0.05, 0.05)]);
        assert!(matches!(
            build_map(&[scan.clone()], &[], 0.1),
            Err(KittiError::LengthMismatch { scans: 1, poses: 0 })
        ));
        let one = build_map(&[scan.clone()], &[PoseSE3::IDENTITY], 0.1).unwrap();
        assert_eq!(one, voxel_downsample(&scan, 0.1).unwrap());
        let far = PoseSE3::new(Quat::IDENTITY, Vector3::new(100.0, 0.0, 0.0)).unwrap();
        let two = build_map(&[scan.clone(), scan], &[PoseSE3::IDENTITY, far], 0.1).unwrap();
        assert_eq!(two.len(), 2);
    }
}
