use std::cmp::Ordering;

use image::RgbImage;
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{RefineError, Regressor, StageSpec};
use crate::losses::PoseTarget;
use crate::map::PointCloudMap;
use crate::pipeline::RenderPipeline;
use crate::projection::DepthImage;
use crate::se3::{Displacement, EulerZyx, PoseSE3};

/// Candidates sharing fewer co-nonzero pixels with the reference are skipped.
pub const DEFAULT_MIN_OVERLAP: usize = 50;

/// Evenly spaced offsets in `[-extent, extent]`; a single step is `{0}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub steps: usize,
    pub extent: f64,
}

impl GridAxis {
    pub const FIXED: GridAxis = GridAxis {
        steps: 1,
        extent: 0.0,
    };

    pub fn new(steps: usize, extent: f64) -> Self {
        Self { steps, extent }
    }

    pub fn value(&self, i: usize) -> f64 {
        if self.steps <= 1 {
            return 0.0;
        }
        let n = (self.steps - 1) as f64;
        self.extent * (2.0 * i as f64 - n) / n
    }
}

/// Six-axis search grid: translation x, y, z (m) then Euler z, y, x (rad),
/// all in the camera frame of the current estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: [GridAxis; 6],
}

impl GridSpec {
    pub fn uniform(steps: usize, translation_extent: f64, rotation_extent: f64) -> Self {
        let t = GridAxis::new(steps, translation_extent);
        let r = GridAxis::new(steps, rotation_extent);
        Self {
            axes: [t, t, t, r, r, r],
        }
    }

    /// Searches only along the optical axis.
    pub fn longitudinal(steps: usize, extent: f64) -> Self {
        let mut axes = [GridAxis::FIXED; 6];
        axes[2] = GridAxis::new(steps, extent);
        Self { axes }
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.steps.max(1)).product()
    }

    pub fn is_empty(&self) -> bool {
        self.axes.iter().any(|a| a.steps == 0)
    }

    /// Candidate correction at a row-major grid index (first axis slowest).
    pub fn candidate(&self, mut index: usize) -> PoseSE3 {
        let mut v = [0.0; 6];
        for k in (0..6).rev() {
            let n = self.axes[k].steps.max(1);
            v[k] = self.axes[k].value(index % n);
            index /= n;
        }
        Displacement {
            translation: Vector3::new(v[0], v[1], v[2]),
            euler: EulerZyx::new(v[3], v[4], v[5]),
        }
        .to_pose()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridResult {
    pub correction: PoseSE3,
    pub score: f64,
    pub overlap: usize,
    pub index: usize,
}

/// Mean absolute depth difference over pixels nonzero in both images.
pub fn depth_score(reference: &DepthImage, candidate: &DepthImage) -> (f64, usize) {
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for (&a, &b) in reference.depth.iter().zip(&candidate.depth) {
        if a > 0.0 && b > 0.0 {
            sum += (a as f64 - b as f64).abs();
            n += 1;
        }
    }
    (if n > 0 { sum / n as f64 } else { f64::INFINITY }, n)
}

fn magnitude(p: &PoseSE3) -> f64 {
    p.translation.norm() + p.rotation.canonical().angle()
}

/// Scores every grid candidate `C ∘ h_current` against `reference` and
/// returns the best correction. Ordering: score, then correction magnitude,
/// then grid index.
pub fn grid_search(
    reference: &DepthImage,
    map: &PointCloudMap,
    pipeline: &RenderPipeline,
    h_current: &PoseSE3,
    spec: &GridSpec,
    min_overlap: usize,
) -> Result<GridResult, RefineError> {
    if spec.is_empty() {
        return Err(RefineError::InsufficientOverlap {
            best: 0,
            required: min_overlap,
        });
    }
    let scored: Vec<Result<(f64, usize), RefineError>> = (0..spec.len())
        .into_par_iter()
        .map(|i| {
            let pose = spec.candidate(i).compose(h_current);
            let img = pipeline.render(map, &pose)?;
            Ok(depth_score(reference, &img))
        })
        .collect();

    let mut best: Option<(GridResult, f64)> = None;
    let mut best_overlap = 0;
    for (index, s) in scored.into_iter().enumerate() {
        let (score, overlap) = s?;
        best_overlap = best_overlap.max(overlap);
        if overlap < min_overlap {
            continue;
        }
        let correction = spec.candidate(index);
        let m = magnitude(&correction);
        let better = match &best {
            None => true,
            Some((b, bm)) => match score.total_cmp(&b.score) {
                Ordering::Less => true,
                Ordering::Equal => m < *bm,
                Ordering::Greater => false,
            },
        };
        if better {
            best = Some((
                GridResult {
                    correction,
                    score,
                    overlap,
                    index,
                },
                m,
            ));
        }
    }
    best.map(|(r, _)| r)
        .ok_or(RefineError::InsufficientOverlap {
            best: best_overlap,
            required: min_overlap,
        })
}

/// Axis groups searched jointly, indexing `GridSpec::axes`: lateral shift
/// with yaw, vertical shift with pitch, then depth and roll on their own.
pub const COUPLED_BLOCKS: [&[usize]; 4] = [&[0, 4], &[1, 5], &[2], &[3]];

/// Coarse-to-fine block coordinate search against a reference LiDAR-image
/// rendered at the true pose. Each round sweeps the coupled blocks, moving
/// to the best candidate of every block, then halves the extents. Rounds
/// stop once the translation spacing would drop below `min_spacing`.
#[derive(Debug, Clone)]
pub struct GridSearchRegressor<'a> {
    pub reference: &'a DepthImage,
    pub map: &'a PointCloudMap,
    pub pipeline: RenderPipeline,
    /// Steps per axis in two-axis blocks; odd counts include the current pose.
    pub pair_steps: usize,
    pub single_steps: usize,
    pub max_translation: f64,
    pub max_rotation: f64,
    pub max_rounds: usize,
    /// Sweeps per round; a sweep that moves nothing ends the round early.
    pub sweeps: usize,
    pub min_spacing: f64,
    /// Required overlap as a fraction of the reference's nonzero pixels,
    /// never below `DEFAULT_MIN_OVERLAP`.
    pub min_overlap_fraction: f64,
}

impl<'a> GridSearchRegressor<'a> {
    pub fn for_stage(
        stage: &StageSpec,
        reference: &'a DepthImage,
        map: &'a PointCloudMap,
        pipeline: RenderPipeline,
    ) -> Self {
        Self {
            reference,
            map,
            pipeline,
            pair_steps: 5,
            single_steps: 9,
            max_translation: stage.max_translation,
            max_rotation: stage.max_rotation(),
            max_rounds: 10,
            sweeps: 2,
            min_spacing: 0.04,
            min_overlap_fraction: 0.3,
        }
    }

    pub fn min_overlap(&self) -> usize {
        DEFAULT_MIN_OVERLAP
            .max((self.reference.nonzero_count() as f64 * self.min_overlap_fraction) as usize)
    }

    fn block_spec(&self, block: &[usize], translation: f64, rotation: f64) -> GridSpec {
        let steps = if block.len() == 1 {
            self.single_steps
        } else {
            self.pair_steps
        };
        let mut axes = [GridAxis::FIXED; 6];
        for &k in block {
            axes[k] = GridAxis::new(steps, if k < 3 { translation } else { rotation });
        }
        GridSpec { axes }
    }

    /// Correction `C` such that `C ∘ h_current` is the search result.
    pub fn search(&self, h_current: &PoseSE3) -> Result<PoseSE3, RefineError> {
        let min_overlap = self.min_overlap();
        let spacing_steps = (self.pair_steps.min(self.single_steps).max(2) - 1) as f64;
        let mut pose = *h_current;
        let mut correction = PoseSE3::IDENTITY;
        let mut scored_any = false;
        let mut last_err = None;
        let mut scale = 1.0;
        for round in 0..self.max_rounds.max(1) {
            let (t, r) = (self.max_translation * scale, self.max_rotation * scale);
            if round > 0 && 2.0 * t / spacing_steps < self.min_spacing {
                break;
            }
            for _ in 0..self.sweeps.max(1) {
                let mut moved = false;
                for block in COUPLED_BLOCKS {
                    let spec = self.block_spec(block, t, r);
                    match grid_search(
                        self.reference,
                        self.map,
                        &self.pipeline,
                        &pose,
                        &spec,
                        min_overlap,
                    ) {
                        Ok(best) => {
                            scored_any = true;
                            if best.correction != PoseSE3::IDENTITY {
                                pose = best.correction.compose(&pose);
                                correction = best.correction.compose(&correction);
                                moved = true;
                            }
                        }
                        Err(e @ RefineError::InsufficientOverlap { .. }) => last_err = Some(e),
                        Err(e) => return Err(e),
                    }
                }
                if !moved {
                    break;
                }
            }
            scale *= 0.5;
        }
        match (scored_any, last_err) {
            (false, Some(e)) => Err(e),
            _ => Ok(correction),
        }
    }
}

impl Regressor for GridSearchRegressor<'_> {
    fn predict(&self, _rgb: &RgbImage, lidar: &DepthImage) -> Result<PoseTarget, RefineError> {
        let c = self.search(&lidar.generating_pose)?;
        Ok(PoseTarget {
            translation: c.translation,
            rotation: c.rotation,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraModel;
    use crate::se3::Quat;
    use nalgebra::Point3;

    /// Panels at staggered depths with a floor, facing the camera.
    fn wall_scene() -> PointCloudMap {
        let mut pts = Vec::new();
        for panel in 0..6 {
            let z = 10.0 + 1.5 * (panel % 3) as f32;
            let x0 = -6.0 + 2.0 * panel as f32;
            for i in 0..20 {
                for j in 0..30 {
                    pts.push(Point3::new(x0 + 0.1 * i as f32, -1.5 + 0.1 * j as f32, z));
                }
            }
        }
        for i in 0..60 {
            for k in 0..60 {
                pts.push(Point3::new(
                    -6.0 + 0.2 * i as f32,
                    1.5,
                    2.0 + 0.2 * k as f32,
                ));
            }
        }
        PointCloudMap::new(pts)
    }

    fn pipe() -> RenderPipeline {
        RenderPipeline::new(CameraModel::pinhole(80.0, 80.0, 64.0, 32.0, 128, 64).unwrap())
    }

    #[test]
    fn grid_indexing() {
        let g = GridSpec::uniform(3, 1.0, 0.1);
        assert_eq!(g.len(), 729);
        assert_eq!(g.candidate(364), PoseSE3::IDENTITY);
        assert_eq!(g.candidate(0).translation, Vector3::new(-1.0, -1.0, -1.0));
        assert_eq!(GridAxis::new(41, 2.0).value(20), 0.0);
        assert_eq!(GridAxis::new(1, 2.0).value(0), 0.0);
        let l = GridSpec::longitudinal(5, 2.0);
        assert_eq!(l.len(), 5);
        assert_eq!(l.candidate(4).translation, Vector3::new(0.0, 0.0, 2.0));
    }

    #[test]
    fn identity_at_ground_truth() {
        let (map, pipe) = (wall_scene(), pipe());
        let gt = PoseSE3::IDENTITY;
        let reference = pipe.render(&map, &gt).unwrap();
        let spec = GridSpec::uniform(3, 0.5, 0.05);
        let r = grid_search(&reference, &map, &pipe, &gt, &spec, DEFAULT_MIN_OVERLAP).unwrap();
        assert_eq!(r.correction, PoseSE3::IDENTITY);
        assert_eq!(r.score, 0.0);
    }

    #[test]
    fn recovers_longitudinal_offset() {
        let (map, pipe) = (wall_scene(), pipe());
        let gt = PoseSE3::IDENTITY;
        let reference = pipe.render(&map, &gt).unwrap();
        let current = PoseSE3::from_translation(Vector3::new(0.0, 0.0, -0.7)).compose(&gt);
        let coarse = grid_search(
            &reference,
            &map,
            &pipe,
            &current,
            &GridSpec::longitudinal(41, 2.0),
            50,
        )
        .unwrap();
        assert!(
            (coarse.correction.translation.z - 0.7).abs() <= 0.05,
            "{:?}",
            coarse.correction
        );

        // Exhaustive scoring at ten times finer resolution agrees to half a step.
        let fine = grid_search(
            &reference,
            &map,
            &pipe,
            &current,
            &GridSpec::longitudinal(401, 2.0),
            50,
        )
        .unwrap();
        assert!((fine.correction.translation.z - coarse.correction.translation.z).abs() <= 0.05);
    }

    #[test]
    fn empty_overlap_is_an_error() {
        let (map, pipe) = (wall_scene(), pipe());
        let reference = DepthImage::zeros(pipe.camera.padded(), PoseSE3::IDENTITY);
        let err = grid_search(
            &reference,
            &map,
            &pipe,
            &PoseSE3::IDENTITY,
            &GridSpec::uniform(3, 0.1, 0.01),
            50,
        )
        .unwrap_err();
        assert!(err.to_string().contains("insufficient overlap"), "{err}");
    }

    #[test]
    fn ties_prefer_small_corrections() {
        // Rotations of 1e-12 rad render identically, so all scores tie.
        let (map, pipe) = (wall_scene(), pipe());
        let reference = pipe.render(&map, &PoseSE3::IDENTITY).unwrap();
        let mut spec = GridSpec::longitudinal(1, 0.0);
        spec.axes[4] = GridAxis::new(3, 1e-12);
        let r = grid_search(&reference, &map, &pipe, &PoseSE3::IDENTITY, &spec, 50).unwrap();
        assert_eq!(r.index, 1);
        assert_eq!(r.correction.rotation, Quat::IDENTITY);
    }

    #[test]
    fn coarse_to_fine_regressor_converges() {
        let (map, pipe) = (wall_scene(), pipe());
        let gt = PoseSE3::IDENTITY;
        let reference = pipe.render(&map, &gt).unwrap();
        let stage = StageSpec::new("g", 1.0, 4.0);
        let reg = GridSearchRegressor::for_stage(&stage, &reference, &map, pipe);
        let current = PoseSE3::new(
            Quat::from_axis_angle(&Vector3::y(), 0.03),
            Vector3::new(0.4, -0.2, 0.6),
        )
        .unwrap();
        let c = reg.search(&current).unwrap();
        let out = c.compose(&current);
        assert!(out.translation.norm() < 0.2, "{out:?}");
    }
}
