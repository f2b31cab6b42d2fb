//! Iterative refinement: render at the current estimate, ask a regressor for
//! a correction `H_out`, apply it as `pose_compose(H_out, current)`, repeat
//! with the next stage.

mod external;
mod grid;
mod oracle;
mod trace;

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::PoseTarget;
use crate::map::PointCloudMap;
use crate::occlusion::OcclusionError;
use crate::pipeline::RenderPipeline;
use crate::projection::DepthImage;
use crate::se3::{pose_compose, pose_error, PoseErrorVec, PoseSE3};

pub use external::{
    format_request, format_response, parse_request, parse_response, process_pending,
    ExternalRegressor, SpoolRequest, SpoolResponse, SHUTDOWN_SENTINEL,
};
pub use grid::{
    depth_score, grid_search, GridAxis, GridResult, GridSearchRegressor, GridSpec, COUPLED_BLOCKS,
    DEFAULT_MIN_OVERLAP,
};
pub use oracle::{oracle_correction, OracleRegressor};
pub use trace::{trace_csv, trace_json, TRACE_CSV_HEADER};

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("stage schedule is empty")]
    EmptySchedule,
    #[error("stage {stage}: no regressor bound to id {id:?}")]
    UnknownRegressor { stage: usize, id: String },
    #[error("invalid stage {stage}: {msg}")]
    InvalidStage { stage: usize, msg: String },
    #[error("render failed: {0}")]
    Render(#[from] OcclusionError),
    #[error(
        "insufficient overlap: best candidate shares {best} co-nonzero pixels, {required} required"
    )]
    InsufficientOverlap { best: usize, required: usize },
    #[error("regressor returned a zero-norm rotation")]
    ZeroRotation,
    #[error("external regressor: {0}")]
    External(String),
    #[error("external regressor timed out after {0} ms waiting for {1}")]
    Timeout(u64, String),
    #[error("invalid oracle contraction {0}, expected a value in [0, 1]")]
    BadContraction(f64),
}

/// Anything that maps an (RGB frame, LiDAR-image) pair to a correction.
/// The current estimate is available as `lidar.generating_pose`.
pub trait Regressor: Send + Sync {
    fn predict(&self, rgb: &RgbImage, lidar: &DepthImage) -> Result<PoseTarget, RefineError>;
}

/// Predicts no correction.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRegressor;

impl Regressor for IdentityRegressor {
    fn predict(&self, _rgb: &RgbImage, _lidar: &DepthImage) -> Result<PoseTarget, RefineError> {
        Ok(PoseTarget::identity())
    }
}

/// Regressors addressed by the id named in each stage.
#[derive(Default)]
pub struct RegressorSet<'a> {
    bound: BTreeMap<String, Box<dyn Regressor + 'a>>,
}

impl<'a> RegressorSet<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, r: impl Regressor + 'a) -> &mut Self {
        self.bound.insert(id.into(), Box::new(r));
        self
    }

    pub fn insert_boxed(&mut self, id: impl Into<String>, r: Box<dyn Regressor + 'a>) -> &mut Self {
        self.bound.insert(id.into(), r);
        self
    }

    pub fn get(&self, id: &str) -> Option<&(dyn Regressor + 'a)> {
        self.bound.get(id).map(|b| b.as_ref())
    }
}

/// One refinement stage and the error range its regressor is valid for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub regressor: String,
    /// Per-axis translation bound, meters.
    pub max_translation: f64,
    /// Per-axis rotation bound, degrees.
    pub max_rotation_deg: f64,
}

impl StageSpec {
    pub fn new(regressor: impl Into<String>, max_translation: f64, max_rotation_deg: f64) -> Self {
        Self {
            regressor: regressor.into(),
            max_translation,
            max_rotation_deg,
        }
    }

    pub fn max_rotation(&self) -> f64 {
        self.max_rotation_deg.to_radians()
    }

    /// Whether an incoming error lies outside this stage's range.
    pub fn exceeded_by(&self, e: &PoseErrorVec) -> bool {
        let [x, y, z, r, p, w] = e.components();
        [x, y, z].iter().any(|v| v.abs() > self.max_translation)
            || [r, p, w].iter().any(|v| v.abs() > self.max_rotation())
    }
}

/// Error ranges of the three-stage cascade: (2 m, 10°), (1 m, 2°), (0.6 m, 2°).
pub const DEFAULT_STAGE_RANGES: [(f64, f64); 3] = [(2.0, 10.0), (1.0, 2.0), (0.6, 2.0)];

/// Default schedule with regressor ids `stage1`, `stage2`, `stage3`.
pub fn default_stages() -> Vec<StageSpec> {
    stages_from_ranges(&DEFAULT_STAGE_RANGES)
}

pub fn stages_from_ranges(ranges: &[(f64, f64)]) -> Vec<StageSpec> {
    ranges
        .iter()
        .enumerate()
        .map(|(i, &(t, r))| StageSpec::new(format!("stage{}", i + 1), t, r))
        .collect()
}

/// Parses `t:r,t:r,...` (meters, degrees) into stages `stage1..`.
pub fn parse_stages(text: &str) -> Result<Vec<StageSpec>, String> {
    let ranges = text
        .split(',')
        .map(|item| {
            let (t, r) = item
                .split_once(':')
                .ok_or_else(|| format!("expected t:r, got {item:?}"))?;
            let t: f64 = t
                .trim()
                .parse()
                .map_err(|_| format!("invalid translation {t:?}"))?;
            let r: f64 = r
                .trim()
                .parse()
                .map_err(|_| format!("invalid rotation {r:?}"))?;
            Ok((t, r))
        })
        .collect::<Result<Vec<_>, String>>()?;
    let stages = stages_from_ranges(&ranges);
    validate_stages(&stages).map_err(|e| e.to_string())?;
    Ok(stages)
}

pub fn validate_stages(stages: &[StageSpec]) -> Result<(), RefineError> {
    if stages.is_empty() {
        return Err(RefineError::EmptySchedule);
    }
    for (i, s) in stages.iter().enumerate() {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if !ok(s.max_translation) || !ok(s.max_rotation_deg) {
            return Err(RefineError::InvalidStage {
                stage: i + 1,
                msg: "ranges must be positive".into(),
            });
        }
        if i > 0 && s.max_translation > stages[i - 1].max_translation {
            return Err(RefineError::InvalidStage {
                stage: i + 1,
                msg: "translation ranges must be non-increasing".into(),
            });
        }
    }
    Ok(())
}

/// Milliseconds spent in one stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub crop_ms: f64,
    pub z_buffer_ms: f64,
    pub occlusion_ms: f64,
    pub regressor_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// 0 for the initial estimate, then one record per executed stage.
    pub stage: usize,
    pub regressor: Option<String>,
    /// Estimate after this stage.
    pub pose: PoseSE3,
    /// Pose the stage rendered from.
    pub render_pose: Option<PoseSE3>,
    pub correction: Option<PoseTarget>,
    pub error: Option<PoseErrorVec>,
    pub timings: Option<StageTimings>,
    /// The incoming error exceeded the stage's range.
    pub out_of_range: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub records: Vec<StageRecord>,
}

impl RefinementTrace {
    pub fn final_pose(&self) -> Option<PoseSE3> {
        self.records.last().map(|r| r.pose)
    }

    pub fn errors(&self) -> impl Iterator<Item = Option<PoseErrorVec>> + '_ {
        self.records.iter().map(|r| r.error)
    }

    /// Drops wall-clock measurements so traces compare byte for byte.
    pub fn without_timings(mut self) -> Self {
        self.records.iter_mut().for_each(|r| r.timings = None);
        self
    }
}

/// A refinement that stopped early, with the stages completed so far.
#[derive(Debug)]
pub struct RefineFailure {
    pub error: RefineError,
    pub trace: RefinementTrace,
}

impl fmt::Display for RefineFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (after {} stage(s))",
            self.error,
            self.trace.records.len().saturating_sub(1)
        )
    }
}

impl std::error::Error for RefineFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Normalized correction as a pose.
pub fn correction_pose(target: &PoseTarget) -> Result<PoseSE3, RefineError> {
    let q = target
        .rotation
        .normalize()
        .map_err(|_| RefineError::ZeroRotation)?;
    Ok(PoseSE3 {
        rotation: q,
        translation: target.translation,
    })
}

/// Runs the stage schedule from `h_init`. With `h_gt` the trace carries
/// per-stage errors and out-of-range flags.
pub fn refine(
    h_init: &PoseSE3,
    frame: &RgbImage,
    map: &PointCloudMap,
    pipeline: &RenderPipeline,
    stages: &[StageSpec],
    regressors: &RegressorSet<'_>,
    h_gt: Option<&PoseSE3>,
) -> Result<(PoseSE3, RefinementTrace), RefineFailure> {
    let mut trace = RefinementTrace::default();
    let fail = |error, trace| Err(RefineFailure { error, trace });
    if let Err(e) = validate_stages(stages) {
        return fail(e, trace);
    }
    let mut bound = Vec::with_capacity(stages.len());
    for (i, s) in stages.iter().enumerate() {
        match regressors.get(&s.regressor) {
            Some(r) => bound.push(r),
            None => {
                return fail(
                    RefineError::UnknownRegressor {
                        stage: i + 1,
                        id: s.regressor.clone(),
                    },
                    trace,
                )
            }
        }
    }

    let error_of = |p: &PoseSE3| h_gt.map(|gt| pose_error(gt, p));
    trace.records.push(StageRecord {
        stage: 0,
        regressor: None,
        pose: *h_init,
        render_pose: None,
        correction: None,
        error: error_of(h_init),
        timings: None,
        out_of_range: false,
    });

    let mut current = *h_init;
    for (i, (spec, regressor)) in stages.iter().zip(bound).enumerate() {
        let incoming = error_of(&current);
        let start = Instant::now();
        let (lidar, rt) = match pipeline.render_timed(map, &current) {
            Ok(v) => v,
            Err(e) => return fail(e.into(), trace),
        };
        let t_reg = Instant::now();
        let target = match regressor.predict(frame, &lidar) {
            Ok(t) => t,
            Err(e) => return fail(e, trace),
        };
        let regressor_ms = t_reg.elapsed().as_secs_f64() * 1e3;
        let h_out = match correction_pose(&target) {
            Ok(p) => p,
            Err(e) => return fail(e, trace),
        };
        let render_pose = current;
        current = pose_compose(&h_out, &current);
        let total_ms = start.elapsed().as_secs_f64() * 1e3;
        trace.records.push(StageRecord {
            stage: i + 1,
            regressor: Some(spec.regressor.clone()),
            pose: current,
            render_pose: Some(render_pose),
            correction: Some(target),
            error: error_of(&current),
            timings: Some(StageTimings {
                crop_ms: rt.crop_ms,
                z_buffer_ms: rt.z_buffer_ms,
                occlusion_ms: rt.occlusion_ms,
                regressor_ms,
                total_ms,
            }),
            out_of_range: incoming.is_some_and(|e| spec.exceeded_by(&e)),
        });
    }
    Ok((current, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{synthetic_camera, synthetic_scene, synthetic_trajectory};
    use crate::se3::{sample_init_pose, NoiseSpec, Quat};
    use nalgebra::Vector3;

    fn setup() -> (PointCloudMap, RenderPipeline, PoseSE3, RgbImage) {
        let cam = synthetic_camera();
        (
            synthetic_scene(),
            RenderPipeline::new(cam),
            synthetic_trajectory(4)[2],
            RgbImage::new(320, 128),
        )
    }

    fn bind_all<'a>(
        stages: &[StageSpec],
        make: impl Fn() -> Box<dyn Regressor + 'a>,
    ) -> RegressorSet<'a> {
        let mut set = RegressorSet::new();
        for s in stages {
            set.insert_boxed(s.regressor.clone(), make());
        }
        set
    }

    #[test]
    fn identity_regressor_keeps_the_pose() {
        let (map, pipe, gt, rgb) = setup();
        let init = sample_init_pose(&gt, &NoiseSpec::from_degrees(1.0, 5.0).unwrap(), 3);
        let stages = default_stages();
        let set = bind_all(&stages, || Box::new(IdentityRegressor));
        let (out, trace) = refine(&init, &rgb, &map, &pipe, &stages, &set, Some(&gt)).unwrap();
        assert_eq!(out, init);
        assert_eq!(trace.records.len(), 4);
        assert!(trace
            .records
            .iter()
            .all(|r| r.pose == init && r.error == trace.records[0].error));
        assert_eq!(trace.records[0].pose, init);
    }

    #[test]
    fn exact_oracle_lands_on_ground_truth() {
        let (map, pipe, gt, rgb) = setup();
        let init = sample_init_pose(&gt, &NoiseSpec::from_degrees(2.0, 10.0).unwrap(), 9);
        let stages = default_stages();
        let set = bind_all(&stages, || Box::new(OracleRegressor::exact(gt)));
        let (_, trace) = refine(&init, &rgb, &map, &pipe, &stages, &set, Some(&gt)).unwrap();
        let after_one = trace.records[1].pose;
        assert!((after_one.to_matrix() - gt.to_matrix()).abs().max() < 1e-9);
    }

    #[test]
    fn each_stage_renders_from_the_current_estimate() {
        let (map, pipe, gt, rgb) = setup();
        let init = sample_init_pose(&gt, &NoiseSpec::from_degrees(2.0, 10.0).unwrap(), 4);
        let stages = default_stages();
        let set = bind_all(&stages, || Box::new(OracleRegressor::new(gt, 0.5).unwrap()));
        let (_, trace) = refine(&init, &rgb, &map, &pipe, &stages, &set, Some(&gt)).unwrap();
        for w in trace.records.windows(2) {
            assert_eq!(w[1].render_pose, Some(w[0].pose));
        }
    }

    #[test]
    fn out_of_range_is_flagged_not_fatal() {
        let (map, pipe, gt, rgb) = setup();
        let init = PoseSE3::from_translation(Vector3::new(0.0, 0.0, 1.5)).compose(&gt);
        let stages = stages_from_ranges(&[(1.0, 2.0)]);
        let set = bind_all(&stages, || Box::new(IdentityRegressor));
        let (_, trace) = refine(&init, &rgb, &map, &pipe, &stages, &set, Some(&gt)).unwrap();
        assert!(trace.records[1].out_of_range);
        let (_, trace) = refine(&gt, &rgb, &map, &pipe, &stages, &set, Some(&gt)).unwrap();
        assert!(!trace.records[1].out_of_range);
    }

    struct FailOnSecondCall(std::sync::atomic::AtomicUsize);

    impl Regressor for FailOnSecondCall {
        fn predict(&self, _: &RgbImage, _: &DepthImage) -> Result<PoseTarget, RefineError> {
            if self.0.fetch_add(1, std::sync::atomic::Ordering::SeqCst) == 1 {
                Err(RefineError::External("boom".into()))
            } else {
                Ok(PoseTarget {
                    translation: Vector3::new(0.1, 0.0, 0.0),
                    rotation: Quat::IDENTITY,
                })
            }
        }
    }

    #[test]
    fn failure_returns_partial_trace() {
        let (map, pipe, gt, rgb) = setup();
        let stages: Vec<StageSpec> = (0..3).map(|_| StageSpec::new("f", 2.0, 10.0)).collect();
        let mut set = RegressorSet::new();
        set.insert("f", FailOnSecondCall(Default::default()));
        let err = refine(&gt, &rgb, &map, &pipe, &stages, &set, None).unwrap_err();
        assert!(matches!(err.error, RefineError::External(_)));
        assert_eq!(err.trace.records.len(), 2);

        let missing = refine(&gt, &rgb, &map, &pipe, &default_stages(), &set, None).unwrap_err();
        assert!(matches!(
            missing.error,
            RefineError::UnknownRegressor { stage: 1, .. }
        ));
        assert!(matches!(
            refine(&gt, &rgb, &map, &pipe, &[], &set, None)
                .unwrap_err()
                .error,
            RefineError::EmptySchedule
        ));
    }

    #[test]
    fn zero_rotation_is_rejected() {
        struct Zero;
        impl Regressor for Zero {
            fn predict(&self, _: &RgbImage, _: &DepthImage) -> Result<PoseTarget, RefineError> {
                Ok(PoseTarget {
                    translation: Vector3::zeros(),
                    rotation: Quat::new(0.0, 0.0, 0.0, 0.0),
                })
            }
        }
        let (map, pipe, gt, rgb) = setup();
        let mut set = RegressorSet::new();
        set.insert("stage1", Zero);
        let err = refine(
            &gt,
            &rgb,
            &map,
            &pipe,
            &stages_from_ranges(&[(1.0, 1.0)]),
            &set,
            None,
        )
        .unwrap_err();
        assert!(matches!(err.error, RefineError::ZeroRotation));
    }

    #[test]
    fn stage_parsing_and_validation() {
        assert_eq!(parse_stages("2:10,1:2,0.6:2").unwrap(), default_stages());
        assert!(parse_stages("1:2,2:10").is_err());
        assert!(parse_stages("0:1").is_err());
        assert!(parse_stages("2").is_err());
        assert!(parse_stages("a:b").is_err());
    }
}
