//! Runtime breakdown of one localization step: z-buffer rendering,
//! occlusion filtering and regression.

use std::fmt::Write;
use std::time::Instant;

use image::RgbImage;
use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::{EvalError, Stats};
use crate::map::{crop_local, CropSpec, PointCloudMap};
use crate::occlusion::occlusion_filter;
use crate::pipeline::RenderPipeline;
use crate::projection::{pad_image, Projector};
use crate::refine::{RefineError, Regressor};
use crate::se3::PoseSE3;

pub const MIN_WARMUP: usize = 3;

/// Published GPU timings, reported next to local numbers and never compared.
pub const PAPER_REFERENCE: TimingSample = TimingSample {
    z_buffer_ms: 8.6,
    occlusion_ms: 1.4,
    regressor_ms: 4.6,
    total_ms: 14.7,
};
pub const PAPER_REFERENCE_HZ: f64 = 68.0;
pub const PAPER_REFERENCE_THREE_STAGE_MS: f64 = 44.1;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("no frames to benchmark")]
    NoFrames,
    #[error("repetitions must be positive")]
    NoRepetitions,
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Stats(#[from] EvalError),
}

/// Milliseconds per step of one execution. Cropping counts towards the
/// z-buffer step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingSample {
    pub z_buffer_ms: f64,
    pub occlusion_ms: f64,
    pub regressor_ms: f64,
    pub total_ms: f64,
}

impl TimingSample {
    pub fn parts_sum(&self) -> f64 {
        self.z_buffer_ms + self.occlusion_ms + self.regressor_ms
    }

    fn columns(&self) -> [f64; 4] {
        [
            self.z_buffer_ms,
            self.occlusion_ms,
            self.regressor_ms,
            self.total_ms,
        ]
    }

    fn from_columns(c: [f64; 4]) -> Self {
        Self {
            z_buffer_ms: c[0],
            occlusion_ms: c[1],
            regressor_ms: c[2],
            total_ms: c[3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingBreakdown {
    pub samples: Vec<TimingSample>,
    pub mean: TimingSample,
    pub median: TimingSample,
}

impl TimingBreakdown {
    pub fn from_samples(samples: Vec<TimingSample>) -> Result<Self, BenchError> {
        let mut mean = [0.0; 4];
        let mut median = [0.0; 4];
        for k in 0..4 {
            let col: Vec<f64> = samples.iter().map(|s| s.columns()[k]).collect();
            let st = Stats::of(&col)?;
            mean[k] = st.mean;
            median[k] = st.median;
        }
        Ok(Self {
            samples,
            mean: TimingSample::from_columns(mean),
            median: TimingSample::from_columns(median),
        })
    }
}

/// Times `repetitions` passes over `frames` after `warmup` (at least
/// `MIN_WARMUP`) untimed passes. The pipeline runs on a single worker.
pub fn benchmark(
    map: &PointCloudMap,
    pipeline: &RenderPipeline,
    frames: &[(RgbImage, PoseSE3)],
    regressor: &dyn Regressor,
    warmup: usize,
    repetitions: usize,
) -> Result<TimingBreakdown, BenchError> {
    if frames.is_empty() {
        return Err(BenchError::NoFrames);
    }
    if repetitions == 0 {
        return Err(BenchError::NoRepetitions);
    }
    let pipeline = pipeline.with_workers(1);
    let run = |rgb: &RgbImage, pose: &PoseSE3| -> Result<TimingSample, BenchError> {
        let t0 = Instant::now();
        let local = crop_local(map, pose, &pipeline.crop);
        let img = pipeline.projector.project(&local, pose, &pipeline.camera);
        let t1 = Instant::now();
        let img = match &pipeline.occlusion {
            Some(p) => occlusion_filter(&img, p).map_err(RefineError::from)?,
            None => img,
        };
        let img = if pipeline.pad { pad_image(&img) } else { img };
        let t2 = Instant::now();
        regressor.predict(rgb, &img)?;
        let t3 = Instant::now();
        let ms = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1e3;
        Ok(TimingSample {
            z_buffer_ms: ms(t0, t1),
            occlusion_ms: ms(t1, t2),
            regressor_ms: ms(t2, t3),
            total_ms: ms(t0, t3),
        })
    };
    for i in 0..warmup.max(MIN_WARMUP) {
        let (rgb, pose) = &frames[i % frames.len()];
        run(rgb, pose)?;
    }
    let mut samples = Vec::with_capacity(repetitions * frames.len());
    for _ in 0..repetitions {
        for (rgb, pose) in frames {
            samples.push(run(rgb, pose)?);
        }
    }
    TimingBreakdown::from_samples(samples)
}

pub const BREAKDOWN_CSV_HEADER: &str = "row,z_buffer_ms,occlusion_ms,regressor_ms,total_ms";

/// Mean, median and the published reference, one row each.
pub fn breakdown_csv(b: &TimingBreakdown) -> String {
    let mut out = format!("{BREAKDOWN_CSV_HEADER}\n");
    for (name, s) in [
        ("mean", &b.mean),
        ("median", &b.median),
        ("paper_reference_gpu", &PAPER_REFERENCE),
    ] {
        let _ = writeln!(
            out,
            "{name},{:.4},{:.4},{:.4},{:.4}",
            s.z_buffer_ms, s.occlusion_ms, s.regressor_ms, s.total_ms
        );
    }
    out
}

#[derive(Serialize)]
struct BreakdownReport<'a> {
    executions: usize,
    mean: &'a TimingSample,
    median: &'a TimingSample,
    paper_reference_gpu: &'a TimingSample,
    paper_reference_hz: f64,
    paper_reference_three_stage_ms: f64,
}

pub fn breakdown_json(b: &TimingBreakdown) -> String {
    let r = BreakdownReport {
        executions: b.samples.len(),
        mean: &b.mean,
        median: &b.median,
        paper_reference_gpu: &PAPER_REFERENCE,
        paper_reference_hz: PAPER_REFERENCE_HZ,
        paper_reference_three_stage_ms: PAPER_REFERENCE_THREE_STAGE_MS,
    };
    let mut s = serde_json::to_string_pretty(&r).expect("report serializes");
    s.push('\n');
    s
}

/// `n` points uniform in a box spanning x, y in `[-half, half]` and z in
/// `[0, depth]`.
pub fn uniform_box_cloud(n: usize, half: f32, depth: f32, seed: u64) -> PointCloudMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..n)
        .map(|_| {
            Point3::new(
                rng.random_range(-half..half),
                rng.random_range(-half..half),
                rng.random_range(0.0..depth),
            )
        })
        .collect();
    PointCloudMap::new(pts)
}

pub const SCALING_FORWARD: [f64; 5] = [5.0, 10.0, 20.0, 40.0, 80.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub crop_forward: f64,
    pub points: usize,
    pub z_buffer_ms: f64,
}

/// Median z-buffer time of the cropped cloud for each forward crop extent.
pub fn zbuffer_scaling(
    map: &PointCloudMap,
    pipeline: &RenderPipeline,
    pose: &PoseSE3,
    forwards: &[f64],
    repetitions: usize,
) -> Result<Vec<ScalingPoint>, BenchError> {
    if repetitions == 0 {
        return Err(BenchError::NoRepetitions);
    }
    let projector = Projector::new(pipeline.projector.z_near, 1);
    let mut out = Vec::with_capacity(forwards.len());
    for &forward in forwards {
        let crop = CropSpec {
            forward,
            ..pipeline.crop
        };
        let local = crop_local(map, pose, &crop);
        let mut times = Vec::with_capacity(repetitions);
        for i in 0..repetitions + MIN_WARMUP {
            let t = Instant::now();
            let img = projector.project(&local, pose, &pipeline.camera);
            let ms = t.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(&img);
            if i >= MIN_WARMUP {
                times.push(ms);
            }
        }
        out.push(ScalingPoint {
            crop_forward: forward,
            points: local.len(),
            z_buffer_ms: Stats::of(&times)?.median,
        });
    }
    Ok(out)
}

pub const SCALING_CSV_HEADER: &str = "crop_forward,points,z_buffer_ms";

pub fn scaling_csv(points: &[ScalingPoint]) -> String {
    let mut out = format!("{SCALING_CSV_HEADER}\n");
    for p in points {
        let _ = writeln!(out, "{},{},{:.4}", p.crop_forward, p.points, p.z_buffer_ms);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refine::IdentityRegressor;
    use crate::scene::{synthetic_camera, synthetic_scene, synthetic_trajectory};

    #[test]
    fn breakdown_shape_and_identity_regressor() {
        let map = synthetic_scene();
        let pipe = RenderPipeline::new(synthetic_camera());
        let frames: Vec<_> = synthetic_trajectory(3)
            .into_iter()
            .map(|p| (RgbImage::new(320, 128), p))
            .collect();
        let b = benchmark(&map, &pipe, &frames, &IdentityRegressor, 3, 2).unwrap();
        assert_eq!(b.samples.len(), 6);
        assert!(b.median.regressor_ms < 0.5);
        for s in &b.samples {
            assert!(s.total_ms >= s.parts_sum() - 1.0);
        }
        let csv = breakdown_csv(&b);
        assert_eq!(csv.lines().next().unwrap().split(',').count(), 5);
        assert!(csv.contains("paper_reference_gpu,8.6000,1.4000,4.6000,14.7000"));
        let json: serde_json::Value = serde_json::from_str(&breakdown_json(&b)).unwrap();
        assert_eq!(json["executions"], 6);
        assert!(matches!(
            benchmark(&map, &pipe, &[], &IdentityRegressor, 3, 1),
            Err(BenchError::NoFrames)
        ));
    }

    #[test]
    fn box_cloud_crop_counts_double() {
        let cloud = uniform_box_cloud(100_000, 40.0, 80.0, 1);
        let pipe = RenderPipeline::new(synthetic_camera());
        let pts = zbuffer_scaling(&cloud, &pipe, &PoseSE3::IDENTITY, &SCALING_FORWARD, 1).unwrap();
        for w in pts.windows(2) {
            let ratio = w[1].points as f64 / w[0].points as f64;
            assert!((1.8..2.2).contains(&ratio), "{ratio}");
        }
        assert_eq!(scaling_csv(&pts).lines().count(), 6);
    }
}
