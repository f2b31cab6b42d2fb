//! Subcommand implementations. Every artifact is written atomically under
//! the configured output directory.

use std::fmt::Write as _;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use image::{ImageFormat, RgbImage};
use lidarloc_core::bench::{
    benchmark, breakdown_csv, breakdown_json, scaling_csv, uniform_box_cloud, zbuffer_scaling, SCALING_FORWARD,
};
use lidarloc_core::eval::{
    error_pdf_svg, summarize, summary_csv, summary_json, summary_rows, StepErrors, SummaryRow, SUMMARY_CSV_HEADER,
};
use lidarloc_core::kitti::{build_map, load_scans, read_poses, read_text, read_velo_to_cam, SequencePaths};
use lidarloc_core::losses::PoseTarget;
use lidarloc_core::map::{voxel_downsample, write_map_binary};
use lidarloc_core::projection::{overlay, write_depth_png16, write_depth_raw};
use lidarloc_core::refine::{
    refine, trace_csv, ExternalRegressor, GridSearchRegressor, IdentityRegressor, OracleRegressor,
    RefinementTrace, Regressor, RegressorSet, TRACE_CSV_HEADER,
};
use lidarloc_core::se3::{parse_pose_line, pose_error, sample_init_pose, write_poses, PoseErrorVec};
use lidarloc_core::{DepthImage, PoseSE3, RenderPipeline};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RegressorKind, RunConfig, Source};
use crate::data::{frame_seed, Scene};
use crate::error::CliError;
use crate::output::{json_line, write_atomic, write_text};

/// Depth at the far end of the overlay colour ramp.
const OVERLAY_MAX_DEPTH: f32 = 50.0;

pub struct Context {
    pub cfg: RunConfig,
    pub timestamp: bool,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    created_unix_ms: Option<u128>,
    config: &'a RunConfig,
}

impl Context {
    fn out(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    fn manifest(&self, command: &str) -> Result<(), CliError> {
        let created_unix_ms = self
            .timestamp
            .then(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0));
        let m = Manifest { command, version: env!("CARGO_PKG_VERSION"), created_unix_ms, config: &self.cfg };
        write_text(&self.out(&format!("manifest_{command}.json")), &json_line(&m))
    }

    fn pipeline(&self, scene: &Scene) -> RenderPipeline {
        RenderPipeline::new(scene.camera).with_crop(self.cfg.crop).with_occlusion(self.cfg.occlusion)
    }

    fn pool(&self) -> Result<rayon::ThreadPool, CliError> {
        rayon::ThreadPoolBuilder::new().num_threads(self.cfg.jobs).build().map_err(CliError::runtime)
    }

    fn init_pose(&self, scene: &Scene, frame: usize) -> (u64, PoseSE3) {
        let seed = frame_seed(self.cfg.seed, frame);
        (seed, sample_init_pose(&scene.gt[frame], &self.cfg.noise, seed))
    }
}

fn png_bytes(img: &RgbImage) -> Result<Vec<u8>, CliError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(CliError::runtime)?;
    Ok(buf.into_inner())
}

fn fmt_num(v: f64) -> String {
    format!("{}", v + 0.0)
}

pub fn build_map_cmd(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let path = cfg.map_path();
    let map = match cfg.source {
        Source::Synthetic => {
            voxel_downsample(&lidarloc_core::scene::synthetic_scene(), cfg.map_resolution).map_err(CliError::runtime)?
        }
        Source::Kitti => {
            let paths = SequencePaths::new(cfg.dataset_root()?, &cfg.sequence);
            let input = |e: lidarloc_core::kitti::KittiError| CliError::keyed("input", "dataset", e);
            let poses = read_poses(&read_text(&paths.poses).map_err(input)?).map_err(input)?;
            let calib = read_text(&paths.calib).map_err(input)?;
            let tr = read_velo_to_cam(&calib).map_err(input)?.unwrap_or(PoseSE3::IDENTITY);
            let end = cfg.first_frame + cfg.frames;
            if end > poses.len() {
                return Err(CliError::keyed("config", "frames", format!("{end} frames requested, {} poses", poses.len())));
            }
            let scans = load_scans(&paths, end).map_err(input)?;
            // Poses map camera to world; scans are in the LiDAR frame.
            let scan_poses: Vec<PoseSE3> = poses[..end].iter().map(|p| p.compose(&tr)).collect();
            build_map(&scans[cfg.first_frame..], &scan_poses[cfg.first_frame..], cfg.map_resolution).map_err(input)?
        }
    };
    let mut bytes = Vec::new();
    write_map_binary(&map, &mut bytes).map_err(CliError::runtime)?;
    write_atomic(&path, &bytes)?;
    ctx.manifest("build-map")?;
    println!("map {} points -> {}", map.len(), path.display());
    Ok(())
}

#[derive(Serialize)]
struct RenderInfo {
    frame: usize,
    seed: Option<u64>,
    pose: PoseSE3,
    gt: PoseSE3,
    /// Correction taking `pose` to `gt`.
    target: PoseTarget,
    width: u32,
    height: u32,
    nonzero: usize,
}

pub fn render_cmd(ctx: &Context, frame: usize, pose: Option<&str>, at_init: bool) -> Result<(), CliError> {
    let scene = Scene::load(&ctx.cfg)?;
    if frame >= scene.gt.len() {
        return Err(CliError::keyed("config", "frame", format!("frame {frame} exceeds {} poses", scene.gt.len())));
    }
    let gt = scene.gt[frame];
    let (seed, render_pose) = match (pose, at_init) {
        (Some(text), _) => (None, parse_pose_line(text, 1e-6).map_err(|e| CliError::keyed("config", "pose", e))?),
        (None, true) => {
            let (s, p) = ctx.init_pose(&scene, frame);
            (Some(s), p)
        }
        (None, false) => (None, gt),
    };
    let img = ctx.pipeline(&scene).render(&scene.map, &render_pose).map_err(CliError::runtime)?;
    let rgb = scene.rgb(frame)?;
    let stem = format!("render_{frame:06}");

    let mut png = Vec::new();
    write_depth_png16(&img, &mut png).map_err(CliError::runtime)?;
    write_atomic(&ctx.out(&format!("{stem}.png")), &png)?;
    let mut raw = Vec::new();
    write_depth_raw(&img, &mut raw).map_err(CliError::runtime)?;
    write_atomic(&ctx.out(&format!("{stem}.depth")), &raw)?;
    write_atomic(&ctx.out(&format!("{stem}_overlay.png")), &png_bytes(&overlay(&img, Some(&rgb), OVERLAY_MAX_DEPTH))?)?;
    write_atomic(&ctx.out(&format!("rgb_{frame:06}.png")), &png_bytes(&rgb)?)?;
    let c = gt.compose(&render_pose.inverse());
    let info = RenderInfo {
        frame,
        seed,
        pose: render_pose,
        gt,
        target: PoseTarget { translation: c.translation, rotation: c.rotation },
        width: img.width,
        height: img.height,
        nonzero: img.nonzero_count(),
    };
    write_text(&ctx.out(&format!("{stem}.json")), &json_line(&info))?;
    ctx.manifest("render")?;
    println!("{stem}: {}x{} px, {} nonzero", img.width, img.height, img.nonzero_count());
    Ok(())
}

const ERROR_COLUMNS: &str = "longitudinal,lateral,vertical,roll,pitch,yaw,translation_norm,total_angle";

fn error_fields(e: &PoseErrorVec) -> String {
    let mut s = String::new();
    for (k, v) in e.components().iter().enumerate() {
        let v = if k < 3 { *v } else { v.to_degrees() };
        let _ = write!(s, "{},", fmt_num(v));
    }
    let _ = write!(s, "{},{}", fmt_num(e.translation_norm()), fmt_num(e.total_angle.to_degrees()));
    s
}

fn pose_fields(p: &PoseSE3) -> String {
    let [a, b, c, d] = p.rotation.to_array();
    let t = p.translation;
    [t.x, t.y, t.z, a, b, c, d].iter().map(|v| fmt_num(*v)).collect::<Vec<_>>().join(",")
}

pub fn perturb_cmd(ctx: &Context) -> Result<(), CliError> {
    let scene = Scene::load(&ctx.cfg)?;
    let frames = scene.frame_range(&ctx.cfg)?;
    let mut csv = format!("frame,seed,tx,ty,tz,qa,qb,qc,qd,{ERROR_COLUMNS}\n");
    let mut poses = Vec::new();
    let mut errors = Vec::new();
    for f in frames {
        let (seed, init) = ctx.init_pose(&scene, f);
        let e = pose_error(&scene.gt[f], &init);
        let _ = writeln!(csv, "{f},{seed},{},{}", pose_fields(&init), error_fields(&e));
        poses.push(init);
        errors.push(e);
    }
    let summary = summarize(&errors).map_err(CliError::runtime)?;
    write_text(&ctx.out("perturb.csv"), &csv)?;
    write_text(&ctx.out("init_poses.txt"), &write_poses(&poses))?;
    write_text(&ctx.out("perturb_summary.csv"), &summary_csv(&summary))?;
    write_text(&ctx.out("perturb_summary.json"), &summary_json(&summary))?;
    ctx.manifest("perturb")?;
    println!(
        "perturbed {} frames: median translation {:.3} m, rotation {:.3} deg",
        errors.len(),
        summary.translation_norm.median,
        summary.total_angle.median.to_degrees()
    );
    Ok(())
}

/// One frame's refinement as stored in `refine_trace.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameTrace {
    pub frame: usize,
    pub seed: u64,
    pub gt: PoseSE3,
    pub trace: RefinementTrace,
    pub error: Option<String>,
}

fn regressors<'a>(
    ctx: &Context,
    scene: &'a Scene,
    frame: usize,
    reference: Option<&'a DepthImage>,
    score_pipeline: RenderPipeline,
) -> Result<RegressorSet<'a>, CliError> {
    let cfg = &ctx.cfg;
    let mut set = RegressorSet::new();
    for (k, stage) in cfg.stages.iter().enumerate() {
        let r: Box<dyn Regressor + 'a> = match cfg.regressor {
            RegressorKind::Identity => Box::new(IdentityRegressor),
            RegressorKind::Oracle => {
                Box::new(OracleRegressor::new(scene.gt[frame], cfg.oracle_contraction).map_err(CliError::runtime)?)
            }
            RegressorKind::Grid => Box::new(GridSearchRegressor::for_stage(
                stage,
                reference.expect("grid search needs a reference"),
                &scene.map,
                score_pipeline,
            )),
            RegressorKind::External => Box::new(ExternalRegressor::new(
                cfg.spool.clone().expect("validated"),
                format!("f{frame:06}-s{}", k + 1),
                Duration::from_millis(cfg.external_timeout_ms),
            )),
        };
        set.insert_boxed(stage.regressor.clone(), r);
    }
    Ok(set)
}

fn refine_frame(ctx: &Context, scene: &Scene, frame: usize) -> Result<FrameTrace, CliError> {
    let (seed, init) = ctx.init_pose(scene, frame);
    let gt = scene.gt[frame];
    let pipeline = ctx.pipeline(scene);
    let score_pipeline = pipeline.with_occlusion(if ctx.cfg.grid_occlusion { ctx.cfg.occlusion } else { None });
    let reference = match ctx.cfg.regressor {
        RegressorKind::Grid => Some(score_pipeline.render(&scene.map, &gt).map_err(CliError::runtime)?),
        _ => None,
    };
    let set = regressors(ctx, scene, frame, reference.as_ref(), score_pipeline)?;
    let rgb = match ctx.cfg.regressor {
        RegressorKind::External => scene.rgb(frame)?,
        _ => RgbImage::new(scene.camera.width, scene.camera.height),
    };
    let (trace, error) = match refine(&init, &rgb, &scene.map, &pipeline, &ctx.cfg.stages, &set, Some(&gt)) {
        Ok((_, trace)) => (trace, None),
        Err(f) => (f.trace.clone(), Some(f.to_string())),
    };
    let trace = if ctx.timestamp { trace } else { trace.without_timings() };
    Ok(FrameTrace { frame, seed, gt, trace, error })
}

fn final_errors(traces: &[FrameTrace]) -> Vec<PoseErrorVec> {
    traces
        .iter()
        .filter(|t| t.error.is_none())
        .filter_map(|t| t.trace.records.last().and_then(|r| r.error))
        .collect()
}

pub fn refine_cmd(ctx: &Context) -> Result<(), CliError> {
    let scene = Scene::load(&ctx.cfg)?;
    let frames: Vec<usize> = scene.frame_range(&ctx.cfg)?.collect();
    let pool = ctx.pool()?;
    let traces: Vec<FrameTrace> =
        pool.install(|| frames.par_iter().map(|&f| refine_frame(ctx, &scene, f)).collect::<Result<_, _>>())?;

    let mut csv = format!("frame,{TRACE_CSV_HEADER}\n");
    for t in &traces {
        for line in trace_csv(&t.trace).lines().skip(1) {
            let _ = writeln!(csv, "{},{line}", t.frame);
        }
    }
    write_text(&ctx.out("refine_trace.csv"), &csv)?;
    write_text(&ctx.out("refine_trace.json"), &json_line(&traces))?;
    let finals = final_errors(&traces);
    if !finals.is_empty() {
        let summary = summarize(&finals).map_err(CliError::runtime)?;
        write_text(&ctx.out("refine_summary.csv"), &summary_csv(&summary))?;
        write_text(&ctx.out("refine_summary.json"), &summary_json(&summary))?;
        println!(
            "refined {} frames: median translation {:.3} m, rotation {:.3} deg",
            finals.len(),
            summary.translation_norm.median,
            summary.total_angle.median.to_degrees()
        );
    }
    ctx.manifest("refine")?;
    let failed: Vec<&FrameTrace> = traces.iter().filter(|t| t.error.is_some()).collect();
    match failed.first() {
        None => Ok(()),
        Some(first) => Err(CliError::runtime(format!(
            "{} of {} frames failed; frame {}: {}",
            failed.len(),
            traces.len(),
            first.frame,
            first.error.as_deref().unwrap_or("")
        ))),
    }
}

#[derive(Serialize)]
struct StageSummary {
    stage: usize,
    rows: Vec<SummaryRow>,
}

pub fn eval_cmd(ctx: &Context, input: Option<&Path>) -> Result<(), CliError> {
    let dir = input.unwrap_or(&ctx.cfg.out);
    let path = dir.join("refine_trace.json");
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::keyed("config", "input", format!("{}: {e}", path.display())))?;
    let traces: Vec<FrameTrace> =
        serde_json::from_str(&text).map_err(|e| CliError::keyed("input", "input", format!("{}: {e}", path.display())))?;
    let stages = traces.iter().map(|t| t.trace.records.len()).max().unwrap_or(0);
    if stages == 0 {
        return Err(CliError::keyed("input", "input", format!("{}: no refinement records", path.display())));
    }
    let mut csv = format!("stage,{SUMMARY_CSV_HEADER}\n");
    let mut json = Vec::new();
    let mut steps = Vec::new();
    for stage in 0..stages {
        let errs: Vec<PoseErrorVec> =
            traces.iter().filter_map(|t| t.trace.records.get(stage).and_then(|r| r.error)).collect();
        if errs.is_empty() {
            continue;
        }
        let summary = summarize(&errs).map_err(CliError::runtime)?;
        for line in summary_csv(&summary).lines().skip(1) {
            let _ = writeln!(csv, "{stage},{line}");
        }
        json.push(StageSummary { stage, rows: summary_rows(&summary) });
        if stage > 0 {
            steps.push(StepErrors::from_errors(format!("stage {stage}"), &errs));
        }
    }
    let svg = error_pdf_svg(&steps, Some(&ctx.cfg.noise)).map_err(CliError::runtime)?;
    write_text(&ctx.out("eval_summary.csv"), &csv)?;
    write_text(&ctx.out("eval_summary.json"), &json_line(&json))?;
    write_text(&ctx.out("error_pdf.svg"), &svg)?;
    ctx.manifest("eval")?;
    for s in &json {
        let norm = s.rows.iter().find(|r| r.quantity == "translation_norm").map(|r| r.median).unwrap_or(f64::NAN);
        let angle = s.rows.iter().find(|r| r.quantity == "total_angle").map(|r| r.median).unwrap_or(f64::NAN);
        println!("stage {}: median translation {norm:.3} m, rotation {angle:.3} deg", s.stage);
    }
    Ok(())
}

pub struct BenchOptions {
    pub repetitions: usize,
    pub warmup: usize,
    pub scaling_points: usize,
}

pub fn bench_cmd(ctx: &Context, opts: &BenchOptions) -> Result<(), CliError> {
    let scene = Scene::load(&ctx.cfg)?;
    let frames: Vec<usize> = scene.frame_range(&ctx.cfg)?.collect();
    let regressor: Box<dyn Regressor> = match ctx.cfg.regressor {
        RegressorKind::Identity => Box::new(IdentityRegressor),
        RegressorKind::External => Box::new(ExternalRegressor::new(
            ctx.cfg.spool.clone().expect("validated"),
            "bench",
            Duration::from_millis(ctx.cfg.external_timeout_ms),
        )),
        _ => return Err(CliError::keyed("config", "regressor", "bench supports the identity and external regressors")),
    };
    let inputs: Vec<(RgbImage, PoseSE3)> = frames
        .iter()
        .map(|&f| Ok((scene.rgb(f)?, ctx.init_pose(&scene, f).1)))
        .collect::<Result<_, CliError>>()?;
    let pipeline = ctx.pipeline(&scene);
    let b = benchmark(&scene.map, &pipeline, &inputs, regressor.as_ref(), opts.warmup, opts.repetitions)
        .map_err(CliError::runtime)?;
    let cloud = uniform_box_cloud(opts.scaling_points, 40.0, 80.0, ctx.cfg.seed);
    let scaling = zbuffer_scaling(&cloud, &pipeline, &PoseSE3::IDENTITY, &SCALING_FORWARD, opts.repetitions)
        .map_err(CliError::runtime)?;
    write_text(&ctx.out("bench.csv"), &breakdown_csv(&b))?;
    write_text(&ctx.out("bench.json"), &breakdown_json(&b))?;
    write_text(&ctx.out("zbuffer_scaling.csv"), &scaling_csv(&scaling))?;
    ctx.manifest("bench")?;
    print!("{}", breakdown_csv(&b));
    print!("{}", scaling_csv(&scaling));
    Ok(())
}
