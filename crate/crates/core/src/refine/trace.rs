use std::fmt::Write;

use super::RefinementTrace;

/// Errors are camera-frame meters (tx lateral, ty vertical, tz longitudinal)
/// and degrees. Missing values are empty fields.
pub const TRACE_CSV_HEADER: &str =
    "stage,regressor,out_of_range,tx,ty,tz,roll,pitch,yaw,translation_norm,total_angle,\
crop_ms,z_buffer_ms,occlusion_ms,regressor_ms,total_ms";

pub fn trace_csv(trace: &RefinementTrace) -> String {
    let mut out = String::from(TRACE_CSV_HEADER);
    out.push('\n');
    for r in &trace.records {
        let _ = write!(
            out,
            "{},{},{}",
            r.stage,
            r.regressor.as_deref().unwrap_or(""),
            r.out_of_range as u8
        );
        match &r.error {
            Some(e) => {
                let d = f64::to_degrees;
                let vals = [
                    e.lateral,
                    e.vertical,
                    e.longitudinal,
                    d(e.roll),
                    d(e.pitch),
                    d(e.yaw),
                    e.translation_norm(),
                    d(e.total_angle),
                ];
                vals.iter().for_each(|v| {
                    // Adding 0.0 turns -0 into 0.
                    let _ = write!(out, ",{}", v + 0.0);
                });
            }
            None => out.push_str(",,,,,,,,"),
        }
        match &r.timings {
            Some(t) => {
                let _ = write!(
                    out,
                    ",{},{},{},{},{}",
                    t.crop_ms, t.z_buffer_ms, t.occlusion_ms, t.regressor_ms, t.total_ms
                );
            }
            None => out.push_str(",,,,,"),
        }
        out.push('\n');
    }
    out
}

pub fn trace_json(trace: &RefinementTrace) -> String {
    let mut s = serde_json::to_string_pretty(trace).expect("trace serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refine::{StageRecord, StageTimings};
    use crate::se3::{pose_error, PoseSE3};
    use nalgebra::Vector3;

    #[test]
    fn csv_rows_and_json_round_trip() {
        let gt = PoseSE3::IDENTITY;
        let est = PoseSE3::from_translation(Vector3::new(1.0, 2.0, 3.0));
        let trace = RefinementTrace {
            records: vec![
                StageRecord {
                    stage: 0,
                    regressor: None,
                    pose: est,
                    render_pose: None,
                    correction: None,
                    error: Some(pose_error(&gt, &est)),
                    timings: None,
                    out_of_range: false,
                },
                StageRecord {
                    stage: 1,
                    regressor: Some("stage1".into()),
                    pose: gt,
                    render_pose: Some(est),
                    correction: None,
                    error: None,
                    timings: Some(StageTimings {
                        total_ms: 1.5,
                        ..Default::default()
                    }),
                    out_of_range: true,
                },
            ],
        };
        let csv = trace_csv(&trace);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        let cols = TRACE_CSV_HEADER.split(',').count();
        assert!(lines.iter().all(|l| l.split(',').count() == cols));
        assert_eq!(lines[1], "0,,0,-1,-2,-3,0,0,0,3.7416573867739413,0,,,,,");
        assert!(lines[2].starts_with("1,stage1,1,,"));
        assert!(lines[2].ends_with(",0,0,0,0,1.5"));
        let back: RefinementTrace = serde_json::from_str(&trace_json(&trace)).unwrap();
        assert_eq!(back, trace);
    }
}
