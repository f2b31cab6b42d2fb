//! Error statistics, kernel density curves and report output.

use std::fmt::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::se3::{NoiseSpec, PoseErrorVec};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("empty sample set")]
    Empty,
    #[error("bandwidth must be positive and finite, got {0}")]
    Bandwidth(f64),
    #[error("non-finite sample")]
    NonFinite,
}

/// Order statistics and moments of one scalar quantity. `std` is the
/// population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub count: usize,
    pub median: f64,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

fn sorted_finite(samples: &[f64]) -> Result<Vec<f64>, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl Stats {
    pub fn of(samples: &[f64]) -> Result<Stats, EvalError> {
        let v = sorted_finite(samples)?;
        let n = v.len() as f64;
        // Summing in sorted order keeps the result permutation-invariant.
        let mean = (v.iter().sum::<f64>() / n).clamp(v[0], v[v.len() - 1]);
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Ok(Stats {
            count: v.len(),
            median: median_sorted(&v),
            mean,
            std: var.sqrt(),
            min: v[0],
            max: v[v.len() - 1],
        })
    }
}

/// Statistics per error component plus the translation norm and the
/// geodesic rotation angle. Distances in meters, angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub count: usize,
    pub longitudinal: Stats,
    pub lateral: Stats,
    pub vertical: Stats,
    pub roll: Stats,
    pub pitch: Stats,
    pub yaw: Stats,
    pub translation_norm: Stats,
    pub total_angle: Stats,
}

impl ErrorSummary {
    /// Rows `(name, is_angle, stats)` in report order.
    pub fn rows(&self) -> [(&'static str, bool, &Stats); 8] {
        [
            ("longitudinal", false, &self.longitudinal),
            ("lateral", false, &self.lateral),
            ("vertical", false, &self.vertical),
            ("roll", true, &self.roll),
            ("pitch", true, &self.pitch),
            ("yaw", true, &self.yaw),
            ("translation_norm", false, &self.translation_norm),
            ("total_angle", true, &self.total_angle),
        ]
    }
}

pub fn summarize(samples: &[PoseErrorVec]) -> Result<ErrorSummary, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let col =
        |f: &dyn Fn(&PoseErrorVec) -> f64| Stats::of(&samples.iter().map(f).collect::<Vec<_>>());
    Ok(ErrorSummary {
        count: samples.len(),
        longitudinal: col(&|e| e.longitudinal)?,
        lateral: col(&|e| e.lateral)?,
        vertical: col(&|e| e.vertical)?,
        roll: col(&|e| e.roll)?,
        pitch: col(&|e| e.pitch)?,
        yaw: col(&|e| e.yaw)?,
        translation_norm: col(&|e| e.translation_norm())?,
        total_angle: col(&|e| e.total_angle)?,
    })
}

pub const SUMMARY_CSV_HEADER: &str = "quantity,unit,count,median,mean,std,min,max";

fn in_units(s: &Stats, angle: bool) -> [f64; 5] {
    let k = if angle {
        180.0 / std::f64::consts::PI
    } else {
        1.0
    };
    [s.median * k, s.mean * k, s.std * k, s.min * k, s.max * k]
}

/// One row per quantity; angles in degrees.
pub fn summary_csv(summary: &ErrorSummary) -> String {
    let mut out = format!("{SUMMARY_CSV_HEADER}\n");
    for (name, angle, s) in summary.rows() {
        let _ = write!(
            out,
            "{name},{},{}",
            if angle { "deg" } else { "m" },
            s.count
        );
        for v in in_units(s, angle) {
            let _ = write!(out, ",{}", v + 0.0);
        }
        out.push('\n');
    }
    out
}

/// One report row in display units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub quantity: String,
    pub unit: String,
    pub count: usize,
    pub median: f64,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Same rows as `summary_csv`, as a JSON array.
pub fn summary_json(summary: &ErrorSummary) -> String {
    let mut s = serde_json::to_string_pretty(&summary_rows(summary)).expect("rows serialize");
    s.push('\n');
    s
}

pub fn summary_rows(summary: &ErrorSummary) -> Vec<SummaryRow> {
    summary
        .rows()
        .iter()
        .map(|&(name, angle, s)| {
            let [median, mean, std, min, max] = in_units(s, angle).map(|v| v + 0.0);
            SummaryRow {
                quantity: name.into(),
                unit: if angle { "deg" } else { "m" }.into(),
                count: s.count,
                median,
                mean,
                std,
                min,
                max,
            }
        })
        .collect()
}

/// Density sampled on an evenly spaced grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub x: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl KdeCurve {
    pub fn trapezoid(&self) -> f64 {
        self.x
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, d)| 0.5 * (x[1] - x[0]) * (d[0] + d[1]))
            .sum()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, d) in self.density.iter().enumerate() {
            if *d > self.density[best] {
                best = i;
            }
        }
        best
    }
}

/// Kernels are evaluated this many bandwidths beyond the extreme samples.
pub const KDE_TAIL: f64 = 4.0;
pub const KDE_MIN_POINTS: usize = 513;
/// Grid spacing never exceeds this fraction of the bandwidth.
const KDE_STEP_FRACTION: f64 = 0.125;
const KDE_MAX_POINTS: usize = 1 << 20;

/// Gaussian-kernel density of `samples`. The grid has an odd number of
/// points so a lone sample falls exactly on its centre.
pub fn kde_pdf(samples: &[f64], bandwidth: f64) -> Result<KdeCurve, EvalError> {
    if !(bandwidth.is_finite() && bandwidth > 0.0) {
        return Err(EvalError::Bandwidth(bandwidth));
    }
    let v = sorted_finite(samples)?;
    let lo = v[0] - KDE_TAIL * bandwidth;
    let hi = v[v.len() - 1] + KDE_TAIL * bandwidth;
    let needed = ((hi - lo) / (KDE_STEP_FRACTION * bandwidth)).ceil() as usize + 1;
    let n = (needed.clamp(KDE_MIN_POINTS, KDE_MAX_POINTS)) | 1;
    let step = (hi - lo) / (n - 1) as f64;
    let norm = 1.0 / (v.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let cutoff = 9.0 * bandwidth;
    let mut x = Vec::with_capacity(n);
    let mut density = Vec::with_capacity(n);
    let mut first = 0;
    for i in 0..n {
        let xi = if 2 * i + 1 == n {
            0.5 * (lo + hi)
        } else {
            lo + step * i as f64
        };
        while first < v.len() && v[first] < xi - cutoff {
            first += 1;
        }
        let mut sum = 0.0;
        for s in &v[first..] {
            if *s > xi + cutoff {
                break;
            }
            let z = (xi - s) / bandwidth;
            sum += (-0.5 * z * z).exp();
        }
        x.push(xi);
        density.push(sum * norm);
    }
    Ok(KdeCurve {
        x,
        density,
        bandwidth,
    })
}

/// Silverman's rule `0.9 · min(σ, IQR / 1.34) · n^(-1/5)`. Falls back to σ
/// when the IQR is zero and to `1e-3` when all samples coincide.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64, EvalError> {
    let v = sorted_finite(samples)?;
    let s = Stats::of(&v)?;
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let (i, f) = (pos.floor() as usize, pos.fract());
        if i + 1 < v.len() {
            v[i] + f * (v[i + 1] - v[i])
        } else {
            v[i]
        }
    };
    let iqr = (q(0.75) - q(0.25)) / 1.34;
    let spread = if iqr > 0.0 { s.std.min(iqr) } else { s.std };
    if spread > 0.0 {
        Ok(0.9 * spread * (v.len() as f64).powf(-0.2))
    } else {
        Ok(1e-3)
    }
}

/// Error curves for one refinement step: component values per sample, in
/// meters and degrees, in `PoseErrorVec::COMPONENTS` order.
#[derive(Debug, Clone, PartialEq)]
pub struct StepErrors {
    pub label: String,
    pub components: [Vec<f64>; 6],
}

impl StepErrors {
    pub fn from_errors(label: impl Into<String>, errors: &[PoseErrorVec]) -> Self {
        let mut components: [Vec<f64>; 6] = Default::default();
        for e in errors {
            for (k, v) in e.components().iter().enumerate() {
                components[k].push(if k < 3 { *v } else { v.to_degrees() });
            }
        }
        Self {
            label: label.into(),
            components,
        }
    }
}

const PANEL_TITLES: [&str; 6] = [
    "Longitudinal [m]",
    "Lateral [m]",
    "Vertical [m]",
    "Roll [deg]",
    "Pitch [deg]",
    "Yaw [deg]",
];
const STEP_COLOURS: [&str; 6] = [
    "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf",
];

/// Six density panels (translation components on top, rotations below), one
/// curve per step, with the uniform initial-error density dashed in red when
/// `noise` is given.
pub fn error_pdf_svg(steps: &[StepErrors], noise: Option<&NoiseSpec>) -> Result<String, EvalError> {
    let (pw, ph, margin) = (300.0, 200.0, 40.0);
    let (width, height) = (3.0 * pw, 2.0 * ph + 30.0);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect width="{width}" height="{height}" fill="white"/>"#
    );
    for (k, title) in PANEL_TITLES.iter().enumerate() {
        let (ox, oy) = ((k % 3) as f64 * pw, (k / 3) as f64 * ph);
        let bound = noise.map(|n| {
            if k < 3 {
                n.max_translation
            } else {
                n.max_rotation.to_degrees()
            }
        });
        let mut curves = Vec::new();
        for step in steps {
            let vals = &step.components[k];
            if vals.is_empty() {
                continue;
            }
            let bw = silverman_bandwidth(vals)?;
            curves.push((kde_pdf(vals, bw)?, &step.label));
        }
        let mut x0 = curves
            .iter()
            .map(|(c, _)| c.x[0])
            .fold(f64::INFINITY, f64::min);
        let mut x1 = curves
            .iter()
            .map(|(c, _)| c.x[c.x.len() - 1])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut ymax = curves
            .iter()
            .flat_map(|(c, _)| c.density.iter().copied())
            .fold(0.0, f64::max);
        if let Some(b) = bound.filter(|b| *b > 0.0) {
            x0 = x0.min(-1.1 * b);
            x1 = x1.max(1.1 * b);
            ymax = ymax.max(0.5 / b);
        }
        if !x0.is_finite() || x1 <= x0 {
            (x0, x1) = (-1.0, 1.0);
        }
        if ymax <= 0.0 {
            ymax = 1.0;
        }
        let (left, right, top, bottom) = (ox + margin, ox + pw - 10.0, oy + 25.0, oy + ph - 25.0);
        let sx = |x: f64| left + (x - x0) / (x1 - x0) * (right - left);
        let sy = |y: f64| bottom - y / (1.05 * ymax) * (bottom - top);
        let _ = writeln!(svg, r#"<g>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-weight="bold">{title}</text>"#,
            ox + pw / 2.0,
            oy + 15.0
        );
        let _ = writeln!(
            svg,
            r#"<rect x="{left:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
            right - left,
            bottom - top
        );
        let _ = writeln!(
            svg,
            r#"<text x="{left:.1}" y="{:.1}">{}</text>"#,
            bottom + 14.0,
            fmt_tick(x0)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{right:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            bottom + 14.0,
            fmt_tick(x1)
        );
        if let Some(b) = bound.filter(|b| *b > 0.0) {
            let d = 0.5 / b;
            let _ = writeln!(
                svg,
                r#"<polyline points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="none" stroke="red" stroke-dasharray="6,4"/>"#,
                sx(-b),
                sy(0.0),
                sx(-b),
                sy(d),
                sx(b),
                sy(d),
                sx(b),
                sy(0.0)
            );
        }
        for (i, (curve, _)) in curves.iter().enumerate() {
            let pts = decimate(curve, 400)
                .map(|(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect::<Vec<_>>()
                .join(" ");
            let _ = writeln!(
                svg,
                r#"<polyline points="{pts}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
                STEP_COLOURS[i % STEP_COLOURS.len()]
            );
        }
        let _ = writeln!(svg, "</g>");
    }
    for (i, step) in steps.iter().enumerate() {
        let x = 20.0 + 150.0 * i as f64;
        let y = height - 10.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{}" stroke-width="2"/><text x="{:.1}" y="{y:.1}">{}</text>"#,
            y - 4.0,
            x + 20.0,
            y - 4.0,
            STEP_COLOURS[i % STEP_COLOURS.len()],
            x + 25.0,
            xml_escape(&step.label)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn decimate(curve: &KdeCurve, max_points: usize) -> impl Iterator<Item = (f64, f64)> + '_ {
    let stride = curve.x.len().div_ceil(max_points).max(1);
    let last = curve.x.len() - 1;
    (0..curve.x.len())
        .filter(move |i| i % stride == 0 || *i == last)
        .map(move |i| (curve.x[i], curve.density[i]))
}

fn fmt_tick(v: f64) -> String {
    format!("{:.2}", v + 0.0)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn err(v: f64) -> PoseErrorVec {
        PoseErrorVec {
            longitudinal: v,
            ..Default::default()
        }
    }

    #[test]
    fn small_sets() {
        let s = summarize(&[err(3.0), err(1.0), err(2.0)]).unwrap();
        assert_eq!((s.longitudinal.median, s.longitudinal.mean), (2.0, 2.0));
        let one = Stats::of(&[4.5]).unwrap();
        assert_eq!((one.median, one.mean, one.std), (4.5, 4.5, 0.0));
        assert_eq!(Stats::of(&[1.0, 2.0, 4.0, 10.0]).unwrap().median, 3.0);
        assert_eq!(Stats::of(&[1.0, 3.0]).unwrap().std, 1.0);
        assert_eq!(summarize(&[]), Err(EvalError::Empty));
        assert_eq!(Stats::of(&[f64::NAN]), Err(EvalError::NonFinite));
    }

    #[test]
    fn translation_norm_and_angle_rows() {
        let e = PoseErrorVec {
            longitudinal: 3.0,
            lateral: 4.0,
            total_angle: 0.5,
            ..Default::default()
        };
        let s = summarize(&[e]).unwrap();
        assert_eq!(s.translation_norm.median, 5.0);
        assert_eq!(s.total_angle.mean, 0.5);
        let csv = summary_csv(&s);
        assert_eq!(csv.lines().count(), 9);
        assert!(
            csv.contains("\ntotal_angle,deg,1,28.64788975654116,"),
            "{csv}"
        );
        let rows: serde_json::Value = serde_json::from_str(&summary_json(&s)).unwrap();
        assert_eq!(rows.as_array().unwrap().len(), 8);
        assert_eq!(rows[6]["median"], 5.0);
    }

    #[test]
    fn single_kernel_peak() {
        let bw = 0.3;
        let c = kde_pdf(&[0.0], bw).unwrap();
        let i = c.argmax();
        assert_eq!(c.x[i], 0.0);
        assert_abs_diff_eq!(
            c.density[i],
            1.0 / (bw * (2.0 * std::f64::consts::PI).sqrt()),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(c.trapezoid(), 1.0, epsilon = 1e-3);
        assert_eq!(kde_pdf(&[0.0], 0.0), Err(EvalError::Bandwidth(0.0)));
        assert_eq!(kde_pdf(&[], 1.0), Err(EvalError::Empty));
    }

    #[test]
    fn separated_samples_give_symmetric_modes() {
        let c = kde_pdf(&[-5.0, 5.0], 0.5).unwrap();
        let n = c.x.len();
        for i in 0..n {
            assert_abs_diff_eq!(c.density[i], c.density[n - 1 - i], epsilon = 1e-12);
        }
        let left = (0..n / 2)
            .max_by(|&a, &b| c.density[a].total_cmp(&c.density[b]))
            .unwrap();
        assert_abs_diff_eq!(c.x[left], -5.0, epsilon = c.x[1] - c.x[0]);
        assert!(c.density[n / 2] < 1e-6);
    }

    #[test]
    fn silverman_fallbacks() {
        assert_eq!(silverman_bandwidth(&[2.0, 2.0, 2.0]).unwrap(), 1e-3);
        let bw = silverman_bandwidth(&[0.0, 0.0, 0.0, 0.0, 10.0]).unwrap();
        assert!(bw > 0.0);
        let v: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let s = Stats::of(&v).unwrap();
        assert_abs_diff_eq!(
            silverman_bandwidth(&v).unwrap(),
            0.9 * s.std * 100f64.powf(-0.2),
            epsilon = 1e-12
        );
    }

    #[test]
    fn svg_has_six_panels_and_dashed_priors() {
        let errs: Vec<PoseErrorVec> = (0..20)
            .map(|i| {
                let x = i as f64 / 10.0 - 1.0;
                PoseErrorVec {
                    longitudinal: x,
                    lateral: -x,
                    vertical: 0.5 * x,
                    roll: 0.01 * x,
                    pitch: 0.0,
                    yaw: 0.02,
                    total_angle: 0.0,
                }
            })
            .collect();
        let steps = [
            StepErrors::from_errors("step 1", &errs),
            StepErrors::from_errors("step <2>", &errs),
        ];
        let noise = NoiseSpec::from_degrees(2.0, 10.0).unwrap();
        let svg = error_pdf_svg(&steps, Some(&noise)).unwrap();
        assert_eq!(svg.matches("<g>").count(), 6);
        assert_eq!(svg.matches("stroke-dasharray").count(), 6);
        assert_eq!(svg.matches("stroke-width=\"1.5\"").count(), 12);
        assert!(svg.contains("step &lt;2&gt;"));
        assert_eq!(svg, error_pdf_svg(&steps, Some(&noise)).unwrap());
    }
}
