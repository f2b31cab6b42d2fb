//! Run configuration: flat `key = value` files overridden by command-line
//! flags. Every validation failure names the offending key.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use lidarloc_core::occlusion::{OcclusionError, OcclusionParams};
use lidarloc_core::refine::{default_stages, parse_stages, validate_stages, StageSpec};
use lidarloc_core::se3::NoiseSpec;
use lidarloc_core::CropSpec;
use serde::Serialize;

pub const DATASET_ENV: &str = "LIDARLOC_DATASET";

/// Recognised keys with their defaults; `None` means unset.
pub const KEYS: &[(&str, Option<&str>)] = &[
    ("source", None),
    ("dataset", None),
    ("sequence", Some("00")),
    ("map", None),
    ("map_resolution", Some("0.1")),
    ("crop_forward", Some("100")),
    ("crop_lateral", Some("50")),
    ("crop_vertical", Some("25")),
    ("occlusion", Some("true")),
    ("occlusion_window", Some("5")),
    ("occlusion_th", Some("3.0")),
    ("noise_t", Some("2.0")),
    ("noise_r", Some("10.0")),
    ("stages", None),
    ("regressor", Some("identity")),
    ("oracle_contraction", Some("0.5")),
    ("grid_occlusion", Some("false")),
    ("spool", None),
    ("external_timeout_ms", Some("30000")),
    ("seed", Some("0")),
    ("jobs", Some("1")),
    ("out", Some("out")),
    ("frames", Some("10")),
    ("first_frame", Some("0")),
    ("image_width", Some("1224")),
    ("image_height", Some("370")),
];

/// A configuration error that names the key it concerns.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: String,
    pub msg: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Self { key: key.into(), msg: msg.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.msg)
    }
}

/// Raw key-value layer before typing.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn defaults() -> Self {
        let values = KEYS.iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v.to_string()))).collect();
        Self { values }
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), ConfigError> {
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(ConfigError::new(key, "unknown key"));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::new("config", format!("{origin}:{}: expected key = value", i + 1)));
            };
            let key = k.trim().replace('-', "_");
            self.set(&key, v.trim()).map_err(|e| ConfigError::new(e.key, format!("{origin}:{}: {}", i + 1, e.msg)))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthetic,
    Kitti,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressorKind {
    Identity,
    Oracle,
    Grid,
    External,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub source: Source,
    pub dataset: Option<PathBuf>,
    pub sequence: String,
    pub map: Option<PathBuf>,
    pub map_resolution: f64,
    pub crop: CropSpec,
    pub occlusion: Option<OcclusionParams>,
    pub noise: NoiseSpec,
    pub stages: Vec<StageSpec>,
    pub regressor: RegressorKind,
    pub oracle_contraction: f64,
    pub grid_occlusion: bool,
    pub spool: Option<PathBuf>,
    pub external_timeout_ms: u64,
    pub seed: u64,
    pub jobs: usize,
    #[serde(skip)]
    pub out: PathBuf,
    pub frames: usize,
    pub first_frame: usize,
    pub image_width: u32,
    pub image_height: u32,
}

fn parse<T: std::str::FromStr>(raw: &RawConfig, key: &str) -> Result<T, ConfigError> {
    let v = raw.get(key).ok_or_else(|| ConfigError::new(key, "missing value"))?;
    v.parse().map_err(|_| ConfigError::new(key, format!("invalid value {v:?}")))
}

fn parse_bool(raw: &RawConfig, key: &str) -> Result<bool, ConfigError> {
    match raw.get(key) {
        Some("true" | "1" | "yes" | "on") => Ok(true),
        Some("false" | "0" | "no" | "off") => Ok(false),
        Some(v) => Err(ConfigError::new(key, format!("invalid boolean {v:?}"))),
        None => Err(ConfigError::new(key, "missing value")),
    }
}

fn finite_positive(key: &str, v: f64) -> Result<f64, ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(ConfigError::new(key, format!("must be positive, got {v}")))
    }
}

impl RunConfig {
    /// Types and validates `raw`. `env_dataset` fills `dataset` when unset.
    pub fn from_raw(raw: &RawConfig, env_dataset: Option<&str>) -> Result<Self, ConfigError> {
        let dataset = raw.get("dataset").or(env_dataset).filter(|s| !s.is_empty()).map(PathBuf::from);
        let source = match raw.get("source") {
            Some("synthetic") => Source::Synthetic,
            Some("kitti") => Source::Kitti,
            Some(v) => return Err(ConfigError::new("source", format!("expected synthetic or kitti, got {v:?}"))),
            None if dataset.is_some() => Source::Kitti,
            None => {
                return Err(ConfigError::new(
                    "dataset",
                    format!("no dataset root given (set --dataset or {DATASET_ENV}, or pass --synthetic)"),
                ))
            }
        };
        if source == Source::Kitti {
            match &dataset {
                None => return Err(ConfigError::new("dataset", "no dataset root given")),
                Some(p) if !p.is_dir() => {
                    return Err(ConfigError::new("dataset", format!("path does not exist: {}", p.display())))
                }
                Some(_) => {}
            }
        }

        let map_resolution = finite_positive("map_resolution", parse(raw, "map_resolution")?)?;
        let crop = CropSpec {
            forward: finite_positive("crop_forward", parse(raw, "crop_forward")?)?,
            lateral: finite_positive("crop_lateral", parse(raw, "crop_lateral")?)?,
            vertical: finite_positive("crop_vertical", parse(raw, "crop_vertical")?)?,
        };
        let occlusion = if parse_bool(raw, "occlusion")? {
            let window: usize = parse(raw, "occlusion_window")?;
            let th: f64 = parse(raw, "occlusion_th")?;
            let p = OcclusionParams::from_threshold(window, th).map_err(|e| {
                let key = match e {
                    OcclusionError::BadWindow(_) => "occlusion_window",
                    _ => "occlusion_th",
                };
                ConfigError::new(key, e.to_string())
            })?;
            Some(p)
        } else {
            None
        };
        let noise_t: f64 = parse(raw, "noise_t")?;
        let noise_r: f64 = parse(raw, "noise_r")?;
        if !(noise_t.is_finite() && noise_t >= 0.0) {
            return Err(ConfigError::new("noise_t", format!("must be non-negative, got {noise_t}")));
        }
        if !(noise_r.is_finite() && noise_r >= 0.0) {
            return Err(ConfigError::new("noise_r", format!("must be non-negative, got {noise_r}")));
        }
        let noise = NoiseSpec::from_degrees(noise_t, noise_r).map_err(|e| ConfigError::new("noise_t", e.to_string()))?;
        let stages = match raw.get("stages") {
            Some(text) => parse_stages(text).map_err(|e| ConfigError::new("stages", e))?,
            None => default_stages(),
        };
        validate_stages(&stages).map_err(|e| ConfigError::new("stages", e.to_string()))?;
        let regressor = match raw.get("regressor") {
            Some("identity") => RegressorKind::Identity,
            Some("oracle") => RegressorKind::Oracle,
            Some("grid") => RegressorKind::Grid,
            Some("external") => RegressorKind::External,
            v => {
                return Err(ConfigError::new(
                    "regressor",
                    format!("expected identity, oracle, grid or external, got {:?}", v.unwrap_or("")),
                ))
            }
        };
        let oracle_contraction: f64 = parse(raw, "oracle_contraction")?;
        if !(0.0..=1.0).contains(&oracle_contraction) {
            return Err(ConfigError::new("oracle_contraction", format!("must lie in [0, 1], got {oracle_contraction}")));
        }
        let spool = raw.get("spool").map(PathBuf::from);
        if regressor == RegressorKind::External {
            match &spool {
                None => return Err(ConfigError::new("spool", "the external regressor needs a spool directory")),
                Some(p) if !p.is_dir() => {
                    return Err(ConfigError::new("spool", format!("path does not exist: {}", p.display())))
                }
                Some(_) => {}
            }
        }
        let jobs: usize = parse(raw, "jobs")?;
        if jobs == 0 {
            return Err(ConfigError::new("jobs", "must be at least 1"));
        }
        let image_width: u32 = parse(raw, "image_width")?;
        let image_height: u32 = parse(raw, "image_height")?;
        if image_width == 0 {
            return Err(ConfigError::new("image_width", "must be positive"));
        }
        if image_height == 0 {
            return Err(ConfigError::new("image_height", "must be positive"));
        }
        let frames: usize = parse(raw, "frames")?;
        if frames == 0 {
            return Err(ConfigError::new("frames", "must be at least 1"));
        }
        Ok(Self {
            source,
            dataset,
            sequence: raw.get("sequence").unwrap_or("00").to_string(),
            map: raw.get("map").map(PathBuf::from),
            map_resolution,
            crop,
            occlusion,
            noise,
            stages,
            regressor,
            oracle_contraction,
            grid_occlusion: parse_bool(raw, "grid_occlusion")?,
            spool,
            external_timeout_ms: parse(raw, "external_timeout_ms")?,
            seed: parse(raw, "seed")?,
            jobs,
            out: PathBuf::from(raw.get("out").unwrap_or("out")),
            frames,
            first_frame: parse(raw, "first_frame")?,
            image_width,
            image_height,
        })
    }

    /// Map file used by `build-map` as output and by the other commands as
    /// input on a dataset.
    pub fn map_path(&self) -> PathBuf {
        self.map.clone().unwrap_or_else(|| self.out.join(format!("map_{}.bin", self.sequence)))
    }

    pub fn dataset_root(&self) -> Result<&Path, ConfigError> {
        self.dataset.as_deref().ok_or_else(|| ConfigError::new("dataset", "no dataset root given"))
    }
}
