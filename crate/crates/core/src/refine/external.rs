//! File-spool protocol for regressors running in another process.
//!
//! For each prediction the consumer writes into the spool directory:
//!
//! ```text
//! <id>.png    RGB frame
//! <id>.depth  LiDAR-image in the raw depth dump format
//! <id>.req    LLREQ v1 <id> <id>.png <id>.depth
//! ```
//!
//! and waits for `<id>.resp`, one of
//!
//! ```text
//! LLRESP v1 <id> ok <tx> <ty> <tz> <qa> <qb> <qc> <qd>
//! LLRESP v1 <id> error <message>
//! ```
//!
//! Records are single ASCII lines. Every file is written under a `.tmp` name
//! and renamed into place. File names in requests are relative to the spool
//! directory. Ids match `[A-Za-z0-9_-]+`. The consumer removes its files
//! after reading the response. A file named `shutdown` asks a server to exit.

use std::fs;
use std::io::{self, Cursor};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::{Duration, Instant, SystemTime};

use image::{ImageFormat, RgbImage};
use nalgebra::Vector3;

use super::{RefineError, Regressor};
use crate::losses::PoseTarget;
use crate::projection::{write_depth_raw, DepthImage};
use crate::se3::Quat;

pub const SHUTDOWN_SENTINEL: &str = "shutdown";
const REQUEST_TAG: &str = "LLREQ";
const RESPONSE_TAG: &str = "LLRESP";
const VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq)]
pub struct SpoolRequest {
    pub id: String,
    pub rgb: String,
    pub lidar: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpoolResponse {
    Ok { id: String, target: PoseTarget },
    Error { id: String, message: String },
}

impl SpoolResponse {
    pub fn id(&self) -> &str {
        match self {
            SpoolResponse::Ok { id, .. } | SpoolResponse::Error { id, .. } => id,
        }
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && !name.contains(['/', '\\'])
        && name.is_ascii()
        && !name.contains(char::is_whitespace)
}

pub fn format_request(r: &SpoolRequest) -> String {
    format!("{REQUEST_TAG} {VERSION} {} {} {}\n", r.id, r.rgb, r.lidar)
}

pub fn parse_request(line: &str) -> Result<SpoolRequest, String> {
    let f: Vec<&str> = line.split_whitespace().collect();
    match f.as_slice() {
        [REQUEST_TAG, VERSION, id, rgb, lidar] => {
            if !valid_id(id) {
                return Err(format!("invalid id {id:?}"));
            }
            if !valid_name(rgb) || !valid_name(lidar) {
                return Err("file names must be plain names inside the spool".into());
            }
            Ok(SpoolRequest {
                id: id.to_string(),
                rgb: rgb.to_string(),
                lidar: lidar.to_string(),
            })
        }
        [REQUEST_TAG, v, ..] if *v != VERSION => Err(format!("unsupported version {v:?}")),
        _ => Err(format!(
            "expected `{REQUEST_TAG} {VERSION} <id> <rgb> <lidar>`"
        )),
    }
}

pub fn format_response(r: &SpoolResponse) -> String {
    match r {
        SpoolResponse::Ok { id, target } => {
            let t = target.translation;
            let q = target.rotation;
            format!(
                "{RESPONSE_TAG} {VERSION} {id} ok {} {} {} {} {} {} {}\n",
                t.x, t.y, t.z, q.a, q.b, q.c, q.d
            )
        }
        SpoolResponse::Error { id, message } => {
            let flat: String = message
                .chars()
                .map(|c| if c.is_control() { ' ' } else { c })
                .collect();
            format!("{RESPONSE_TAG} {VERSION} {id} error {flat}\n")
        }
    }
}

pub fn parse_response(line: &str) -> Result<SpoolResponse, String> {
    let line = line.trim_end_matches(['\n', '\r']);
    let f: Vec<&str> = line.splitn(5, ' ').collect();
    match f.as_slice() {
        [RESPONSE_TAG, VERSION, id, "ok", rest] => {
            let v = rest
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| format!("invalid number {t:?}"))
                })
                .collect::<Result<Vec<_>, _>>()?;
            if v.len() != 7 {
                return Err(format!("expected 7 values, found {}", v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err("non-finite value".into());
            }
            Ok(SpoolResponse::Ok {
                id: id.to_string(),
                target: PoseTarget {
                    translation: Vector3::new(v[0], v[1], v[2]),
                    rotation: Quat::new(v[3], v[4], v[5], v[6]),
                },
            })
        }
        [RESPONSE_TAG, VERSION, id, "error", msg] => Ok(SpoolResponse::Error {
            id: id.to_string(),
            message: msg.to_string(),
        }),
        [RESPONSE_TAG, VERSION, id, "error"] => Ok(SpoolResponse::Error {
            id: id.to_string(),
            message: String::new(),
        }),
        _ => Err(format!("malformed response {line:?}")),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

/// Regressor binding that delegates to a spool server.
#[derive(Debug)]
pub struct ExternalRegressor {
    pub spool: PathBuf,
    pub prefix: String,
    pub timeout: Duration,
    pub poll: Duration,
    counter: AtomicU64,
}

impl ExternalRegressor {
    pub fn new(spool: impl Into<PathBuf>, prefix: impl Into<String>, timeout: Duration) -> Self {
        Self {
            spool: spool.into(),
            prefix: prefix.into(),
            timeout,
            poll: Duration::from_millis(5),
            counter: AtomicU64::new(0),
        }
    }

    fn io(&self, what: &str, e: impl std::fmt::Display) -> RefineError {
        RefineError::External(format!("{what} in {}: {e}", self.spool.display()))
    }
}

impl Regressor for ExternalRegressor {
    fn predict(&self, rgb: &RgbImage, lidar: &DepthImage) -> Result<PoseTarget, RefineError> {
        let id = format!(
            "{}-{:06}",
            self.prefix,
            self.counter.fetch_add(1, Ordering::SeqCst)
        );
        if !valid_id(&id) {
            return Err(RefineError::External(format!("invalid request id {id:?}")));
        }
        let req = SpoolRequest {
            id: id.clone(),
            rgb: format!("{id}.png"),
            lidar: format!("{id}.depth"),
        };
        let files = [
            &req.rgb,
            &req.lidar,
            &format!("{id}.req"),
            &format!("{id}.resp"),
        ]
        .map(|n| self.spool.join(n));

        let mut png = Cursor::new(Vec::new());
        rgb.write_to(&mut png, ImageFormat::Png)
            .map_err(|e| self.io("encoding frame", e))?;
        write_atomic(&files[0], png.get_ref()).map_err(|e| self.io("writing frame", e))?;
        let mut raw = Vec::new();
        write_depth_raw(lidar, &mut raw).map_err(|e| self.io("encoding depth", e))?;
        write_atomic(&files[1], &raw).map_err(|e| self.io("writing depth", e))?;
        write_atomic(&files[2], format_request(&req).as_bytes())
            .map_err(|e| self.io("writing request", e))?;

        let start = Instant::now();
        let text = loop {
            match fs::read_to_string(&files[3]) {
                Ok(t) => break t,
                Err(e) if e.kind() == io::ErrorKind::NotFound => {
                    if start.elapsed() >= self.timeout {
                        let _ = fs::remove_file(&files[2]);
                        return Err(RefineError::Timeout(
                            self.timeout.as_millis() as u64,
                            format!("{id}.resp"),
                        ));
                    }
                    thread::sleep(self.poll);
                }
                Err(e) => return Err(self.io("reading response", e)),
            }
        };
        for f in &files {
            let _ = fs::remove_file(f);
        }
        match parse_response(&text).map_err(RefineError::External)? {
            SpoolResponse::Ok { id: rid, target } if rid == id => Ok(target),
            SpoolResponse::Error { id: rid, message } if rid == id => {
                Err(RefineError::External(message))
            }
            other => Err(RefineError::External(format!(
                "response id {:?} does not match {id:?}",
                other.id()
            ))),
        }
    }
}

/// Server side: answers every pending request, oldest first (modification
/// time, then name), and removes it. `handler` receives the parsed request
/// and the spool directory. Returns the number of requests answered.
pub fn process_pending<F>(spool: &Path, mut handler: F) -> io::Result<usize>
where
    F: FnMut(&SpoolRequest, &Path) -> Result<PoseTarget, String>,
{
    let mut pending: Vec<(SystemTime, PathBuf)> = Vec::new();
    for entry in fs::read_dir(spool)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "req") {
            pending.push((fs::metadata(&path)?.modified()?, path));
        }
    }
    pending.sort();
    for (_, path) in &pending {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("unknown")
            .to_string();
        let response = match fs::read_to_string(path)
            .map_err(|e| e.to_string())
            .and_then(|l| parse_request(&l))
        {
            Ok(req) => match handler(&req, spool) {
                Ok(target) => SpoolResponse::Ok { id: req.id, target },
                Err(message) => SpoolResponse::Error {
                    id: req.id,
                    message,
                },
            },
            Err(message) => SpoolResponse::Error {
                id: stem.clone(),
                message,
            },
        };
        write_atomic(
            &spool.join(format!("{}.resp", response.id())),
            format_response(&response).as_bytes(),
        )?;
        fs::remove_file(path)?;
    }
    Ok(pending.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraModel;
    use crate::projection::read_depth_raw;
    use crate::se3::PoseSE3;
    use std::sync::atomic::AtomicBool;
    use std::sync::Arc;

    #[test]
    fn records_round_trip() {
        let req = SpoolRequest {
            id: "f0-000001".into(),
            rgb: "f0-000001.png".into(),
            lidar: "f0-000001.depth".into(),
        };
        assert_eq!(parse_request(&format_request(&req)).unwrap(), req);
        assert!(parse_request("LLREQ v2 a b c")
            .unwrap_err()
            .contains("version"));
        assert!(parse_request("LLREQ v1 a ../b c").is_err());
        assert!(parse_request("garbage").is_err());

        let target = PoseTarget {
            translation: Vector3::new(0.1, -2.5e-7, 3.0),
            rotation: Quat::new(0.9, 0.1, -0.3, 1e-17),
        };
        let ok = SpoolResponse::Ok {
            id: "x".into(),
            target,
        };
        assert_eq!(parse_response(&format_response(&ok)).unwrap(), ok);
        let err = SpoolResponse::Error {
            id: "x".into(),
            message: "bad input file".into(),
        };
        assert_eq!(parse_response(&format_response(&err)).unwrap(), err);
        assert!(parse_response("LLRESP v1 x ok 1 2 3").is_err());
        assert!(parse_response("LLRESP v1 x ok 1 2 3 NaN 0 0 0").is_err());
        let line = format_response(&SpoolResponse::Error {
            id: "y".into(),
            message: "two\nlines".into(),
        });
        assert_eq!(line.matches('\n').count(), 1);
    }

    #[test]
    fn round_trip_through_a_spool_server() {
        let dir = tempfile::tempdir().unwrap();
        let spool = dir.path().to_path_buf();
        let stop = Arc::new(AtomicBool::new(false));
        let server = {
            let (spool, stop) = (spool.clone(), stop.clone());
            thread::spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    process_pending(&spool, |req, dir| {
                        let (w, h, depth) =
                            read_depth_raw(fs::File::open(dir.join(&req.lidar)).unwrap())
                                .map_err(|e| e.to_string())?;
                        let n = depth.iter().filter(|&&d| d > 0.0).count() as f64;
                        if w == 0 || h == 0 {
                            return Err("empty".into());
                        }
                        Ok(PoseTarget {
                            translation: Vector3::new(n, w as f64, h as f64),
                            rotation: Quat::IDENTITY,
                        })
                    })
                    .unwrap();
                    thread::sleep(Duration::from_millis(2));
                }
            })
        };

        let cam = CameraModel::pinhole(10.0, 10.0, 4.0, 4.0, 8, 8).unwrap();
        let mut lidar = DepthImage::zeros(cam, PoseSE3::IDENTITY);
        lidar.depth[3] = 2.0;
        let reg = ExternalRegressor::new(&spool, "t", Duration::from_secs(10));
        let out = reg.predict(&RgbImage::new(8, 8), &lidar).unwrap();
        assert_eq!(out.translation, Vector3::new(1.0, 8.0, 8.0));
        let out = reg.predict(&RgbImage::new(8, 8), &lidar).unwrap();
        assert_eq!(out.translation.x, 1.0);
        stop.store(true, Ordering::SeqCst);
        server.join().unwrap();
        assert_eq!(
            fs::read_dir(&spool).unwrap().count(),
            0,
            "consumer cleans up"
        );
    }

    #[test]
    fn malformed_request_gets_error_response() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("bad.req"), "hello\n").unwrap();
        let n = process_pending(dir.path(), |_, _| unreachable!()).unwrap();
        assert_eq!(n, 1);
        let resp =
            parse_response(&fs::read_to_string(dir.path().join("bad.resp")).unwrap()).unwrap();
        assert!(matches!(resp, SpoolResponse::Error { ref id, .. } if id == "bad"));
    }

    #[test]
    fn missing_server_times_out() {
        let dir = tempfile::tempdir().unwrap();
        let reg = ExternalRegressor::new(dir.path(), "t", Duration::from_millis(30));
        let cam = CameraModel::pinhole(10.0, 10.0, 4.0, 4.0, 8, 8).unwrap();
        let err = reg
            .predict(
                &RgbImage::new(8, 8),
                &DepthImage::zeros(cam, PoseSE3::IDENTITY),
            )
            .unwrap_err();
        assert!(matches!(err, RefineError::Timeout(30, _)), "{err}");
    }
}
