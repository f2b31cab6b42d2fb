//! Map, camera, ground-truth poses and frames for a run.

use std::path::PathBuf;

use image::RgbImage;
use lidarloc_core::kitti::{read_calib, read_poses, read_text, SequencePaths};
use lidarloc_core::map::parse_map_binary;
use lidarloc_core::projection::overlay;
use lidarloc_core::scene::{synthetic_camera, synthetic_scene, synthetic_trajectory};
use lidarloc_core::{CameraModel, PointCloudMap, PoseSE3, RenderPipeline};

use crate::config::{RunConfig, Source};
use crate::error::CliError;

/// Depth mapped to the far end of the colour ramp in synthetic frames.
const SYNTHETIC_RGB_MAX_DEPTH: f32 = 40.0;

pub struct Scene {
    pub map: PointCloudMap,
    pub camera: CameraModel,
    /// Camera-from-map ground truth, indexed by frame number.
    pub gt: Vec<PoseSE3>,
    image_dir: Option<PathBuf>,
}

pub fn load_map_file(path: &std::path::Path) -> Result<PointCloudMap, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::keyed("config", "map", format!("{}: {e}", path.display())))?;
    parse_map_binary(&bytes).map_err(|e| CliError::keyed("input", "map", format!("{}: {e}", path.display())))
}

impl Scene {
    pub fn load(cfg: &RunConfig) -> Result<Scene, CliError> {
        match cfg.source {
            Source::Synthetic => {
                let map = match &cfg.map {
                    Some(p) => load_map_file(p)?,
                    None => synthetic_scene(),
                };
                Ok(Scene {
                    map,
                    camera: synthetic_camera(),
                    gt: synthetic_trajectory(cfg.first_frame + cfg.frames),
                    image_dir: None,
                })
            }
            Source::Kitti => {
                let root = cfg.dataset_root()?;
                let paths = SequencePaths::new(root, &cfg.sequence);
                let calib = read_text(&paths.calib).map_err(|e| CliError::keyed("input", "dataset", e))?;
                let camera = read_calib(&calib, cfg.image_width, cfg.image_height)
                    .map_err(|e| CliError::keyed("input", "dataset", e))?;
                let poses_text = read_text(&paths.poses).map_err(|e| CliError::keyed("input", "dataset", e))?;
                let gt = read_poses(&poses_text)
                    .map_err(|e| CliError::keyed("input", "dataset", e))?
                    .iter()
                    .map(PoseSE3::inverse)
                    .collect();
                let map = load_map_file(&cfg.map_path())?;
                let image_dir = root.join("sequences").join(&cfg.sequence).join("image_2");
                Ok(Scene { map, camera, gt, image_dir: Some(image_dir) })
            }
        }
    }

    /// Frame numbers selected by `first_frame` and `frames`.
    pub fn frame_range(&self, cfg: &RunConfig) -> Result<std::ops::Range<usize>, CliError> {
        let end = cfg.first_frame + cfg.frames;
        if end > self.gt.len() {
            return Err(CliError::keyed(
                "config",
                "frames",
                format!("frames {}..{end} exceed the {} available poses", cfg.first_frame, self.gt.len()),
            ));
        }
        Ok(cfg.first_frame..end)
    }

    /// Camera frame for `frame`. Synthetic frames are the depth-coloured
    /// rendering of the scene at the true pose; dataset frames are read
    /// from disk, falling back to black when missing.
    pub fn rgb(&self, frame: usize) -> Result<RgbImage, CliError> {
        let (w, h) = (self.camera.width, self.camera.height);
        match &self.image_dir {
            None => {
                let pipe = RenderPipeline::new(self.camera).with_occlusion(None).with_padding(false);
                let depth = pipe.render(&self.map, &self.gt[frame]).map_err(CliError::runtime)?;
                Ok(overlay(&depth, None, SYNTHETIC_RGB_MAX_DEPTH))
            }
            Some(dir) => {
                let path = dir.join(format!("{frame:06}.png"));
                if !path.exists() {
                    return Ok(RgbImage::new(w, h));
                }
                let img = image::open(&path).map_err(|e| CliError::io(&path, e))?;
                Ok(img.to_rgb8())
            }
        }
    }
}

/// Per-frame seed derived from the run seed (SplitMix64 finaliser).
pub fn frame_seed(seed: u64, frame: usize) -> u64 {
    let mut z = seed ^ (frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_seeds_differ() {
        let seeds: std::collections::BTreeSet<u64> = (0..1000).map(|f| frame_seed(7, f)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(frame_seed(0, 0), frame_seed(1, 0));
        assert_eq!(frame_seed(3, 4), frame_seed(3, 4));
    }
}
