//! Crop, z-buffer projection and occlusion filtering chained into one render.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::map::{crop_local, CropSpec, PointCloudMap};
use crate::occlusion::{occlusion_filter, OcclusionError, OcclusionParams};
use crate::projection::{pad_image, DepthImage, Projector, DEFAULT_Z_NEAR};
use crate::se3::PoseSE3;

/// Wall-clock milliseconds spent in each render step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RenderTimings {
    pub crop_ms: f64,
    pub z_buffer_ms: f64,
    pub occlusion_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderPipeline {
    pub camera: CameraModel,
    pub crop: CropSpec,
    pub occlusion: Option<OcclusionParams>,
    pub projector: Projector,
    /// Zero-pad the output to multiples of 64.
    pub pad: bool,
}

impl RenderPipeline {
    pub fn new(camera: CameraModel) -> Self {
        Self {
            camera,
            crop: CropSpec::default(),
            occlusion: Some(OcclusionParams::default()),
            projector: Projector::new(DEFAULT_Z_NEAR, 1),
            pad: true,
        }
    }

    pub fn with_crop(mut self, crop: CropSpec) -> Self {
        self.crop = crop;
        self
    }

    pub fn with_occlusion(mut self, occlusion: Option<OcclusionParams>) -> Self {
        self.occlusion = occlusion;
        self
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.projector = Projector::new(self.projector.z_near, workers);
        self
    }

    pub fn with_padding(mut self, pad: bool) -> Self {
        self.pad = pad;
        self
    }

    /// Crop and projection fused into one pass; same output as `render_timed`.
    pub fn render(
        &self,
        map: &PointCloudMap,
        pose: &PoseSE3,
    ) -> Result<DepthImage, OcclusionError> {
        let img = self
            .projector
            .project_cropped(map, pose, &self.camera, Some(&self.crop));
        self.finish(img)
    }

    /// Renders an already cropped cloud, skipping the crop step.
    pub fn render_cropped(
        &self,
        local: &PointCloudMap,
        pose: &PoseSE3,
    ) -> Result<DepthImage, OcclusionError> {
        let img = self.projector.project(local, pose, &self.camera);
        self.finish(img)
    }

    pub fn render_timed(
        &self,
        map: &PointCloudMap,
        pose: &PoseSE3,
    ) -> Result<(DepthImage, RenderTimings), OcclusionError> {
        let t0 = Instant::now();
        let local = crop_local(map, pose, &self.crop);
        let t1 = Instant::now();
        let img = self.projector.project(&local, pose, &self.camera);
        let t2 = Instant::now();
        let img = self.finish(img)?;
        let t3 = Instant::now();
        let ms = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1e3;
        Ok((
            img,
            RenderTimings {
                crop_ms: ms(t0, t1),
                z_buffer_ms: ms(t1, t2),
                occlusion_ms: ms(t2, t3),
            },
        ))
    }

    fn finish(&self, img: DepthImage) -> Result<DepthImage, OcclusionError> {
        let img = match &self.occlusion {
            Some(p) => occlusion_filter(&img, p)?,
            None => img,
        };
        Ok(if self.pad { pad_image(&img) } else { img })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Point3, Vector3};

    #[test]
    fn stages_compose_like_the_manual_chain() {
        let cam = CameraModel::pinhole(60.0, 60.0, 50.0, 20.0, 100, 40).unwrap();
        let pts = (0..500)
            .map(|i| {
                Point3::new(
                    (i % 25) as f32 * 0.4 - 5.0,
                    (i / 25) as f32 * 0.2 - 2.0,
                    4.0 + (i % 7) as f32,
                )
            })
            .collect();
        let map = PointCloudMap::new(pts);
        let pose = PoseSE3::from_translation(Vector3::new(0.1, 0.0, -0.5));
        let pipe = RenderPipeline::new(cam).with_crop(CropSpec::new(8.0, 50.0, 25.0).unwrap());
        let (img, _) = pipe.render_timed(&map, &pose).unwrap();
        assert_eq!((img.width, img.height), (128, 64));

        let local = crop_local(&map, &pose, &pipe.crop);
        let manual = Projector::default().project(&local, &pose, &cam);
        let manual = pad_image(&occlusion_filter(&manual, &OcclusionParams::default()).unwrap());
        assert_eq!(img, manual);
        assert_eq!(pipe.render(&map, &pose).unwrap(), manual);
        assert_eq!(pipe.render_cropped(&local, &pose).unwrap(), manual);

        let raw = pipe
            .with_occlusion(None)
            .with_padding(false)
            .render(&map, &pose)
            .unwrap();
        assert_eq!((raw.width, raw.height), (100, 40));
        assert!(raw.nonzero_count() >= manual.nonzero_count());
    }
}
