//! Bundled procedural street scene for tests, demos and benchmarks.
//!
//! The map frame follows the camera convention (x right, y down, z forward).
//! The ground plane sits 1.65 m below the camera path at `y = 1.65`.

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::CameraModel;
use crate::map::PointCloudMap;
use crate::se3::{PoseSE3, Quat};

pub const GROUND_Y: f32 = 1.65;
pub const SCENE_SEED: u64 = 0x5ce7e;
pub const STREET_LENGTH: f32 = 140.0;

/// Synthetic street: ground plane, facades with setbacks and gaps on both
/// sides, poles, parked boxes and a closing wall. About 50k points.
pub fn synthetic_scene() -> PointCloudMap {
    synthetic_scene_seeded(SCENE_SEED)
}

pub fn synthetic_scene_seeded(seed: u64) -> PointCloudMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts: Vec<Point3<f32>> = Vec::with_capacity(52_000);
    let (z0, z1) = (-10.0f32, STREET_LENGTH - 10.0);

    for _ in 0..14_000 {
        pts.push(Point3::new(
            rng.random_range(-9.0..9.0),
            GROUND_Y,
            rng.random_range(z0..z1),
        ));
    }

    for side in [-1.0f32, 1.0] {
        let mut z = z0;
        while z < z1 {
            let len = rng.random_range(8.0..20.0f32).min(z1 - z);
            let x = side * rng.random_range(7.0..9.5f32);
            let top = -rng.random_range(4.0..10.0f32);
            let n = (len * (GROUND_Y - top) * 9.0) as usize;
            for _ in 0..n {
                pts.push(Point3::new(
                    x,
                    rng.random_range(top..GROUND_Y),
                    rng.random_range(z..z + len),
                ));
            }
            z += len;
            if rng.random_bool(0.4) {
                z += rng.random_range(1.5..4.0f32);
            }
        }
    }

    for _ in 0..24 {
        let side = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
        let (cx, cz) = (
            side * rng.random_range(5.0..6.5f32),
            rng.random_range(z0..z1),
        );
        for _ in 0..150 {
            let a = rng.random_range(0.0..std::f32::consts::TAU);
            let y = rng.random_range(GROUND_Y - 5.0..GROUND_Y);
            pts.push(Point3::new(cx + 0.12 * a.cos(), y, cz + 0.12 * a.sin()));
        }
    }

    for _ in 0..14 {
        let side = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
        let centre = Vector3::new(
            side * rng.random_range(3.5..5.0f32),
            GROUND_Y - 0.75,
            rng.random_range(z0..z1),
        );
        let half = Vector3::new(0.9f32, 0.75, 2.0);
        for _ in 0..250 {
            pts.push(Point3::from(centre + box_surface_point(&mut rng, &half)));
        }
    }

    for _ in 0..2_000 {
        pts.push(Point3::new(
            rng.random_range(-9.5..9.5),
            rng.random_range(-8.0..GROUND_Y),
            z1,
        ));
    }
    PointCloudMap::new(pts)
}

fn box_surface_point(rng: &mut ChaCha8Rng, half: &Vector3<f32>) -> Vector3<f32> {
    let mut p = Vector3::new(
        rng.random_range(-half.x..half.x),
        rng.random_range(-half.y..half.y),
        rng.random_range(-half.z..half.z),
    );
    let axis = rng.random_range(0..3);
    p[axis] = if rng.random_bool(0.5) {
        half[axis]
    } else {
        -half[axis]
    };
    p
}

/// 320×128 pinhole camera with a 90° horizontal field of view.
pub fn synthetic_camera() -> CameraModel {
    CameraModel::pinhole(160.0, 160.0, 160.0, 64.0, 320, 128).expect("valid synthetic camera")
}

/// Camera-from-map poses along the street: 5 m spacing with a gentle yaw
/// and lateral sway.
pub fn synthetic_trajectory(count: usize) -> Vec<PoseSE3> {
    (0..count)
        .map(|i| {
            let s = i as f64;
            let yaw = 0.05 * (0.7 * s).sin();
            let position = Vector3::new(0.6 * (0.4 * s).sin(), 0.0, 5.0 * s);
            let map_from_cam =
                PoseSE3::new(Quat::from_axis_angle(&Vector3::y(), yaw), position).expect("unit");
            map_from_cam.inverse()
        })
        .collect()
}

/// A sparse wall in front of a dense fence, seen head-on.
#[derive(Debug, Clone)]
pub struct WallFenceFixture {
    pub cloud: PointCloudMap,
    pub camera: CameraModel,
    pub pose: PoseSE3,
    pub wall_depth: f32,
    pub fence_depth: f32,
    /// Pixel rectangle `(u0, u1, v0, v1)` covered by the wall, inclusive.
    pub wall_pixels: (u32, u32, u32, u32),
}

pub fn wall_fence_fixture() -> WallFenceFixture {
    let camera = CameraModel::pinhole(100.0, 100.0, 64.0, 32.0, 128, 64).expect("valid camera");
    let (wall_depth, fence_depth) = (8.0f32, 14.0f32);
    let mut pts = Vec::new();
    // Wall: 0.2 m lattice, leaving gaps between its projected points.
    for i in 0..=20 {
        for j in 0..=10 {
            pts.push(Point3::new(
                -2.0 + 0.2 * i as f32,
                -1.0 + 0.2 * j as f32,
                wall_depth,
            ));
        }
    }
    // Fence: wider and much denser.
    for i in 0..=240 {
        for j in 0..=40 {
            pts.push(Point3::new(
                -6.0 + 0.05 * i as f32,
                -1.0 + 0.05 * j as f32,
                fence_depth,
            ));
        }
    }
    let px = |x: f32, z: f32| (100.0 * x / z + 64.0).round() as u32;
    let py = |y: f32, z: f32| (100.0 * y / z + 32.0).round() as u32;
    WallFenceFixture {
        cloud: PointCloudMap::new(pts),
        camera,
        pose: PoseSE3::IDENTITY,
        wall_depth,
        fence_depth,
        wall_pixels: (
            px(-2.0, wall_depth),
            px(2.0, wall_depth),
            py(-1.0, wall_depth),
            py(1.0, wall_depth),
        ),
    }
}
