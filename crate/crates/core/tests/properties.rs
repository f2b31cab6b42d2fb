use lidarloc_core::eval::{kde_pdf, silverman_bandwidth, summarize, Stats};
use lidarloc_core::kitti::{build_map, read_calib, read_poses, read_velo_to_cam, read_velodyne_scan};
use lidarloc_core::losses::{rotation_loss, total_loss};
use lidarloc_core::map::crop_local;
use lidarloc_core::occlusion::{occlusion_filter, visibility_mask};
use lidarloc_core::projection::Projector;
use lidarloc_core::se3::{angular_distance, pose_compose, sample_displacement, sample_init_pose, NoiseSpec, PoseErrorVec};
use lidarloc_core::{CameraModel, CropSpec, DepthImage, OcclusionParams, PointCloudMap, PoseSE3, Quat};
use nalgebra::{Point3, Vector3};
use proptest::prelude::*;

fn arb_quat() -> impl Strategy<Value = Quat> {
    prop::array::uniform4(-1.0f64..1.0)
        .prop_filter("away from zero", |v| v.iter().map(|x| x * x).sum::<f64>() > 0.01)
        .prop_map(|v| Quat::from_array(v).normalize().unwrap())
}

fn arb_pose() -> impl Strategy<Value = PoseSE3> {
    (arb_quat(), prop::array::uniform3(-20.0f64..20.0))
        .prop_map(|(q, t)| PoseSE3 { rotation: q, translation: Vector3::from(t) })
}

fn pose_gap(a: &PoseSE3, b: &PoseSE3) -> f64 {
    let dq = a.rotation.dot(&b.rotation).abs();
    (1.0 - dq.min(1.0)).max((a.translation - b.translation).norm())
}

fn arb_error() -> impl Strategy<Value = PoseErrorVec> {
    prop::array::uniform7(-3.0f64..3.0).prop_map(|v| PoseErrorVec {
        longitudinal: v[0],
        lateral: v[1],
        vertical: v[2],
        roll: v[3],
        pitch: v[4],
        yaw: v[5],
        total_angle: v[6].abs(),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn angular_distance_is_symmetric_sign_blind_and_left_invariant(q in arb_quat(), p in arb_quat(), r in arb_quat()) {
        let d = angular_distance(&q, &p).unwrap();
        prop_assert!((d - angular_distance(&p, &q).unwrap()).abs() < 1e-9);
        prop_assert!((d - angular_distance(&q, &p.neg()).unwrap()).abs() < 1e-9);
        prop_assert!((d - angular_distance(&(r * q), &(r * p)).unwrap()).abs() < 1e-9);
        prop_assert!(angular_distance(&q, &q.neg()).unwrap() < 1e-9);
    }

    #[test]
    fn composition_is_associative(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
        let left = pose_compose(&pose_compose(&a, &b), &c);
        let right = pose_compose(&a, &pose_compose(&b, &c));
        prop_assert!(pose_gap(&left, &right) < 1e-9);
    }

    #[test]
    fn init_pose_sampling_is_seeded_and_bounded(gt in arb_pose(), seed in any::<u64>(), t in 0.0f64..3.0, r in 0.0f64..0.5) {
        let spec = NoiseSpec::new(t, r).unwrap();
        prop_assert_eq!(sample_init_pose(&gt, &spec, seed), sample_init_pose(&gt, &spec, seed));
        let d = sample_displacement(&spec, seed);
        prop_assert!(d.translation.iter().all(|v| v.abs() <= t));
        prop_assert!([d.euler.z, d.euler.y, d.euler.x].iter().all(|v| v.abs() <= r));
    }

    #[test]
    fn total_loss_vanishes_only_at_the_target(t in prop::array::uniform3(-3.0f64..3.0), q in arb_quat(), p in arb_quat(), sign in prop::bool::ANY) {
        let t = Vector3::from(t);
        let s = if sign { -1.0 } else { 1.0 };
        let exact = q.to_array().map(|v| v * s * 1.7);
        prop_assert!(total_loss(&t, &t, &q, &exact).unwrap().abs() < 1e-12);
        let l = total_loss(&(t + Vector3::new(0.0, 0.01, 0.0)), &t, &q, &p.to_array()).unwrap();
        prop_assert!(l > 0.0);
        prop_assert!(total_loss(&t, &Vector3::zeros(), &q, &p.to_array()).unwrap() >= 0.0);
    }

    #[test]
    fn rotation_loss_is_left_invariant(q in arb_quat(), p in arb_quat(), r in arb_quat()) {
        let a = rotation_loss(&q, &p.to_array()).unwrap();
        let b = rotation_loss(&(r * q), &(r * p).to_array()).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn summarize_is_permutation_invariant(errs in prop::collection::vec(arb_error(), 1..40), seed in any::<u64>()) {
        let mut shuffled = errs.clone();
        let mut s = seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        prop_assert_eq!(summarize(&errs).unwrap(), summarize(&shuffled).unwrap());
    }

    #[test]
    fn stats_stay_within_sample_range(v in prop::collection::vec(-1e3f64..1e3, 1..200)) {
        let st = Stats::of(&v).unwrap();
        prop_assert!(st.min <= st.median && st.median <= st.max);
        prop_assert!(st.min <= st.mean && st.mean <= st.max);
        prop_assert!(st.std >= 0.0);
        prop_assert_eq!(st.count, v.len());
    }

    #[test]
    fn kde_conserves_mass(v in prop::collection::vec(-50.0f64..50.0, 1..100), bw in 0.01f64..10.0) {
        let curve = kde_pdf(&v, bw).unwrap();
        prop_assert!((curve.trapezoid() - 1.0).abs() < 1e-3, "mass {}", curve.trapezoid());
        let auto = kde_pdf(&v, silverman_bandwidth(&v).unwrap()).unwrap();
        prop_assert!((auto.trapezoid() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn parsing_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256), text in "[ -~\n]{0,300}") {
        let _ = read_velodyne_scan(&bytes);
        let _ = read_poses(&text);
        let _ = read_calib(&text, 64, 64);
        let _ = read_velo_to_cam(&text);
        let lossy = String::from_utf8_lossy(&bytes);
        let _ = read_poses(&lossy);
        let _ = read_calib(&lossy, 64, 64);
    }

    #[test]
    fn numeric_garbage_gives_positioned_errors(line in 1usize..5, count in 0usize..12) {
        let mut text = String::new();
        for _ in 1..line {
            text.push_str("1 0 0 0 0 1 0 0 0 0 1 0\n");
        }
        text.push_str(&vec!["0.5"; count].join(" "));
        text.push('\n');
        match read_poses(&text) {
            Err(lidarloc_core::kitti::KittiError::PoseLine { line: l, .. }) => prop_assert_eq!(l, line),
            Ok(p) => prop_assert!(count == 0 && p.len() == line - 1),
            Err(e) => prop_assert!(false, "{e}"),
        }
    }

    #[test]
    fn build_map_ignores_scan_order(n in 1usize..6, rot in 0usize..6) {
        // Integer-grid points and translations keep centroid sums exact.
        let scans: Vec<PointCloudMap> = (0..n)
            .map(|k| PointCloudMap::new((0..20).map(|i| Point3::new(i as f32, (k % 3) as f32, (i % 4) as f32)).collect()))
            .collect();
        let poses: Vec<PoseSE3> = (0..n).map(|k| PoseSE3::from_translation(Vector3::new(0.0, 0.0, k as f64))).collect();
        let a = build_map(&scans, &poses, 2.0).unwrap();
        let (mut s2, mut p2) = (scans.clone(), poses.clone());
        s2.rotate_left(rot % n);
        p2.rotate_left(rot % n);
        s2.reverse();
        p2.reverse();
        prop_assert_eq!(a, build_map(&s2, &p2, 2.0).unwrap());
    }

    #[test]
    fn occlusion_keeps_a_subset(depths in prop::collection::vec(prop_oneof![Just(0.0f32), 0.5f32..40.0], 24 * 16), th in 0.1f64..10.0, window in prop::sample::select(vec![3usize, 5, 7])) {
        let cam = CameraModel::pinhole(30.0, 30.0, 12.0, 8.0, 24, 16).unwrap();
        let mut img = DepthImage::zeros(cam, PoseSE3::IDENTITY);
        img.depth = depths;
        let params = OcclusionParams::from_threshold(window, th).unwrap();
        let out = occlusion_filter(&img, &params).unwrap();
        for (a, b) in img.depth.iter().zip(&out.depth) {
            prop_assert!(*b == 0.0 || b == a);
        }
        let mask = visibility_mask(&img, &params).unwrap();
        prop_assert_eq!(mask.iter().filter(|&&m| m).count(), out.nonzero_count());
    }

    #[test]
    fn one_point_per_ray_matches_the_naive_formula(cells in prop::collection::btree_set((0u32..40, 0u32..20), 1..60), z in prop::collection::vec(1.0f64..30.0, 60)) {
        let cam = CameraModel::pinhole(50.0, 50.0, 20.0, 10.0, 40, 20).unwrap();
        let pts: Vec<Point3<f32>> = cells
            .iter()
            .zip(&z)
            .map(|(&(u, v), &d)| {
                let d = d as f32;
                Point3::new((u as f32 - 20.0) / 50.0 * d, (v as f32 - 10.0) / 50.0 * d, d)
            })
            .collect();
        let img = Projector::new(0.05, 1).project(&PointCloudMap::new(pts.clone()), &PoseSE3::IDENTITY, &cam);
        prop_assert_eq!(img.nonzero_count(), pts.len());
        for p in &pts {
            let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
            let u = (50.0 * x / z + 20.0).round() as u32;
            let v = (50.0 * y / z + 10.0).round() as u32;
            prop_assert_eq!(img.get(u, v), p.z);
        }
    }

    #[test]
    fn crop_is_a_sub_multiset(pose in arb_pose(), pts in prop::collection::vec(prop::array::uniform3(-30.0f32..30.0), 0..300)) {
        let map = PointCloudMap::new(pts.iter().map(|p| Point3::from(*p)).collect());
        let spec = CropSpec::new(25.0, 10.0, 5.0).unwrap();
        let crop = crop_local(&map, &pose, &spec);
        let key = |p: &Point3<f32>| [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()];
        let mut all: Vec<_> = map.points().iter().map(key).collect();
        all.sort_unstable();
        for p in crop.points() {
            let k = key(p);
            let i = all.binary_search(&k);
            prop_assert!(i.is_ok());
            all.remove(i.unwrap());
        }
    }
}
