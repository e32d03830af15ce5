use hmap_core::fusion::ElevationBuffer;
use hmap_core::heightmap::{extract_ground_truth, mae};
use hmap_core::range_image::{rasterize, scan_points};
use hmap_core::rng::SplitMix64;
use hmap_core::sensor::{depth_render_with, depth_to_points, lidar_scan_with, RayCaster, MAX_RANGE};
use hmap_core::terrain::{generate, randomized_spec};
use hmap_core::{DepthCameraModel, HeightmapSpec, LidarModel, Pose, TerrainKind, Vec3};

/// Pivots the base in place through a full turn, integrating every scan,
/// and returns the oracle MAE against ground truth at the final pose.
fn pivot_mae(kind: TerrainKind, seed: u64, scans: usize, sigma: f64) -> (f64, usize) {
    let field = generate(&randomized_spec(kind, seed)).unwrap();
    let caster = RayCaster::new(&field);
    let (lidar, depth) = (LidarModel::default(), DepthCameraModel::default());
    let spec = HeightmapSpec::default();
    let (x, y) = (4.03, 3.97);
    let z = field.height_at(x, y).unwrap() + 0.75;
    let mut buf = ElevationBuffer::new(x, y);
    let mut rng = SplitMix64::new(seed ^ 0x5eed);
    let mut pose = Pose::identity();
    for k in 0..scans {
        let yaw = k as f64 * std::f64::consts::TAU / scans as f64;
        pose = Pose::from_xyz_rpy(x, y, z, 0.0, 0.0, yaw);
        let mut world = Vec::new();
        let lpose = pose.compose(&lidar.mount());
        let img = rasterize(&lidar_scan_with(&lidar, &pose, &caster).unwrap());
        world.extend(lpose.transform_points(&scan_points(&lidar, &img, MAX_RANGE)));
        let cpose = pose.compose(&depth.mount());
        let dimg = depth_render_with(&depth, &pose, &caster).unwrap();
        world.extend(cpose.transform_points(&depth_to_points(&depth, &dimg, MAX_RANGE)));
        if sigma > 0.0 {
            for p in world.iter_mut() {
                *p += Vec3::new(rng.normal(), rng.normal(), rng.normal()) * sigma;
            }
        }
        buf.integrate(&world, k as i64);
    }
    let (hm, cov) = buf.query(&spec, &pose);
    let truth = extract_ground_truth(&spec, &pose, &field).unwrap();
    (mae(&hm, &truth).unwrap(), cov.iter().filter(|c| !**c).count())
}

#[test]
fn pivot_scans_reconstruct_every_kind() {
    for (n, kind) in TerrainKind::ALL.into_iter().enumerate() {
        let (clean, uncovered) = pivot_mae(kind, 100 + n as u64, 36, 0.0);
        assert!(clean < 0.01, "{kind}: noiseless MAE {clean}");
        assert!(uncovered < 10, "{kind}: {uncovered} uncovered");
        let (noisy, _) = pivot_mae(kind, 100 + n as u64, 36, 0.01);
        assert!(noisy <= 0.02, "{kind}: noisy MAE {noisy}");
    }
}
