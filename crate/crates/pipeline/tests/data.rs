use hmap_core::geometry::TerrainKind;
use hmap_core::heightmap::{grid_points, HeightmapSpec};
use hmap_core::terrain::{generate, TerrainSpec};
use hmap_pipeline::container::{read_episode, write_episode};
use hmap_pipeline::dataset::{assign_splits, build_dataset, split_counts, Dataset, DatasetConfig, DatasetManifest, Split};
use hmap_pipeline::episode::{robot_states, simulate_episode, simulate_trajectory, SensorSuite, TrajectoryConfig};
use hmap_pipeline::PipelineError;
use proptest::prelude::*;

fn straight() -> TrajectoryConfig {
    TrajectoryConfig { yaw_rate: [0.0, 0.0], ..TrajectoryConfig::default() }
}

#[test]
fn flat_ground_truth_is_constant_minus_jitter() {
    let field = generate(&TerrainSpec::new(TerrainKind::Flat, 3)).unwrap();
    let cfg = straight();
    let ep = simulate_episode(&field, 11, 16, &SensorSuite::default(), &HeightmapSpec::default(), &cfg).unwrap();
    for s in &ep.samples {
        let expected = -(s.pose.position.z - field.height_at(s.pose.position.x, s.pose.position.y).unwrap()) as f32;
        assert!((expected + 0.75).abs() < 5.0 * cfg.height_jitter as f32);
        for v in &s.heightmap {
            assert!((v - expected).abs() < 1e-5, "{v} vs {expected}");
        }
    }
}

#[test]
fn episodes_are_deterministic_and_timed() {
    let field = generate(&TerrainSpec::new(TerrainKind::Steps, 5)).unwrap();
    let run = || {
        simulate_episode(&field, 21, 64, &SensorSuite::default(), &HeightmapSpec::default(), &TrajectoryConfig::default())
            .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(a.len(), 64);
    assert!((a.duration() - 6.4).abs() < 1e-12);
}

#[test]
fn container_round_trip_is_bitwise() {
    let field = generate(&TerrainSpec::new(TerrainKind::Rough, 8)).unwrap();
    let mut ep =
        simulate_episode(&field, 2, 6, &SensorSuite::default(), &HeightmapSpec::default(), &TrajectoryConfig::default())
            .unwrap();
    ep.id = 42;
    ep.terrain_seed = 8;
    let mut buf = Vec::new();
    write_episode(&mut buf, &ep).unwrap();
    let back = read_episode(&mut buf.as_slice()).unwrap();
    assert_eq!(back, ep);
    let mut again = Vec::new();
    write_episode(&mut again, &back).unwrap();
    assert_eq!(buf, again);

    assert!(read_episode(&mut &buf[..buf.len() - 3]).is_err());
    let mut corrupt = buf.clone();
    corrupt[0] = b'X';
    assert!(read_episode(&mut corrupt.as_slice()).is_err());
    let mut trailing = buf.clone();
    trailing.push(0);
    assert!(read_episode(&mut trailing.as_slice()).is_err());
}

#[test]
fn split_rule_examples() {
    assert_eq!(split_counts(10), (7, 2, 1));
    assert_eq!(split_counts(140), (98, 21, 21));
    assert_eq!(split_counts(1), (1, 0, 0));
    let mut kinds = Vec::new();
    for k in TerrainKind::ALL {
        kinds.extend(std::iter::repeat_n(k, 20));
    }
    let splits = assign_splits(&kinds, 7);
    for k in TerrainKind::ALL {
        let count = |s| kinds.iter().zip(&splits).filter(|(kk, ss)| **kk == k && **ss == s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (14, 3, 3));
    }
    assert_eq!(splits, assign_splits(&kinds, 7));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn split_ratios_within_one_episode(n in 1usize..400, seed in any::<u64>()) {
        let (tr, va, te) = split_counts(n);
        prop_assert_eq!(tr + va + te, n);
        for (count, ratio) in [(tr, 0.70), (va, 0.15), (te, 0.15)] {
            prop_assert!((count as f64 - ratio * n as f64).abs() <= 1.0);
        }
        prop_assert!(va >= te);
        let kinds: Vec<_> = (0..n).map(|i| TerrainKind::ALL[(i * 7 + seed as usize % 5) % 7]).collect();
        let s = assign_splits(&kinds, seed);
        prop_assert_eq!(s.iter().filter(|x| **x == Split::Train).count(), tr);
        prop_assert_eq!(s.iter().filter(|x| **x == Split::Val).count(), va);
    }

    #[test]
    fn trajectories_keep_the_heightmap_on_the_terrain(seed in any::<u64>(), kind in 0usize..7) {
        let mut spec = TerrainSpec::new(TerrainKind::ALL[kind], seed);
        spec.footprint = [4.0, 4.0];
        let field = generate(&spec).unwrap();
        let poses = simulate_trajectory(&field, seed ^ 1, 120, &TrajectoryConfig::default()).unwrap();
        let hm = HeightmapSpec::default();
        for p in &poses {
            for (x, y) in grid_points(&hm, p) {
                prop_assert!(field.contains(x, y));
            }
        }
        for s in robot_states(&poses, 0.1) {
            let (c0, c1) = (&s[9..12], &s[12..15]);
            let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| (x * y) as f64).sum::<f64>();
            prop_assert!((dot(c0, c0) - 1.0).abs() < 1e-6);
            prop_assert!((dot(c1, c1) - 1.0).abs() < 1e-6);
            prop_assert!(dot(c0, c1).abs() < 1e-6);
        }
    }
}

#[test]
fn state_velocity_matches_finite_difference() {
    let field = generate(&TerrainSpec::new(TerrainKind::Flat, 1)).unwrap();
    let poses = simulate_trajectory(&field, 9, 10, &TrajectoryConfig::default()).unwrap();
    let states = robot_states(&poses, 0.1);
    for t in 1..poses.len() {
        let world = (poses[t].position - poses[t - 1].position) / 0.1;
        let base = poses[t].rotation.transpose() * world;
        for k in 0..3 {
            assert!((states[t][k] as f64 - base[k]).abs() < 1e-5);
        }
        let rel = poses[t].position - poses[0].position;
        assert!((states[t][6] as f64 - rel.x).abs() < 1e-5);
    }
}

fn tiny_config() -> DatasetConfig {
    DatasetConfig {
        episodes_per_kind: 2,
        steps_per_episode: 3,
        kinds: vec![TerrainKind::Flat, TerrainKind::StairsUp],
        terrain_footprint: [4.0, 4.0],
        ..DatasetConfig::default()
    }
}

#[test]
fn dataset_build_open_and_manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let manifest = build_dataset(&cfg, dir.path(), 2).unwrap();
    assert_eq!(manifest.sample_count, 4 * 3);
    assert_eq!(manifest.episodes.len(), 4);
    let back = DatasetManifest::from_json(&manifest.to_json().unwrap()).unwrap();
    assert_eq!(back, manifest);

    let ds = Dataset::open(dir.path()).unwrap();
    assert_eq!(ds.manifest, manifest);
    let total: usize = [Split::Train, Split::Val, Split::Test].iter().map(|s| ds.ids(*s).len()).sum();
    assert_eq!(total, 4);
    let ep = ds.load(ds.ids(Split::Train)[0]).unwrap();
    assert_eq!(ep.len(), 3);

    let other = tempfile::tempdir().unwrap();
    build_dataset(&cfg, other.path(), 1).unwrap();
    for e in &manifest.episodes {
        let a = std::fs::read(dir.path().join(&e.file)).unwrap();
        let b = std::fs::read(other.path().join(&e.file)).unwrap();
        assert_eq!(a, b, "episode {} differs between job counts", e.id);
    }
}

#[test]
fn leaked_split_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = build_dataset(&tiny_config(), dir.path(), 1).unwrap();
    let train_id = manifest.ids(Split::Train)[0];
    manifest.splits.get_mut(&Split::Test).unwrap().push(train_id);
    assert!(matches!(manifest.check_splits(), Err(PipelineError::Leakage(_))));
}
