//! Scripted base trajectories over a heightfield and the per-step sensor
//! and ground-truth records they produce.

use hmap_core::geometry::{HeightField, Pose, TerrainKind};
use hmap_core::heightmap::{extract_ground_truth, HeightmapSpec};
use hmap_core::image::MaskedImage;
use hmap_core::error::CoreError;
use hmap_core::range_image::{preprocess_image, rasterize};
use hmap_core::rng::SplitMix64;
use hmap_core::sensor::{depth_render_with, lidar_scan_with, DepthCameraModel, LidarModel, RayCaster};
use nalgebra::{Matrix3, Rotation3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{PipelineError, Result};
use crate::model::{Modality, HEIGHT_OFFSET, STATE_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryConfig {
    pub dt: f64,
    pub speed: [f64; 2],
    pub yaw_rate: [f64; 2],
    /// Duration range of one constant speed / yaw-rate segment, seconds.
    pub segment_seconds: [f64; 2],
    pub base_height: f64,
    pub height_jitter: f64,
    pub tilt_jitter_deg: f64,
    /// Minimum distance kept between the base and the terrain edge.
    pub edge_margin: f64,
    /// Half-width of the square around the terrain center the start is drawn from.
    pub start_spread: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            speed: [0.3, 0.7],
            yaw_rate: [-0.4, 0.4],
            segment_seconds: [1.0, 2.0],
            base_height: HEIGHT_OFFSET as f64,
            height_jitter: 0.01,
            tilt_jitter_deg: 2.0,
            edge_margin: 1.2,
            start_spread: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorSuite {
    pub lidar: LidarModel,
    pub depth: DepthCameraModel,
}

/// One 10 Hz record.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub pose: Pose,
    pub state: [f32; STATE_DIM],
    pub depth: MaskedImage,
    /// Rasterized LiDAR scan before clipping and filtering.
    pub lidar: MaskedImage,
    /// Ground-truth heightmap, base-relative meters.
    pub heightmap: Vec<f32>,
}

impl Sample {
    /// Clean network input of one modality, in meters: the depth image as
    /// rendered, or the preprocessed range image. A scan without any
    /// in-range return stays all-invalid.
    pub fn input(&self, modality: Modality) -> Result<MaskedImage> {
        match modality {
            Modality::Depth => Ok(self.depth.clone()),
            Modality::Lidar => match preprocess_image(&self.lidar) {
                Ok(img) => Ok(img),
                Err(CoreError::NoValidPixel) => Ok(MaskedImage::invalid(self.lidar.width, self.lidar.height)),
                Err(e) => Err(e.into()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: u32,
    pub kind: TerrainKind,
    pub terrain_seed: u64,
    pub seed: u64,
    pub dt: f64,
    pub samples: Vec<Sample>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 * self.dt
    }
}

/// Base poses of a seeded kinematic script: piecewise-constant forward
/// speed and yaw rate, base height following the terrain, small roll and
/// pitch jitter. A step that would leave the margin reflects the heading
/// off that edge instead.
pub fn simulate_trajectory(field: &HeightField, seed: u64, steps: usize, cfg: &TrajectoryConfig) -> Result<Vec<Pose>> {
    let (x0, x1, y0, y1) = field.bounds();
    let m = cfg.edge_margin;
    let (lo_x, hi_x, lo_y, hi_y) = (x0 + m, x1 - m, y0 + m, y1 - m);
    if !(lo_x + 2.0 * cfg.start_spread < hi_x && lo_y + 2.0 * cfg.start_spread < hi_y) {
        return Err(PipelineError::Config("terrain too small for the trajectory margin".into()));
    }
    let mut rng = SplitMix64::new(seed);
    let (cx, cy) = (0.5 * (x0 + x1), 0.5 * (y0 + y1));
    let mut x = cx + rng.uniform(-cfg.start_spread, cfg.start_spread);
    let mut y = cy + rng.uniform(-cfg.start_spread, cfg.start_spread);
    let mut yaw = rng.uniform(-PI, PI);
    let (mut speed, mut omega, mut remaining) = (0.0, 0.0, 0usize);
    let tilt = cfg.tilt_jitter_deg.to_radians();
    let mut poses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let z = field.height_at(x, y)? + cfg.base_height + cfg.height_jitter * rng.normal();
        let roll = tilt * rng.normal();
        let pitch = tilt * rng.normal();
        poses.push(Pose::from_xyz_rpy(x, y, z, roll, pitch, yaw));
        if remaining == 0 {
            speed = rng.uniform(cfg.speed[0], cfg.speed[1]);
            omega = rng.uniform(cfg.yaw_rate[0], cfg.yaw_rate[1]);
            let secs = rng.uniform(cfg.segment_seconds[0], cfg.segment_seconds[1]);
            remaining = ((secs / cfg.dt).round() as usize).max(1);
        }
        remaining -= 1;
        yaw += omega * cfg.dt;
        let mut nx = x + speed * yaw.cos() * cfg.dt;
        if !(lo_x..=hi_x).contains(&nx) {
            yaw = PI - yaw;
            nx = x + speed * yaw.cos() * cfg.dt;
        }
        let mut ny = y + speed * yaw.sin() * cfg.dt;
        if !(lo_y..=hi_y).contains(&ny) {
            yaw = -yaw;
            ny = y + speed * yaw.sin() * cfg.dt;
        }
        yaw = (yaw + PI).rem_euclid(2.0 * PI) - PI;
        x = nx.clamp(lo_x, hi_x);
        y = ny.clamp(lo_y, hi_y);
    }
    Ok(poses)
}

/// 15-value robot state per pose: base-frame linear velocity, base-frame
/// angular velocity (both by finite differences, forward at the first
/// step), position relative to the first pose, and the first two columns
/// of the rotation matrix.
pub fn robot_states(poses: &[Pose], dt: f64) -> Vec<[f32; STATE_DIM]> {
    let n = poses.len();
    (0..n)
        .map(|t| {
            let (a, b) = if n < 2 { (0, 0) } else if t == 0 { (0, 1) } else { (t - 1, t) };
            let r = &poses[t].rotation;
            let v = r.transpose() * (poses[b].position - poses[a].position) / dt;
            let rel: Matrix3<f64> = poses[a].rotation.transpose() * poses[b].rotation;
            let w = Rotation3::from_matrix_unchecked(rel).scaled_axis() / dt;
            let p = poses[t].position - poses[0].position;
            let mut s = [0f32; STATE_DIM];
            for k in 0..3 {
                s[k] = v[k] as f32;
                s[3 + k] = w[k] as f32;
                s[6 + k] = p[k] as f32;
                s[9 + k] = r[(k, 0)] as f32;
                s[12 + k] = r[(k, 1)] as f32;
            }
            s
        })
        .collect()
}

/// Runs the script and renders both sensors plus the ground truth at every
/// step.
pub fn simulate_episode(
    field: &HeightField,
    seed: u64,
    steps: usize,
    sensors: &SensorSuite,
    spec: &HeightmapSpec,
    traj: &TrajectoryConfig,
) -> Result<Episode> {
    let poses = simulate_trajectory(field, seed, steps, traj)?;
    let states = robot_states(&poses, traj.dt);
    let caster = RayCaster::new(field);
    let mut samples = Vec::with_capacity(steps);
    for (pose, state) in poses.into_iter().zip(states) {
        let lidar = rasterize(&lidar_scan_with(&sensors.lidar, &pose, &caster)?);
        let depth = depth_render_with(&sensors.depth, &pose, &caster)?;
        let heightmap = extract_ground_truth(spec, &pose, field)?.values;
        samples.push(Sample { pose, state, depth, lidar, heightmap });
    }
    Ok(Episode { id: 0, kind: field.kind(), terrain_seed: 0, seed, dt: traj.dt, samples })
}
