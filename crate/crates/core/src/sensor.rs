//! LiDAR and depth-camera simulation by ray casting against a
//! [`HeightField`], plus the training-time corruption model.

use std::f64::consts::PI;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::{HeightField, Pose, Vec3};
use crate::image::MaskedImage;
use crate::rng::SplitMix64;

/// Fixed march step of the ray caster, meters.
pub const MARCH_STEP: f64 = 0.01;
/// Bisection refinements after the first sample below the surface.
pub const BISECTION_STEPS: usize = 20;

pub const MIN_RANGE: f32 = 0.2;
pub const MAX_RANGE: f32 = 3.0;

pub const LIDAR_CHANNELS: usize = 40;
pub const LIDAR_COLUMNS: usize = 276;
pub const LIDAR_MIN_INCLINATION_DEG: f64 = -7.0;
pub const LIDAR_MAX_INCLINATION_DEG: f64 = 52.0;

pub const DEPTH_WIDTH: usize = 160;
pub const DEPTH_HEIGHT: usize = 120;

/// Ray march against `field`: returns the smallest distance `t` in
/// `(0, max_range]` at which the ray is at or below the surface, to within
/// the 1 cm march step refined by 20 bisections. `None` for rays that leave
/// the footprint or the range without hitting.
pub fn raycast(field: &HeightField, origin: &Vec3, direction: &Vec3, max_range: f64) -> Result<Option<f64>> {
    check_ray(field, origin, direction, max_range)?;
    let steps = (max_range / MARCH_STEP).floor() as usize;
    for k in 1..=steps {
        let t = k as f64 * MARCH_STEP;
        let p = origin + direction * t;
        match field.try_height(p.x, p.y) {
            None => return Ok(None),
            Some(h) if p.z <= h => return Ok(Some(bisect(field, origin, direction, t - MARCH_STEP, t))),
            Some(_) => {}
        }
    }
    Ok(None)
}

fn check_ray(field: &HeightField, origin: &Vec3, direction: &Vec3, max_range: f64) -> Result<()> {
    if (direction.norm() - 1.0).abs() > 1e-9 {
        return Err(CoreError::InvalidParameter(format!("direction norm {}", direction.norm())));
    }
    if !(max_range > 0.0) {
        return Err(CoreError::InvalidParameter(format!("max range {max_range}")));
    }
    if let Some(h) = field.try_height(origin.x, origin.y) {
        if origin.z < h {
            return Err(CoreError::OriginBelowTerrain { origin_z: origin.z, terrain_z: h });
        }
    }
    Ok(())
}

fn bisect(field: &HeightField, origin: &Vec3, direction: &Vec3, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        let p = origin + direction * mid;
        let below = field.try_height(p.x, p.y).map_or(false, |h| p.z <= h);
        if below {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Ray caster with a conservative max-height tile map that lets the march
/// skip samples provably above the terrain. Results are identical to
/// [`raycast`]: only samples that cannot be at or below the surface are
/// skipped and the sample lattice `k * MARCH_STEP` is unchanged.
pub struct RayCaster<'a> {
    field: &'a HeightField,
    tile_cells: usize,
    tiles_x: usize,
    tiles_y: usize,
    /// Max elevation over each tile and its 8 neighbours.
    bound: Vec<f64>,
}

impl<'a> RayCaster<'a> {
    pub fn new(field: &'a HeightField) -> Self {
        let tile_cells = 8;
        let tiles_x = field.nx().div_ceil(tile_cells);
        let tiles_y = field.ny().div_ceil(tile_cells);
        let mut tile_max = vec![f64::NEG_INFINITY; tiles_x * tiles_y];
        for iy in 0..field.ny() {
            for ix in 0..field.nx() {
                let t = (iy / tile_cells) * tiles_x + ix / tile_cells;
                tile_max[t] = tile_max[t].max(field.cell(ix, iy) as f64);
            }
        }
        let mut bound = vec![f64::NEG_INFINITY; tiles_x * tiles_y];
        for ty in 0..tiles_y {
            for tx in 0..tiles_x {
                let mut m = f64::NEG_INFINITY;
                for ny in ty.saturating_sub(1)..=(ty + 1).min(tiles_y - 1) {
                    for nx in tx.saturating_sub(1)..=(tx + 1).min(tiles_x - 1) {
                        m = m.max(tile_max[ny * tiles_x + nx]);
                    }
                }
                bound[ty * tiles_x + tx] = m;
            }
        }
        Self { field, tile_cells, tiles_x, tiles_y, bound }
    }

    pub fn field(&self) -> &HeightField {
        self.field
    }

    pub fn cast(&self, origin: &Vec3, direction: &Vec3, max_range: f64) -> Result<Option<f64>> {
        check_ray(self.field, origin, direction, max_range)?;
        Ok(self.cast_unchecked(origin, direction, max_range))
    }

    fn cast_unchecked(&self, origin: &Vec3, direction: &Vec3, max_range: f64) -> Option<f64> {
        let field = self.field;
        let steps = (max_range / MARCH_STEP).floor() as usize;
        let [ox, oy] = field.origin();
        let cs = field.cell_size();
        let tile_len = self.tile_cells as f64 * cs;
        let dxy = direction.x.hypot(direction.y);
        let mut k = 1usize;
        while k <= steps {
            let t = k as f64 * MARCH_STEP;
            let p = origin + direction * t;
            let h = field.try_height(p.x, p.y)?;
            if p.z <= h {
                return Some(bisect(field, origin, direction, t - MARCH_STEP, t));
            }
            let tx = (((p.x - ox) / cs) as usize / self.tile_cells).min(self.tiles_x - 1);
            let ty = (((p.y - oy) / cs) as usize / self.tile_cells).min(self.tiles_y - 1);
            let b = self.bound[ty * self.tiles_x + tx];
            let mut next = k + 1;
            if p.z > b {
                let s_h = if dxy > 0.0 { tile_len / dxy } else { f64::INFINITY };
                let s_v = if direction.z < 0.0 { (p.z - b) / -direction.z } else { f64::INFINITY };
                let s = s_h.min(s_v);
                if !s.is_finite() {
                    // vertical rising ray
                    return None;
                }
                let far = ((t + s) / MARCH_STEP).floor();
                if far > next as f64 {
                    next = if far > steps as f64 { steps + 1 } else { far as usize };
                }
            }
            k = next;
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidarModel {
    pub channels: usize,
    pub columns: usize,
    pub min_inclination_deg: f64,
    pub max_inclination_deg: f64,
    pub rate_hz: f64,
    /// Sensor pose in the base frame: `[x, y, z, roll, pitch, yaw]`.
    pub mount_xyz_rpy: [f64; 6],
    pub max_range: f64,
}

impl Default for LidarModel {
    /// 40 x 276 idealized grid, mounted upside down 0.40 m above the base so
    /// the upward-biased vertical field of view looks at the surrounding
    /// ground.
    fn default() -> Self {
        Self {
            channels: LIDAR_CHANNELS,
            columns: LIDAR_COLUMNS,
            min_inclination_deg: LIDAR_MIN_INCLINATION_DEG,
            max_inclination_deg: LIDAR_MAX_INCLINATION_DEG,
            rate_hz: 10.0,
            mount_xyz_rpy: [0.0, 0.0, 0.40, PI, 0.0, 0.0],
            max_range: 6.0,
        }
    }
}

impl LidarModel {
    pub fn validate(&self) -> Result<()> {
        if self.channels != LIDAR_CHANNELS || self.columns != LIDAR_COLUMNS {
            return Err(CoreError::InvalidParameter(format!(
                "lidar grid must be {LIDAR_COLUMNS}x{LIDAR_CHANNELS}"
            )));
        }
        if !(self.max_inclination_deg > self.min_inclination_deg) || !(self.max_range > 0.0) {
            return Err(CoreError::InvalidParameter("lidar field of view".into()));
        }
        Ok(())
    }

    pub fn mount(&self) -> Pose {
        let [x, y, z, r, p, w] = self.mount_xyz_rpy;
        Pose::from_xyz_rpy(x, y, z, r, p, w)
    }

    /// Inclination of ring `ring`, radians; rings are evenly spaced over the
    /// vertical field of view with both ends included.
    pub fn ring_inclination(&self, ring: usize) -> f64 {
        let span = self.max_inclination_deg - self.min_inclination_deg;
        (self.min_inclination_deg + ring as f64 * span / (self.channels - 1) as f64).to_radians()
    }

    /// Azimuth of column `col` at the column's bin center. Column 0 starts at
    /// the rear (azimuth +pi) and azimuth decreases with the column index.
    pub fn column_azimuth(&self, col: usize) -> f64 {
        PI - (col as f64 + 0.5) * std::f64::consts::TAU / self.columns as f64
    }

    pub fn ray_direction(&self, ring: usize, col: usize) -> Vec3 {
        let th = self.ring_inclination(ring);
        let ph = self.column_azimuth(col);
        Vec3::new(th.cos() * ph.cos(), th.cos() * ph.sin(), th.sin())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthCameraModel {
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
    pub vfov_deg: f64,
    /// Camera pose in the base frame: `[x, y, z, roll, pitch, yaw]`; the
    /// optical axis is the camera x axis.
    pub mount_xyz_rpy: [f64; 6],
    pub max_range: f64,
}

impl Default for DepthCameraModel {
    /// 160 x 120, 87° x 58°, 0.35 m above the base and pitched 60° down so
    /// the footprint reaches the ground right in front of the feet.
    fn default() -> Self {
        Self {
            width: DEPTH_WIDTH,
            height: DEPTH_HEIGHT,
            hfov_deg: 87.0,
            vfov_deg: 58.0,
            mount_xyz_rpy: [0.0, 0.0, 0.35, 0.0, 60f64.to_radians(), 0.0],
            max_range: 6.0,
        }
    }
}

impl DepthCameraModel {
    pub fn validate(&self) -> Result<()> {
        if self.width != DEPTH_WIDTH || self.height != DEPTH_HEIGHT {
            return Err(CoreError::InvalidParameter(format!(
                "depth resolution must be {DEPTH_WIDTH}x{DEPTH_HEIGHT}"
            )));
        }
        let ok = |f: f64| f > 0.0 && f < 180.0;
        if !ok(self.hfov_deg) || !ok(self.vfov_deg) {
            return Err(CoreError::InvalidParameter("camera field of view".into()));
        }
        Ok(())
    }

    pub fn mount(&self) -> Pose {
        let [x, y, z, r, p, w] = self.mount_xyz_rpy;
        Pose::from_xyz_rpy(x, y, z, r, p, w)
    }

    pub fn focal(&self) -> (f64, f64) {
        let fx = 0.5 * self.width as f64 / (0.5 * self.hfov_deg.to_radians()).tan();
        let fy = 0.5 * self.height as f64 / (0.5 * self.vfov_deg.to_radians()).tan();
        (fx, fy)
    }

    /// Un-normalized camera-frame ray through the pixel center, with unit
    /// component along the optical axis.
    pub fn pixel_ray(&self, row: usize, col: usize) -> Vec3 {
        let (fx, fy) = self.focal();
        let u = col as f64 + 0.5 - 0.5 * self.width as f64;
        let v = row as f64 + 0.5 - 0.5 * self.height as f64;
        Vec3::new(1.0, -u / fx, -v / fy)
    }
}

/// Sensor-frame LiDAR returns; misses are omitted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub rings: Vec<u16>,
    pub columns: Vec<u16>,
}

pub const PCLD_MAGIC: &[u8; 4] = b"PCLD";

impl PointCloud {
    pub fn from_points(points: Vec<Vec3>) -> Self {
        let n = points.len();
        Self { points, rings: vec![0; n], columns: vec![0; n] }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, p: Vec3, ring: u16, col: u16) {
        self.points.push(p);
        self.rings.push(ring);
        self.columns.push(col);
    }

    pub fn transformed(&self, pose: &Pose) -> PointCloud {
        PointCloud {
            points: pose.transform_points(&self.points),
            rings: self.rings.clone(),
            columns: self.columns.clone(),
        }
    }

    /// `PCLD` file: magic, u32 version (1), u32 count, then per point
    /// x/y/z as f64 and ring/column as u16, little-endian.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(PCLD_MAGIC)?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for i in 0..self.len() {
            for v in self.points[i].iter() {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&self.rings[i].to_le_bytes())?;
            w.write_all(&self.columns[i].to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut head = [0u8; 12];
        r.read_exact(&mut head)?;
        if &head[..4] != PCLD_MAGIC {
            return Err(CoreError::Format("bad PCLD magic".into()));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != 1 {
            return Err(CoreError::Format(format!("unsupported PCLD version {version}")));
        }
        let n = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        let mut raw = vec![0u8; n * 28];
        r.read_exact(&mut raw)?;
        let mut cloud = PointCloud::default();
        for rec in raw.chunks_exact(28) {
            let f = |i: usize| f64::from_le_bytes(rec[i * 8..i * 8 + 8].try_into().unwrap());
            let p = Vec3::new(f(0), f(1), f(2));
            if !p.iter().all(|v| v.is_finite()) {
                return Err(CoreError::Format("non-finite point".into()));
            }
            let ring = u16::from_le_bytes([rec[24], rec[25]]);
            let col = u16::from_le_bytes([rec[26], rec[27]]);
            cloud.push(p, ring, col);
        }
        Ok(cloud)
    }
}

pub fn lidar_scan(model: &LidarModel, base_pose: &Pose, field: &HeightField) -> Result<PointCloud> {
    lidar_scan_with(model, base_pose, &RayCaster::new(field))
}

/// One ray per (ring, column); hits are returned in the sensor frame.
pub fn lidar_scan_with(model: &LidarModel, base_pose: &Pose, caster: &RayCaster) -> Result<PointCloud> {
    model.validate()?;
    let sensor = base_pose.compose(&model.mount());
    let origin = sensor.position;
    check_ray(caster.field(), &origin, &Vec3::x(), model.max_range)?;
    let mut cloud = PointCloud::default();
    let azimuths: Vec<(f64, f64)> =
        (0..model.columns).map(|c| model.column_azimuth(c).sin_cos()).collect();
    for ring in 0..model.channels {
        let (st, ct) = model.ring_inclination(ring).sin_cos();
        for (col, &(sp, cp)) in azimuths.iter().enumerate() {
            let d = Vec3::new(ct * cp, ct * sp, st);
            let dw = sensor.rotation * d;
            if let Some(t) = caster.cast_unchecked(&origin, &dw, model.max_range) {
                cloud.push(d * t, ring as u16, col as u16);
            }
        }
    }
    Ok(cloud)
}

pub type DepthImage = MaskedImage;

pub fn depth_render(model: &DepthCameraModel, base_pose: &Pose, field: &HeightField) -> Result<DepthImage> {
    depth_render_with(model, base_pose, &RayCaster::new(field))
}

/// Pinhole z-depth image. Returns beyond 3.0 m are stored as 3.0, returns
/// closer than 0.2 m and misses are invalid.
pub fn depth_render_with(model: &DepthCameraModel, base_pose: &Pose, caster: &RayCaster) -> Result<DepthImage> {
    model.validate()?;
    let cam = base_pose.compose(&model.mount());
    let origin = cam.position;
    check_ray(caster.field(), &origin, &Vec3::x(), model.max_range)?;
    let mut img = MaskedImage::invalid(model.width, model.height);
    for row in 0..model.height {
        for col in 0..model.width {
            let ray = model.pixel_ray(row, col);
            let norm = ray.norm();
            let dw = cam.rotation * (ray / norm);
            if let Some(t) = caster.cast_unchecked(&origin, &dw, model.max_range) {
                if let Some(z) = clip_range(t / norm) {
                    img.set(row, col, z);
                }
            }
        }
    }
    Ok(img)
}

/// Clip contract shared by both modalities: above-max clamps, below-min is
/// invalid.
#[inline]
pub fn clip_range(r: f64) -> Option<f32> {
    let r = r as f32;
    if r < MIN_RANGE || r.is_nan() {
        None
    } else {
        Some(r.min(MAX_RANGE))
    }
}

/// Camera-frame points for valid pixels with depth strictly below
/// `max_depth` (pixels clamped to the far clip carry no position).
pub fn depth_to_points(model: &DepthCameraModel, image: &DepthImage, max_depth: f32) -> Vec<Vec3> {
    let mut out = Vec::new();
    for row in 0..image.height {
        for col in 0..image.width {
            if let Some(z) = image.get(row, col) {
                if z < max_depth {
                    out.push(model.pixel_ray(row, col) * z as f64);
                }
            }
        }
    }
    out
}

/// Additive Gaussian noise on valid pixels (then re-clipped to
/// `[0.2, 3.0]`) followed by one to three random axis-aligned elliptical
/// occlusions whose union covers at most `max_occlusion_fraction` of the
/// image. The occluded area is drawn uniformly between half and all of that
/// budget.
pub fn corrupt(
    image: &MaskedImage,
    seed: u64,
    noise_sigma: f64,
    max_occlusion_fraction: f64,
) -> Result<MaskedImage> {
    if !(noise_sigma >= 0.0) {
        return Err(CoreError::InvalidParameter(format!("noise sigma {noise_sigma}")));
    }
    if !(0.0..=0.2).contains(&max_occlusion_fraction) {
        return Err(CoreError::InvalidParameter(format!(
            "occlusion fraction {max_occlusion_fraction} outside [0, 0.2]"
        )));
    }
    let mut rng = SplitMix64::new(seed);
    let mut out = image.clone();
    if noise_sigma > 0.0 {
        for i in 0..out.len() {
            if out.valid[i] {
                let noisy = out.values[i] as f64 + noise_sigma * rng.normal();
                match clip_range(noisy) {
                    Some(v) => out.values[i] = v,
                    None => {
                        out.values[i] = 0.0;
                        out.valid[i] = false;
                    }
                }
            }
        }
    }
    if max_occlusion_fraction > 0.0 {
        let (w, h) = (out.width, out.height);
        let cap = (max_occlusion_fraction * (w * h) as f64).floor() as usize;
        let count = rng.range_inclusive(1, 3) as usize;
        let total = rng.uniform(0.5, 1.0) * cap as f64;
        let weights: Vec<f64> = (0..count).map(|_| rng.uniform(0.2, 1.0)).collect();
        let wsum: f64 = weights.iter().sum();
        let mut stamped = vec![false; w * h];
        let mut used = 0usize;
        for wt in weights {
            let area = total * wt / wsum;
            let aspect = rng.uniform(0.5, 2.0);
            let ra = (area * aspect / PI).sqrt().max(0.5);
            let rb = (area / (PI * ra)).max(0.5);
            let cc = rng.uniform(0.0, w as f64);
            let cr = rng.uniform(0.0, h as f64);
            let r0 = (cr - rb).floor().max(0.0) as usize;
            let r1 = ((cr + rb).ceil() as usize).min(h - 1);
            let c0 = (cc - ra).floor().max(0.0) as usize;
            let c1 = ((cc + ra).ceil() as usize).min(w - 1);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let du = (c as f64 + 0.5 - cc) / ra;
                    let dv = (r as f64 + 0.5 - cr) / rb;
                    let i = r * w + c;
                    if du * du + dv * dv <= 1.0 && !stamped[i] && used < cap {
                        stamped[i] = true;
                        used += 1;
                        out.values[i] = 0.0;
                        out.valid[i] = false;
                    }
                }
            }
        }
    }
    Ok(out)
}
