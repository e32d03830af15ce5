//! Robot-centric heightmap: grid geometry, ground-truth extraction and
//! error metrics.
//!
//! The grid is gravity aligned and yawed with the base. Point `(i, j)` sits
//! at base-local `x = forward_offset - length/2 + i*resolution`,
//! `y = -width/2 + j*resolution`; values are flattened with `i` (rear to
//! front) as the outer index and `j` (right to left) as the inner index.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::{HeightField, Pose};

pub const FLATTENING_ORDER: &str = "row-major: x index outer (rear to front), y index inner (right to left)";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeightmapSpec {
    pub length: f64,
    pub width: f64,
    pub resolution: f64,
    pub forward_offset: f64,
}

impl Default for HeightmapSpec {
    fn default() -> Self {
        Self { length: 0.98, width: 0.7, resolution: 0.07, forward_offset: 0.2 }
    }
}

impl HeightmapSpec {
    pub fn with_resolution(resolution: f64) -> Self {
        Self { resolution, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.04..=0.12).contains(&self.resolution) {
            return Err(CoreError::InvalidParameter(format!(
                "heightmap resolution {} outside [0.04, 0.12]",
                self.resolution
            )));
        }
        if !(self.length > 0.0 && self.width > 0.0 && self.forward_offset.is_finite()) {
            return Err(CoreError::InvalidParameter("heightmap extent".into()));
        }
        Ok(())
    }

    /// Points along x (fencepost count).
    pub fn nx(&self) -> usize {
        (self.length / self.resolution).round() as usize + 1
    }

    /// Points along y (fencepost count).
    pub fn ny(&self) -> usize {
        (self.width / self.resolution).round() as usize + 1
    }

    pub fn len(&self) -> usize {
        self.nx() * self.ny()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Base-frame (x, y) of point `(i, j)`.
    pub fn local_point(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.forward_offset - self.length / 2.0 + i as f64 * self.resolution,
            -self.width / 2.0 + j as f64 * self.resolution,
        )
    }

    pub fn local_points(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.len());
        for i in 0..self.nx() {
            for j in 0..self.ny() {
                out.push(self.local_point(i, j));
            }
        }
        out
    }

    /// Largest horizontal distance of a grid point from the base origin.
    pub fn reach(&self) -> f64 {
        self.local_points().iter().map(|(x, y)| x.hypot(*y)).fold(0.0, f64::max)
    }
}

/// World-frame (x, y) of every grid point in flattening order. Only the base
/// yaw rotates the grid.
pub fn grid_points(spec: &HeightmapSpec, base_pose: &Pose) -> Vec<(f64, f64)> {
    let (s, c) = base_pose.yaw().sin_cos();
    let (bx, by) = (base_pose.position.x, base_pose.position.y);
    spec.local_points()
        .into_iter()
        .map(|(lx, ly)| (bx + c * lx - s * ly, by + s * lx + c * ly))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heightmap {
    pub spec: HeightmapSpec,
    /// Terrain z minus base z, meters, in flattening order.
    pub values: Vec<f32>,
}

impl Heightmap {
    pub fn new(spec: HeightmapSpec, values: Vec<f32>) -> Result<Self> {
        if values.len() != spec.len() {
            return Err(CoreError::InvalidParameter(format!(
                "heightmap needs {} values, got {}",
                spec.len(),
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(CoreError::InvalidParameter("non-finite heightmap value".into()));
        }
        Ok(Self { spec, values })
    }

    pub fn constant(spec: HeightmapSpec, value: f32) -> Self {
        Self { values: vec![value; spec.len()], spec }
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.spec.ny() + j]
    }

    /// CSV with `nx` rows of `ny` comma-separated values (meters).
    pub fn to_csv(&self) -> String {
        grid_csv(&self.values, self.spec.nx(), self.spec.ny())
    }
}

pub fn grid_csv(values: &[f32], rows: usize, cols: usize) -> String {
    let mut s = String::new();
    for i in 0..rows {
        let line: Vec<String> = (0..cols).map(|j| format!("{:.6}", values[i * cols + j])).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

/// Samples the terrain under every grid point relative to the base height.
pub fn extract_ground_truth(spec: &HeightmapSpec, base_pose: &Pose, field: &HeightField) -> Result<Heightmap> {
    let bz = base_pose.position.z;
    let values = grid_points(spec, base_pose)
        .into_iter()
        .map(|(x, y)| field.height_at(x, y).map(|h| (h - bz) as f32))
        .collect::<Result<Vec<_>>>()?;
    Heightmap::new(*spec, values)
}

pub fn mae(pred: &Heightmap, truth: &Heightmap) -> Result<f64> {
    if pred.spec != truth.spec {
        return Err(CoreError::SpecMismatch);
    }
    Ok(mae_values(&pred.values, &truth.values))
}

pub fn mae_values(a: &[f32], b: &[f32]) -> f64 {
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum();
    sum / a.len() as f64
}

/// Per-cell MAE over a sequence of prediction/truth pairs, in flattening
/// order (`nx` rows by `ny` columns).
pub fn spatial_error_map(preds: &[Heightmap], truths: &[Heightmap]) -> Result<Vec<f64>> {
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(CoreError::Empty("prediction/truth pairs"));
    }
    let spec = preds[0].spec;
    let mut acc = vec![0.0f64; spec.len()];
    for (p, t) in preds.iter().zip(truths) {
        if p.spec != spec || t.spec != spec {
            return Err(CoreError::SpecMismatch);
        }
        for (a, (x, y)) in acc.iter_mut().zip(p.values.iter().zip(&t.values)) {
            *a += (*x as f64 - *y as f64).abs();
        }
    }
    let n = preds.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}
