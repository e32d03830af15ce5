//! Non-learned temporal fusion baseline.
//!
//! A rolling 6 m x 6 m world-frame grid of 2 cm cells accumulates the upper
//! surface seen in each scan (max z per cell) and blends it into the running
//! estimate with an exponential moving average (alpha 0.5). Heightmaps are
//! read back by bilinear interpolation over observed cells.

use crate::geometry::{Pose, Vec3};
use crate::heightmap::{grid_points, Heightmap, HeightmapSpec};

pub const BUFFER_CELL_SIZE: f64 = 0.02;
pub const BUFFER_CELLS: usize = 300;
pub const EMA_ALPHA: f32 = 0.5;
/// Base height above ground assumed when nothing has been observed.
pub const NOMINAL_BASE_HEIGHT: f32 = 0.75;

#[derive(Debug, Clone)]
pub struct ElevationBuffer {
    /// Global index of local cell (0, 0); global cell `g` spans
    /// `[g*cs, (g+1)*cs)`.
    origin: [i64; 2],
    elevation: Vec<f32>,
    weight: Vec<f32>,
    last_update: Vec<i64>,
    scratch: Vec<f32>,
    touched: Vec<usize>,
}

impl ElevationBuffer {
    pub fn new(center_x: f64, center_y: f64) -> Self {
        let n = BUFFER_CELLS * BUFFER_CELLS;
        Self {
            origin: Self::origin_for(center_x, center_y),
            elevation: vec![0.0; n],
            weight: vec![0.0; n],
            last_update: vec![-1; n],
            scratch: vec![f32::NEG_INFINITY; n],
            touched: Vec::new(),
        }
    }

    fn origin_for(x: f64, y: f64) -> [i64; 2] {
        let half = (BUFFER_CELLS / 2) as i64;
        [
            (x / BUFFER_CELL_SIZE).floor() as i64 - half,
            (y / BUFFER_CELL_SIZE).floor() as i64 - half,
        ]
    }

    /// Shifts the window by whole cells so that it is centered on `(x, y)`;
    /// cells leaving the window are dropped, entering cells are unobserved.
    pub fn recenter(&mut self, x: f64, y: f64) {
        let new_origin = Self::origin_for(x, y);
        if new_origin == self.origin {
            return;
        }
        let n = BUFFER_CELLS as i64;
        let mut elevation = vec![0.0; self.elevation.len()];
        let mut weight = vec![0.0; self.weight.len()];
        let mut last = vec![-1; self.last_update.len()];
        let (dx, dy) = (new_origin[0] - self.origin[0], new_origin[1] - self.origin[1]);
        for ny in 0..n {
            let oy = ny + dy;
            if !(0..n).contains(&oy) {
                continue;
            }
            for nx in 0..n {
                let ox = nx + dx;
                if !(0..n).contains(&ox) {
                    continue;
                }
                let (src, dst) = ((oy * n + ox) as usize, (ny * n + nx) as usize);
                elevation[dst] = self.elevation[src];
                weight[dst] = self.weight[src];
                last[dst] = self.last_update[src];
            }
        }
        self.origin = new_origin;
        self.elevation = elevation;
        self.weight = weight;
        self.last_update = last;
    }

    fn local_index(&self, gx: i64, gy: i64) -> Option<usize> {
        let (lx, ly) = (gx - self.origin[0], gy - self.origin[1]);
        let n = BUFFER_CELLS as i64;
        ((0..n).contains(&lx) && (0..n).contains(&ly)).then(|| (ly * n + lx) as usize)
    }

    pub fn is_observed(&self, gx: i64, gy: i64) -> bool {
        self.local_index(gx, gy).is_some_and(|i| self.weight[i] > 0.0)
    }

    pub fn estimate(&self, gx: i64, gy: i64) -> Option<f32> {
        self.local_index(gx, gy).filter(|&i| self.weight[i] > 0.0).map(|i| self.elevation[i])
    }

    pub fn observed_count(&self) -> usize {
        self.weight.iter().filter(|w| **w > 0.0).count()
    }

    pub fn last_update(&self, gx: i64, gy: i64) -> Option<i64> {
        self.local_index(gx, gy).map(|i| self.last_update[i]).filter(|t| *t >= 0)
    }

    /// Folds one scan of world-frame points into the buffer. Points outside
    /// the window are ignored.
    pub fn integrate(&mut self, points_world: &[Vec3], timestep: i64) {
        for p in points_world {
            if !p.z.is_finite() {
                continue;
            }
            let gx = (p.x / BUFFER_CELL_SIZE).floor() as i64;
            let gy = (p.y / BUFFER_CELL_SIZE).floor() as i64;
            if let Some(i) = self.local_index(gx, gy) {
                if self.scratch[i] == f32::NEG_INFINITY {
                    self.touched.push(i);
                }
                self.scratch[i] = self.scratch[i].max(p.z as f32);
            }
        }
        for &i in &self.touched {
            let cand = self.scratch[i];
            self.elevation[i] = if self.weight[i] > 0.0 {
                EMA_ALPHA * cand + (1.0 - EMA_ALPHA) * self.elevation[i]
            } else {
                cand
            };
            self.weight[i] += 1.0;
            self.last_update[i] = timestep;
            self.scratch[i] = f32::NEG_INFINITY;
        }
        self.touched.clear();
    }

    /// Heightmap relative to the base plus a coverage mask. Grid points with
    /// no observed cell among their four bilinear neighbours take the
    /// nearest observed estimate and are flagged uncovered.
    pub fn query(&self, spec: &HeightmapSpec, base_pose: &Pose) -> (Heightmap, Vec<bool>) {
        let bz = base_pose.position.z as f32;
        let mut values = Vec::with_capacity(spec.len());
        let mut coverage = Vec::with_capacity(spec.len());
        for (x, y) in grid_points(spec, base_pose) {
            let u = x / BUFFER_CELL_SIZE - 0.5;
            let v = y / BUFFER_CELL_SIZE - 0.5;
            let (i0, j0) = (u.floor() as i64, v.floor() as i64);
            let (fu, fv) = (u - i0 as f64, v - j0 as f64);
            let mut acc = 0.0f64;
            let mut wsum = 0.0f64;
            for (di, dj, w) in [
                (0, 0, (1.0 - fu) * (1.0 - fv)),
                (1, 0, fu * (1.0 - fv)),
                (0, 1, (1.0 - fu) * fv),
                (1, 1, fu * fv),
            ] {
                if let Some(e) = self.estimate(i0 + di, j0 + dj) {
                    if w > 0.0 {
                        acc += w * e as f64;
                        wsum += w;
                    }
                }
            }
            if wsum > 0.0 {
                values.push((acc / wsum) as f32 - bz);
                coverage.push(true);
            } else {
                let z = self.nearest_estimate(u, v).unwrap_or(bz - NOMINAL_BASE_HEIGHT);
                values.push(z - bz);
                coverage.push(false);
            }
        }
        (Heightmap { spec: *spec, values }, coverage)
    }

    /// Estimate of the observed cell whose center is closest to the
    /// continuous cell coordinate `(u, v)`.
    fn nearest_estimate(&self, u: f64, v: f64) -> Option<f32> {
        let (cx, cy) = (u.round() as i64, v.round() as i64);
        let mut best: Option<(f64, f32)> = None;
        for r in 0..BUFFER_CELLS as i64 {
            if let Some((d2, _)) = best {
                // every cell on ring r is at least r - 1 cells away
                if ((r - 1) as f64).powi(2) > d2 {
                    break;
                }
            }
            let mut visit = |gx: i64, gy: i64| {
                if let Some(e) = self.estimate(gx, gy) {
                    let d2 = (gx as f64 - u).powi(2) + (gy as f64 - v).powi(2);
                    if best.map_or(true, |(b, _)| d2 < b) {
                        best = Some((d2, e));
                    }
                }
            };
            if r == 0 {
                visit(cx, cy);
                continue;
            }
            for k in -r..=r {
                visit(cx + k, cy - r);
                visit(cx + k, cy + r);
            }
            for k in -r + 1..r {
                visit(cx - r, cy + k);
                visit(cx + r, cy + k);
            }
        }
        best.map(|(_, e)| e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scan_is_a_no_op() {
        let mut b = ElevationBuffer::new(0.0, 0.0);
        b.integrate(&[], 0);
        assert_eq!(b.observed_count(), 0);
    }

    #[test]
    fn first_observation_and_ema() {
        let mut b = ElevationBuffer::new(0.0, 0.0);
        b.integrate(&[Vec3::new(0.011, 0.013, 0.15)], 0);
        assert_eq!(b.estimate(0, 0), Some(0.15));
        let mut b = ElevationBuffer::new(0.0, 0.0);
        b.integrate(&[Vec3::new(0.011, 0.013, 0.10)], 0);
        // max z within the scan is the candidate
        b.integrate(&[Vec3::new(0.012, 0.011, 0.20), Vec3::new(0.015, 0.019, 0.05)], 1);
        assert!((b.estimate(0, 0).unwrap() - 0.15).abs() < 1e-7);
        assert_eq!(b.last_update(0, 0), Some(1));
    }

    #[test]
    fn empty_buffer_query() {
        let b = ElevationBuffer::new(0.0, 0.0);
        let pose = Pose::from_translation(Vec3::new(0.0, 0.0, 0.75));
        let (hm, cov) = b.query(&HeightmapSpec::default(), &pose);
        assert!(cov.iter().all(|c| !c));
        assert!(hm.values.iter().all(|v| v.is_finite()));
        let (hm2, cov2) = b.query(&HeightmapSpec::default(), &pose);
        assert_eq!((hm, cov), (hm2, cov2));
    }

    #[test]
    fn dense_flat_observations() {
        let mut b = ElevationBuffer::new(0.0, 0.0);
        let mut pts = Vec::new();
        for i in -100..100 {
            for j in -100..100 {
                pts.push(Vec3::new(i as f64 * 0.01 + 0.005, j as f64 * 0.01 + 0.005, 0.0));
            }
        }
        b.integrate(&pts, 0);
        let pose = Pose::from_translation(Vec3::new(0.0, 0.0, 0.75));
        let (hm, cov) = b.query(&HeightmapSpec::default(), &pose);
        assert!(cov.iter().all(|c| *c));
        assert!(hm.values.iter().all(|v| (v + 0.75).abs() < 1e-6));
    }

    #[test]
    fn uncovered_points_take_nearest() {
        let mut b = ElevationBuffer::new(0.0, 0.0);
        b.integrate(&[Vec3::new(1.0, 1.0, 0.3)], 0);
        let (hm, cov) = b.query(&HeightmapSpec::default(), &Pose::identity());
        assert!(cov.iter().all(|c| !c));
        assert!(hm.values.iter().all(|v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn recenter_keeps_overlap() {
        let mut b = ElevationBuffer::new(0.0, 0.0);
        b.integrate(&[Vec3::new(0.5, 0.5, 0.2), Vec3::new(-2.9, 0.0, 0.1)], 0);
        b.recenter(1.0, 0.0);
        assert_eq!(b.estimate(25, 25), Some(0.2));
        assert_eq!(b.estimate(-145, 0), None);
        assert_eq!(b.observed_count(), 1);
    }
}
