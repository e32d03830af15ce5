//! Frames, rigid transforms and the terrain height field.
//!
//! Frame convention: x forward, y left, z up (right-handed); yaw is measured
//! counterclockwise from +x.

use std::io::{Read, Write};

use nalgebra::{Matrix3, Rotation3};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub type Vec3 = nalgebra::Vector3<f64>;

/// Rigid body pose: `p_world = rotation * p_body + position`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vec3,
    pub rotation: Matrix3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { position: Vec3::zeros(), rotation: Matrix3::identity() }
    }

    /// Builds a pose, rejecting rotations that are not proper orthonormal
    /// matrices within 1e-9.
    pub fn new(position: Vec3, rotation: Matrix3<f64>) -> Result<Self> {
        let err = (rotation * rotation.transpose() - Matrix3::identity()).abs().max();
        if err > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(CoreError::InvalidParameter(format!(
                "rotation is not orthonormal (|R Rt - I| = {err:e})"
            )));
        }
        if !position.iter().all(|v| v.is_finite()) {
            return Err(CoreError::InvalidParameter("non-finite position".into()));
        }
        Ok(Self { position, rotation })
    }

    /// Roll about x, then pitch about y, then yaw about z (intrinsic ZYX).
    pub fn from_xyz_rpy(x: f64, y: f64, z: f64, roll: f64, pitch: f64, yaw: f64) -> Self {
        Self {
            position: Vec3::new(x, y, z),
            rotation: *Rotation3::from_euler_angles(roll, pitch, yaw).matrix(),
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self { position: t, rotation: Matrix3::identity() }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.position
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn transform_points(&self, points: &[Vec3]) -> Vec<Vec3> {
        points.iter().map(|p| self.transform_point(p)).collect()
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { position: -(rt * self.position), rotation: rt }
    }

    /// `self ∘ other`: first apply `other`, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            position: self.rotation * other.position + self.position,
            rotation: self.rotation * other.rotation,
        }
    }

    /// Heading of the body x axis projected onto the ground plane.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }
}

pub fn transform_points(pose: &Pose, points: &[Vec3]) -> Vec<Vec3> {
    pose.transform_points(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerrainKind {
    Flat,
    Slope,
    StairsUp,
    StairsDown,
    Steps,
    Rough,
    Composite,
}

impl TerrainKind {
    pub const ALL: [TerrainKind; 7] = [
        TerrainKind::Flat,
        TerrainKind::Slope,
        TerrainKind::StairsUp,
        TerrainKind::StairsDown,
        TerrainKind::Steps,
        TerrainKind::Rough,
        TerrainKind::Composite,
    ];

    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TerrainKind::Flat => "flat",
            TerrainKind::Slope => "slope",
            TerrainKind::StairsUp => "stairs_up",
            TerrainKind::StairsDown => "stairs_down",
            TerrainKind::Steps => "steps",
            TerrainKind::Rough => "rough",
            TerrainKind::Composite => "composite",
        }
    }

    pub fn is_stairs(self) -> bool {
        matches!(self, TerrainKind::StairsUp | TerrainKind::StairsDown)
    }
}

impl std::str::FromStr for TerrainKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CoreError::InvalidParameter(format!("unknown terrain kind '{s}'")))
    }
}

impl std::fmt::Display for TerrainKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Dense elevation grid over a rectangular footprint.
///
/// Cell `(ix, iy)` covers `[x0 + ix*cs, x0 + (ix+1)*cs) × [y0 + iy*cs, ...)`
/// and its elevation is the terrain height at the cell center. Elevations are
/// stored row-major with `iy` as the row index. Queries interpolate
/// bilinearly between cell centers; inside the outer half cell the nearest
/// edge value is held.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightField {
    origin: [f64; 2],
    cell_size: f64,
    nx: usize,
    ny: usize,
    elevations: Vec<f32>,
    kind: TerrainKind,
}

pub const HFLD_MAGIC: &[u8; 4] = b"HFLD";
pub const HFLD_VERSION: u32 = 1;

impl HeightField {
    pub fn new(
        origin: [f64; 2],
        cell_size: f64,
        nx: usize,
        ny: usize,
        elevations: Vec<f32>,
        kind: TerrainKind,
    ) -> Result<Self> {
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(CoreError::InvalidParameter(format!("cell size {cell_size}")));
        }
        if nx < 2 || ny < 2 {
            return Err(CoreError::InvalidParameter(format!("grid {nx}x{ny} smaller than 2x2")));
        }
        if elevations.len() != nx * ny {
            return Err(CoreError::InvalidParameter(format!(
                "expected {} elevations, got {}",
                nx * ny,
                elevations.len()
            )));
        }
        if !elevations.iter().all(|e| e.is_finite()) {
            return Err(CoreError::InvalidParameter("non-finite elevation".into()));
        }
        if !origin.iter().all(|o| o.is_finite()) {
            return Err(CoreError::InvalidParameter("non-finite origin".into()));
        }
        Ok(Self { origin, cell_size, nx, ny, elevations, kind })
    }

    /// Fills the grid by evaluating `f` at every cell center.
    pub fn from_fn(
        origin: [f64; 2],
        cell_size: f64,
        nx: usize,
        ny: usize,
        kind: TerrainKind,
        mut f: impl FnMut(f64, f64) -> f64,
    ) -> Result<Self> {
        let mut elevations = Vec::with_capacity(nx * ny);
        for iy in 0..ny {
            let y = origin[1] + (iy as f64 + 0.5) * cell_size;
            for ix in 0..nx {
                let x = origin[0] + (ix as f64 + 0.5) * cell_size;
                elevations.push(f(x, y) as f32);
            }
        }
        Self::new(origin, cell_size, nx, ny, elevations, kind)
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }
    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }
    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn kind(&self) -> TerrainKind {
        self.kind
    }
    pub fn elevations(&self) -> &[f32] {
        &self.elevations
    }

    pub fn cell(&self, ix: usize, iy: usize) -> f32 {
        self.elevations[iy * self.nx + ix]
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.origin[0] + (ix as f64 + 0.5) * self.cell_size,
            self.origin[1] + (iy as f64 + 0.5) * self.cell_size,
        )
    }

    /// `(x_min, x_max, y_min, y_max)` of the footprint.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        (
            self.origin[0],
            self.origin[0] + self.nx as f64 * self.cell_size,
            self.origin[1],
            self.origin[1] + self.ny as f64 * self.cell_size,
        )
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (x0, x1, y0, y1) = self.bounds();
        x >= x0 && x <= x1 && y >= y0 && y <= y1
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.elevations
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &e| (lo.min(e), hi.max(e)))
    }

    /// Bilinear terrain height; errors outside the footprint.
    pub fn height_at(&self, x: f64, y: f64) -> Result<f64> {
        self.try_height(x, y).ok_or(CoreError::OutOfBounds { x, y })
    }

    /// Like [`height_at`](Self::height_at) but `None` outside the footprint.
    #[inline]
    pub fn try_height(&self, x: f64, y: f64) -> Option<f64> {
        if !self.contains(x, y) {
            return None;
        }
        let u = ((x - self.origin[0]) / self.cell_size - 0.5).clamp(0.0, (self.nx - 1) as f64);
        let v = ((y - self.origin[1]) / self.cell_size - 0.5).clamp(0.0, (self.ny - 1) as f64);
        let i0 = (u.floor() as usize).min(self.nx - 2);
        let j0 = (v.floor() as usize).min(self.ny - 2);
        let fu = u - i0 as f64;
        let fv = v - j0 as f64;
        let row0 = j0 * self.nx;
        let row1 = row0 + self.nx;
        let z00 = self.elevations[row0 + i0] as f64;
        let z10 = self.elevations[row0 + i0 + 1] as f64;
        let z01 = self.elevations[row1 + i0] as f64;
        let z11 = self.elevations[row1 + i0 + 1] as f64;
        let a = z00 + (z10 - z00) * fu;
        let b = z01 + (z11 - z01) * fu;
        Some(a + (b - a) * fv)
    }

    /// Binary `HFLD` encoding: magic, version u32, origin x/y and cell size as
    /// f64, nx/ny/kind as u32, then `nx*ny` row-major f32 elevations. All
    /// little-endian.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(HFLD_MAGIC)?;
        w.write_all(&HFLD_VERSION.to_le_bytes())?;
        w.write_all(&self.origin[0].to_le_bytes())?;
        w.write_all(&self.origin[1].to_le_bytes())?;
        w.write_all(&self.cell_size.to_le_bytes())?;
        w.write_all(&(self.nx as u32).to_le_bytes())?;
        w.write_all(&(self.ny as u32).to_le_bytes())?;
        w.write_all(&self.kind.code().to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.elevations.len() * 4);
        for e in &self.elevations {
            buf.extend_from_slice(&e.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != HFLD_MAGIC {
            return Err(CoreError::Format("bad HFLD magic".into()));
        }
        let version = read_u32(r)?;
        if version != HFLD_VERSION {
            return Err(CoreError::Format(format!("unsupported HFLD version {version}")));
        }
        let ox = read_f64(r)?;
        let oy = read_f64(r)?;
        let cs = read_f64(r)?;
        let nx = read_u32(r)? as usize;
        let ny = read_u32(r)? as usize;
        let kind = TerrainKind::from_code(read_u32(r)?)
            .ok_or_else(|| CoreError::Format("unknown terrain kind code".into()))?;
        let mut raw = vec![0u8; nx * ny * 4];
        r.read_exact(&mut raw)?;
        let elevations =
            raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Self::new([ox, oy], cs, nx, ny, elevations, kind)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn flat(n: usize, cs: f64, z: f32) -> HeightField {
        HeightField::new([-(n as f64) * cs / 2.0; 2], cs, n, n, vec![z; n * n], TerrainKind::Flat)
            .unwrap()
    }

    #[test]
    fn flat_field_query() {
        let f = flat(10, 1.0, 0.0);
        assert_eq!(f.height_at(1.23, -0.4).unwrap(), 0.0);
    }

    #[test]
    fn linear_field_is_reproduced() {
        // cells at z = x with 1 m cells, centers at x = 0.5, 1.5, ...
        let f = HeightField::from_fn([0.0, -2.0], 1.0, 6, 4, TerrainKind::Slope, |x, _| x).unwrap();
        assert!((f.height_at(0.5, 0.0).unwrap() - 0.5).abs() < 1e-12);
        assert!((f.height_at(2.75, 0.3).unwrap() - 2.75).abs() < 1e-12);
    }

    #[test]
    fn bilinear_patch_center() {
        // corners (0,0)=0, (1,0)=0, (0,1)=0, (1,1)=1; bilinear at the center is 1/4
        let f =
            HeightField::new([0.0, 0.0], 1.0, 2, 2, vec![0.0, 0.0, 0.0, 1.0], TerrainKind::Flat)
                .unwrap();
        assert!((f.height_at(1.0, 1.0).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn exact_at_cell_centers() {
        let f = HeightField::from_fn([0.0, 0.0], 0.5, 5, 5, TerrainKind::Rough, |x, y| {
            (3.0 * x).sin() + y * y
        })
        .unwrap();
        for iy in 0..5 {
            for ix in 0..5 {
                let (x, y) = f.cell_center(ix, iy);
                assert_eq!(f.height_at(x, y).unwrap(), f.cell(ix, iy) as f64);
            }
        }
    }

    #[test]
    fn out_of_bounds_is_error() {
        let f = flat(4, 1.0, 0.0);
        assert!(matches!(f.height_at(2.5, 0.0), Err(CoreError::OutOfBounds { .. })));
        assert!(f.height_at(2.0, 2.0).is_ok());
    }

    #[test]
    fn rejects_bad_fields() {
        assert!(HeightField::new([0.0; 2], 0.0, 2, 2, vec![0.0; 4], TerrainKind::Flat).is_err());
        assert!(HeightField::new([0.0; 2], 1.0, 1, 2, vec![0.0; 2], TerrainKind::Flat).is_err());
        assert!(HeightField::new([0.0; 2], 1.0, 2, 2, vec![0.0, f32::NAN, 0.0, 0.0], TerrainKind::Flat)
            .is_err());
    }

    #[test]
    fn transform_examples() {
        let p = Vec3::new(0.3, -1.2, 4.0);
        assert_eq!(Pose::identity().transform_point(&p), p);
        let t = Pose::from_translation(Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(t.transform_point(&Vec3::zeros()), Vec3::new(1.0, 0.0, 0.0));
        let yaw = Pose::from_xyz_rpy(0.0, 0.0, 0.0, 0.0, 0.0, FRAC_PI_2);
        let q = yaw.transform_point(&Vec3::new(1.0, 0.0, 0.0));
        assert!((q - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
        assert!((yaw.yaw() - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn pose_validation() {
        let mut m = Matrix3::identity();
        m[(0, 0)] = 2.0;
        assert!(Pose::new(Vec3::zeros(), m).is_err());
        let reflect = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(Pose::new(Vec3::zeros(), reflect).is_err());
        assert!(Pose::new(Vec3::zeros(), Matrix3::identity()).is_ok());
    }

    #[test]
    fn hfld_round_trip() {
        let f = HeightField::from_fn([-1.0, 2.0], 0.25, 7, 5, TerrainKind::Steps, |x, y| x * y)
            .unwrap();
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"HFLD");
        assert_eq!(buf.len(), 4 + 4 + 24 + 12 + 35 * 4);
        let g = HeightField::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(f, g);
    }

    proptest! {
        #[test]
        fn inverse_round_trip(
            x in -10.0..10.0f64, y in -10.0..10.0f64, z in -10.0..10.0f64,
            r in -3.0..3.0f64, p in -1.5..1.5f64, w in -3.2..3.2f64,
            px in -5.0..5.0f64, py in -5.0..5.0f64, pz in -5.0..5.0f64,
        ) {
            let pose = Pose::from_xyz_rpy(x, y, z, r, p, w);
            let pt = Vec3::new(px, py, pz);
            let back = pose.inverse().transform_point(&pose.transform_point(&pt));
            prop_assert!((back - pt).norm() < 1e-9);
        }

        #[test]
        fn continuous_across_cell_boundaries(ix in 0usize..7, fy in 0.0..1.0f64) {
            let f = HeightField::from_fn([0.0, 0.0], 0.5, 8, 8, TerrainKind::Rough, |x, y| {
                (2.1 * x).sin() * (1.3 * y).cos()
            }).unwrap();
            // boundary between interpolation patches lies on cell centers
            let (xb, _) = f.cell_center(ix, 0);
            let y = 0.25 + fy * 3.5;
            let left = f.height_at(xb - 1e-12, y).unwrap();
            let right = f.height_at(xb + 1e-12, y).unwrap();
            prop_assert!((left - right).abs() < 1e-9);
        }
    }
}
