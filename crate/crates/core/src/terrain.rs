//! Seeded procedural terrain.
//!
//! Terrain is generated on a 2 cm grid whose origin sits at `(0, 0)`.
//! Stair edges run along y, at `x = k * run`; rough terrain is value noise on
//! a lattice with the given correlation length; composite terrain tiles four
//! quadrants (flat, steps, stairs, rough), the stair quadrant being a short
//! flight that climbs away from the center.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::{HeightField, TerrainKind};
use crate::rng::{derive_seed, SplitMix64};

pub const TERRAIN_CELL_SIZE: f64 = 0.02;

/// Side length of one block of the discrete-steps terrain.
pub const STEP_BLOCK_SIZE: f64 = 0.5;

/// Number of risers in the composite terrain's stair quadrant; the flight
/// climbs away from the terrain center and then stays level.
pub const COMPOSITE_FLIGHT_STEPS: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerrainSpec {
    pub kind: TerrainKind,
    pub seed: u64,
    /// Footprint along x and y, meters.
    pub footprint: [f64; 2],
    pub stair_rise: f64,
    pub stair_run: f64,
    /// Block heights of the steps terrain are drawn from this range.
    pub step_height_range: [f64; 2],
    pub roughness_amplitude: f64,
    pub roughness_correlation: f64,
    pub slope_grade: f64,
}

impl TerrainSpec {
    pub fn new(kind: TerrainKind, seed: u64) -> Self {
        Self {
            kind,
            seed,
            footprint: [8.0, 8.0],
            stair_rise: 0.15,
            stair_run: 0.30,
            step_height_range: [0.0, 0.15],
            roughness_amplitude: 0.04,
            roughness_correlation: 0.3,
            slope_grade: 0.15,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::InvalidParameter(m));
        if !(self.footprint[0] >= 4.0 && self.footprint[1] >= 4.0) {
            return bad(format!("footprint {:?} smaller than 4 m x 4 m", self.footprint));
        }
        if !(self.stair_rise > 0.0 && self.stair_rise <= 0.25) {
            return bad(format!("stair rise {} outside (0, 0.25]", self.stair_rise));
        }
        if !(self.stair_run > 0.0 && self.stair_run.is_finite()) {
            return bad(format!("stair run {}", self.stair_run));
        }
        if !(0.0..=0.15).contains(&self.roughness_amplitude) {
            return bad(format!("roughness amplitude {} outside [0, 0.15]", self.roughness_amplitude));
        }
        if !(self.roughness_correlation > TERRAIN_CELL_SIZE) {
            return bad(format!("roughness correlation {}", self.roughness_correlation));
        }
        let [lo, hi] = self.step_height_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return bad(format!("step height range {:?}", self.step_height_range));
        }
        if !self.slope_grade.is_finite() || self.slope_grade.abs() > 1.0 {
            return bad(format!("slope grade {}", self.slope_grade));
        }
        Ok(())
    }
}

/// Generates the height field for `spec`; deterministic in the spec alone.
pub fn generate(spec: &TerrainSpec) -> Result<HeightField> {
    spec.validate()?;
    let cs = TERRAIN_CELL_SIZE;
    let nx = (spec.footprint[0] / cs).round() as usize;
    let ny = (spec.footprint[1] / cs).round() as usize;
    let [sx, sy] = spec.footprint;
    let mut rng = SplitMix64::new(spec.seed);

    match spec.kind {
        TerrainKind::Flat => HeightField::from_fn([0.0; 2], cs, nx, ny, spec.kind, |_, _| 0.0),
        TerrainKind::Slope => {
            let cx = sx / 2.0;
            HeightField::from_fn([0.0; 2], cs, nx, ny, spec.kind, |x, _| spec.slope_grade * (x - cx))
        }
        TerrainKind::StairsUp => HeightField::from_fn([0.0; 2], cs, nx, ny, spec.kind, |x, _| {
            stair(x, spec.stair_rise, spec.stair_run)
        }),
        TerrainKind::StairsDown => HeightField::from_fn([0.0; 2], cs, nx, ny, spec.kind, |x, _| {
            -stair(x, spec.stair_rise, spec.stair_run)
        }),
        TerrainKind::Steps => {
            let blocks = BlockSteps::new(&mut rng, sx, sy, spec.step_height_range);
            HeightField::from_fn([0.0; 2], cs, nx, ny, spec.kind, |x, y| blocks.height(x, y))
        }
        TerrainKind::Rough => {
            let noise =
                ValueNoise::new(&mut rng, sx, sy, spec.roughness_correlation, spec.roughness_amplitude);
            HeightField::from_fn([0.0; 2], cs, nx, ny, spec.kind, |x, y| noise.height(x, y))
        }
        TerrainKind::Composite => {
            let blocks = BlockSteps::new(&mut rng, sx, sy, spec.step_height_range);
            let noise =
                ValueNoise::new(&mut rng, sx, sy, spec.roughness_correlation, spec.roughness_amplitude);
            let (hx, hy) = (sx / 2.0, sy / 2.0);
            HeightField::from_fn([0.0; 2], cs, nx, ny, spec.kind, |x, y| match (x < hx, y < hy) {
                (true, true) => 0.0,
                (false, true) => blocks.height(x, y),
                (true, false) => {
                    stair(hx - x, spec.stair_rise, spec.stair_run).min(COMPOSITE_FLIGHT_STEPS * spec.stair_rise)
                }
                (false, false) => noise.height(x, y),
            })
        }
    }
}

/// Piecewise-constant staircase rising `rise` every `run` meters of x.
fn stair(x: f64, rise: f64, run: f64) -> f64 {
    rise * (x / run).floor()
}

struct BlockSteps {
    nbx: usize,
    heights: Vec<f64>,
}

impl BlockSteps {
    fn new(rng: &mut SplitMix64, sx: f64, sy: f64, range: [f64; 2]) -> Self {
        let nbx = (sx / STEP_BLOCK_SIZE).ceil() as usize;
        let nby = (sy / STEP_BLOCK_SIZE).ceil() as usize;
        let heights = (0..nbx * nby).map(|_| rng.uniform(range[0], range[1])).collect();
        Self { nbx, heights }
    }

    fn height(&self, x: f64, y: f64) -> f64 {
        let bx = (x / STEP_BLOCK_SIZE).floor() as usize;
        let by = (y / STEP_BLOCK_SIZE).floor() as usize;
        self.heights[by * self.nbx + bx]
    }
}

/// Lattice value noise: uniform values in `[-amp, amp]` on a lattice with
/// spacing `corr`, bilinearly interpolated.
struct ValueNoise {
    corr: f64,
    nlx: usize,
    values: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut SplitMix64, sx: f64, sy: f64, corr: f64, amp: f64) -> Self {
        let nlx = (sx / corr).ceil() as usize + 2;
        let nly = (sy / corr).ceil() as usize + 2;
        let values = (0..nlx * nly).map(|_| rng.uniform(-amp, amp)).collect();
        Self { corr, nlx, values }
    }

    fn height(&self, x: f64, y: f64) -> f64 {
        let u = x / self.corr;
        let v = y / self.corr;
        let i = u.floor() as usize;
        let j = v.floor() as usize;
        let fu = u - i as f64;
        let fv = v - j as f64;
        let at = |i: usize, j: usize| self.values[j * self.nlx + i];
        let a = at(i, j) + (at(i + 1, j) - at(i, j)) * fu;
        let b = at(i, j + 1) + (at(i + 1, j + 1) - at(i, j + 1)) * fu;
        a + (b - a) * fv
    }
}

/// Draws kind-specific parameters for one suite member within the default
/// humanoid-scale ranges.
pub fn randomized_spec(kind: TerrainKind, seed: u64) -> TerrainSpec {
    let mut rng = SplitMix64::new(derive_seed(seed, 0x7e77));
    let mut spec = TerrainSpec::new(kind, seed);
    spec.stair_rise = rng.uniform(0.10, 0.17);
    spec.stair_run = rng.uniform(0.28, 0.35);
    let hi = rng.uniform(0.08, 0.15);
    spec.step_height_range = [0.0, hi];
    spec.roughness_amplitude = rng.uniform(0.02, 0.06);
    spec.roughness_correlation = rng.uniform(0.2, 0.5);
    let grade = rng.uniform(0.05, 0.25);
    spec.slope_grade = if rng.next_u64() & 1 == 0 { grade } else { -grade };
    spec
}

/// Seeds for a suite: kind-major order, the `n`-th seed overall being
/// `derive_seed(master_seed, n)`.
pub fn suite_specs(master_seed: u64, count_per_kind: usize) -> Vec<TerrainSpec> {
    let mut specs = Vec::with_capacity(TerrainKind::ALL.len() * count_per_kind);
    for kind in TerrainKind::ALL {
        for _ in 0..count_per_kind {
            let seed = derive_seed(master_seed, specs.len() as u64);
            specs.push(randomized_spec(kind, seed));
        }
    }
    specs
}

/// Balanced suite over all kinds, ordered flat, slope, stairs_up,
/// stairs_down, steps, rough, composite.
pub fn terrain_suite(master_seed: u64, count_per_kind: usize) -> Result<Vec<HeightField>> {
    if count_per_kind == 0 {
        return Err(CoreError::InvalidParameter("count_per_kind must be at least 1".into()));
    }
    suite_specs(master_seed, count_per_kind).iter().map(generate).collect()
}
