//! Row-major single-channel float image with a per-pixel validity mask, and
//! 16-bit PGM output.

use std::io::Write;

use crate::error::{CoreError, Result};

/// Invalid pixels always hold `0.0` in `values`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
}

impl MaskedImage {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self { width, height, values: vec![0.0; width * height], valid: vec![false; width * height] }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self { width, height, values: vec![value; width * height], valid: vec![true; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Option<f32>) -> Self {
        let mut img = Self::invalid(width, height);
        for r in 0..height {
            for c in 0..width {
                if let Some(v) = f(r, c) {
                    img.set(r, c, v);
                }
            }
        }
        img
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Option<f32> {
        let i = self.index(row, col);
        self.valid[i].then(|| self.values[i])
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        let i = self.index(row, col);
        self.values[i] = value;
        self.valid[i] = true;
    }

    #[inline]
    pub fn invalidate(&mut self, row: usize, col: usize) {
        let i = self.index(row, col);
        self.values[i] = 0.0;
        self.valid[i] = false;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Values divided by `scale`, invalid pixels as 0.
    pub fn normalized(&self, scale: f32) -> Vec<f32> {
        self.values
            .iter()
            .zip(&self.valid)
            .map(|(&v, &ok)| if ok { v / scale } else { 0.0 })
            .collect()
    }

    /// 16-bit PGM: valid values mapped linearly from `[lo, hi]` onto
    /// `[1, 65535]`, invalid pixels written as 0.
    pub fn write_pgm(&self, w: &mut impl Write, lo: f32, hi: f32) -> Result<()> {
        let levels: Vec<u16> = self
            .values
            .iter()
            .zip(&self.valid)
            .map(|(&v, &ok)| if ok { scale_u16(v, lo, hi, 1.0) } else { 0 })
            .collect();
        write_pgm16(w, self.width, self.height, &levels)
    }
}

fn scale_u16(v: f32, lo: f32, hi: f32, floor: f64) -> u16 {
    let span = (hi - lo) as f64;
    let t = if span > 0.0 { ((v - lo) as f64 / span).clamp(0.0, 1.0) } else { 0.0 };
    (floor + t * (65535.0 - floor)).round() as u16
}

/// Plain 16-bit binary PGM (P5, big-endian samples).
pub fn write_pgm16(w: &mut impl Write, width: usize, height: usize, levels: &[u16]) -> Result<()> {
    if levels.len() != width * height {
        return Err(CoreError::InvalidParameter("pgm size mismatch".into()));
    }
    write!(w, "P5\n{width} {height}\n65535\n")?;
    let mut buf = Vec::with_capacity(levels.len() * 2);
    for l in levels {
        buf.extend_from_slice(&l.to_be_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Grid of values linearly mapped over its own min/max onto `[0, 65535]`.
pub fn write_pgm16_autoscale(w: &mut impl Write, width: usize, height: usize, values: &[f32]) -> Result<()> {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let levels: Vec<u16> = values.iter().map(|&v| scale_u16(v, lo, hi, 0.0)).collect();
    write_pgm16(w, width, height, &levels)
}
