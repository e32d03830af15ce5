//! Spherical projection of LiDAR clouds into 276 x 40 range images and the
//! preprocessing filter stack.
//!
//! Column `c` covers azimuths `(pi - (c+1)·Δφ, pi - c·Δφ]`, so the unfolding
//! seam sits at the rear (azimuth ±pi) and straight ahead lands in column
//! 138. Row `r` covers inclinations `(52° - (r+1)·Δθ, 52° - r·Δθ]`, top row
//! looking up.

use std::f64::consts::{PI, TAU};

use crate::error::{CoreError, Result};
use crate::geometry::Vec3;
use crate::image::MaskedImage;
use crate::sensor::{
    LidarModel, PointCloud, LIDAR_CHANNELS, LIDAR_COLUMNS, LIDAR_MAX_INCLINATION_DEG,
    LIDAR_MIN_INCLINATION_DEG, MAX_RANGE, MIN_RANGE,
};

pub const WIDTH: usize = LIDAR_COLUMNS;
pub const HEIGHT: usize = LIDAR_CHANNELS;
pub const DEFAULT_MAX_GAP: usize = 4;

const FOV_DEG: f64 = LIDAR_MAX_INCLINATION_DEG - LIDAR_MIN_INCLINATION_DEG;
/// Inclinations this close outside the vertical FOV are still accepted (the
/// extreme rings sit exactly on the FOV boundary).
const FOV_TOLERANCE_DEG: f64 = 1e-7;

pub type RangeImage = MaskedImage;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalCoord {
    pub range: f64,
    /// `(-pi, pi]`
    pub azimuth: f64,
    /// `[-pi/2, pi/2]`
    pub inclination: f64,
}

pub fn spherical_project(p: &Vec3) -> Result<SphericalCoord> {
    let range = p.norm();
    if range == 0.0 {
        return Err(CoreError::ZeroVector);
    }
    Ok(SphericalCoord {
        range,
        azimuth: p.y.atan2(p.x),
        inclination: p.z.atan2(p.x.hypot(p.y)),
    })
}

pub fn column_of_azimuth(azimuth: f64) -> usize {
    let c = ((PI - azimuth) / TAU * WIDTH as f64).floor();
    c.clamp(0.0, (WIDTH - 1) as f64) as usize
}

/// `None` outside the vertical field of view.
pub fn row_of_inclination(inclination: f64) -> Option<usize> {
    let deg = inclination.to_degrees();
    if deg < LIDAR_MIN_INCLINATION_DEG - FOV_TOLERANCE_DEG || deg > LIDAR_MAX_INCLINATION_DEG + FOV_TOLERANCE_DEG {
        return None;
    }
    let r = ((LIDAR_MAX_INCLINATION_DEG - deg) / FOV_DEG * HEIGHT as f64).floor();
    Some(r.clamp(0.0, (HEIGHT - 1) as f64) as usize)
}

/// `(row, column)` bin of a sensor-frame point, `None` if outside the FOV or
/// at the origin.
pub fn pixel_of(p: &Vec3) -> Option<(usize, usize)> {
    let s = spherical_project(p).ok()?;
    Some((row_of_inclination(s.inclination)?, column_of_azimuth(s.azimuth)))
}

/// Row holding ring `ring` of the default 40-channel model. The mapping is a
/// bijection: ring 0 (lowest) lands in the bottom row.
pub fn ring_to_row(ring: usize) -> usize {
    let model = LidarModel::default();
    row_of_inclination(model.ring_inclination(ring)).expect("ring inside fov")
}

pub fn row_to_ring(row: usize) -> usize {
    HEIGHT - 1 - row
}

pub fn bin_center_azimuth(col: usize) -> f64 {
    PI - (col as f64 + 0.5) * TAU / WIDTH as f64
}

pub fn bin_center_inclination(row: usize) -> f64 {
    (LIDAR_MAX_INCLINATION_DEG - (row as f64 + 0.5) * FOV_DEG / HEIGHT as f64).to_radians()
}

/// Bins every in-FOV point; when several points share a bin the closest
/// range is kept. Untouched pixels are invalid.
pub fn rasterize(cloud: &PointCloud) -> RangeImage {
    let mut img = MaskedImage::invalid(WIDTH, HEIGHT);
    for p in &cloud.points {
        let Ok(s) = spherical_project(p) else { continue };
        let Some(row) = row_of_inclination(s.inclination) else { continue };
        let col = column_of_azimuth(s.azimuth);
        let r = s.range as f32;
        match img.get(row, col) {
            Some(prev) if prev <= r => {}
            _ => img.set(row, col, r),
        }
    }
    img
}

/// Ranges above `max` are clamped to `max`; below `min` become invalid.
pub fn clip_ranges(img: &RangeImage, min: f32, max: f32) -> RangeImage {
    let mut out = img.clone();
    for i in 0..out.len() {
        if out.valid[i] {
            let v = out.values[i];
            if v < min {
                out.values[i] = 0.0;
                out.valid[i] = false;
            } else if v > max {
                out.values[i] = max;
            }
        }
    }
    out
}

/// Linear interpolation across runs of at most `max_gap` invalid pixels that
/// have valid neighbours on both sides within the same row. Rows do not wrap
/// around the seam.
pub fn fill_gaps_rowwise(img: &RangeImage, max_gap: usize) -> RangeImage {
    let mut out = img.clone();
    for row in 0..img.height {
        let mut last_valid: Option<usize> = None;
        for col in 0..img.width {
            if img.get(row, col).is_none() {
                continue;
            }
            if let Some(prev) = last_valid {
                let gap = col - prev - 1;
                if gap > 0 && gap <= max_gap {
                    let a = img.get(row, prev).unwrap();
                    let b = img.get(row, col).unwrap();
                    for k in 1..=gap {
                        let t = k as f32 / (gap + 1) as f32;
                        out.set(row, prev + k, a + (b - a) * t);
                    }
                }
            }
            last_valid = Some(col);
        }
    }
    out
}

/// Every invalid pixel takes the value of the nearest valid pixel (Euclidean
/// pixel distance, ties to the smaller row, then the smaller column).
pub fn fill_nearest(img: &RangeImage) -> Result<RangeImage> {
    let (w, h) = (img.width, img.height);
    if img.valid_count() == 0 {
        return Err(CoreError::NoValidPixel);
    }
    if img.valid_count() == img.len() {
        return Ok(img.clone());
    }
    // For each row: nearest valid column to the left (inclusive) and right.
    let mut left = vec![usize::MAX; w * h];
    let mut right = vec![usize::MAX; w * h];
    for r in 0..h {
        let mut last = usize::MAX;
        for c in 0..w {
            if img.valid[r * w + c] {
                last = c;
            }
            left[r * w + c] = last;
        }
        last = usize::MAX;
        for c in (0..w).rev() {
            if img.valid[r * w + c] {
                last = c;
            }
            right[r * w + c] = last;
        }
    }
    let mut out = img.clone();
    for r in 0..h {
        for c in 0..w {
            if img.valid[r * w + c] {
                continue;
            }
            let mut best: Option<(usize, usize, usize)> = None; // (d2, row, col)
            for rr in 0..h {
                let dr = r.abs_diff(rr);
                let dr2 = dr * dr;
                if let Some((bd, _, _)) = best {
                    if dr2 > bd {
                        continue;
                    }
                }
                let l = left[rr * w + c];
                let rt = right[rr * w + c];
                // left candidate first: it has the smaller column on ties
                let mut cand: Option<(usize, usize)> = None;
                if l != usize::MAX {
                    let dc = c - l;
                    cand = Some((dr2 + dc * dc, l));
                }
                if rt != usize::MAX {
                    let dc = rt - c;
                    let d2 = dr2 + dc * dc;
                    if cand.map_or(true, |(bd, _)| d2 < bd) {
                        cand = Some((d2, rt));
                    }
                }
                if let Some((d2, cc)) = cand {
                    if best.map_or(true, |(bd, _, _)| d2 < bd) {
                        best = Some((d2, rr, cc));
                    }
                }
            }
            let (_, rr, cc) = best.expect("at least one valid pixel");
            out.set(r, c, img.values[rr * w + cc]);
        }
    }
    Ok(out)
}

/// 3 x 3 median with replicate-border padding. Valid pixels take the (lower)
/// median of the valid samples in their window; invalid pixels stay invalid.
/// The output only contains values present in the input.
pub fn median_filter_3x3(img: &RangeImage) -> RangeImage {
    let (w, h) = (img.width, img.height);
    let mut out = img.clone();
    let mut window = [0f32; 9];
    for r in 0..h {
        for c in 0..w {
            if !img.valid[r * w + c] {
                continue;
            }
            let mut n = 0;
            for dr in [-1isize, 0, 1] {
                let rr = (r as isize + dr).clamp(0, h as isize - 1) as usize;
                for dc in [-1isize, 0, 1] {
                    let cc = (c as isize + dc).clamp(0, w as isize - 1) as usize;
                    let i = rr * w + cc;
                    if img.valid[i] {
                        window[n] = img.values[i];
                        n += 1;
                    }
                }
            }
            let win = &mut window[..n];
            win.sort_unstable_by(|a, b| a.total_cmp(b));
            out.values[r * w + c] = win[(n - 1) / 2];
        }
    }
    out
}

/// Filter stack on an already rasterized image:
/// clip -> row gap fill -> median -> nearest fill -> median.
pub fn preprocess_image(raw: &RangeImage) -> Result<RangeImage> {
    let clipped = clip_ranges(raw, MIN_RANGE, MAX_RANGE);
    let rows = fill_gaps_rowwise(&clipped, DEFAULT_MAX_GAP);
    let smoothed = median_filter_3x3(&rows);
    let filled = fill_nearest(&smoothed)?;
    Ok(median_filter_3x3(&filled))
}

/// Cloud to a fully valid range image with values in `[0.2, 3.0]`.
pub fn preprocess(cloud: &PointCloud) -> Result<RangeImage> {
    if cloud.is_empty() {
        return Err(CoreError::Empty("point cloud"));
    }
    preprocess_image(&rasterize(cloud))
}

/// Each valid pixel back to a point along its bin-center direction.
pub fn unproject(img: &RangeImage) -> PointCloud {
    let mut cloud = PointCloud::default();
    for row in 0..img.height {
        let (st, ct) = bin_center_inclination(row).sin_cos();
        for col in 0..img.width {
            if let Some(r) = img.get(row, col) {
                let (sp, cp) = bin_center_azimuth(col).sin_cos();
                let d = Vec3::new(ct * cp, ct * sp, st);
                cloud.push(d * r as f64, row_to_ring(row) as u16, col as u16);
            }
        }
    }
    cloud
}

/// Inverts a rasterized scan of `model` using the model's exact ring and
/// column directions, keeping returns with range below `max_range`.
pub fn scan_points(model: &LidarModel, img: &RangeImage, max_range: f32) -> Vec<Vec3> {
    let mut out = Vec::new();
    for row in 0..img.height {
        let ring = row_to_ring(row);
        for col in 0..img.width {
            if let Some(r) = img.get(row, col) {
                if r < max_range {
                    out.push(model.ray_direction(ring, col) * r as f64);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img_from_rows(rows: &[&[Option<f32>]]) -> RangeImage {
        MaskedImage::from_fn(rows[0].len(), rows.len(), |r, c| rows[r][c])
    }

    #[test]
    fn projection_examples() {
        let s = spherical_project(&Vec3::new(1.0, 0.0, 0.0)).unwrap();
        assert_eq!((s.range, s.azimuth, s.inclination), (1.0, 0.0, 0.0));
        let s = spherical_project(&Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert!((s.inclination - PI / 2.0).abs() < 1e-12);
        assert!(pixel_of(&Vec3::new(0.0, 0.0, 1.0)).is_none());
        let s = spherical_project(&Vec3::new(1.0, 1.0, 0.0)).unwrap();
        assert!((s.range - 2f64.sqrt()).abs() < 1e-12);
        assert!((s.azimuth - PI / 4.0).abs() < 1e-12);
        assert!(matches!(spherical_project(&Vec3::zeros()), Err(CoreError::ZeroVector)));
    }

    #[test]
    fn index_examples() {
        assert_eq!(column_of_azimuth(PI), 0);
        assert_eq!(pixel_of(&Vec3::new(1.0, 0.0, 0.0)), Some((35, 138)));
        let cloud = PointCloud::from_points(vec![Vec3::new(2.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)]);
        assert_eq!(rasterize(&cloud).get(35, 138), Some(1.0));
    }

    #[test]
    fn rings_map_one_to_one_onto_rows() {
        let rows: Vec<usize> = (0..HEIGHT).map(ring_to_row).collect();
        for (ring, row) in rows.iter().enumerate() {
            assert_eq!(*row, HEIGHT - 1 - ring);
            assert_eq!(row_to_ring(*row), ring);
        }
    }

    #[test]
    fn row_gap_fill() {
        let img = img_from_rows(&[&[Some(1.0), None, Some(3.0)]]);
        assert_eq!(fill_gaps_rowwise(&img, 4).values, vec![1.0, 2.0, 3.0]);
        let full = img_from_rows(&[&[Some(1.0), Some(5.0), Some(3.0)]]);
        assert_eq!(fill_gaps_rowwise(&full, 4), full);
        let mut row = vec![Some(1.0)];
        row.extend([None; 6]);
        row.push(Some(2.0));
        let wide = img_from_rows(&[&row]);
        assert_eq!(fill_gaps_rowwise(&wide, 4), wide);
        // open-ended runs are not filled
        let edge = img_from_rows(&[&[None, Some(1.0), None]]);
        assert_eq!(fill_gaps_rowwise(&edge, 4), edge);
    }

    #[test]
    fn nearest_fill() {
        let full = MaskedImage::filled(5, 4, 1.25);
        assert_eq!(fill_nearest(&full).unwrap(), full);
        let mut one = MaskedImage::invalid(6, 5);
        one.set(3, 2, 2.5);
        assert!(fill_nearest(&one).unwrap().values.iter().all(|&v| v == 2.5));
        let mut tie = MaskedImage::invalid(5, 3);
        tie.set(0, 3, 1.0);
        tie.set(2, 3, 2.0);
        assert_eq!(fill_nearest(&tie).unwrap().get(1, 3), Some(1.0));
        assert!(matches!(fill_nearest(&MaskedImage::invalid(3, 3)), Err(CoreError::NoValidPixel)));
    }

    /// Exhaustive nearest search used as an oracle for the row-envelope
    /// implementation.
    fn brute_nearest(img: &RangeImage) -> RangeImage {
        let mut out = img.clone();
        for r in 0..img.height {
            for c in 0..img.width {
                if img.get(r, c).is_some() {
                    continue;
                }
                let mut best = (usize::MAX, 0, 0);
                for rr in 0..img.height {
                    for cc in 0..img.width {
                        if img.get(rr, cc).is_some() {
                            let d = r.abs_diff(rr).pow(2) + c.abs_diff(cc).pow(2);
                            if d < best.0 {
                                best = (d, rr, cc);
                            }
                        }
                    }
                }
                out.set(r, c, img.get(best.1, best.2).unwrap());
            }
        }
        out
    }

    #[test]
    fn median_examples() {
        let c = MaskedImage::filled(6, 5, 2.0);
        assert_eq!(median_filter_3x3(&c), c);
        let mut spike = c.clone();
        spike.set(2, 3, 9.0);
        assert_eq!(median_filter_3x3(&spike), c);
        let ramp = MaskedImage::from_fn(10, 8, |r, c| Some(0.3 * r as f32 + 0.1 * c as f32));
        let m = median_filter_3x3(&ramp);
        for r in 1..7 {
            for c in 1..9 {
                // brute force: sort the window
                let mut win: Vec<f32> = (0..3)
                    .flat_map(|i| (0..3).map(move |j| (r + i - 1, c + j - 1)))
                    .map(|(rr, cc)| ramp.get(rr, cc).unwrap())
                    .collect();
                win.sort_by(|a, b| a.total_cmp(b));
                assert_eq!(win[4], ramp.get(r, c).unwrap());
                assert_eq!(m.get(r, c), ramp.get(r, c));
            }
        }
    }

    #[test]
    fn clip_examples() {
        let img = img_from_rows(&[&[Some(5.0), Some(0.05), Some(1.7), None]]);
        let out = clip_ranges(&img, 0.2, 3.0);
        assert_eq!(out.get(0, 0), Some(3.0));
        assert_eq!(out.get(0, 1), None);
        assert_eq!(out.get(0, 2), Some(1.7));
        assert_eq!(out.get(0, 3), None);
    }

    #[test]
    fn unproject_single_pixel() {
        let mut img = MaskedImage::invalid(WIDTH, HEIGHT);
        img.set(35, 138, 1.0);
        let cloud = unproject(&img);
        let th = bin_center_inclination(35);
        let ph = bin_center_azimuth(138);
        let expected = Vec3::new(th.cos() * ph.cos(), th.cos() * ph.sin(), th.sin());
        assert!((cloud.points[0] - expected).norm() < 1e-12);
        assert_eq!(rasterize(&cloud), img);
    }

    #[test]
    fn regular_grid_cloud_needs_no_fill() {
        let img = MaskedImage::from_fn(WIDTH, HEIGHT, |r, c| Some(0.5 + 0.01 * ((r * 7 + c * 3) % 50) as f32));
        let cloud = unproject(&img);
        let raw = rasterize(&cloud);
        assert_eq!(raw, img);
        let pre = preprocess(&cloud).unwrap();
        assert_eq!(pre, median_filter_3x3(&median_filter_3x3(&clip_ranges(&raw, 0.2, 3.0))));
        assert!(preprocess(&PointCloud::default()).is_err());
    }

    fn arb_image(w: usize, h: usize) -> impl Strategy<Value = RangeImage> {
        proptest::collection::vec(proptest::option::weighted(0.4, 0.2f32..3.0), w * h)
            .prop_map(move |v| MaskedImage::from_fn(w, h, |r, c| v[r * w + c]))
    }

    proptest! {
        #[test]
        fn nearest_matches_brute_force(img in arb_image(13, 9)) {
            prop_assume!(img.valid_count() > 0);
            let fast = fill_nearest(&img).unwrap();
            prop_assert_eq!(&fast, &brute_nearest(&img));
            for i in 0..img.len() {
                if img.valid[i] { prop_assert_eq!(fast.values[i], img.values[i]); }
            }
        }

        #[test]
        fn median_selects_input_values(img in arb_image(12, 7)) {
            let m = median_filter_3x3(&img);
            let inputs: Vec<f32> = img.values.iter().zip(&img.valid).filter(|(_, v)| **v).map(|(x, _)| *x).collect();
            for i in 0..m.len() {
                prop_assert_eq!(m.valid[i], img.valid[i]);
                if m.valid[i] { prop_assert!(inputs.contains(&m.values[i])); }
            }
        }

        #[test]
        fn gap_fill_keeps_valid_pixels(img in arb_image(20, 4)) {
            let f = fill_gaps_rowwise(&img, 4);
            for i in 0..img.len() {
                if img.valid[i] { prop_assert_eq!(f.values[i], img.values[i]); prop_assert!(f.valid[i]); }
            }
        }

        #[test]
        fn round_trip_within_bin(
            r in 0.05..10.0f64, az in -3.14159..3.14159f64, incl in -6.99..51.99f64,
        ) {
            let th = incl.to_radians();
            let p = Vec3::new(r * th.cos() * az.cos(), r * th.cos() * az.sin(), r * th.sin());
            let back = unproject(&rasterize(&PointCloud::from_points(vec![p])));
            prop_assert_eq!(back.len(), 1);
            prop_assert!((back.points[0] - p).norm() <= r * 1.5f64.to_radians() + 1e-6);
        }
    }
}
