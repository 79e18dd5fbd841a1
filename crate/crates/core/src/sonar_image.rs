//! Waterfall image formation, canonical transformation and geo-referencing.
//!
//! A survey line yields two images (port and starboard). Raw images are
//! slant-range indexed; the canonical transform first normalizes intensities
//! with the flat-floor Lambertian model (backscatter proportional to the
//! squared cosine of the incidence angle) and then resamples each row from
//! slant range to horizontal (ground) range so pixels cover approximately
//! equal-sized seabed patches. Invalid pixels (water column, out of swath)
//! are NaN so later stages can skip them explicitly.

use crate::geometry::Pose;
use crate::{Error, Result};
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Which transducer the image comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Port,
    Starboard,
}

impl Side {
    pub fn label(&self) -> &'static str {
        match self {
            Side::Port => "port",
            Side::Starboard => "starboard",
        }
    }

    /// Horizontal unit vector pointing across-track for this side, i.e. the
    /// ping heading rotated by +90 deg (port) or -90 deg (starboard).
    pub fn across_track(&self, heading: &Vector3<f64>) -> Vector3<f64> {
        match self {
            // rotZ(+90): (x, y) -> (-y, x)
            Side::Port => Vector3::new(-heading.y, heading.x, 0.0),
            // rotZ(-90): (x, y) -> (y, -x)
            Side::Starboard => Vector3::new(heading.y, -heading.x, 0.0),
        }
    }
}

/// Sonar and mounting parameters shared across the pipeline.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SonarConfig {
    /// Maximum slant range covered by one side, meters.
    pub max_range: f64,
    /// Number of slant-range bins per side after downsampling.
    pub bins_per_side: usize,
    /// Horizontal beam width, radians. Enters the keypoint covariance.
    pub beam_width: f64,
    /// Slant-range measurement noise, meters.
    pub range_std: f64,
    /// Fixed transform from AUV body to sonar sensor frame.
    #[serde(with = "crate::geometry::pose_as_array")]
    pub sensor_offset: Pose,
    /// Nominal ping rate, Hz.
    pub ping_rate: f64,
}

impl Default for SonarConfig {
    fn default() -> Self {
        Self {
            max_range: 160.0,
            bins_per_side: 1301,
            beam_width: 0.01,
            range_std: 0.5,
            sensor_offset: Pose::identity(),
            ping_rate: 4.0,
        }
    }
}

impl SonarConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_range > 0.0) {
            return Err(Error::InvalidConfig("max_range must be > 0".into()));
        }
        if self.bins_per_side < 2 {
            return Err(Error::InvalidConfig("bins_per_side must be >= 2".into()));
        }
        if !(self.beam_width > 0.0) {
            return Err(Error::InvalidConfig("beam_width must be > 0".into()));
        }
        if !(self.range_std > 0.0) {
            return Err(Error::InvalidConfig("range_std must be > 0".into()));
        }
        if !(self.ping_rate > 0.0) {
            return Err(Error::InvalidConfig("ping_rate must be > 0".into()));
        }
        Ok(())
    }

    /// Meters of slant range covered by one bin.
    pub fn bin_resolution(&self) -> f64 {
        self.max_range / self.bins_per_side as f64
    }
}

/// One sonar return line: dead-reckoning pose, altitude and the two
/// slant-range indexed intensity arrays.
#[derive(Clone, Debug)]
pub struct Ping {
    pub ping_id: u64,
    pub time: f64,
    pub dr_pose: Pose,
    /// Height above the local seafloor, meters.
    pub altitude: f64,
    pub port: Vec<f32>,
    pub starboard: Vec<f32>,
}

impl Ping {
    pub fn intensities(&self, side: Side) -> &[f32] {
        match side {
            Side::Port => &self.port,
            Side::Starboard => &self.starboard,
        }
    }

    pub fn validate(&self, bins_per_side: usize) -> Result<()> {
        if !(self.altitude > 0.0) {
            return Err(Error::InvalidInput(format!(
                "ping {}: altitude must be > 0",
                self.ping_id
            )));
        }
        if self.port.len() != bins_per_side || self.starboard.len() != bins_per_side {
            return Err(Error::InvalidInput(format!(
                "ping {}: expected {} bins per side, got {}/{}",
                self.ping_id,
                bins_per_side,
                self.port.len(),
                self.starboard.len()
            )));
        }
        for v in self.port.iter().chain(self.starboard.iter()) {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "ping {}: intensities must be finite and non-negative",
                    self.ping_id
                )));
            }
        }
        Ok(())
    }
}

/// Waterfall image of one survey line and one side.
///
/// `pixels` is row-major; NaN marks invalid pixels. Before the canonical
/// transform a column is a slant-range bin, afterwards column `c` covers
/// horizontal range `(c + 0.5) * column_resolution`.
#[derive(Clone, Debug)]
pub struct SonarImage {
    pub image_id: u32,
    pub side: Side,
    /// Ping ids in row order (time-ordered).
    pub rows: Vec<u64>,
    pub pixels: Vec<f32>,
    pub ncols: usize,
    pub column_resolution: f64,
    pub intensity_corrected: bool,
    pub canonical: bool,
    /// Per-pixel approximate global position, filled by [`georeference`].
    pub georef: Option<Vec<[f64; 3]>>,
}

impl SonarImage {
    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.ncols + col]
    }

    #[inline]
    pub fn valid(&self, row: usize, col: usize) -> bool {
        self.get(row, col).is_finite()
    }

    pub fn geo(&self, row: usize, col: usize) -> Option<[f64; 3]> {
        self.georef.as_ref().map(|g| g[row * self.ncols + col])
    }

    /// Horizontal range covered by column `c` (canonical images only).
    pub fn ground_range(&self, col: usize) -> f64 {
        (col as f64 + 0.5) * self.column_resolution
    }
}

/// Stack the per-ping arrays of one side into a slant-range waterfall image.
pub fn waterfall_from_pings(
    image_id: u32,
    side: Side,
    pings: &[Ping],
    cfg: &SonarConfig,
) -> Result<SonarImage> {
    if pings.is_empty() {
        return Err(Error::InvalidInput("waterfall needs at least one ping".into()));
    }
    for w in pings.windows(2) {
        if w[1].time < w[0].time {
            return Err(Error::InvalidInput("pings must be time-ordered".into()));
        }
    }
    let mut pixels = Vec::with_capacity(pings.len() * cfg.bins_per_side);
    for p in pings {
        p.validate(cfg.bins_per_side)?;
        pixels.extend_from_slice(p.intensities(side));
    }
    Ok(SonarImage {
        image_id,
        side,
        rows: pings.iter().map(|p| p.ping_id).collect(),
        pixels,
        ncols: cfg.bins_per_side,
        column_resolution: cfg.bin_resolution(),
        intensity_corrected: false,
        canonical: false,
        georef: None,
    })
}

/// Reduce a raw ping to `target_bins` by averaging each covering interval.
pub fn downsample_ping(raw: &[f32], target_bins: usize) -> Result<Vec<f32>> {
    if target_bins == 0 {
        return Err(Error::InvalidInput("target_bins must be > 0".into()));
    }
    if raw.len() < target_bins {
        return Err(Error::InvalidInput(format!(
            "cannot downsample {} bins to {}",
            raw.len(),
            target_bins
        )));
    }
    let n = raw.len() as f64;
    let t = target_bins as f64;
    let mut out = Vec::with_capacity(target_bins);
    for i in 0..target_bins {
        let start = ((i as f64) * n / t).floor() as usize;
        let end = (((i + 1) as f64) * n / t).floor() as usize;
        let end = end.max(start + 1).min(raw.len());
        let sum: f64 = raw[start..end].iter().map(|v| *v as f64).sum();
        out.push((sum / (end - start) as f64) as f32);
    }
    Ok(out)
}

fn check_rows_match(image: &SonarImage, pings: &[Ping]) -> Result<()> {
    if pings.len() != image.nrows() {
        return Err(Error::InvalidInput(format!(
            "image has {} rows but {} pings supplied",
            image.nrows(),
            pings.len()
        )));
    }
    for (r, p) in image.rows.iter().zip(pings) {
        if *r != p.ping_id {
            return Err(Error::InvalidInput(format!(
                "row ping id {} does not match supplied ping {}",
                r, p.ping_id
            )));
        }
    }
    Ok(())
}

/// Divide each pixel by the squared cosine of its flat-floor incidence angle
/// (`cos theta = altitude / slant range`), mask water-column pixels, then
/// normalize the image mean to 1.
pub fn intensity_correction(
    image: &SonarImage,
    pings: &[Ping],
    _cfg: &SonarConfig,
) -> Result<SonarImage> {
    if image.canonical || image.intensity_corrected {
        return Err(Error::InvalidInput(
            "intensity_correction expects a raw slant-range image".into(),
        ));
    }
    check_rows_match(image, pings)?;
    for p in pings {
        if !(p.altitude > 0.0) {
            return Err(Error::InvalidInput(format!(
                "ping {}: zero altitude",
                p.ping_id
            )));
        }
    }

    let ncols = image.ncols;
    let bin_res = image.column_resolution;
    let mut out = image.clone();
    out.pixels
        .par_chunks_mut(ncols)
        .zip(pings.par_iter())
        .for_each(|(row, ping)| {
            let alt = ping.altitude;
            for (c, px) in row.iter_mut().enumerate() {
                let slant = (c as f64 + 0.5) * bin_res;
                if slant < alt {
                    *px = f32::NAN;
                } else {
                    let cos_theta = alt / slant;
                    *px /= (cos_theta * cos_theta) as f32;
                }
            }
        });

    let (sum, count) = out
        .pixels
        .iter()
        .filter(|v| v.is_finite())
        .fold((0f64, 0usize), |(s, n), v| (s + *v as f64, n + 1));
    if count > 0 && sum > 0.0 {
        let mean = (sum / count as f64) as f32;
        out.pixels.iter_mut().for_each(|v| *v /= mean);
    }
    out.intensity_corrected = true;
    Ok(out)
}

/// Resample each row from slant range to horizontal range on a uniform grid
/// (`ground = sqrt(slant^2 - altitude^2)`, linear interpolation).
///
/// Running this on an already-canonical image resamples the existing ground
/// range axis, which is the identity when the resolution is unchanged.
pub fn slant_range_correction(
    image: &SonarImage,
    pings: &[Ping],
    cfg: &SonarConfig,
    out_resolution: f64,
) -> Result<SonarImage> {
    if !image.intensity_corrected {
        return Err(Error::InvalidInput(
            "slant_range_correction expects an intensity-corrected image".into(),
        ));
    }
    if !(out_resolution > 0.0) {
        return Err(Error::InvalidInput("out_resolution must be > 0".into()));
    }
    check_rows_match(image, pings)?;

    let in_res = image.column_resolution;
    let in_cols = image.ncols;
    let ncols = (cfg.max_range / out_resolution).floor() as usize;
    let already_canonical = image.canonical;

    let mut pixels = vec![f32::NAN; image.nrows() * ncols];
    pixels
        .par_chunks_mut(ncols)
        .enumerate()
        .for_each(|(r, out_row)| {
            let alt = pings[r].altitude;
            let in_row = &image.pixels[r * in_cols..(r + 1) * in_cols];
            for (c, px) in out_row.iter_mut().enumerate() {
                let ground = (c as f64 + 0.5) * out_resolution;
                // Source coordinate along the input axis.
                let src = if already_canonical {
                    ground
                } else {
                    (ground * ground + alt * alt).sqrt()
                };
                if src > cfg.max_range {
                    continue;
                }
                let f = src / in_res - 0.5;
                if f < 0.0 {
                    continue;
                }
                let i0 = f.floor() as usize;
                let w = (f - i0 as f64) as f32;
                if i0 >= in_cols {
                    continue;
                }
                // At (near-)integer source coordinates take the single
                // covering sample so an invalid neighbor cannot erode the
                // valid region; this also makes identity resampling exact.
                if w <= 1e-6 {
                    *px = in_row[i0];
                } else if i0 + 1 < in_cols {
                    let a = in_row[i0];
                    let b = in_row[i0 + 1];
                    if w >= 1.0 - 1e-6 {
                        *px = b;
                    } else if a.is_finite() && b.is_finite() {
                        *px = a * (1.0 - w) + b * w;
                    }
                }
            }
        });

    Ok(SonarImage {
        image_id: image.image_id,
        side: image.side,
        rows: image.rows.clone(),
        pixels,
        ncols,
        column_resolution: out_resolution,
        intensity_corrected: true,
        canonical: true,
        georef: None,
    })
}

/// Intensity plus slant-range correction. Idempotent on canonical images
/// (the resampling degenerates to the identity mapping).
pub fn canonical_transform(
    image: &SonarImage,
    pings: &[Ping],
    cfg: &SonarConfig,
    out_resolution: f64,
) -> Result<SonarImage> {
    if image.canonical {
        return slant_range_correction(image, pings, cfg, out_resolution);
    }
    let corrected = intensity_correction(image, pings, cfg)?;
    slant_range_correction(&corrected, pings, cfg, out_resolution)
}

/// Assign each canonical pixel an approximate global position: the ping
/// position pushed across-track by the column's horizontal range, at the
/// flat-floor seafloor depth (ping depth + altitude).
pub fn georeference(image: &SonarImage, pings: &[Ping]) -> Result<SonarImage> {
    if !image.canonical {
        return Err(Error::InvalidInput(
            "georeference expects a canonical image".into(),
        ));
    }
    check_rows_match(image, pings)?;

    let ncols = image.ncols;
    let res = image.column_resolution;
    let side = image.side;
    let mut georef = vec![[f64::NAN; 3]; image.nrows() * ncols];
    georef
        .par_chunks_mut(ncols)
        .zip(pings.par_iter())
        .for_each(|(row, ping)| {
            let pos = ping.dr_pose.position;
            let heading = ping.dr_pose.heading_vector();
            let across = side.across_track(&heading);
            let z = pos.z + ping.altitude;
            for (c, g) in row.iter_mut().enumerate() {
                let range = (c as f64 + 0.5) * res;
                *g = [pos.x + range * across.x, pos.y + range * across.y, z];
            }
        });

    let mut out = image.clone();
    out.georef = Some(georef);
    Ok(out)
}

/// Result of [`overlap_check`].
#[derive(Clone, Debug)]
pub struct OverlapReport {
    pub overlaps: bool,
    /// Intersection area of the two footprint hulls, square meters.
    pub area: f64,
    /// Intersection polygon (x, y), counter-clockwise.
    pub polygon: Vec<[f64; 2]>,
}

/// Intersect the horizontal convex hulls of two geo-referenced images.
pub fn overlap_check(a: &SonarImage, b: &SonarImage, min_overlap_area: f64) -> Result<OverlapReport> {
    let ha = footprint_hull(a)?;
    let hb = footprint_hull(b)?;
    let inter = convex_clip(&ha, &hb);
    let area = polygon_area(&inter);
    Ok(OverlapReport {
        overlaps: area >= min_overlap_area,
        area,
        polygon: inter,
    })
}

/// Convex hull of an image footprint, from the valid-pixel extremes of a
/// subsampled set of rows.
pub fn footprint_hull(image: &SonarImage) -> Result<Vec<[f64; 2]>> {
    let georef = image
        .georef
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("overlap_check needs geo-referenced images".into()))?;
    let nrows = image.nrows();
    let ncols = image.ncols;
    let stride = (nrows / 128).max(1);
    let mut pts = Vec::new();
    let mut rows: Vec<usize> = (0..nrows).step_by(stride).collect();
    if *rows.last().unwrap_or(&0) != nrows - 1 {
        rows.push(nrows - 1);
    }
    for r in rows {
        let mut first = None;
        let mut last = None;
        for c in 0..ncols {
            if image.valid(r, c) {
                if first.is_none() {
                    first = Some(c);
                }
                last = Some(c);
            }
        }
        for c in [first, last].into_iter().flatten() {
            let g = georef[r * ncols + c];
            pts.push([g[0], g[1]]);
        }
    }
    if pts.len() < 3 {
        return Err(Error::InvalidInput(
            "image has too few valid pixels for a footprint".into(),
        ));
    }
    Ok(convex_hull(&mut pts))
}

/// Andrew monotone chain; returns the hull counter-clockwise.
fn convex_hull(pts: &mut [[f64; 2]]) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cross = |o: &[f64; 2], a: &[f64; 2], b: &[f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(pts.len() * 2);
    for p in pts.iter() {
        while hull.len() >= 2 && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(*p);
    }
    let lower_len = hull.len() + 1;
    for p in pts.iter().rev() {
        while hull.len() >= lower_len && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0
        {
            hull.pop();
        }
        hull.push(*p);
    }
    hull.pop();
    hull
}

/// Sutherland-Hodgman clipping of one convex polygon by another.
fn convex_clip(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    let inside = |p: &[f64; 2], a: &[f64; 2], b: &[f64; 2]| {
        (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0
    };
    let intersect = |p: &[f64; 2], q: &[f64; 2], a: &[f64; 2], b: &[f64; 2]| -> [f64; 2] {
        let a1 = b[1] - a[1];
        let b1 = a[0] - b[0];
        let c1 = a1 * a[0] + b1 * a[1];
        let a2 = q[1] - p[1];
        let b2 = p[0] - q[0];
        let c2 = a2 * p[0] + b2 * p[1];
        let det = a1 * b2 - a2 * b1;
        if det.abs() < 1e-12 {
            return *p;
        }
        [(b2 * c1 - b1 * c2) / det, (a1 * c2 - a2 * c1) / det]
    };
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let p = input[j];
            let q = input[(j + 1) % input.len()];
            let p_in = inside(&p, &a, &b);
            let q_in = inside(&q, &a, &b);
            if p_in {
                output.push(p);
                if !q_in {
                    output.push(intersect(&p, &q, &a, &b));
                }
            } else if q_in {
                output.push(intersect(&p, &q, &a, &b));
            }
        }
    }
    output
}

/// Shoelace area of a simple polygon.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        s += a[0] * b[1] - b[0] * a[1];
    }
    s.abs() * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn flat_ping(id: u64, y: f64, altitude: f64, bins: usize, value: f32) -> Ping {
        Ping {
            ping_id: id,
            time: id as f64 * 0.25,
            dr_pose: Pose::from_heading(Vector3::new(0.0, y, 0.0), 0.0),
            altitude,
            port: vec![value; bins],
            starboard: vec![value; bins],
        }
    }

    fn small_cfg() -> SonarConfig {
        SonarConfig {
            max_range: 40.0,
            bins_per_side: 80,
            ..SonarConfig::default()
        }
    }

    #[test]
    fn downsample_constant_and_means() {
        assert_eq!(downsample_ping(&[1.0, 1.0, 1.0, 1.0], 2).unwrap(), vec![1.0, 1.0]);
        assert_eq!(downsample_ping(&[0.0, 2.0, 4.0, 6.0], 2).unwrap(), vec![1.0, 5.0]);
    }

    #[test]
    fn downsample_shorter_than_target_is_error() {
        assert!(downsample_ping(&[1.0, 2.0], 3).is_err());
    }

    /// Independent interval-mean oracle used to pin the large-ramp case.
    fn downsample_oracle(raw: &[f32], target: usize) -> Vec<f32> {
        (0..target)
            .map(|i| {
                let s = (i * raw.len()) / target;
                let e = (((i + 1) * raw.len()) / target).max(s + 1);
                raw[s..e].iter().map(|v| *v as f64).sum::<f64>() as f32 / (e - s) as f32
            })
            .collect()
    }

    #[test]
    fn downsample_ramp_matches_oracle() {
        let raw: Vec<f32> = (0..40_000).map(|i| i as f32).collect();
        let got = downsample_ping(&raw, 1301).unwrap();
        let want = downsample_oracle(&raw, 1301);
        assert_eq!(got.len(), 1301);
        for (g, w) in got.iter().zip(&want) {
            assert_relative_eq!(*g, *w, max_relative = 1e-6);
        }
        // Endpoints of a ramp stay a ramp.
        assert!(got[0] < got[1] && got[1299] < got[1300]);
    }

    #[test]
    fn intensity_correction_cosine_squared_ratios() {
        let cfg = small_cfg();
        let bin_res = cfg.bin_resolution(); // 0.5 m
        // Altitude equal to a bin-center slant range so that bin sits right
        // at nadir (theta = 0, divided by 1).
        let nadir_bin = 36usize;
        let alt = (nadir_bin as f64 + 0.5) * bin_res; // 18.25
        let far_bin = 72usize;
        let far_slant = (far_bin as f64 + 0.5) * bin_res; // 36.25, theta near 60 deg
        let pings = vec![flat_ping(0, 0.0, alt, cfg.bins_per_side, 1.0)];
        let img = waterfall_from_pings(0, Side::Starboard, &pings, &cfg).unwrap();
        let out = intensity_correction(&img, &pings, &cfg).unwrap();
        // Normalization cancels in ratios: each pixel was divided by
        // cos^2(theta) = (alt/slant)^2, the nadir pixel by exactly 1.
        let r = out.get(0, far_bin) as f64 / out.get(0, nadir_bin) as f64;
        assert_relative_eq!(r, (far_slant / alt).powi(2), max_relative = 1e-5);
        // Water column masked.
        assert!(!out.valid(0, 0));
        assert!(out.valid(0, nadir_bin));
    }

    #[test]
    fn intensity_correction_rejects_zero_altitude() {
        let cfg = small_cfg();
        let mut pings = vec![flat_ping(0, 0.0, 18.0, cfg.bins_per_side, 1.0)];
        let img = waterfall_from_pings(0, Side::Port, &pings, &cfg).unwrap();
        pings[0].altitude = 0.0;
        assert!(intensity_correction(&img, &pings, &cfg).is_err());
    }

    #[test]
    fn slant_correction_pythagoras() {
        let cfg = small_cfg();
        let alt = 18.0;
        let bin_res = cfg.bin_resolution();
        let pings = vec![flat_ping(0, 0.0, alt, cfg.bins_per_side, 1.0)];
        let mut img = waterfall_from_pings(0, Side::Starboard, &pings, &cfg).unwrap();
        // Impulse at slant range 30 m: ground range sqrt(900-324) = 24 m.
        let slant_bin = ((30.0 / bin_res) - 0.5).round() as usize;
        for c in 0..cfg.bins_per_side {
            img.pixels[c] = if c == slant_bin { 10.0 } else { 1.0 };
        }
        img.intensity_corrected = true; // bypass intensity stage for a pure geometry test
        let out = slant_range_correction(&img, &pings, &cfg, 0.5).unwrap();
        let peak_col = (0..out.ncols)
            .filter(|c| out.valid(0, *c))
            .max_by(|a, b| out.get(0, *a).partial_cmp(&out.get(0, *b)).unwrap())
            .unwrap();
        let ground = out.ground_range(peak_col);
        assert!((ground - 24.0).abs() <= 0.5, "peak at {} m", ground);
        // Nadir maps to ground range ~0: the first valid column should be
        // close to column 0.
        let first_valid = (0..out.ncols).find(|c| out.valid(0, *c)).unwrap();
        assert!(first_valid <= 1);
    }

    #[test]
    fn canonical_transform_idempotent() {
        let cfg = small_cfg();
        let pings: Vec<Ping> = (0..8)
            .map(|i| {
                let mut p = flat_ping(i, i as f64 * 0.5, 18.0, cfg.bins_per_side, 1.0);
                for (c, v) in p.starboard.iter_mut().enumerate() {
                    *v = 1.0 + 0.5 * ((c as f32 * 0.3).sin() + 1.0) + i as f32 * 0.01;
                }
                p
            })
            .collect();
        let img = waterfall_from_pings(0, Side::Starboard, &pings, &cfg).unwrap();
        let once = canonical_transform(&img, &pings, &cfg, 0.5).unwrap();
        let twice = canonical_transform(&once, &pings, &cfg, 0.5).unwrap();
        assert_eq!(once.rows, twice.rows);
        for (a, b) in once.pixels.iter().zip(&twice.pixels) {
            match (a.is_finite(), b.is_finite()) {
                (true, true) => {
                    assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{} vs {}", a, b)
                }
                (false, false) => {}
                _ => panic!("validity mask changed"),
            }
        }
    }

    #[test]
    fn row_order_preserved_through_pipeline() {
        let cfg = small_cfg();
        let pings: Vec<Ping> = (0..5)
            .map(|i| flat_ping(i * 10, i as f64, 18.0, cfg.bins_per_side, 1.0))
            .collect();
        let img = waterfall_from_pings(3, Side::Port, &pings, &cfg).unwrap();
        let canon = canonical_transform(&img, &pings, &cfg, 0.5).unwrap();
        let geo = georeference(&canon, &pings).unwrap();
        assert_eq!(geo.rows, vec![0, 10, 20, 30, 40]);
        assert_eq!(geo.image_id, 3);
    }

    #[test]
    fn georeference_axis_aligned() {
        let cfg = small_cfg();
        let alt = 18.0;
        let pings = vec![flat_ping(0, 0.0, alt, cfg.bins_per_side, 1.0)];
        let img = waterfall_from_pings(0, Side::Starboard, &pings, &cfg).unwrap();
        let canon = canonical_transform(&img, &pings, &cfg, 1.0).unwrap();
        let geo = georeference(&canon, &pings).unwrap();
        // Heading +y, starboard looks east: column c is at x = ground range.
        let c = 29;
        let g = geo.geo(0, c).unwrap();
        let ground = geo.ground_range(c);
        assert_relative_eq!(g[0], ground, epsilon = 1e-9);
        assert_relative_eq!(g[1], 0.0, epsilon = 1e-9);
        assert_relative_eq!(g[2], alt, epsilon = 1e-9);

        // Port mirrors to -x.
        let img_p = waterfall_from_pings(1, Side::Port, &pings, &cfg).unwrap();
        let canon_p = canonical_transform(&img_p, &pings, &cfg, 1.0).unwrap();
        let geo_p = georeference(&canon_p, &pings).unwrap();
        let gp = geo_p.geo(0, c).unwrap();
        assert_relative_eq!(gp[0], -ground, epsilon = 1e-9);
        assert_relative_eq!(gp[1], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn georeference_heading_45_matches_rotation_oracle() {
        let cfg = small_cfg();
        let heading = 45f64.to_radians();
        let mut ping = flat_ping(0, 0.0, 18.0, cfg.bins_per_side, 1.0);
        ping.dr_pose = Pose::from_heading(Vector3::new(2.0, -3.0, 1.0), heading);
        let pings = vec![ping];
        let img = waterfall_from_pings(0, Side::Starboard, &pings, &cfg).unwrap();
        let canon = canonical_transform(&img, &pings, &cfg, 0.5).unwrap();
        let geo = georeference(&canon, &pings).unwrap();
        for c in [10usize, 20, 39] {
            let g = geo.geo(0, c).unwrap();
            let range = geo.ground_range(c);
            // Oracle: rotate the heading vector by -90 deg with an explicit
            // rotation matrix and scale by the ground range.
            let h = Vector3::new(heading.sin(), heading.cos(), 0.0);
            let rot = Pose::rot_z(-std::f64::consts::FRAC_PI_2);
            let n = rot.rotate(&h);
            let expect = pings[0].dr_pose.position + n * range;
            assert_relative_eq!(g[0], expect.x, epsilon = 1e-9);
            assert_relative_eq!(g[1], expect.y, epsilon = 1e-9);
            assert_relative_eq!(g[2], 1.0 + 18.0, epsilon = 1e-9);
        }
    }

    fn georeferenced_line(image_id: u32, x: f64, n: usize, cfg: &SonarConfig) -> SonarImage {
        let pings: Vec<Ping> = (0..n)
            .map(|i| {
                let mut p = flat_ping(i as u64, 0.0, 18.0, cfg.bins_per_side, 1.0);
                p.dr_pose = Pose::from_heading(Vector3::new(x, i as f64 * 0.5, 0.0), 0.0);
                p
            })
            .collect();
        let img = waterfall_from_pings(image_id, Side::Starboard, &pings, cfg).unwrap();
        let canon = canonical_transform(&img, &pings, cfg, 0.5).unwrap();
        georeference(&canon, &pings).unwrap()
    }

    #[test]
    fn overlap_identical_and_far_apart() {
        let cfg = SonarConfig {
            max_range: 160.0,
            bins_per_side: 320,
            ..SonarConfig::default()
        };
        let a = georeferenced_line(0, 0.0, 60, &cfg);
        let b = georeferenced_line(1, 0.0, 60, &cfg);
        let rep = overlap_check(&a, &b, 100.0).unwrap();
        assert!(rep.overlaps);
        // Identical footprints: intersection roughly equals own hull area.
        let own = polygon_area(&footprint_hull(&a).unwrap());
        assert_relative_eq!(rep.area, own, max_relative = 1e-6);

        let far = georeferenced_line(2, 100_000.0, 60, &cfg);
        let rep = overlap_check(&a, &far, 100.0).unwrap();
        assert!(!rep.overlaps);
        assert_eq!(rep.area, 0.0);
    }

    #[test]
    fn overlap_parallel_lines_matches_rectangle_oracle() {
        let cfg = SonarConfig {
            max_range: 160.0,
            bins_per_side: 320,
            ..SonarConfig::default()
        };
        // Two starboard swaths looking east, lines at x=0 and x=100,
        // 30 m of along-track extent.
        let n = 61; // y in [0, 30]
        let a = georeferenced_line(0, 0.0, n, &cfg);
        let b = georeferenced_line(1, 100.0, n, &cfg);
        let rep = overlap_check(&a, &b, 100.0).unwrap();
        assert!(rep.overlaps);
        // Swath a covers x in [~nadir, 160], swath b x in [100+nadir, 260];
        // overlap in x is [100 + first_ground, 160].
        let first_valid_ground = {
            let c = (0..a.ncols).find(|c| a.valid(0, *c)).unwrap();
            a.ground_range(c)
        };
        let width = 160.0 - (100.0 + first_valid_ground);
        let height = 30.0;
        let oracle = width * height;
        assert_relative_eq!(rep.area, oracle, max_relative = 0.05);
    }
}
