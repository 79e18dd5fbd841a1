//! Evaluation metrics against the bathymetry mesh: landmark consistency
//! error (distance between the mesh intersections of a correspondence's two
//! keypoint rays), absolute trajectory error, end-point error against
//! mesh-derived baseline correspondences, and landmark depth error.
//!
//! Keypoint rays are built from the evaluated trajectory's poses: origin at
//! the sensor, direction in the ping's across-track plane at the grazing
//! angle implied by the keypoint's slant range and the ping altitude, then
//! intersected with the actual mesh surface.

use crate::geometry::Pose;
use crate::io::CorrespondenceRecord;
use crate::simulator::{raycast, Heightmap};
use crate::sonar_image::{Side, SonarConfig};
use crate::{Error, Result};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Row-to-ping and column-to-range geometry of one canonical image,
/// sufficient to reconstruct keypoint rays from CSV records.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageGeometry {
    pub image_id: u32,
    pub side: Side,
    /// Ping id per image row.
    pub rows: Vec<u64>,
    pub column_resolution: f64,
    pub ncols: usize,
}

impl ImageGeometry {
    pub fn ground_range(&self, col: usize) -> f64 {
        (col as f64 + 0.5) * self.column_resolution
    }
}

/// Everything needed to evaluate one trajectory against the mesh.
pub struct EvalContext<'a> {
    pub map: &'a Heightmap,
    pub sonar: &'a SonarConfig,
    /// Pose per ping id of the trajectory being evaluated.
    pub poses: &'a HashMap<u64, Pose>,
    /// Measured altitude per ping id.
    pub altitudes: &'a HashMap<u64, f64>,
}

/// Ray of a keypoint: from the sensor, across-track, at the grazing angle
/// implied by slant range and altitude.
pub fn keypoint_ray(
    ctx: &EvalContext,
    img: &ImageGeometry,
    row: usize,
    col: usize,
) -> Result<(Vector3<f64>, Vector3<f64>)> {
    let ping_id = *img
        .rows
        .get(row)
        .ok_or_else(|| Error::InvalidInput(format!("row {} outside image", row)))?;
    let pose = ctx
        .poses
        .get(&ping_id)
        .ok_or_else(|| Error::InvalidInput(format!("no pose for ping {}", ping_id)))?;
    let alt = *ctx
        .altitudes
        .get(&ping_id)
        .ok_or_else(|| Error::InvalidInput(format!("no altitude for ping {}", ping_id)))?;
    let ground = img.ground_range(col);
    let slant = (ground * ground + alt * alt).sqrt();
    let sensor = pose.compose(&ctx.sonar.sensor_offset);
    let across = img.side.across_track(&pose.heading_vector());
    let dir = (across * ground + Vector3::new(0.0, 0.0, alt)) / slant;
    Ok((sensor.position, dir))
}

/// Mesh intersection of a keypoint ray. The march starts shortly before the
/// flat-floor slant range and falls back to a full march if that window
/// misses (strong relief).
pub fn project_keypoint(
    ctx: &EvalContext,
    img: &ImageGeometry,
    row: usize,
    col: usize,
) -> Result<Option<Vector3<f64>>> {
    let (origin, dir) = keypoint_ray(ctx, img, row, col)?;
    let ping_id = img.rows[row];
    let alt = ctx.altitudes[&ping_id];
    let ground = img.ground_range(col);
    let slant = (ground * ground + alt * alt).sqrt();
    if let Some(h) = crate::simulator::raycast_window(&origin, &dir, ctx.map, (slant - 12.0).max(0.0), slant + 40.0)
    {
        return Ok(Some(h.point));
    }
    Ok(raycast(&origin, &dir, ctx.map).map(|h| h.point))
}

/// Per-pair and overall landmark consistency.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// (src image, tgt image, mean error m, correspondence count)
    pub per_pair: Vec<(u32, u32, f64, usize)>,
    /// Correspondence-count-weighted mean over all pairs.
    pub overall: f64,
    /// Correspondences skipped because a ray missed the mesh.
    pub skipped: usize,
}

/// Project both keypoints of every correspondence onto the mesh and measure
/// the distance between the two intersections.
pub fn landmark_consistency(
    corrs: &[CorrespondenceRecord],
    images: &HashMap<u32, ImageGeometry>,
    ctx: &EvalContext,
) -> Result<ConsistencyReport> {
    let mut per_pair: HashMap<(u32, u32), (f64, usize)> = HashMap::new();
    let mut skipped = 0usize;
    for c in corrs {
        let src_img = images
            .get(&c.src_image)
            .ok_or_else(|| Error::InvalidInput(format!("unknown image {}", c.src_image)))?;
        let tgt_img = images
            .get(&c.tgt_image)
            .ok_or_else(|| Error::InvalidInput(format!("unknown image {}", c.tgt_image)))?;
        let a = project_keypoint(ctx, src_img, c.src_row, c.src_col)?;
        let b = project_keypoint(ctx, tgt_img, c.tgt_row, c.tgt_col)?;
        match (a, b) {
            (Some(pa), Some(pb)) => {
                let e = (pa - pb).norm();
                let entry = per_pair.entry((c.src_image, c.tgt_image)).or_insert((0.0, 0));
                entry.0 += e;
                entry.1 += 1;
            }
            _ => skipped += 1,
        }
    }
    let mut pairs: Vec<(u32, u32, f64, usize)> = per_pair
        .into_iter()
        .map(|((s, t), (sum, n))| (s, t, sum / n as f64, n))
        .collect();
    pairs.sort_by_key(|p| (p.0, p.1));
    let total_n: usize = pairs.iter().map(|p| p.3).sum();
    let overall = if total_n > 0 {
        pairs.iter().map(|p| p.2 * p.3 as f64).sum::<f64>() / total_n as f64
    } else {
        0.0
    };
    Ok(ConsistencyReport {
        per_pair: pairs,
        overall,
        skipped,
    })
}

/// Horizontal RMSE between two trajectories over matched ping ids, in the
/// shared global frame (no alignment step).
pub fn ate(estimate: &[(u64, Pose)], reference: &[(u64, Pose)]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::InvalidInput(format!(
            "trajectory lengths differ: {} vs {}",
            estimate.len(),
            reference.len()
        )));
    }
    let mut est: Vec<&(u64, Pose)> = estimate.iter().collect();
    let mut rf: Vec<&(u64, Pose)> = reference.iter().collect();
    est.sort_by_key(|e| e.0);
    rf.sort_by_key(|e| e.0);
    let mut sum = 0.0;
    for (e, r) in est.iter().zip(&rf) {
        if e.0 != r.0 {
            return Err(Error::InvalidInput(format!(
                "ping id mismatch: {} vs {}",
                e.0, r.0
            )));
        }
        let dx = e.1.position.x - r.1.position.x;
        let dy = e.1.position.y - r.1.position.y;
        sum += dx * dx + dy * dy;
    }
    Ok((sum / est.len().max(1) as f64).sqrt())
}

/// Mesh-derived baseline correspondence: project the source keypoint onto
/// the mesh, then find the target pixel whose own mesh intersection is
/// nearest that landmark. Returns `None` when nothing comes within
/// `threshold` meters.
pub fn baseline_correspondence(
    ctx: &EvalContext,
    src_img: &ImageGeometry,
    src_row: usize,
    src_col: usize,
    tgt_img: &ImageGeometry,
    threshold: f64,
) -> Result<Option<(usize, usize)>> {
    let Some(landmark) = project_keypoint(ctx, src_img, src_row, src_col)? else {
        return Ok(None);
    };
    // Candidate rows: pings whose along-track offset to the landmark is
    // small; candidate columns: near the across-track distance.
    let mut best: Option<(f64, usize, usize)> = None;
    for (row, ping_id) in tgt_img.rows.iter().enumerate() {
        let (Some(pose), Some(_alt)) = (ctx.poses.get(ping_id), ctx.altitudes.get(ping_id)) else {
            continue;
        };
        let heading = pose.heading_vector();
        let rel = Vector3::new(
            landmark.x - pose.position.x,
            landmark.y - pose.position.y,
            0.0,
        );
        let along = rel.dot(&heading);
        if along.abs() > 3.0 {
            continue;
        }
        let across = tgt_img.side.across_track(&heading);
        let g = rel.dot(&across);
        if g < 0.0 {
            continue;
        }
        let c0 = (g / tgt_img.column_resolution - 0.5).round() as i64;
        for dc in -4i64..=4 {
            let col = c0 + dc;
            if col < 0 || col as usize >= tgt_img.ncols {
                continue;
            }
            if let Some(hit) = project_keypoint(ctx, tgt_img, row, col as usize)? {
                let d = (hit - landmark).norm();
                if best.map(|b| d < b.0).unwrap_or(true) {
                    best = Some((d, row, col as usize));
                }
            }
        }
    }
    Ok(best.and_then(|(d, r, c)| if d < threshold { Some((r, c)) } else { None }))
}

/// Per-pair and overall end-point errors, u = row (longitudinal) and
/// v = column (lateral), in pixels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpeReport {
    /// (src image, tgt image, mean |du|, mean |dv|, evaluated count)
    pub per_pair: Vec<(u32, u32, f64, f64, usize)>,
    pub overall_u: f64,
    pub overall_v: f64,
    /// Correspondences without a baseline within threshold.
    pub without_baseline: usize,
}

/// Pixel distance between detected correspondences and their mesh-derived
/// baselines.
pub fn epe(
    detected: &[CorrespondenceRecord],
    baselines: &[Option<(usize, usize)>],
) -> Result<EpeReport> {
    if detected.len() != baselines.len() {
        return Err(Error::InvalidInput("baseline list length mismatch".into()));
    }
    let mut per_pair: HashMap<(u32, u32), (f64, f64, usize)> = HashMap::new();
    let mut without = 0usize;
    for (c, b) in detected.iter().zip(baselines) {
        match b {
            Some((br, bc)) => {
                let du = (c.tgt_row as f64 - *br as f64).abs();
                let dv = (c.tgt_col as f64 - *bc as f64).abs();
                let e = per_pair
                    .entry((c.src_image, c.tgt_image))
                    .or_insert((0.0, 0.0, 0));
                e.0 += du;
                e.1 += dv;
                e.2 += 1;
            }
            None => without += 1,
        }
    }
    let mut pairs: Vec<(u32, u32, f64, f64, usize)> = per_pair
        .into_iter()
        .map(|((s, t), (du, dv, n))| (s, t, du / n as f64, dv / n as f64, n))
        .collect();
    pairs.sort_by_key(|p| (p.0, p.1));
    let total: usize = pairs.iter().map(|p| p.4).sum();
    let (mut ou, mut ov) = (0.0, 0.0);
    if total > 0 {
        ou = pairs.iter().map(|p| p.2 * p.4 as f64).sum::<f64>() / total as f64;
        ov = pairs.iter().map(|p| p.3 * p.4 as f64).sum::<f64>() / total as f64;
    }
    Ok(EpeReport {
        per_pair: pairs,
        overall_u: ou,
        overall_v: ov,
        without_baseline: without,
    })
}

/// Statistics of |estimated landmark depth - mesh depth|.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DepthErrorReport {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    /// Landmarks outside the mesh.
    pub skipped: usize,
}

pub fn landmark_depth_error(
    landmarks: &[(u64, u64, Vector3<f64>)],
    map: &Heightmap,
) -> DepthErrorReport {
    let mut errs = Vec::new();
    let mut skipped = 0usize;
    for (_, _, p) in landmarks {
        match map.depth_at(p.x, p.y) {
            Some(d) => errs.push((p.z - d).abs()),
            None => skipped += 1,
        }
    }
    let n = errs.len();
    let mean = if n > 0 { errs.iter().sum::<f64>() / n as f64 } else { 0.0 };
    let var = if n > 1 {
        errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    DepthErrorReport {
        mean,
        std: var.sqrt(),
        count: n,
        skipped,
    }
}

/// Full metric report of one evaluation run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    /// Landmark consistency of the dead-reckoning trajectory.
    pub consistency_dr: ConsistencyReport,
    /// Landmark consistency of the optimized trajectory.
    pub consistency_slam: ConsistencyReport,
    /// ATE of dead-reckoning vs the reference trajectory.
    pub ate_dr: f64,
    /// ATE of the optimized trajectory vs the reference.
    pub ate_slam: f64,
    pub epe: Option<EpeReport>,
    pub depth_error: Option<DepthErrorReport>,
    /// Metrics of the annotated-correspondence run, when supplied.
    pub consistency_annotated: Option<ConsistencyReport>,
}

impl MetricReport {
    /// Flat CSV tables (one per metric) next to the JSON report.
    pub fn write_csv_tables(&self, dir: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::fs::File::create(dir.join("report_consistency.csv"))?;
        writeln!(f, "trajectory,src_image,tgt_image,mean_error_m,count")?;
        for (label, rep) in [("dead_reckoning", &self.consistency_dr), ("slam", &self.consistency_slam)] {
            for (s, t, e, n) in &rep.per_pair {
                writeln!(f, "{},{},{},{},{}", label, s, t, e, n)?;
            }
            writeln!(f, "{},overall,,{},{}", label, rep.overall, rep.per_pair.iter().map(|p| p.3).sum::<usize>())?;
        }
        if let Some(rep) = &self.consistency_annotated {
            for (s, t, e, n) in &rep.per_pair {
                writeln!(f, "annotated,{},{},{},{}", s, t, e, n)?;
            }
            writeln!(f, "annotated,overall,,{},{}", rep.overall, rep.per_pair.iter().map(|p| p.3).sum::<usize>())?;
        }

        let mut f = std::fs::File::create(dir.join("report_ate.csv"))?;
        writeln!(f, "trajectory,ate_rmse_m")?;
        writeln!(f, "dead_reckoning,{}", self.ate_dr)?;
        writeln!(f, "slam,{}", self.ate_slam)?;

        if let Some(epe) = &self.epe {
            let mut f = std::fs::File::create(dir.join("report_epe.csv"))?;
            writeln!(f, "src_image,tgt_image,mean_u_px,mean_v_px,count")?;
            for (s, t, u, v, n) in &epe.per_pair {
                writeln!(f, "{},{},{},{},{}", s, t, u, v, n)?;
            }
            writeln!(f, "overall,,{},{},{}", epe.overall_u, epe.overall_v, epe.per_pair.iter().map(|p| p.4).sum::<usize>())?;
        }
        if let Some(d) = &self.depth_error {
            let mut f = std::fs::File::create(dir.join("report_depth.csv"))?;
            writeln!(f, "mean_abs_error_m,std_m,count,skipped")?;
            writeln!(f, "{},{},{},{}", d.mean, d.std, d.count, d.skipped)?;
        }
        Ok(())
    }
}
