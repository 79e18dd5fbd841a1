//! File formats: ping JSONL, trajectory CSV, ASCII heightmap grids,
//! g2o-style graph snapshots, correspondence/constraint CSV and 16-bit PGM
//! image export.
//!
//! All numeric output uses Rust's shortest-round-trip float formatting, so
//! files are lossless to reload and byte-identical across reruns.

use crate::association::Correspondence;
use crate::estimation::LoopClosureConstraint;
use crate::geometry::Pose;
use crate::pose_graph::{Factor, FactorKind, PoseGraph};
use crate::simulator::Heightmap;
use crate::sonar_image::{Ping, Side, SonarImage};
use crate::{Error, Result};
use nalgebra::{Matrix6, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

fn parse_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

// ---------------------------------------------------------------------------
// Pings (JSONL)

#[derive(Serialize, Deserialize)]
struct PingRecord {
    ping_id: u64,
    t: f64,
    pose: [f64; 7],
    altitude: f64,
    port: Vec<f32>,
    stbd: Vec<f32>,
}

pub fn write_pings_jsonl(path: &Path, pings: &[Ping]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for p in pings {
        let rec = PingRecord {
            ping_id: p.ping_id,
            t: p.time,
            pose: p.dr_pose.to_array7(),
            altitude: p.altitude,
            port: p.port.clone(),
            stbd: p.starboard.clone(),
        };
        let line = serde_json::to_string(&rec)
            .map_err(|e| parse_err(path, format!("serializing ping: {}", e)))?;
        writeln!(w, "{}", line)?;
    }
    Ok(())
}

pub fn read_pings_jsonl(path: &Path) -> Result<Vec<Ping>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PingRecord = serde_json::from_str(&line)
            .map_err(|e| parse_err(path, format!("line {}: {}", ln + 1, e)))?;
        out.push(Ping {
            ping_id: rec.ping_id,
            time: rec.t,
            dr_pose: Pose::from_array7(&rec.pose),
            altitude: rec.altitude,
            port: rec.port,
            starboard: rec.stbd,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Trajectories (CSV, roll/pitch/yaw convenience form in degrees, ZYX)

pub fn write_trajectory_csv(path: &Path, rows: &[(u64, f64, Pose)]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "ping_id,t,x,y,z,roll_deg,pitch_deg,yaw_deg")?;
    for (id, t, pose) in rows {
        let a = pose.to_rpy_deg();
        writeln!(w, "{},{},{},{},{},{},{},{}", id, t, a[0], a[1], a[2], a[3], a[4], a[5])?;
    }
    Ok(())
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<(u64, f64, Pose)>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        if ln == 0 || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(parse_err(path, format!("line {}: expected 8 fields", ln + 1)));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| parse_err(path, format!("line {}: {}", ln + 1, e)))
        };
        let id = f[0]
            .parse::<u64>()
            .map_err(|e| parse_err(path, format!("line {}: {}", ln + 1, e)))?;
        let vals = [
            num(f[2])?,
            num(f[3])?,
            num(f[4])?,
            num(f[5])?,
            num(f[6])?,
            num(f[7])?,
        ];
        out.push((id, num(f[1])?, Pose::from_rpy_deg(&vals)));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Heightmap (ASCII grid + reflectivity companion)

pub fn write_heightmap(path: &Path, map: &Heightmap) -> Result<()> {
    let refl_path = path.with_extension("refl");
    for (p, data) in [(path, &map.depth), (&refl_path, &map.reflectivity)] {
        let mut w = BufWriter::new(std::fs::File::create(p)?);
        writeln!(w, "ncols {}", map.ncols)?;
        writeln!(w, "nrows {}", map.nrows)?;
        writeln!(w, "x0 {}", map.origin[0])?;
        writeln!(w, "y0 {}", map.origin[1])?;
        writeln!(w, "cellsize {}", map.cell_size)?;
        for r in 0..map.nrows {
            let mut line = String::new();
            for c in 0..map.ncols {
                if c > 0 {
                    line.push(' ');
                }
                let _ = write!(line, "{}", data[r * map.ncols + c]);
            }
            writeln!(w, "{}", line)?;
        }
    }
    Ok(())
}

fn read_grid(path: &Path) -> Result<(usize, usize, f64, f64, f64, Vec<f64>)> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut lines = r.lines();
    let mut header = std::collections::HashMap::new();
    for _ in 0..5 {
        let line = lines
            .next()
            .ok_or_else(|| parse_err(path, "truncated header"))??;
        let mut it = line.split_whitespace();
        let key = it.next().ok_or_else(|| parse_err(path, "bad header"))?.to_string();
        let val: f64 = it
            .next()
            .ok_or_else(|| parse_err(path, "bad header"))?
            .parse()
            .map_err(|e| parse_err(path, format!("header: {}", e)))?;
        header.insert(key, val);
    }
    let ncols = *header.get("ncols").ok_or_else(|| parse_err(path, "missing ncols"))? as usize;
    let nrows = *header.get("nrows").ok_or_else(|| parse_err(path, "missing nrows"))? as usize;
    let x0 = *header.get("x0").ok_or_else(|| parse_err(path, "missing x0"))?;
    let y0 = *header.get("y0").ok_or_else(|| parse_err(path, "missing y0"))?;
    let cell = *header
        .get("cellsize")
        .ok_or_else(|| parse_err(path, "missing cellsize"))?;
    let mut data = Vec::with_capacity(nrows * ncols);
    for line in lines {
        let line = line?;
        for tok in line.split_whitespace() {
            data.push(
                tok.parse::<f64>()
                    .map_err(|e| parse_err(path, format!("grid value: {}", e)))?,
            );
        }
    }
    if data.len() != nrows * ncols {
        return Err(parse_err(
            path,
            format!("expected {} values, got {}", nrows * ncols, data.len()),
        ));
    }
    Ok((nrows, ncols, x0, y0, cell, data))
}

pub fn read_heightmap(path: &Path) -> Result<Heightmap> {
    let (nrows, ncols, x0, y0, cell, depth) = read_grid(path)?;
    let refl_path = path.with_extension("refl");
    let reflectivity = if refl_path.exists() {
        let (nr, nc, _, _, _, data) = read_grid(&refl_path)?;
        if nr != nrows || nc != ncols {
            return Err(parse_err(&refl_path, "reflectivity grid size mismatch"));
        }
        data
    } else {
        vec![0.5; nrows * ncols]
    };
    Ok(Heightmap {
        origin: [x0, y0],
        cell_size: cell,
        nrows,
        ncols,
        depth,
        reflectivity,
    })
}

// ---------------------------------------------------------------------------
// g2o-style graph snapshot

/// Permutation between the internal twist order (rotation, translation) and
/// the file order (translation, rotation).
fn cov_to_file_order(cov: &Matrix6<f64>) -> Matrix6<f64> {
    let mut p = Matrix6::zeros();
    for k in 0..3 {
        p[(k, k + 3)] = 1.0; // file trans rows take internal trans
        p[(k + 3, k)] = 1.0;
    }
    p * cov * p.transpose()
}

pub fn write_g2o(path: &Path, graph: &PoseGraph) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let mut nodes: Vec<_> = graph.nodes().to_vec();
    nodes.sort_by_key(|n| n.id);
    for n in &nodes {
        let p = n.estimate.position;
        let q = n.estimate.orientation.quaternion();
        writeln!(
            w,
            "VERTEX_SE3 {} {} {} {} {} {} {} {}",
            n.id, p.x, p.y, p.z, q.i, q.j, q.k, q.w
        )?;
        if n.fixed {
            writeln!(w, "FIX {}", n.id)?;
        }
    }
    for f in graph.factors() {
        if f.kind == FactorKind::Prior {
            continue;
        }
        let p = f.measured.position;
        let q = f.measured.orientation.quaternion();
        let info_internal = nalgebra::Cholesky::new(f.cov)
            .map(|ch| ch.inverse())
            .ok_or_else(|| Error::Solver("factor covariance not invertible".into()))?;
        let info = cov_to_file_order(&info_internal);
        let mut line = format!(
            "EDGE_SE3 {} {} {} {} {} {} {} {} {}",
            f.from, f.to, p.x, p.y, p.z, q.i, q.j, q.k, q.w
        );
        for i in 0..6 {
            for j in i..6 {
                let _ = write!(line, " {}", info[(i, j)]);
            }
        }
        writeln!(w, "{}", line)?;
    }
    Ok(())
}

/// Read a g2o-style file. Edges between consecutive vertex ids are tagged as
/// odometry, everything else as loop closures. Without a FIX line the lowest
/// vertex id is anchored.
pub fn read_g2o(path: &Path) -> Result<PoseGraph> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut vertices: Vec<(u64, Pose)> = Vec::new();
    let mut fixed: Option<u64> = None;
    let mut edges: Vec<(u64, u64, Pose, Matrix6<f64>)> = Vec::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() || toks[0].starts_with('#') {
            continue;
        }
        let bad = |msg: &str| parse_err(path, format!("line {}: {}", ln + 1, msg));
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        match toks[0] {
            "VERTEX_SE3" | "VERTEX_SE3:QUAT" => {
                if toks.len() != 9 {
                    return Err(bad("VERTEX_SE3 needs id + 7 values"));
                }
                let id: u64 = toks[1].parse().map_err(|_| bad("bad id"))?;
                let v: Vec<f64> = toks[2..9].iter().map(|s| num(s)).collect::<Result<_>>()?;
                let pose = Pose::new(
                    Vector3::new(v[0], v[1], v[2]),
                    UnitQuaternion::new_normalize(Quaternion::new(v[6], v[3], v[4], v[5])),
                );
                vertices.push((id, pose));
            }
            "FIX" => {
                fixed = Some(toks[1].parse().map_err(|_| bad("bad id"))?);
            }
            "EDGE_SE3" | "EDGE_SE3:QUAT" => {
                if toks.len() != 1 + 2 + 7 + 21 {
                    return Err(bad("EDGE_SE3 needs 2 ids + 7 pose + 21 info values"));
                }
                let i: u64 = toks[1].parse().map_err(|_| bad("bad id"))?;
                let j: u64 = toks[2].parse().map_err(|_| bad("bad id"))?;
                let v: Vec<f64> = toks[3..10].iter().map(|s| num(s)).collect::<Result<_>>()?;
                let measured = Pose::new(
                    Vector3::new(v[0], v[1], v[2]),
                    UnitQuaternion::new_normalize(Quaternion::new(v[6], v[3], v[4], v[5])),
                );
                let upper: Vec<f64> = toks[10..31].iter().map(|s| num(s)).collect::<Result<_>>()?;
                let mut info = Matrix6::zeros();
                let mut k = 0;
                for a in 0..6 {
                    for b in a..6 {
                        info[(a, b)] = upper[k];
                        info[(b, a)] = upper[k];
                        k += 1;
                    }
                }
                let info_internal = cov_to_file_order(&info); // same permutation both ways
                let cov = nalgebra::Cholesky::new(info_internal)
                    .map(|ch| ch.inverse())
                    .ok_or_else(|| bad("information matrix not SPD"))?;
                edges.push((i, j, measured, cov));
            }
            _ => return Err(bad(&format!("unknown tag {}", toks[0]))),
        }
    }
    vertices.sort_by_key(|v| v.0);
    let anchor = fixed.or_else(|| vertices.first().map(|v| v.0));
    let mut graph = PoseGraph::new();
    for (id, pose) in &vertices {
        graph.add_node(*id, *pose, Some(*id) == anchor)?;
    }
    for (i, j, measured, cov) in edges {
        let kind = if i + 1 == j || j + 1 == i {
            FactorKind::Odometry
        } else {
            FactorKind::LoopClosure
        };
        graph.add_factor(Factor {
            kind,
            from: i,
            to: j,
            measured,
            cov,
        })?;
    }
    Ok(graph)
}

// ---------------------------------------------------------------------------
// Correspondences (CSV)

/// One row of the correspondence CSV; `desc_dist` is empty for annotated
/// (ground-truth) correspondences.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceRecord {
    pub src_image: u32,
    pub src_row: usize,
    pub src_col: usize,
    pub tgt_image: u32,
    pub tgt_row: usize,
    pub tgt_col: usize,
    pub desc_dist: Option<f64>,
    pub inlier: bool,
}

impl CorrespondenceRecord {
    pub fn from_correspondence(c: &Correspondence) -> Self {
        Self {
            src_image: c.source.image_id,
            src_row: c.source.row,
            src_col: c.source.col,
            tgt_image: c.target.image_id,
            tgt_row: c.target.row,
            tgt_col: c.target.col,
            desc_dist: Some(c.descriptor_distance),
            inlier: c.inlier,
        }
    }
}

pub fn write_correspondences_csv(path: &Path, recs: &[CorrespondenceRecord]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "src_image,src_row,src_col,tgt_image,tgt_row,tgt_col,desc_dist,inlier")?;
    for r in recs {
        let dd = r.desc_dist.map(|d| d.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.src_image,
            r.src_row,
            r.src_col,
            r.tgt_image,
            r.tgt_row,
            r.tgt_col,
            dd,
            r.inlier as u8
        )?;
    }
    Ok(())
}

pub fn read_correspondences_csv(path: &Path) -> Result<Vec<CorrespondenceRecord>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        if ln == 0 || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(parse_err(path, format!("line {}: expected 8 fields", ln + 1)));
        }
        let bad = |e: String| parse_err(path, format!("line {}: {}", ln + 1, e));
        out.push(CorrespondenceRecord {
            src_image: f[0].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            src_row: f[1].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            src_col: f[2].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            tgt_image: f[3].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            tgt_row: f[4].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            tgt_col: f[5].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            desc_dist: if f[6].is_empty() {
                None
            } else {
                Some(f[6].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?)
            },
            inlier: f[7] == "1" || f[7] == "true",
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Loop-closure constraints (CSV + covariance sidecar)

#[derive(Serialize, Deserialize)]
struct CovRecord {
    ping_i: u64,
    ping_j: u64,
    /// Row-major 6x6, twist order (rotation, translation).
    cov: Vec<f64>,
}

pub fn write_constraints_csv(
    csv_path: &Path,
    sidecar_path: &Path,
    constraints: &[LoopClosureConstraint],
) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(csv_path)?);
    writeln!(w, "ping_i,ping_j,tx,ty,tz,rx,ry,rz,cost,converged")?;
    let mut covs = Vec::new();
    for c in constraints {
        let t = c.relative.position;
        let r = c.relative.log().rot;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            c.ping_i, c.ping_j, t.x, t.y, t.z, r.x, r.y, r.z, c.final_cost, c.converged as u8
        )?;
        covs.push(CovRecord {
            ping_i: c.ping_i,
            ping_j: c.ping_j,
            cov: c.cov.iter().cloned().collect(),
        });
    }
    let json = serde_json::to_string_pretty(&covs)
        .map_err(|e| parse_err(sidecar_path, e.to_string()))?;
    std::fs::write(sidecar_path, json)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Landmarks (CSV)

pub fn write_landmarks_csv(path: &Path, rows: &[(u64, u64, Vector3<f64>)]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "ping_i,ping_j,x,y,z")?;
    for (i, j, p) in rows {
        writeln!(w, "{},{},{},{},{}", i, j, p.x, p.y, p.z)?;
    }
    Ok(())
}

pub fn read_landmarks_csv(path: &Path) -> Result<Vec<(u64, u64, Vector3<f64>)>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        if ln == 0 || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(parse_err(path, format!("line {}: expected 5 fields", ln + 1)));
        }
        let bad = |e: String| parse_err(path, format!("line {}: {}", ln + 1, e));
        out.push((
            f[0].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            f[1].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            Vector3::new(
                f[2].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                f[3].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                f[4].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            ),
        ));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// PGM export

/// Sidecar metadata for exported images.
#[derive(Serialize, Deserialize)]
pub struct ImageMeta {
    pub image_id: u32,
    pub side: Side,
    pub nrows: usize,
    pub ncols: usize,
    pub column_resolution: f64,
    pub canonical: bool,
    pub intensity_min: f32,
    pub intensity_max: f32,
    pub first_ping: u64,
    pub last_ping: u64,
}

/// Write a 16-bit PGM (valid pixels scaled to 1..65535, invalid ones 0) plus
/// a JSON sidecar with the metadata.
pub fn write_pgm16(path: &Path, image: &SonarImage) -> Result<()> {
    let (mut lo, mut hi) = (f32::MAX, f32::MIN);
    for v in image.pixels.iter().filter(|v| v.is_finite()) {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if !lo.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    let span = (hi - lo).max(1e-12);
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write!(w, "P5\n{} {}\n65535\n", image.ncols, image.nrows())?;
    let mut buf = Vec::with_capacity(image.pixels.len() * 2);
    for v in &image.pixels {
        let q: u16 = if v.is_finite() {
            1 + ((v - lo) / span * 65534.0).round() as u16
        } else {
            0
        };
        buf.extend_from_slice(&q.to_be_bytes());
    }
    w.write_all(&buf)?;

    let meta = ImageMeta {
        image_id: image.image_id,
        side: image.side,
        nrows: image.nrows(),
        ncols: image.ncols,
        column_resolution: image.column_resolution,
        canonical: image.canonical,
        intensity_min: lo,
        intensity_max: hi,
        first_ping: *image.rows.first().unwrap_or(&0),
        last_ping: *image.rows.last().unwrap_or(&0),
    };
    let sidecar = path.with_extension("json");
    std::fs::write(
        &sidecar,
        serde_json::to_string_pretty(&meta).map_err(|e| parse_err(&sidecar, e.to_string()))?,
    )?;
    Ok(())
}

/// SHA-256 hex digest, used for the run manifest.
pub fn sha256_hex(data: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(data);
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        let _ = write!(s, "{:02x}", b);
    }
    s
}
