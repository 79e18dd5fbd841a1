//! End-to-end commands: `simulate` (synthetic dataset), `run` (the SLAM
//! pipeline), `eval` (metrics), plus the `jacobian-check` self test and
//! `graph-solve` for standalone g2o files.
//!
//! `run` processes images incrementally in survey order: canonicalize,
//! geo-reference, overlap-check against already-processed images of the same
//! side, associate keypoints, estimate two-ping constraints and update the
//! graph, then finish with one batch solve. All randomness is derived from
//! the master seed, and every parallel section is an order-stable map, so a
//! fixed config produces byte-identical outputs regardless of thread count.

use crate::association::{
    anti_parallel, detect_and_describe, match_near_neighbor, sliding_compatibility_ransac,
    Correspondence,
};
use crate::config::PipelineConfig;
use crate::estimation::{
    check_jacobians, estimate_relative_pose, init_landmark, slant_range_of, LandmarkEstimate,
    LoopClosureConstraint, TwoPingInputs,
};
use crate::evaluation::{
    ate, baseline_correspondence, landmark_consistency, landmark_depth_error, ConsistencyReport,
    EvalContext, ImageGeometry, MetricReport,
};
use crate::geometry::Pose;
use crate::io;
use crate::io::CorrespondenceRecord;
use crate::pose_graph::{GraphSolution, PoseGraph};
use crate::simulator::{
    final_drift_percent, generate_bathymetry, inject_drift, simulate_survey, stream_seed,
    BathymetryParams, DriftModel, Heightmap,
};
use crate::sonar_image::{
    canonical_transform, georeference, overlap_check, waterfall_from_pings, Ping, Side, SonarImage,
};
use crate::{Error, Result};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Run a closure in a scoped rayon pool when a thread count is requested.
fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    if threads == 0 {
        f()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("building thread pool")
            .install(f)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_sha256: String,
    counts: HashMap<&'a str, u64>,
}

fn write_manifest(
    dir: &Path,
    command: &str,
    cfg: &PipelineConfig,
    counts: &[(&'static str, u64)],
) -> Result<()> {
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config_sha256: io::sha256_hex(cfg.to_toml_string().as_bytes()),
        counts: counts.iter().cloned().collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse {
        path: "manifest".into(),
        msg: e.to_string(),
    })?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Clone, Debug)]
pub struct SimulateSummary {
    pub pings: usize,
    pub drift_percent: f64,
    pub dataset_dir: PathBuf,
}

/// Generate a dataset directory: `heightmap.asc`/`.refl`, `truth.csv`,
/// `drifted.csv`, `pings.jsonl` and a manifest.
pub fn cmd_simulate(cfg: &PipelineConfig, out_dir: &Path) -> Result<SimulateSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    with_pool(cfg.threads, || {
        let mut bathy = BathymetryParams {
            origin: [0.0; 2],
            nrows: 0,
            ncols: 0,
            ..cfg.bathymetry.clone()
        };
        let sized = BathymetryParams::sized_for(&cfg.survey, &cfg.sonar);
        bathy.origin = sized.origin;
        bathy.nrows = sized.nrows;
        bathy.ncols = sized.ncols;

        let map = generate_bathymetry(stream_seed(cfg.seed, 0x11, 0), &bathy);
        let (truth, mut pings) = simulate_survey(&map, &cfg.survey, &cfg.sonar, stream_seed(cfg.seed, 0x22, 0))?;
        let times: Vec<f64> = pings.iter().map(|p| p.time).collect();
        let drift = DriftModel {
            rng_seed: stream_seed(cfg.seed, 0x33, 0),
            ..cfg.drift.clone()
        };
        let drifted = inject_drift(&truth, &times, &drift)?;
        let drift_percent = final_drift_percent(&truth, &drifted);
        for (p, d) in pings.iter_mut().zip(&drifted) {
            p.dr_pose = *d;
        }

        io::write_heightmap(&out_dir.join("heightmap.asc"), &map)?;
        let truth_rows: Vec<(u64, f64, Pose)> = pings
            .iter()
            .zip(&truth)
            .map(|(p, t)| (p.ping_id, p.time, *t))
            .collect();
        io::write_trajectory_csv(&out_dir.join("truth.csv"), &truth_rows)?;
        let dr_rows: Vec<(u64, f64, Pose)> = pings
            .iter()
            .map(|p| (p.ping_id, p.time, p.dr_pose))
            .collect();
        io::write_trajectory_csv(&out_dir.join("drifted.csv"), &dr_rows)?;
        io::write_pings_jsonl(&out_dir.join("pings.jsonl"), &pings)?;
        write_manifest(out_dir, "simulate", cfg, &[("pings", pings.len() as u64)])?;

        Ok(SimulateSummary {
            pings: pings.len(),
            drift_percent,
            dataset_dir: out_dir.to_path_buf(),
        })
    })
}

// ---------------------------------------------------------------------------
// run

/// Split the ping stream into survey lines at time gaps (the sonar does not
/// ping during turns).
pub fn segment_lines(pings: &[Ping]) -> Vec<Range<usize>> {
    if pings.is_empty() {
        return Vec::new();
    }
    let mut dts: Vec<f64> = pings.windows(2).map(|w| w[1].time - w[0].time).collect();
    if dts.is_empty() {
        return vec![0..1];
    }
    dts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = dts[dts.len() / 2].max(1e-6);
    let mut ranges = Vec::new();
    let mut start = 0usize;
    for i in 1..pings.len() {
        if pings[i].time - pings[i - 1].time > 2.5 * median {
            ranges.push(start..i);
            start = i;
        }
    }
    ranges.push(start..pings.len());
    ranges
}

struct PreparedImage {
    image: SonarImage,
    line: usize,
    /// Index range of this line's pings in the full ping vector.
    ping_range: Range<usize>,
    keypoints: Vec<crate::association::Keypoint>,
    mean_heading: Vector3<f64>,
}

fn image_id_of(line: usize, side: Side) -> u32 {
    (line * 2
        + match side {
            Side::Port => 0,
            Side::Starboard => 1,
        }) as u32
}

fn prepare_images(pings: &[Ping], lines: &[Range<usize>], cfg: &PipelineConfig) -> Result<Vec<PreparedImage>> {
    let mut out = Vec::new();
    for (line_idx, range) in lines.iter().enumerate() {
        let slice = &pings[range.clone()];
        let mut heading = Vector3::zeros();
        for p in slice {
            heading += p.dr_pose.heading_vector();
        }
        for side in [Side::Port, Side::Starboard] {
            let raw = waterfall_from_pings(image_id_of(line_idx, side), side, slice, &cfg.sonar)?;
            let canon = canonical_transform(&raw, slice, &cfg.sonar, cfg.canonical_resolution)?;
            let geo = georeference(&canon, slice)?;
            let keypoints = detect_and_describe(&geo, &cfg.association)?;
            out.push(PreparedImage {
                image: geo,
                line: line_idx,
                ping_range: range.clone(),
                keypoints,
                mean_heading: heading,
            });
        }
    }
    Ok(out)
}

fn geometry_of(img: &PreparedImage) -> ImageGeometry {
    ImageGeometry {
        image_id: img.image.image_id,
        side: img.image.side,
        rows: img.image.rows.clone(),
        column_resolution: img.image.column_resolution,
        ncols: img.image.ncols,
    }
}

/// Node ids retained in the graph under a stride, always keeping the first
/// and last ping.
fn strided_trajectory(pings: &[Ping], stride: usize) -> Vec<(u64, Pose)> {
    let mut out = Vec::new();
    let n = pings.len();
    let mut i = 0;
    while i < n {
        out.push((pings[i].ping_id, pings[i].dr_pose));
        i += stride.max(1);
    }
    if let Some(last) = pings.last() {
        if out.last().map(|l| l.0) != Some(last.ping_id) {
            out.push((last.ping_id, last.dr_pose));
        }
    }
    out
}

/// Estimate one loop-closure constraint from a pair of keypoint pixels.
/// `i` (fixed) is the target/processed image ping, `j` the new one.
#[allow(clippy::too_many_arguments)]
fn estimate_for_pixels(
    cfg: &PipelineConfig,
    graph: &PoseGraph,
    pings: &[Ping],
    ping_index: &HashMap<u64, usize>,
    node_of_ping: &HashMap<u64, u64>,
    tgt_geo: &Vector3<f64>,
    tgt_ping: u64,
    tgt_ground: f64,
    src_geo: &Vector3<f64>,
    src_ping: u64,
    src_ground: f64,
) -> Result<Option<(LoopClosureConstraint, Vector3<f64>)>> {
    // Remap endpoints to retained graph nodes (identity when stride is 1).
    let node_i = node_of_ping[&tgt_ping];
    let node_j = node_of_ping[&src_ping];
    if node_i == node_j {
        return Ok(None);
    }
    let ping_i = &pings[ping_index[&tgt_ping]];
    let ping_j = &pings[ping_index[&src_ping]];
    let dr_node_i = pings[ping_index[&node_i]].dr_pose;
    let dr_node_j = pings[ping_index[&node_j]].dr_pose;

    let pose_i_node = graph
        .estimate(node_i)
        .ok_or_else(|| Error::InvalidInput(format!("node {} missing", node_i)))?;
    let pose_j_node = graph
        .estimate(node_j)
        .ok_or_else(|| Error::InvalidInput(format!("node {} missing", node_j)))?;
    // Current estimates of the two ping poses: node estimate composed with
    // the dead-reckoning increment from the node to the ping.
    let pose_i = pose_i_node.compose(&dr_node_i.relative(&ping_i.dr_pose));
    let pose_j = pose_j_node.compose(&dr_node_j.relative(&ping_j.dr_pose));

    let landmark = init_landmark(
        src_geo,
        tgt_geo,
        (&ping_j.dr_pose, ping_j.altitude),
        (&ping_i.dr_pose, ping_i.altitude),
        &cfg.estimation,
    );
    let odo_rel = ping_i.dr_pose.relative(&ping_j.dr_pose);
    let odo_distance = (ping_j.dr_pose.position - ping_i.dr_pose.position).norm();
    let inputs = TwoPingInputs {
        ping_i: tgt_ping,
        ping_j: src_ping,
        pose_i,
        pose_j,
        odo_rel,
        odo_distance,
        range_i: slant_range_of(tgt_ground, ping_i.altitude),
        range_j: slant_range_of(src_ground, ping_j.altitude),
        landmark,
        sonar: &cfg.sonar,
        cfg: &cfg.estimation,
    };
    let est = estimate_relative_pose(&inputs)?;
    if !est.constraint.converged || est.gated {
        return Ok(None);
    }
    // Express the constraint between the retained nodes.
    let rel_nodes = dr_node_i
        .relative(&ping_i.dr_pose)
        .compose(&est.constraint.relative)
        .compose(&ping_j.dr_pose.relative(&dr_node_j));
    Ok(Some((
        LoopClosureConstraint {
            ping_i: node_i,
            ping_j: node_j,
            relative: rel_nodes,
            ..est.constraint
        },
        est.landmark,
    )))
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub images: usize,
    pub pairs_checked: usize,
    pub pairs_overlapping: usize,
    pub candidates: usize,
    pub inliers: usize,
    pub constraints: usize,
    pub final_cost: f64,
    pub results_dir: PathBuf,
}

/// Run the full pipeline on a dataset directory.
pub fn cmd_run(cfg: &PipelineConfig, dataset: &Path, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    with_pool(cfg.threads, || cmd_run_inner(cfg, dataset, out_dir))
}

fn cmd_run_inner(cfg: &PipelineConfig, dataset: &Path, out_dir: &Path) -> Result<RunSummary> {
    let mut log = String::new();
    let t_total = Instant::now();

    let t = Instant::now();
    let pings = io::read_pings_jsonl(&dataset.join("pings.jsonl"))?;
    if pings.is_empty() {
        return Err(Error::InvalidInput("dataset has no pings".into()));
    }
    for p in &pings {
        p.validate(cfg.sonar.bins_per_side)?;
    }
    let ping_index: HashMap<u64, usize> =
        pings.iter().enumerate().map(|(i, p)| (p.ping_id, i)).collect();
    log_stage(&mut log, "load_pings", t);

    let t = Instant::now();
    let lines = segment_lines(&pings);
    let images = prepare_images(&pings, &lines, cfg)?;
    log_stage(&mut log, "image_processing", t);

    // Graph with the (possibly strided) dead-reckoning chain.
    let t = Instant::now();
    let stride = cfg.graph.node_stride.max(1);
    let traj = strided_trajectory(&pings, stride);
    let node_of_ping: HashMap<u64, u64> = {
        // Nearest retained node per ping.
        let node_ids: Vec<u64> = traj.iter().map(|t| t.0).collect();
        let mut m = HashMap::new();
        let mut k = 0usize;
        for p in &pings {
            while k + 1 < node_ids.len()
                && ping_index[&node_ids[k + 1]].abs_diff(ping_index[&p.ping_id])
                    <= ping_index[&node_ids[k]].abs_diff(ping_index[&p.ping_id])
            {
                k += 1;
            }
            m.insert(p.ping_id, node_ids[k]);
            // Reset scan: ping ids are in index order, nodes too, so k only
            // moves forward.
        }
        m
    };
    let mut graph = PoseGraph::new();
    graph.add_odometry_chain(&traj, &cfg.estimation)?;
    log_stage(&mut log, "graph_chain", t);

    let t = Instant::now();
    let mut corr_records: Vec<CorrespondenceRecord> = Vec::new();
    let mut constraints: Vec<LoopClosureConstraint> = Vec::new();
    let mut landmarks: Vec<(u64, u64, Vector3<f64>)> = Vec::new();
    let mut pairs_checked = 0usize;
    let mut pairs_overlapping = 0usize;
    let mut candidates = 0usize;
    let mut inlier_count = 0usize;

    let assoc_cfg = crate::association::AssociationConfig {
        rng_seed: stream_seed(cfg.seed, 0x44, 0),
        ..cfg.association.clone()
    };

    let mut processed: Vec<usize> = Vec::new();
    for (idx, img) in images.iter().enumerate() {
        for &old_idx in &processed {
            let old = &images[old_idx];
            if old.image.side != img.image.side || old.line == img.line {
                continue;
            }
            pairs_checked += 1;
            let overlap = overlap_check(&img.image, &old.image, cfg.min_overlap_area)?;
            if !overlap.overlaps {
                continue;
            }
            pairs_overlapping += 1;
            let anti = anti_parallel_pair(img, old);
            let matches = match_near_neighbor(&img.keypoints, &old.keypoints, &assoc_cfg, anti);
            let inliers = sliding_compatibility_ransac(
                &matches,
                &assoc_cfg,
                anti.then_some(old.image.nrows()),
            );
            candidates += matches.len();
            inlier_count += inliers.len();

            let inlier_keys: std::collections::HashSet<(usize, usize, usize, usize)> = inliers
                .iter()
                .map(|c| (c.source.row, c.source.col, c.target.row, c.target.col))
                .collect();
            for m in &matches {
                let mut rec = CorrespondenceRecord::from_correspondence(m);
                rec.inlier =
                    inlier_keys.contains(&(m.source.row, m.source.col, m.target.row, m.target.col));
                corr_records.push(rec);
            }

            // One constraint per inlier, estimated in parallel from the same
            // warm-start, inserted in order.
            let results: Vec<Option<(LoopClosureConstraint, Vector3<f64>)>> = {
                use rayon::prelude::*;
                inliers
                    .par_iter()
                    .map(|c| constraint_for(cfg, &graph, &pings, &ping_index, &node_of_ping, c, img, old))
                    .collect::<Result<Vec<_>>>()?
            };
            let mut new_fids = Vec::new();
            for r in results.into_iter().flatten() {
                let (c, lm) = r;
                let fid = graph.add_loop_closure(&c, cfg.graph.lc_cov_scale)?;
                new_fids.push(fid);
                landmarks.push((c.ping_i, c.ping_j, lm));
                constraints.push(c);
            }
            if !new_fids.is_empty() {
                graph.optimize_incremental(&new_fids, &cfg.graph)?;
            }
        }
        processed.push(idx);
    }
    log_stage(&mut log, "association_and_constraints", t);

    let t = Instant::now();
    let solution = graph.optimize(&cfg.graph)?;
    log_stage(&mut log, "final_batch_solve", t);

    // Outputs.
    let t = Instant::now();
    io::write_correspondences_csv(&out_dir.join("correspondences.csv"), &corr_records)?;
    io::write_constraints_csv(
        &out_dir.join("constraints.csv"),
        &out_dir.join("constraints_cov.json"),
        &constraints,
    )?;
    io::write_landmarks_csv(&out_dir.join("landmarks.csv"), &landmarks)?;
    io::write_g2o(&out_dir.join("graph.g2o"), &graph)?;

    // Per-ping optimized trajectory: node estimate composed with the DR
    // increment from the node.
    let slam_rows: Vec<(u64, f64, Pose)> = pings
        .iter()
        .map(|p| {
            let node = node_of_ping[&p.ping_id];
            let dr_node = pings[ping_index[&node]].dr_pose;
            let est = graph.estimate(node).unwrap();
            (p.ping_id, p.time, est.compose(&dr_node.relative(&p.dr_pose)))
        })
        .collect();
    io::write_trajectory_csv(&out_dir.join("trajectory_slam.csv"), &slam_rows)?;

    let geoms: Vec<ImageGeometry> = images.iter().map(geometry_of).collect();
    let json = serde_json::to_string_pretty(&geoms).map_err(|e| Error::Parse {
        path: "images.json".into(),
        msg: e.to_string(),
    })?;
    std::fs::write(out_dir.join("images.json"), json)?;

    write_manifest(
        out_dir,
        "run",
        cfg,
        &[
            ("pings", pings.len() as u64),
            ("images", images.len() as u64),
            ("candidates", candidates as u64),
            ("inliers", inlier_count as u64),
            ("constraints", constraints.len() as u64),
        ],
    )?;
    log_stage(&mut log, "write_outputs", t);
    log_stage(&mut log, "total", t_total);
    log.push_str(&format!(
        "images {} pairs_checked {} overlapping {} candidates {} inliers {} constraints {} cost {}\n",
        images.len(),
        pairs_checked,
        pairs_overlapping,
        candidates,
        inlier_count,
        constraints.len(),
        solution.cost_after,
    ));
    std::fs::write(out_dir.join("run.log"), log)?;

    Ok(RunSummary {
        images: images.len(),
        pairs_checked,
        pairs_overlapping,
        candidates,
        inliers: inlier_count,
        constraints: constraints.len(),
        final_cost: solution.cost_after,
        results_dir: out_dir.to_path_buf(),
    })
}

fn anti_parallel_pair(a: &PreparedImage, b: &PreparedImage) -> bool {
    a.mean_heading.dot(&b.mean_heading) < 0.0
}

fn log_stage(log: &mut String, name: &str, t: Instant) {
    log.push_str(&format!("stage {} {:.3}s\n", name, t.elapsed().as_secs_f64()));
}

fn constraint_for(
    cfg: &PipelineConfig,
    graph: &PoseGraph,
    pings: &[Ping],
    ping_index: &HashMap<u64, usize>,
    node_of_ping: &HashMap<u64, u64>,
    c: &Correspondence,
    src_img: &PreparedImage,
    tgt_img: &PreparedImage,
) -> Result<Option<(LoopClosureConstraint, Vector3<f64>)>> {
    let src_ping = src_img.image.rows[c.source.row];
    let tgt_ping = tgt_img.image.rows[c.target.row];
    estimate_for_pixels(
        cfg,
        graph,
        pings,
        ping_index,
        node_of_ping,
        &c.target.geo,
        tgt_ping,
        tgt_img.image.ground_range(c.target.col),
        &c.source.geo,
        src_ping,
        src_img.image.ground_range(c.source.col),
    )
}

// ---------------------------------------------------------------------------
// eval

/// Compute the metric report for a finished run; optionally also evaluate a
/// SLAM solution driven by annotated correspondences.
pub fn cmd_eval(
    cfg: &PipelineConfig,
    dataset: &Path,
    results: &Path,
    annotated: Option<&Path>,
    out_dir: &Path,
) -> Result<MetricReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    with_pool(cfg.threads, || {
        cmd_eval_inner(cfg, dataset, results, annotated, out_dir)
    })
}

fn cmd_eval_inner(
    cfg: &PipelineConfig,
    dataset: &Path,
    results: &Path,
    annotated: Option<&Path>,
    out_dir: &Path,
) -> Result<MetricReport> {
    let map = io::read_heightmap(&dataset.join("heightmap.asc"))?;
    let pings = io::read_pings_jsonl(&dataset.join("pings.jsonl"))?;
    let truth = io::read_trajectory_csv(&dataset.join("truth.csv"))?;
    let slam = io::read_trajectory_csv(&results.join("trajectory_slam.csv"))?;
    let corrs_all = io::read_correspondences_csv(&results.join("correspondences.csv"))?;
    let geoms: Vec<ImageGeometry> = serde_json::from_str(
        &std::fs::read_to_string(results.join("images.json"))?,
    )
    .map_err(|e| Error::Parse {
        path: "images.json".into(),
        msg: e.to_string(),
    })?;
    let images: HashMap<u32, ImageGeometry> =
        geoms.into_iter().map(|g| (g.image_id, g)).collect();

    let altitudes: HashMap<u64, f64> = pings.iter().map(|p| (p.ping_id, p.altitude)).collect();
    let dr_poses: HashMap<u64, Pose> = pings.iter().map(|p| (p.ping_id, p.dr_pose)).collect();
    let slam_poses: HashMap<u64, Pose> = slam.iter().map(|r| (r.0, r.2)).collect();
    let truth_poses: HashMap<u64, Pose> = truth.iter().map(|r| (r.0, r.2)).collect();

    let inliers: Vec<CorrespondenceRecord> =
        corrs_all.iter().filter(|c| c.inlier).cloned().collect();

    let ctx_dr = EvalContext {
        map: &map,
        sonar: &cfg.sonar,
        poses: &dr_poses,
        altitudes: &altitudes,
    };
    let ctx_slam = EvalContext {
        map: &map,
        sonar: &cfg.sonar,
        poses: &slam_poses,
        altitudes: &altitudes,
    };
    let ctx_truth = EvalContext {
        map: &map,
        sonar: &cfg.sonar,
        poses: &truth_poses,
        altitudes: &altitudes,
    };

    let consistency_dr = landmark_consistency(&inliers, &images, &ctx_dr)?;
    let consistency_slam = landmark_consistency(&inliers, &images, &ctx_slam)?;

    let dr_traj: Vec<(u64, Pose)> = pings.iter().map(|p| (p.ping_id, p.dr_pose)).collect();
    let truth_traj: Vec<(u64, Pose)> = truth.iter().map(|r| (r.0, r.2)).collect();
    let slam_traj: Vec<(u64, Pose)> = slam.iter().map(|r| (r.0, r.2)).collect();
    let ate_dr = ate(&dr_traj, &truth_traj)?;
    let ate_slam = ate(&slam_traj, &truth_traj)?;

    // EPE against mesh baselines computed with the truth trajectory.
    let baselines: Vec<Option<(usize, usize)>> = {
        use rayon::prelude::*;
        inliers
            .par_iter()
            .map(|c| {
                let src = images.get(&c.src_image).ok_or_else(|| {
                    Error::InvalidInput(format!("unknown image {}", c.src_image))
                })?;
                let tgt = images.get(&c.tgt_image).ok_or_else(|| {
                    Error::InvalidInput(format!("unknown image {}", c.tgt_image))
                })?;
                baseline_correspondence(
                    &ctx_truth,
                    src,
                    c.src_row,
                    c.src_col,
                    tgt,
                    cfg.baseline_threshold,
                )
            })
            .collect::<Result<Vec<_>>>()?
    };
    let epe_report = crate::evaluation::epe(&inliers, &baselines)?;

    let depth = {
        let lm_path = results.join("landmarks.csv");
        if lm_path.exists() {
            let landmarks = io::read_landmarks_csv(&lm_path)?;
            Some(landmark_depth_error(&landmarks, &map))
        } else {
            None
        }
    };

    // Annotated-correspondence reference mode: run the estimation + graph
    // with the provided records as gospel and report its consistency.
    let consistency_annotated: Option<ConsistencyReport> = match annotated {
        Some(path) => {
            let records = io::read_correspondences_csv(path)?;
            let anno_traj = run_slam_on_records(cfg, &pings, &images, &records)?;
            let anno_poses: HashMap<u64, Pose> = anno_traj.into_iter().collect();
            let ctx = EvalContext {
                map: &map,
                sonar: &cfg.sonar,
                poses: &anno_poses,
                altitudes: &altitudes,
            };
            Some(landmark_consistency(&records, &images, &ctx)?)
        }
        None => None,
    };

    let report = MetricReport {
        consistency_dr,
        consistency_slam,
        ate_dr,
        ate_slam,
        epe: Some(epe_report),
        depth_error: depth,
        consistency_annotated,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Parse {
        path: "report.json".into(),
        msg: e.to_string(),
    })?;
    std::fs::write(out_dir.join("report.json"), json)?;
    report.write_csv_tables(out_dir)?;
    write_manifest(
        out_dir,
        "eval",
        cfg,
        &[("correspondences", inliers.len() as u64)],
    )?;
    Ok(report)
}

/// Build a SLAM trajectory from correspondence records alone (used for the
/// annotated reference mode): keypoint geometry is reconstructed from the
/// image geometry plus the dead-reckoning poses.
pub fn run_slam_on_records(
    cfg: &PipelineConfig,
    pings: &[Ping],
    images: &HashMap<u32, ImageGeometry>,
    records: &[CorrespondenceRecord],
) -> Result<Vec<(u64, Pose)>> {
    let ping_index: HashMap<u64, usize> =
        pings.iter().enumerate().map(|(i, p)| (p.ping_id, i)).collect();
    let node_of_ping: HashMap<u64, u64> = pings.iter().map(|p| (p.ping_id, p.ping_id)).collect();
    let traj: Vec<(u64, Pose)> = pings.iter().map(|p| (p.ping_id, p.dr_pose)).collect();
    let mut graph = PoseGraph::new();
    graph.add_odometry_chain(&traj, &cfg.estimation)?;

    let geo_of = |img: &ImageGeometry, row: usize, col: usize| -> Result<Vector3<f64>> {
        let ping = &pings[ping_index[&img.rows[row]]];
        let across = img.side.across_track(&ping.dr_pose.heading_vector());
        let g = img.ground_range(col);
        Ok(Vector3::new(
            ping.dr_pose.position.x + g * across.x,
            ping.dr_pose.position.y + g * across.y,
            ping.dr_pose.position.z + ping.altitude,
        ))
    };

    for rec in records {
        let src_img = images
            .get(&rec.src_image)
            .ok_or_else(|| Error::InvalidInput(format!("unknown image {}", rec.src_image)))?;
        let tgt_img = images
            .get(&rec.tgt_image)
            .ok_or_else(|| Error::InvalidInput(format!("unknown image {}", rec.tgt_image)))?;
        let src_geo = geo_of(src_img, rec.src_row, rec.src_col)?;
        let tgt_geo = geo_of(tgt_img, rec.tgt_row, rec.tgt_col)?;
        if let Some((c, _lm)) = estimate_for_pixels(
            cfg,
            &graph,
            pings,
            &ping_index,
            &node_of_ping,
            &tgt_geo,
            tgt_img.rows[rec.tgt_row],
            tgt_img.ground_range(rec.tgt_col),
            &src_geo,
            src_img.rows[rec.src_row],
            src_img.ground_range(rec.src_col),
        )? {
            graph.add_loop_closure(&c, cfg.graph.lc_cov_scale)?;
        }
    }
    graph.optimize(&cfg.graph)?;
    Ok(pings
        .iter()
        .map(|p| (p.ping_id, graph.estimate(p.ping_id).unwrap()))
        .collect())
}

// ---------------------------------------------------------------------------
// self tests exposed as commands

/// Max relative analytic-vs-finite-difference Jacobian error over seeded
/// random configurations.
pub fn cmd_jacobian_check(seed: u64, trials: usize) -> f64 {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let pose = Pose::from_heading(
            Vector3::new(
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
                rng.random_range(10.0..30.0),
            ),
            rng.random_range(0.0..std::f64::consts::TAU),
        );
        let offset = Pose::from_translation(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        );
        let lm = Vector3::new(
            rng.random_range(-120.0..120.0),
            rng.random_range(-120.0..120.0),
            rng.random_range(32.0..48.0),
        );
        if (lm - pose.position).norm() < 2.0 {
            continue;
        }
        worst = worst.max(check_jacobians(&pose, &offset, &lm));
    }
    worst
}

/// Optimize a standalone g2o-style file.
pub fn cmd_graph_solve(
    input: &Path,
    output: Option<&Path>,
    cfg: &crate::pose_graph::GraphConfig,
) -> Result<GraphSolution> {
    let mut graph = io::read_g2o(input)?;
    let solution = graph.optimize(cfg)?;
    if let Some(out) = output {
        io::write_g2o(out, &graph)?;
    }
    Ok(solution)
}

/// Convenience accessor used by tests: the heightmap of a dataset.
pub fn load_dataset_map(dataset: &Path) -> Result<Heightmap> {
    io::read_heightmap(&dataset.join("heightmap.asc"))
}
