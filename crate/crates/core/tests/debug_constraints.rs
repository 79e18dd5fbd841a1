//! Diagnostic (ignored): accepted-constraint error vs estimator cost, to
//! calibrate the false-match gates.

use sss_slam::config::PipelineConfig;
use sss_slam::estimation::{
    estimate_relative_pose, init_landmark, slant_range_of, TwoPingInputs,
};
use sss_slam::geometry::Pose;
use sss_slam::io;
use sss_slam::pipeline::{cmd_run, cmd_simulate};
use std::collections::HashMap;

#[test]
#[ignore]
fn constraint_error_vs_cost() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("dataset");
    let results = dir.path().join("results");
    let mut cfg = PipelineConfig::default();
    cfg.seed = 1;
    cfg.survey.lines = 3;
    cfg.survey.line_length = 300.0;
    cfg.survey.line_spacing = 50.0;

    cmd_simulate(&cfg, &dataset).unwrap();
    cmd_run(&cfg, &dataset, &results).unwrap();

    let pings = io::read_pings_jsonl(&dataset.join("pings.jsonl")).unwrap();
    let truth = io::read_trajectory_csv(&dataset.join("truth.csv")).unwrap();
    let corrs = io::read_correspondences_csv(&results.join("correspondences.csv")).unwrap();
    let geoms: Vec<sss_slam::evaluation::ImageGeometry> =
        serde_json::from_str(&std::fs::read_to_string(results.join("images.json")).unwrap())
            .unwrap();
    let images: HashMap<u32, _> = geoms.into_iter().map(|g| (g.image_id, g)).collect();
    let ping_ix: HashMap<u64, usize> =
        pings.iter().enumerate().map(|(i, p)| (p.ping_id, i)).collect();
    let truth_poses: HashMap<u64, Pose> = truth.iter().map(|r| (r.0, r.2)).collect();

    // Re-estimate every inlier exactly as the pipeline does (DR warm start)
    // and compare the constraint against the truth relative pose.
    let mut rows = Vec::new();
    for c in corrs.iter().filter(|c| c.inlier) {
        let src = &images[&c.src_image];
        let tgt = &images[&c.tgt_image];
        let sp = &pings[ping_ix[&src.rows[c.src_row]]];
        let tp = &pings[ping_ix[&tgt.rows[c.tgt_row]]];
        let geo = |img: &sss_slam::evaluation::ImageGeometry, ping: &sss_slam::sonar_image::Ping, col: usize| {
            let across = img.side.across_track(&ping.dr_pose.heading_vector());
            let g = img.ground_range(col);
            nalgebra::Vector3::new(
                ping.dr_pose.position.x + g * across.x,
                ping.dr_pose.position.y + g * across.y,
                ping.dr_pose.position.z + ping.altitude,
            )
        };
        let src_geo = geo(src, sp, c.src_col);
        let tgt_geo = geo(tgt, tp, c.tgt_col);
        let lm = init_landmark(
            &src_geo,
            &tgt_geo,
            (&sp.dr_pose, sp.altitude),
            (&tp.dr_pose, tp.altitude),
            &cfg.estimation,
        );
        let inputs = TwoPingInputs {
            ping_i: tp.ping_id,
            ping_j: sp.ping_id,
            pose_i: tp.dr_pose,
            pose_j: sp.dr_pose,
            odo_rel: tp.dr_pose.relative(&sp.dr_pose),
            odo_distance: (sp.dr_pose.position - tp.dr_pose.position).norm(),
            range_i: slant_range_of(tgt.ground_range(c.tgt_col), tp.altitude),
            range_j: slant_range_of(src.ground_range(c.src_col), sp.altitude),
            landmark: lm,
            sonar: &cfg.sonar,
            cfg: &cfg.estimation,
        };
        let est = estimate_relative_pose(&inputs).unwrap();
        if !est.constraint.converged {
            continue;
        }
        let truth_rel = truth_poses[&tp.ping_id].relative(&truth_poses[&sp.ping_id]);
        let err = (est.constraint.relative.position - truth_rel.position).norm();
        // Whitened odometry deviation of the final relative pose.
        let odo_dev = (est.constraint.relative.position - inputs.odo_rel.position).norm()
            / (cfg.estimation.odo_trans_var_per_m * inputs.odo_distance).sqrt();
        rows.push((err, est.constraint.final_cost, odo_dev, est.max_meas_residual_sigmas, est.gated));
    }
    rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    println!("err_m  cost  odo_dev_sigma  meas_sigma gated");
    for (e, c, o, m, g) in &rows {
        println!("{:6.2} {:8.2} {:8.2} {:8.2} {}", e, c, o, m, g);
    }
    let good = rows.iter().filter(|r| r.0 < 1.0).count();
    println!("{} constraints, {} with error < 1 m", rows.len(), good);
}
