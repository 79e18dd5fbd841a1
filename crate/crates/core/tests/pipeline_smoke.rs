//! End-to-end pipeline smoke tests on small synthetic surveys.

use sss_slam::config::PipelineConfig;
use sss_slam::evaluation::ate;
use sss_slam::io;
use sss_slam::pipeline::{cmd_eval, cmd_run, cmd_simulate};

fn small_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.seed = seed;
    cfg.survey.lines = 3;
    cfg.survey.line_length = 300.0;
    cfg.survey.line_spacing = 50.0;
    cfg
}

#[test]
fn simulate_run_eval_improves_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("dataset");
    let results = dir.path().join("results");
    let evaldir = dir.path().join("eval");

    let cfg = small_config(1);
    let sim = cmd_simulate(&cfg, &dataset).unwrap();
    println!(
        "simulated {} pings, drift {:.3}% of distance",
        sim.pings, sim.drift_percent
    );
    assert!(sim.pings > 1500);
    assert!((0.05..=0.5).contains(&sim.drift_percent));

    let run = cmd_run(&cfg, &dataset, &results).unwrap();
    println!(
        "images {} pairs checked {} overlapping {} candidates {} inliers {} constraints {}",
        run.images, run.pairs_checked, run.pairs_overlapping, run.candidates, run.inliers, run.constraints
    );
    assert_eq!(run.images, 6);
    assert!(run.pairs_overlapping >= 2, "no overlapping pairs found");
    assert!(run.candidates >= 5, "too few candidates: {}", run.candidates);
    assert!(run.constraints >= 3, "too few constraints: {}", run.constraints);

    let report = cmd_eval(&cfg, &dataset, &results, None, &evaldir).unwrap();
    println!(
        "ATE dr {:.3} slam {:.3}; consistency dr {:.3} slam {:.3} (skipped {})",
        report.ate_dr,
        report.ate_slam,
        report.consistency_dr.overall,
        report.consistency_slam.overall,
        report.consistency_dr.skipped
    );
    assert!(
        report.ate_slam < report.ate_dr,
        "SLAM ATE {} not better than DR {}",
        report.ate_slam,
        report.ate_dr
    );

    // Zero-drift sanity: the pipeline must leave a clean trajectory alone.
    let mut cfg0 = small_config(2);
    cfg0.drift = sss_slam::simulator::DriftModel::zero(2);
    let ds0 = dir.path().join("dataset0");
    let rs0 = dir.path().join("results0");
    cmd_simulate(&cfg0, &ds0).unwrap();
    cmd_run(&cfg0, &ds0, &rs0).unwrap();
    let truth = io::read_trajectory_csv(&ds0.join("truth.csv")).unwrap();
    let slam = io::read_trajectory_csv(&rs0.join("trajectory_slam.csv")).unwrap();
    let t: Vec<(u64, sss_slam::geometry::Pose)> = truth.iter().map(|r| (r.0, r.2)).collect();
    let s: Vec<(u64, sss_slam::geometry::Pose)> = slam.iter().map(|r| (r.0, r.2)).collect();
    let rmse = ate(&s, &t).unwrap();
    println!("zero-drift run RMSE vs truth: {:.4} m", rmse);
    assert!(rmse < 0.05, "zero-drift RMSE {}", rmse);
}
