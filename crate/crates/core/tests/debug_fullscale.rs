//! Diagnostic (ignored): default-survey-scale end-to-end run.

use sss_slam::config::PipelineConfig;
use sss_slam::pipeline::{cmd_eval, cmd_run, cmd_simulate};

#[test]
#[ignore]
fn fullscale_run() {
    let seed: u64 = std::env::var("SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(1);
    let keep: Option<std::path::PathBuf> = std::env::var("OUT").ok().map(Into::into);
    let dir = tempfile::tempdir().unwrap();
    let base = keep.unwrap_or_else(|| dir.path().to_path_buf());
    let dataset = base.join("dataset");
    let results = base.join("results");
    let evaldir = base.join("eval");
    let mut cfg = PipelineConfig::default();
    cfg.seed = seed;

    let t = std::time::Instant::now();
    let sim = cmd_simulate(&cfg, &dataset).unwrap();
    println!("simulate: {} pings, drift {:.3}%, {:.1}s", sim.pings, sim.drift_percent, t.elapsed().as_secs_f64());

    let t = std::time::Instant::now();
    let run = cmd_run(&cfg, &dataset, &results).unwrap();
    println!(
        "run: images {} pairs {} overlapping {} candidates {} inliers {} constraints {} ({:.1}s)",
        run.images, run.pairs_checked, run.pairs_overlapping, run.candidates, run.inliers,
        run.constraints, t.elapsed().as_secs_f64()
    );

    let t = std::time::Instant::now();
    let report = cmd_eval(&cfg, &dataset, &results, None, &evaldir).unwrap();
    println!(
        "eval ({:.1}s): ATE dr {:.3} slam {:.3} (ratio {:.2}); consistency dr {:.3} slam {:.3} (ratio {:.2})",
        t.elapsed().as_secs_f64(),
        report.ate_dr,
        report.ate_slam,
        report.ate_slam / report.ate_dr,
        report.consistency_dr.overall,
        report.consistency_slam.overall,
        report.consistency_slam.overall / report.consistency_dr.overall,
    );
    if let Some(e) = &report.epe {
        println!("epe: u {:.2} v {:.2} (no baseline: {})", e.overall_u, e.overall_v, e.without_baseline);
    }
}
