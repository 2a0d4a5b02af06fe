//! Jittered trials for each policy, reduced to CDFs and written out.
//!
//! Usage: `cargo run --release --example latency_cdf [out_dir] [profile]`

use std::path::PathBuf;

use quicstep_lab::harness::{
    compute_cdf, emit, quantile, run_experiment, ExperimentConfig, Profile,
};

fn main() {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "cdf-out".into()));
    let profile = args
        .next()
        .and_then(|p| Profile::parse(&p))
        .unwrap_or(Profile::Ohio);
    let cfg = ExperimentConfig {
        legs: profile.legs(),
        trials: 100,
        ..ExperimentConfig::default()
    };
    let res = run_experiment(&cfg).unwrap();
    for (p, series) in compute_cdf(&res.samples) {
        let med = quantile(&res.samples, p, 0.5).unwrap_or_default();
        let p90 = quantile(&res.samples, p, 0.9).unwrap_or_default();
        println!(
            "{p:<9} {} steps, median {} us, p90 {} us, {} failures",
            series.points.len(),
            med,
            p90,
            series.failures
        );
    }
    let files = emit(&cfg, &res, &out).unwrap();
    println!("wrote {} files under {}", files.len(), out.display());
}
