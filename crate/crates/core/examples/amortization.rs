//! Completion time against transfer size: the hybrid policy pays a fixed
//! cost, full tunneling pays per window round.

use quicstep_lab::harness::{analytic_latency, run_experiment, ExperimentConfig};
use quicstep_lab::quicstep::PolicyMode;

fn main() {
    println!(
        "{:>10} {:>10} {:>10} {:>10} {:>12} {:>12}",
        "bytes", "native", "tunnel", "quicstep", "qs-native", "tun-native"
    );
    for size in [1_200, 100_000, 1_000_000, 5_000_000, 10_000_000] {
        let cfg = ExperimentConfig {
            file_size: size,
            trials: 1,
            jitter_pct: 0.0,
            ..ExperimentConfig::default()
        };
        let res = run_experiment(&cfg).unwrap();
        let [n, t, q] = PolicyMode::ALL.map(|p| {
            let sim = res.completion(p, 0).unwrap();
            assert_eq!(sim, analytic_latency(p, &cfg));
            sim / 1000
        });
        println!(
            "{size:>10} {n:>8}ms {t:>8}ms {q:>8}ms {:>10}ms {:>10}ms",
            q - n,
            t - n
        );
    }
}
