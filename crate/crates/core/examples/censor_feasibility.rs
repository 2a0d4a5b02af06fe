//! A censor that drops every long-header packet: native QUIC cannot finish
//! a handshake, the hybrid policy never shows it one.

use quicstep_lab::harness::{run_experiment, ExperimentConfig};
use quicstep_lab::middlebox::{CensorConfig, CensorMode};
use quicstep_lab::quicstep::PolicyMode;

fn main() {
    let cfg = ExperimentConfig {
        trials: 50,
        file_size: 50_000,
        censor: CensorConfig::off().with_mode(CensorMode::DropAllHandshake),
        ..ExperimentConfig::default()
    };
    let res = run_experiment(&cfg).unwrap();
    for p in PolicyMode::ALL {
        let reasons: Vec<_> = res.for_policy(p).filter_map(|s| s.reason).collect();
        println!(
            "{p:<9} {}/{} ok, failures {:?}",
            res.successes(p),
            cfg.trials,
            reasons.first()
        );
        let c = res.counters[&p];
        println!(
            "          censor forwarded {} dropped {}",
            c.forwarded,
            c.dropped()
        );
    }
}
