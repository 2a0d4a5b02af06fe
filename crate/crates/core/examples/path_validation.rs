//! How long the server waits on the new direct path before sending data.

use quicstep_lab::harness::acceptance::validation_timing;
use quicstep_lab::harness::ExperimentConfig;

fn main() {
    let cfg = ExperimentConfig::default();
    for trial in 0..5 {
        let lab = cfg.lab_config(trial);
        let (arrival, first, rtt) = validation_timing(lab).expect("lossless fetch succeeds");
        println!("trial {trial}: first direct packet {arrival} us, first data {first} us, gap {} us, direct rtt {rtt} us", first - arrival);
    }
}
