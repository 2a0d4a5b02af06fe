//! A censor that drops short-header packets whose connection ID it never saw
//! in a handshake. It stops the hybrid policy, and also a legitimate client
//! that roams in from a network the censor does not watch.

use quicstep_lab::middlebox::{CensorConfig, CensorMode};
use quicstep_lab::quicstep::{FetchRequest, Lab, LabConfig, PolicyMode};

fn main() {
    let censor = CensorConfig::off().with_mode(CensorMode::MigrationBlock);
    let cases = [
        ("native", PolicyMode::Native, false),
        ("quicstep", PolicyMode::Quicstep, false),
        ("roamer", PolicyMode::Native, true),
    ];
    for (label, mode, roam) in cases {
        let mut lab = Lab::build(LabConfig {
            censor: censor.clone(),
            file_size: 10_000,
            ..LabConfig::default()
        })
        .unwrap();
        let req = FetchRequest {
            roam,
            ..lab.request(mode)
        };
        let out = lab.fetch(req).unwrap();
        println!(
            "{label:<9} success={:<5} handshake={:?} unknown-cid drops={}",
            out.success,
            out.handshake_time,
            lab.censor().state.counters.unknown_cid
        );
    }
}
