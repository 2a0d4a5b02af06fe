//! Hostname blocklisting by reading the ClientHello out of Initial packets.

use quicstep_lab::middlebox::{CensorConfig, CensorMode};
use quicstep_lab::quicstep::{Lab, LabConfig, PolicyMode};

fn main() {
    let censor = CensorConfig::parse("mode sni-blocklist\nsni blocked.example\n").unwrap();
    assert!(censor.has(CensorMode::SniBlocklist));
    for (mode, host) in [
        (PolicyMode::Native, "allowed.example"),
        (PolicyMode::Native, "blocked.example"),
        (PolicyMode::Quicstep, "blocked.example"),
    ] {
        let mut lab = Lab::build(LabConfig {
            censor: censor.clone(),
            file_size: 10_000,
            ..LabConfig::default()
        })
        .unwrap();
        let req = lab.request(mode).hostname(host);
        let out = lab.fetch(req).unwrap();
        let c = lab.censor().state.counters;
        println!(
            "{mode:<9} {host:<16} success={:<5} failure={:?} sni drops={}",
            out.success, out.failure, c.sni
        );
    }
}
