//! One hybrid fetch, printed as the simulator's trace: DNS and handshake
//! go through the tunnel, then the connection migrates to the direct path.

use quicstep_lab::quicstep::{Lab, LabConfig, PolicyMode};

fn main() {
    let mut lab = Lab::build(LabConfig {
        file_size: 3000,
        seed: 3,
        ..LabConfig::default()
    })
    .unwrap();
    let req = lab.request(PolicyMode::Quicstep);
    let out = lab.fetch(req).unwrap();
    print!("{}", lab.sim.export_trace());
    println!(
        "\nsuccess={} dns={:?} handshake={:?} first_byte={:?} done={:?} migrations={}",
        out.success,
        out.dns_time,
        out.handshake_time,
        out.first_byte_time,
        out.completion_time,
        out.migrations
    );
    println!("trace digest {}", lab.sim.trace_digest());
}
