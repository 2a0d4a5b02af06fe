//! The pinned acceptance criteria, each returning a pass/fail line.
//!
//! Every check builds its own labs with fixed parameters; only the base
//! seed comes from the caller.

use std::collections::BTreeSet;
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{analytic_latency, run_experiment, ExperimentConfig, Profile};
use crate::middlebox::{extract_sni, inspect, CensorConfig, CensorMode, CensorState, Verdict};
use crate::netsim::Micros;
use crate::quicstep::{
    random_file, FetchFailure, FetchRequest, Lab, LabConfig, Leg, PolicyMode, CLIENT_DIRECT_PORT,
    DEFAULT_HOSTNAME,
};
use crate::wire::{
    decode_packet, encode_packet, initial_keystream, session_keystream, tunnel_encap, Addr,
    ConnectionId, Decoded, Direction, DnsMessage, Frame, FrameType, HandshakeMessage, Header,
    LongType, Packet, MAX_PACKET_SIZE, QUIC_VERSION,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CriterionResult {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CriterionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}. {}: {}", self.id, self.name, self.detail)
    }
}

fn result(id: u8, name: &'static str, failures: Vec<String>, ok_detail: String) -> CriterionResult {
    let passed = failures.is_empty();
    let detail = if passed {
        ok_detail
    } else {
        failures.join("; ")
    };
    CriterionResult {
        id,
        name,
        passed,
        detail,
    }
}

fn base(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        file_size: 20_000,
        ..ExperimentConfig::default()
    }
}

fn lab(seed: u64, censor: CensorConfig, file_size: usize) -> Lab {
    Lab::build(LabConfig {
        seed,
        censor,
        file_size,
        capture: true,
        ..LabConfig::default()
    })
    .expect("standard topology")
}

/// Handshake-blocking censor: native fails on timeout every trial, the
/// hybrid policy succeeds every trial.
pub fn feasibility(seed: u64) -> CriterionResult {
    let cfg = ExperimentConfig {
        trials: 50,
        policies: vec![PolicyMode::Native, PolicyMode::Quicstep],
        censor: CensorConfig::off().with_mode(CensorMode::DropAllHandshake),
        ..base(seed)
    };
    let mut fails = Vec::new();
    match run_experiment(&cfg) {
        Ok(res) => {
            let native_ok = res.successes(PolicyMode::Native);
            let native_timeouts = res
                .for_policy(PolicyMode::Native)
                .filter(|s| s.reason == Some(FetchFailure::Timeout))
                .count();
            let qs_ok = res.successes(PolicyMode::Quicstep);
            if native_ok != 0 || native_timeouts != 50 {
                fails.push(format!(
                    "native {native_ok}/50 succeeded, {native_timeouts}/50 timed out"
                ));
            }
            if qs_ok != 50 {
                fails.push(format!("quicstep {qs_ok}/50 succeeded"));
            }
        }
        Err(e) => fails.push(e.to_string()),
    }
    result(
        1,
        "handshake-blocking feasibility",
        fails,
        "native 0/50 (timeout), quicstep 50/50".into(),
    )
}

/// Hostname blocklist: only the blocked native fetch fails.
pub fn sni_feasibility(seed: u64) -> CriterionResult {
    let censor = CensorConfig::off()
        .with_mode(CensorMode::SniBlocklist)
        .block_sni("blocked.example");
    let cases = [
        (PolicyMode::Native, "blocked.example", false),
        (PolicyMode::Native, "allowed.example", true),
        (PolicyMode::Quicstep, "blocked.example", true),
    ];
    let mut fails = Vec::new();
    let mut sni_drops = 0;
    for (mode, host, want) in cases {
        let mut l = lab(seed, censor.clone(), 20_000);
        let req = l.request(mode).hostname(host);
        let out = l.fetch(req).expect("fresh lab");
        if out.success != want {
            fails.push(format!(
                "{mode} {host}: success={} want {want}",
                out.success
            ));
        }
        sni_drops += l.censor().state.counters.sni;
    }
    if sni_drops == 0 {
        fails.push("censor never matched a hostname".into());
    }
    result(
        2,
        "hostname-blocklist feasibility",
        fails,
        format!(
            "native blocked fails, native allowed ok, quicstep blocked ok ({sni_drops} sni drops)"
        ),
    )
}

/// Hostnames recovered by the censor's own parsers from one payload.
/// Both parsers run on every payload.
pub fn audit_payload(bytes: &[u8]) -> Vec<String> {
    let mut out = Vec::new();
    if let Ok(report) = extract_sni(bytes) {
        out.extend(report.sni);
    }
    if let Ok(msg) = DnsMessage::decode(bytes) {
        out.push(msg.hostname);
    }
    out
}

/// Nothing crossing the censor under the hybrid policy names a host.
pub fn censor_visibility(seed: u64) -> CriterionResult {
    let modes: Vec<(&str, CensorConfig)> = vec![
        ("off", CensorConfig::off()),
        (
            "drop-all-handshake",
            CensorConfig::off().with_mode(CensorMode::DropAllHandshake),
        ),
        (
            "sni-blocklist",
            CensorConfig::off()
                .with_mode(CensorMode::SniBlocklist)
                .block_sni(DEFAULT_HOSTNAME),
        ),
        (
            "dns-filter",
            CensorConfig::off()
                .with_mode(CensorMode::DnsFilter)
                .block_dns(DEFAULT_HOSTNAME),
        ),
    ];
    let mut fails = Vec::new();
    let mut datagrams = 0;
    let mut runs = 0;
    for (name, censor) in &modes {
        for trial in 0..5u64 {
            let mut l = lab(seed ^ trial, censor.clone(), 20_000);
            let req = l.request(PolicyMode::Quicstep);
            let out = l.fetch(req).expect("fresh lab");
            runs += 1;
            if !out.success {
                fails.push(format!("{name} trial {trial}: quicstep fetch failed"));
            }
            for (t, d, _) in l.censor().captured() {
                datagrams += 1;
                let seen = audit_payload(&d.payload);
                if !seen.is_empty() {
                    fails.push(format!("{name} trial {trial}: {seen:?} visible at {t}us"));
                }
            }
        }
    }
    // the audit must be able to see hostnames when they are there
    let mut l = lab(seed, CensorConfig::off(), 20_000);
    let req = l.request(PolicyMode::Native);
    l.fetch(req).expect("fresh lab");
    let control: BTreeSet<String> = l
        .censor()
        .captured()
        .iter()
        .flat_map(|(_, d, _)| audit_payload(&d.payload))
        .collect();
    if !control.contains(DEFAULT_HOSTNAME) {
        fails.push(format!(
            "native control exposed {control:?}, expected {DEFAULT_HOSTNAME}"
        ));
    }
    if datagrams == 0 {
        fails.push("censor captured nothing".into());
    }
    result(
        3,
        "censor visibility audit",
        fails,
        format!("{runs} quicstep runs, {datagrams} datagrams, 0 hostnames; native control exposes {DEFAULT_HOSTNAME}"),
    )
}

/// Direct-path timing of one hybrid fetch: (first direct arrival at the
/// server, first direct application byte sent, direct RTT).
pub fn validation_timing(lab_cfg: LabConfig) -> Option<(Micros, Micros, Micros)> {
    let mut l = Lab::build(lab_cfg).ok()?;
    let req = l.request(PolicyMode::Quicstep);
    let out = l.fetch(req).ok()?;
    if !out.success {
        return None;
    }
    let direct = Addr::new(l.nodes.client, CLIENT_DIRECT_PORT);
    let srv = l.server();
    let arrival = srv.rx_log.iter().find(|r| r.remote == direct)?.time;
    let first = srv
        .tx_log
        .iter()
        .find(|t| t.remote == direct && t.frames.contains(&FrameType::Stream))?
        .time;
    Some((arrival, first, l.cfg.legs.rtt_direct()))
}

/// Migration costs exactly one direct round trip before data flows.
pub fn path_validation_cost(seed: u64) -> CriterionResult {
    let cfg = base(seed);
    let mut fails = Vec::new();
    let mut deltas = Vec::new();
    for trial in 0..10 {
        match validation_timing(cfg.lab_config(trial)) {
            Some((arrival, first, rtt)) => {
                let delta = first as i64 - arrival as i64 - rtt as i64;
                deltas.push(delta);
                if delta.abs() > 1 {
                    fails.push(format!(
                        "trial {trial}: data {first} - arrival {arrival} - rtt {rtt} = {delta}us"
                    ));
                }
            }
            None => fails.push(format!("trial {trial}: no direct-path data observed")),
        }
    }
    result(
        4,
        "path-validation cost",
        fails,
        format!("10 jittered trials, residuals {deltas:?} us (tolerance 1)"),
    )
}

fn within(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs().max(1.0)
}

fn idx(m: PolicyMode) -> usize {
    PolicyMode::ALL
        .iter()
        .position(|q| *q == m)
        .expect("listed")
}

fn completions(cfg: &ExperimentConfig) -> Result<[Micros; 3], String> {
    let res = run_experiment(cfg).map_err(|e| e.to_string())?;
    let mut out = [0; 3];
    for (i, p) in PolicyMode::ALL.iter().enumerate() {
        out[i] = res
            .completion(*p, 0)
            .ok_or_else(|| format!("{p} failed at {} bytes", cfg.file_size))?;
    }
    Ok(out)
}

/// Hybrid overhead is constant in the transfer size; full tunneling is not.
pub fn amortization(seed: u64) -> CriterionResult {
    let mut fails = Vec::new();
    let mut overhead = Vec::new();
    let mut tunnel = Vec::new();
    for size in [1_000_000, 10_000_000] {
        let cfg = ExperimentConfig {
            file_size: size,
            trials: 1,
            jitter_pct: 0.0,
            ..base(seed)
        };
        let sim = match completions(&cfg) {
            Ok(c) => c,
            Err(e) => {
                fails.push(e);
                continue;
            }
        };
        for (i, p) in PolicyMode::ALL.iter().enumerate() {
            let oracle = analytic_latency(*p, &cfg);
            if !within(sim[i] as f64, oracle as f64, 0.01) {
                fails.push(format!("{p} at {size}: sim {} oracle {}", sim[i], oracle));
            }
        }
        let native = sim[idx(PolicyMode::Native)] as f64;
        overhead.push(sim[idx(PolicyMode::Quicstep)] as f64 - native);
        tunnel.push(sim[idx(PolicyMode::FullTunnel)] as f64 - native);
    }
    if overhead.len() == 2 {
        if !within(overhead[1], overhead[0], 0.01) {
            fails.push(format!(
                "quicstep overhead {} at 1MB vs {} at 10MB",
                overhead[0], overhead[1]
            ));
        }
        if tunnel[1] < 5.0 * tunnel[0] {
            fails.push(format!(
                "tunnel overhead grew {:.2}x, need 5x",
                tunnel[1] / tunnel[0]
            ));
        }
    }
    let ratio = if tunnel.len() == 2 {
        tunnel[1] / tunnel[0]
    } else {
        f64::NAN
    };
    result(
        5,
        "amortization",
        fails,
        format!("quicstep overhead {:?} us, tunnel overhead grows {ratio:.2}x, sims within 1% of oracle", overhead),
    )
}

/// A farther proxy costs the hybrid policy two extra tunnel round trips.
pub fn proxy_distance(seed: u64) -> CriterionResult {
    let mut fails = Vec::new();
    let run = |p: Profile| {
        let cfg = ExperimentConfig {
            legs: p.legs(),
            trials: 1,
            jitter_pct: 0.0,
            file_size: 1_000_000,
            ..base(seed)
        };
        completions(&cfg)
    };
    let mut detail = String::new();
    match (run(Profile::Ohio), run(Profile::Oregon)) {
        (Ok(near), Ok(far)) => {
            let d_rtt = Profile::Oregon.legs().rtt_tunnel() as f64
                - Profile::Ohio.legs().rtt_tunnel() as f64;
            let qs = far[idx(PolicyMode::Quicstep)] as f64 - near[idx(PolicyMode::Quicstep)] as f64;
            let native = far[idx(PolicyMode::Native)] as f64 - near[idx(PolicyMode::Native)] as f64;
            if !within(qs, 2.0 * d_rtt, 0.01) {
                fails.push(format!("quicstep grew {qs}us, expected {}us", 2.0 * d_rtt));
            }
            if native != 0.0 {
                fails.push(format!("native changed by {native}us"));
            }
            detail = format!("quicstep +{qs}us for tunnel RTT +{d_rtt}us, native +{native}us");
        }
        (a, b) => fails.extend([a.err(), b.err()].into_iter().flatten()),
    }
    result(6, "proxy-distance sensitivity", fails, detail)
}

/// Blocking unseen connection IDs stops the hybrid policy and a legitimate
/// roamer alike, while leaving plain clients alone.
pub fn migration_block(seed: u64) -> CriterionResult {
    let mb = CensorConfig::off().with_mode(CensorMode::MigrationBlock);
    let mut fails = Vec::new();
    for trial in 0..5u64 {
        let s = seed ^ trial;
        let run = |censor: &CensorConfig, mode: PolicyMode, roam: bool| {
            let mut l = lab(s, censor.clone(), 20_000);
            let req = FetchRequest {
                roam,
                ..l.request(mode)
            };
            let out = l.fetch(req).expect("fresh lab");
            (out, l.censor().state.counters.unknown_cid)
        };
        let (qs, qs_drops) = run(&mb, PolicyMode::Quicstep, false);
        if qs.success || qs_drops == 0 {
            fails.push(format!(
                "trial {trial}: quicstep success={} unknown-cid drops={qs_drops}",
                qs.success
            ));
        }
        let (roam, roam_drops) = run(&mb, PolicyMode::Native, true);
        if roam.success || roam.handshake_time.is_none() || roam_drops == 0 {
            fails.push(format!(
                "trial {trial}: roamer success={} handshake={:?} unknown-cid drops={roam_drops}",
                roam.success, roam.handshake_time
            ));
        }
        let (native, native_drops) = run(&mb, PolicyMode::Native, false);
        if !native.success || native_drops != 0 {
            fails.push(format!(
                "trial {trial}: native control success={} drops={native_drops}",
                native.success
            ));
        }
        let (roam_free, _) = run(&CensorConfig::off(), PolicyMode::Native, true);
        if !roam_free.success {
            fails.push(format!(
                "trial {trial}: roamer failed without the censor rule"
            ));
        }
    }
    result(
        7,
        "migration blocking",
        fails,
        "5 trials: quicstep and roamer dropped on unknown CID; native and unblocked roamer succeed"
            .into(),
    )
}

fn random_cid<R: Rng>(rng: &mut R) -> ConnectionId {
    ConnectionId::random(rng)
}

fn random_bytes<R: Rng>(rng: &mut R, max: usize) -> Vec<u8> {
    let n = rng.gen_range(0..=max);
    let mut v = vec![0; n];
    rng.fill_bytes(&mut v);
    v
}

fn random_frame<R: Rng>(rng: &mut R, long: bool) -> Frame {
    let pick = if long {
        rng.gen_range(0..2)
    } else {
        rng.gen_range(1..7)
    };
    match pick {
        0 => Frame::Crypto {
            offset: rng.gen(),
            data: random_bytes(rng, 200),
        },
        1 => Frame::Ack {
            largest_acked: rng.gen(),
            acked: (0..rng.gen_range(0..10)).map(|_| rng.gen()).collect(),
        },
        2 => Frame::Stream {
            stream_id: rng.gen(),
            offset: rng.gen(),
            fin: rng.gen(),
            data: random_bytes(rng, 300),
        },
        3 => Frame::PathChallenge { data: rng.gen() },
        4 => Frame::PathResponse { data: rng.gen() },
        5 => Frame::HandshakeDone,
        _ => Frame::NewConnectionId {
            seq: rng.gen(),
            cid: random_cid(rng),
        },
    }
}

/// A well-formed packet with random header fields and 1 to 4 frames.
pub fn random_packet<R: Rng>(rng: &mut R) -> Packet {
    let header = if rng.gen() {
        let ty = if rng.gen() {
            LongType::Initial
        } else {
            LongType::Handshake
        };
        Header::Long {
            ty,
            version: QUIC_VERSION,
            dcid: random_cid(rng),
            scid: random_cid(rng),
            pn: rng.gen(),
        }
    } else {
        Header::Short {
            dcid: random_cid(rng),
            pn: rng.gen(),
        }
    };
    let long = matches!(header, Header::Long { .. });
    let frames = (0..rng.gen_range(1..=4))
        .map(|_| random_frame(rng, long))
        .collect();
    Packet { header, frames }
}

/// Encodes and decodes one random packet; `Err` describes a mismatch.
pub fn codec_roundtrip<R: Rng>(rng: &mut R) -> Result<(), String> {
    let p = random_packet(rng);
    if p.encoded_len() > MAX_PACKET_SIZE {
        return if encode_packet(&p, &[0; MAX_PACKET_SIZE]).is_err() {
            Ok(())
        } else {
            Err("oversize accepted".into())
        };
    }
    let ks = match p.header {
        Header::Long {
            ty: LongType::Initial,
            dcid,
            ..
        } => initial_keystream(&dcid, p.payload_len()),
        _ => session_keystream(
            rng.gen(),
            &rng.gen(),
            &rng.gen(),
            Direction::ServerToClient,
            p.header.packet_number(),
            p.payload_len(),
        ),
    };
    let bytes = encode_packet(&p, &ks).map_err(|e| format!("encode: {e}"))?;
    if bytes.len() != p.encoded_len() {
        return Err(format!(
            "length {} vs predicted {}",
            bytes.len(),
            p.encoded_len()
        ));
    }
    match decode_packet(&bytes, &ks).map_err(|e| format!("decode: {e}"))? {
        Decoded::Packet(q) if q == p => {}
        other => return Err(format!("roundtrip mismatch: {other:?}")),
    }
    // a wrong key must never yield frames
    let mut wrong = ks.clone();
    wrong[0] ^= 1;
    match decode_packet(&bytes, &wrong) {
        Ok(Decoded::Opaque(_)) => Ok(()),
        other => Err(format!("wrong key produced {other:?}")),
    }
}

/// A datagram for the censor: random bytes, a mutated valid packet or a
/// truncated one.
pub fn fuzz_datagram<R: Rng>(rng: &mut R) -> Vec<u8> {
    let p = random_packet(rng);
    let ks = vec![0x5a; p.payload_len()];
    let valid = encode_packet(&p, &ks).unwrap_or_default();
    let hello = HandshakeMessage::ClientHello {
        sni: DEFAULT_HOSTNAME.into(),
        client_random: rng.gen(),
        client_dh_pub: rng.gen(),
        disable_active_migration: rng.gen(),
    };
    match rng.gen_range(0..5) {
        0 => random_bytes(rng, 1400),
        1 => {
            let mut v = valid;
            for _ in 0..rng.gen_range(1..8) {
                if !v.is_empty() {
                    let i = rng.gen_range(0..v.len());
                    v[i] = rng.gen();
                }
            }
            v
        }
        2 => {
            let cut = rng.gen_range(0..=valid.len());
            valid[..cut].to_vec()
        }
        3 => {
            let mut v = DnsMessage::query(rng.gen(), DEFAULT_HOSTNAME)
                .encode()
                .unwrap_or_default();
            v.truncate(rng.gen_range(0..=v.len()));
            v
        }
        _ => {
            let dcid = random_cid(rng);
            let data = hello.encode().unwrap_or_default();
            let init = Packet {
                header: Header::Long {
                    ty: LongType::Initial,
                    version: QUIC_VERSION,
                    dcid,
                    scid: random_cid(rng),
                    pn: 0,
                },
                frames: vec![Frame::Crypto {
                    offset: rng.gen_range(0..4),
                    data,
                }],
            };
            let mut v = encode_packet(&init, &initial_keystream(&dcid, init.payload_len()))
                .unwrap_or_default();
            if rng.gen() && !v.is_empty() {
                let i = rng.gen_range(0..v.len());
                v[i] ^= 1 << rng.gen_range(0..8);
            }
            v
        }
    }
}

/// Reliable delivery under loss on one randomly chosen leg.
pub fn lossy_transfer(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mode = *PolicyMode::ALL.choose(&mut rng).expect("nonempty");
    let legs: &[Leg] = match mode {
        PolicyMode::Native => &[Leg::ClientCensor, Leg::CensorServer],
        PolicyMode::FullTunnel => &[Leg::ClientCensor, Leg::CensorProxy, Leg::ProxyServer],
        PolicyMode::Quicstep => &[Leg::ClientCensor, Leg::CensorServer, Leg::CensorProxy],
    };
    let leg = *legs.choose(&mut rng).expect("nonempty");
    let loss = rng.gen_range(0.005..=0.05);
    let size = rng.gen_range(1..=60_000);
    let cfg = LabConfig {
        seed,
        loss_rate: loss,
        lossy_legs: vec![leg],
        file_size: size,
        max_retries: 12,
        ..LabConfig::default()
    };
    let mut l = Lab::build(cfg).map_err(|e| e.to_string())?;
    let req = FetchRequest {
        keep_response: true,
        ..l.request(mode)
    };
    let out = l.fetch(req).map_err(|e| e.to_string())?;
    let ctx = format!("{mode} {leg:?} loss {loss:.3} size {size}");
    if !out.success {
        return Err(format!("{ctx}: failed with {:?}", out.failure));
    }
    if out.response.as_deref() != Some(&random_file(seed, size)[..]) {
        return Err(format!("{ctx}: response corrupted"));
    }
    Ok(())
}

/// Trace digest of one scenario drawn from `seed`.
pub fn scenario_digest(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mode = *PolicyMode::ALL.choose(&mut rng).expect("nonempty");
    let censor = match rng.gen_range(0..4) {
        0 => CensorConfig::off(),
        1 => CensorConfig::off().with_mode(CensorMode::DropAllHandshake),
        2 => CensorConfig::off()
            .with_mode(CensorMode::SniBlocklist)
            .block_sni(DEFAULT_HOSTNAME),
        _ => CensorConfig::off().with_mode(CensorMode::MigrationBlock),
    };
    let mut legs = Profile::Ohio.legs();
    legs = legs.jittered(10.0, &mut rng);
    let cfg = LabConfig {
        seed,
        legs,
        censor,
        loss_rate: if rng.gen() { 0.02 } else { 0.0 },
        bandwidth: if rng.gen() { 0 } else { 2_000_000 },
        file_size: rng.gen_range(1..=30_000),
        ..LabConfig::default()
    };
    let mut l = Lab::build(cfg).expect("standard topology");
    let req = l.request(mode);
    let _ = l.fetch(req);
    l.sim.trace_digest()
}

/// Randomized codec, delivery, determinism and censor-totality suites.
pub fn property_suites(seed: u64) -> CriterionResult {
    let mut fails = Vec::new();

    let codec: Vec<String> = (0..10_000u64)
        .into_par_iter()
        .filter_map(|i| codec_roundtrip(&mut ChaCha8Rng::seed_from_u64(seed ^ (i << 20))).err())
        .collect();
    if let Some(e) = codec.first() {
        fails.push(format!(
            "codec: {} of 10000 failed, first: {e}",
            codec.len()
        ));
    }

    let lossy: Vec<String> = (0..200u64)
        .into_par_iter()
        .filter_map(|i| lossy_transfer(seed.wrapping_add(i * 7919)).err())
        .collect();
    if let Some(e) = lossy.first() {
        fails.push(format!(
            "lossy delivery: {} of 200 failed, first: {e}",
            lossy.len()
        ));
    }

    let nondet: Vec<u64> = (0..20u64)
        .into_par_iter()
        .filter(|i| {
            let s = seed ^ ((i + 1) * 104_729);
            scenario_digest(s) != scenario_digest(s)
        })
        .collect();
    if !nondet.is_empty() {
        fails.push(format!(
            "determinism: scenarios {nondet:?} differ across reruns"
        ));
    }

    let cfgs = [
        CensorConfig::off(),
        CensorConfig::off().with_mode(CensorMode::DropAllHandshake),
        CensorConfig::off()
            .with_mode(CensorMode::SniBlocklist)
            .block_sni(DEFAULT_HOSTNAME),
        CensorConfig::off()
            .with_mode(CensorMode::DnsFilter)
            .block_dns(DEFAULT_HOSTNAME),
        CensorConfig::off().with_mode(CensorMode::MigrationBlock),
    ];
    let crashed: usize = (0..10u64)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf022 ^ chunk);
            let mut states: Vec<CensorState> = cfgs.iter().map(CensorState::new).collect();
            let mut crashed = 0;
            for _ in 0..1_000 {
                let bytes = fuzz_datagram(&mut rng);
                let bytes = if rng.gen_bool(0.1) {
                    tunnel_encap(&bytes, &rng.gen(), rng.gen())
                        .encode()
                        .unwrap_or(bytes)
                } else {
                    bytes
                };
                for (cfg, state) in cfgs.iter().zip(states.iter_mut()) {
                    let v: Result<Verdict, _> =
                        catch_unwind(AssertUnwindSafe(|| inspect(cfg, state, &bytes)));
                    if v.is_err() {
                        crashed += 1;
                    }
                }
                if catch_unwind(|| audit_payload(&bytes)).is_err() {
                    crashed += 1;
                }
            }
            crashed
        })
        .sum();
    if crashed > 0 {
        fails.push(format!(
            "censor totality: {crashed} panics over 10000 inputs"
        ));
    }

    result(
        8,
        "property suites",
        fails,
        "10000 codec roundtrips, 200 lossy transfers, 20 determinism scenarios, 10000 censor fuzz inputs".into(),
    )
}

/// Runs every criterion in order.
pub fn run_all(seed: u64) -> Vec<CriterionResult> {
    let checks: [fn(u64) -> CriterionResult; 8] = [
        feasibility,
        sni_feasibility,
        censor_visibility,
        path_validation_cost,
        amortization,
        proxy_distance,
        migration_block,
        property_suites,
    ];
    checks.iter().map(|c| c(seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn audit_sees_plain_hostnames_only() {
        let q = DnsMessage::query(7, "a.example").encode().unwrap();
        assert_eq!(audit_payload(&q), vec!["a.example".to_string()]);
        let wrapped = tunnel_encap(&q, &[3; 32], 1).encode().unwrap();
        assert!(audit_payload(&wrapped).is_empty());
        assert!(audit_payload(b"").is_empty());
    }

    #[test]
    fn generators_cover_both_header_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let forms: BTreeSet<bool> = (0..64)
            .map(|_| matches!(random_packet(&mut rng).header, Header::Long { .. }))
            .collect();
        assert_eq!(forms.len(), 2);
        for _ in 0..200 {
            codec_roundtrip(&mut rng).unwrap();
        }
    }

    #[test]
    fn lossy_transfers_deliver_intact() {
        for s in 0..4 {
            lossy_transfer(s).unwrap();
        }
    }
}
