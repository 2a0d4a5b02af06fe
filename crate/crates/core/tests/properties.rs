use proptest::prelude::*;

use quicstep_lab::harness::acceptance::lossy_transfer;
use quicstep_lab::harness::{
    analytic_latency, compute_cdf, quantile, ExperimentConfig, LatencySample,
};
use quicstep_lab::middlebox::{inspect, CensorConfig, CensorMode, CensorState};
use quicstep_lab::quicstep::{Lab, LabConfig, PolicyMode};
use quicstep_lab::wire::{
    decode_header, decode_packet, encode_packet, initial_keystream, tunnel_decap, tunnel_encap,
    Addr, ConnectionId, Datagram, Decoded, DnsMessage, Frame, Header, LongType, NodeId, Packet,
    TunnelDatagram, MAX_PACKET_SIZE, QUIC_VERSION,
};

fn cid() -> impl Strategy<Value = ConnectionId> {
    any::<[u8; 8]>().prop_map(ConnectionId::new)
}

fn frame(long: bool) -> BoxedStrategy<Frame> {
    let crypto = (any::<u64>(), prop::collection::vec(any::<u8>(), 0..200))
        .prop_map(|(offset, data)| Frame::Crypto { offset, data });
    let ack = (any::<u64>(), prop::collection::vec(any::<u64>(), 0..10)).prop_map(
        |(largest_acked, acked)| Frame::Ack {
            largest_acked,
            acked,
        },
    );
    if long {
        return prop_oneof![crypto, ack].boxed();
    }
    prop_oneof![
        ack,
        (
            any::<u64>(),
            any::<u64>(),
            any::<bool>(),
            prop::collection::vec(any::<u8>(), 0..300)
        )
            .prop_map(|(stream_id, offset, fin, data)| Frame::Stream {
                stream_id,
                offset,
                fin,
                data
            }),
        any::<[u8; 8]>().prop_map(|data| Frame::PathChallenge { data }),
        any::<[u8; 8]>().prop_map(|data| Frame::PathResponse { data }),
        Just(Frame::HandshakeDone),
        (any::<u64>(), cid()).prop_map(|(seq, cid)| Frame::NewConnectionId { seq, cid }),
    ]
    .boxed()
}

fn packet() -> impl Strategy<Value = Packet> {
    let long =
        (any::<bool>(), cid(), cid(), any::<u64>()).prop_flat_map(|(init, dcid, scid, pn)| {
            let ty = if init {
                LongType::Initial
            } else {
                LongType::Handshake
            };
            prop::collection::vec(frame(true), 1..4).prop_map(move |frames| Packet {
                header: Header::Long {
                    ty,
                    version: QUIC_VERSION,
                    dcid,
                    scid,
                    pn,
                },
                frames,
            })
        });
    let short = (cid(), any::<u64>()).prop_flat_map(|(dcid, pn)| {
        prop::collection::vec(frame(false), 1..4).prop_map(move |frames| Packet {
            header: Header::Short { dcid, pn },
            frames,
        })
    });
    prop_oneof![long, short].prop_filter("fits a datagram", |p| p.encoded_len() <= MAX_PACKET_SIZE)
}

fn censor_config() -> impl Strategy<Value = CensorConfig> {
    prop::sample::subsequence(
        vec![
            CensorMode::DropAllHandshake,
            CensorMode::SniBlocklist,
            CensorMode::DnsFilter,
            CensorMode::MigrationBlock,
        ],
        0..=4,
    )
    .prop_map(|modes| {
        modes.into_iter().fold(
            CensorConfig::off()
                .block_sni("example.com")
                .block_dns("example.com"),
            CensorConfig::with_mode,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn codec_roundtrip(p in packet(), key in prop::collection::vec(any::<u8>(), MAX_PACKET_SIZE)) {
        let bytes = encode_packet(&p, &key).unwrap();
        prop_assert_eq!(bytes.len(), p.encoded_len());
        prop_assert_eq!(decode_packet(&bytes, &key).unwrap(), Decoded::Packet(p.clone()));
        let (h, _) = decode_header(&bytes).unwrap();
        prop_assert_eq!(h, p.header);
    }

    #[test]
    fn wrong_key_is_opaque(p in packet(), flip in 0usize..64) {
        let ks = initial_keystream(&p.header.dcid(), p.payload_len());
        let bytes = encode_packet(&p, &ks).unwrap();
        let mut wrong = ks.clone();
        let i = flip % wrong.len();
        wrong[i] ^= 0x80;
        prop_assert!(matches!(decode_packet(&bytes, &wrong), Ok(Decoded::Opaque(_))));
    }

    #[test]
    fn decoders_are_total(bytes in prop::collection::vec(any::<u8>(), 0..1400)) {
        let _ = decode_packet(&bytes, &[0; 1400]);
        let _ = DnsMessage::decode(&bytes);
        let _ = Datagram::decode(&bytes);
        let _ = TunnelDatagram::decode(&bytes);
    }

    #[test]
    fn censor_gives_a_verdict(cfg in censor_config(), inputs in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..400), 1..20)) {
        let mut state = CensorState::new(&cfg);
        for bytes in &inputs {
            let v = inspect(&cfg, &mut state, bytes);
            prop_assert!(!v.label().is_empty());
        }
        prop_assert_eq!(state.counters.total(), inputs.len() as u64);
    }

    #[test]
    fn off_censor_forwards_everything(p in packet()) {
        let cfg = CensorConfig::off();
        let mut state = CensorState::new(&cfg);
        let bytes = encode_packet(&p, &vec![0; p.payload_len()]).unwrap();
        prop_assert!(!inspect(&cfg, &mut state, &bytes).is_drop());
    }

    #[test]
    fn tunnel_roundtrip(inner in prop::collection::vec(any::<u8>(), 0..1300), key in any::<[u8; 32]>(), nonce in any::<u64>()) {
        let td = tunnel_encap(&inner, &key, nonce);
        let wire = td.encode().unwrap();
        let back = TunnelDatagram::decode(&wire).unwrap();
        prop_assert_eq!(tunnel_decap(&back, &key), inner);
    }

    #[test]
    fn datagram_roundtrip(n in any::<u16>(), port in any::<u16>(), payload in prop::collection::vec(any::<u8>(), 0..1300)) {
        let d = Datagram::new(Addr::new(NodeId(n), port), Addr::new(NodeId(n.wrapping_add(1)), 443), payload);
        prop_assert_eq!(Datagram::decode(&d.encode().unwrap()).unwrap(), d);
    }

    #[test]
    fn dns_roundtrip(host in "[a-z]{1,20}(\\.[a-z]{1,10}){0,3}", txid in any::<u16>()) {
        for m in [DnsMessage::query(txid, &host), DnsMessage::nxdomain(txid, &host)] {
            prop_assert_eq!(DnsMessage::decode(&m.encode().unwrap()).unwrap(), m);
        }
    }

    #[test]
    fn cdf_is_monotone_and_complete(times in prop::collection::vec(prop::option::of(1u64..1_000_000), 1..200)) {
        let samples: Vec<LatencySample> = times.iter().enumerate().map(|(i, t)| LatencySample {
            policy: PolicyMode::Native, trial: i, success: t.is_some(), completion_us: *t, first_byte_us: None, reason: None,
        }).collect();
        let cdf = &compute_cdf(&samples)[&PolicyMode::Native];
        prop_assert_eq!(cdf.successes + cdf.failures, times.len());
        prop_assert!(cdf.points.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1));
        if let Some(last) = cdf.points.last() {
            prop_assert!((last.1 - 1.0).abs() < 1e-12);
            let med = quantile(&samples, PolicyMode::Native, 0.5).unwrap();
            prop_assert!(cdf.points[0].0 <= med && med <= last.0);
        } else {
            prop_assert_eq!(cdf.successes, 0);
        }
    }

    #[test]
    fn hybrid_overhead_is_constant_in_size(size in 1usize..20_000_000, window in 1usize..128) {
        let cfg = ExperimentConfig { file_size: size, window, ..ExperimentConfig::default() };
        let [n, t, q] = PolicyMode::ALL.map(|p| analytic_latency(p, &cfg));
        prop_assert_eq!(q - n, 140_000);
        prop_assert!(n <= q && q <= t);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn simulation_is_deterministic(seed in any::<u64>(), mode in prop::sample::select(PolicyMode::ALL.to_vec()), loss in 0.0f64..0.05) {
        let run = || {
            let mut lab = Lab::build(LabConfig { seed, loss_rate: loss, file_size: 20_000, ..LabConfig::default() }).unwrap();
            let req = lab.request(mode);
            let out = lab.fetch(req).unwrap();
            (out, lab.sim.trace_digest())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn lossy_streams_arrive_intact(seed in any::<u64>()) {
        prop_assert_eq!(lossy_transfer(seed), Ok(()));
    }
}
