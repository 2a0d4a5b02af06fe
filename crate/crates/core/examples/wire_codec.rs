//! Encode a handshake Initial, then show what an observer holding only the
//! wire bytes can and cannot read.

use quicstep_lab::middlebox::extract_sni;
use quicstep_lab::wire::{
    decode_packet, encode_packet, initial_keystream, session_keystream, ConnectionId, Decoded,
    Direction, Frame, HandshakeMessage, Header, LongType, Packet, QUIC_VERSION,
};

fn main() {
    let dcid = ConnectionId::new([0x11; 8]);
    let hello = HandshakeMessage::ClientHello {
        sni: "example.com".into(),
        client_random: [7; 8],
        client_dh_pub: 123_456,
        disable_active_migration: false,
    };
    let initial = Packet {
        header: Header::Long {
            ty: LongType::Initial,
            version: QUIC_VERSION,
            dcid,
            scid: ConnectionId::new([0x22; 8]),
            pn: 0,
        },
        frames: vec![Frame::Crypto {
            offset: 0,
            data: hello.encode().unwrap(),
        }],
    };
    let ks = initial_keystream(&dcid, initial.payload_len());
    let bytes = encode_packet(&initial, &ks).unwrap();
    println!("initial: {} bytes", bytes.len());
    println!(
        "observer extracts sni: {:?}",
        extract_sni(&bytes).unwrap().sni
    );

    let data = Packet {
        header: Header::Short { dcid, pn: 5 },
        frames: vec![Frame::Stream {
            stream_id: 0,
            offset: 0,
            fin: true,
            data: b"hello".to_vec(),
        }],
    };
    let key = session_keystream(
        42,
        &[7; 8],
        &[9; 8],
        Direction::ClientToServer,
        5,
        data.payload_len(),
    );
    let bytes = encode_packet(&data, &key).unwrap();
    let guess = initial_keystream(&dcid, data.payload_len());
    match decode_packet(&bytes, &guess).unwrap() {
        Decoded::Opaque(h) => println!("short packet with initial keys: opaque, header {h:?}"),
        Decoded::Packet(_) => println!("short packet decrypted with the wrong key?"),
    }
    let ok = decode_packet(&bytes, &key).unwrap().packet().unwrap();
    println!("with session keys: {:?}", ok.frames);
}
