//! On-wire formats for the miniature QUIC-like protocol.
//!
//! Everything here is a pure function over byte buffers. The protection
//! scheme is deliberately **not** secure: payloads are XORed with SHA-256
//! counter-mode keystreams. What matters is who can derive which keystream:
//!
//! * Initial packets are keyed from the destination connection ID printed in
//!   the header, so any on-path observer can read them.
//! * Handshake and short-header packets are keyed from a Diffie-Hellman
//!   shared value that never appears on the wire.
//! * Tunnel datagrams are keyed from a pre-shared tunnel key.
//!
//! All multi-byte integers are big-endian.

use std::fmt;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAX_PACKET_SIZE: usize = 1250;
/// Largest chunk of stream data carried by one STREAM frame.
pub const MAX_STREAM_CHUNK: usize = 1200;
pub const QUIC_VERSION: u32 = 1;
pub const MAX_SNI_LEN: usize = 253;
pub const MAX_KEYSTREAM_LEN: usize = 65536;

/// Integrity tag appended to every plaintext payload before protection.
pub const PAYLOAD_TAG_LEN: usize = 8;

pub const LONG_HEADER_LEN: usize = 1 + 4 + 8 + 8 + 8 + 2;
pub const SHORT_HEADER_LEN: usize = 1 + 8 + 8 + 2;

const FORM_LONG: u8 = 0x80;
const FORM_SHORT: u8 = 0x40;
const TYPE_INITIAL: u8 = 0x00;
const TYPE_HANDSHAKE: u8 = 0x01;

const FRAME_ACK: u8 = 0x02;
const FRAME_CRYPTO: u8 = 0x06;
const FRAME_STREAM: u8 = 0x08;
const FRAME_NEW_CONNECTION_ID: u8 = 0x18;
const FRAME_PATH_CHALLENGE: u8 = 0x1a;
const FRAME_PATH_RESPONSE: u8 = 0x1b;
const FRAME_HANDSHAKE_DONE: u8 = 0x1e;

const HS_CLIENT_HELLO: u8 = 0x01;
const HS_SERVER_HELLO: u8 = 0x02;
const HS_FINISHED: u8 = 0x14;

pub const TUNNEL_MAGIC: [u8; 2] = [0x74, 0x54];
pub const TUNNEL_HEADER_LEN: usize = 2 + 8 + 2;
pub const DNS_MAGIC: [u8; 2] = [0x44, 0x4e];
pub const ENVELOPE_MAGIC: [u8; 2] = [0x49, 0x44];
pub const ENVELOPE_HEADER_LEN: usize = 2 + 4 + 4 + 2;

const INITIAL_LABEL: &[u8] = b"quicstep-lab-initial-v1";
const SESSION_LABEL: &[u8] = b"qs-session-v1";
const TAG_LABEL: &[u8] = b"qs-payload-tag-v1";
const FINISHED_LABEL: &[u8] = b"qs-finished-v1";

/// Modulus of the toy Diffie-Hellman group, 2^61 - 1.
pub const DH_PRIME: u64 = (1 << 61) - 1;
pub const DH_GENERATOR: u64 = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("encoded packet is {0} bytes, limit is {MAX_PACKET_SIZE}")]
    Oversize(usize),
    #[error("packet payload must carry at least one frame")]
    EmptyPayload,
    #[error("keystream is {have} bytes but payload needs {need}")]
    ShortKeystream { have: usize, need: usize },
    #[error("truncated input: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("unknown header form byte {0:#04x}")]
    BadHeaderForm(u8),
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("unknown frame type {0:#04x}")]
    UnknownFrame(u8),
    #[error("unknown handshake message type {0:#04x}")]
    UnknownHandshake(u8),
    #[error("bad magic")]
    BadMagic,
    #[error("length field {declared} disagrees with {actual} available bytes")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("invalid server name")]
    BadServerName,
    #[error("invalid field: {0}")]
    Invalid(&'static str),
}

pub type Result<T> = std::result::Result<T, WireError>;

/// Identifier of a node in the simulated network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u16);

/// A node address: a node plus a port, so one node can expose several
/// endpoints (direct interface, tunnel interface, NAT ports, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Addr {
    pub node: NodeId,
    pub port: u16,
}

impl Addr {
    pub const fn new(node: NodeId, port: u16) -> Self {
        Addr { node, port }
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.node.0.to_be_bytes());
        out.extend_from_slice(&self.port.to_be_bytes());
    }

    fn read(r: &mut Reader<'_>) -> Result<Self> {
        Ok(Addr {
            node: NodeId(r.u16()?),
            port: r.u16()?,
        })
    }
}

impl fmt::Display for Addr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}:{}", self.node.0, self.port)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ConnectionId([u8; 8]);

impl ConnectionId {
    pub const LEN: usize = 8;

    pub const fn new(bytes: [u8; 8]) -> Self {
        ConnectionId(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self> {
        let arr: [u8; 8] = bytes
            .try_into()
            .map_err(|_| WireError::Invalid("connection id length"))?;
        Ok(ConnectionId(arr))
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        ConnectionId(rng.gen())
    }

    pub fn as_bytes(&self) -> &[u8; 8] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Debug for ConnectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Cid({})", self.to_hex())
    }
}

impl fmt::Display for ConnectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LongType {
    Initial,
    Handshake,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeaderForm {
    Long,
    Short,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Header {
    Long {
        ty: LongType,
        version: u32,
        dcid: ConnectionId,
        scid: ConnectionId,
        pn: u64,
    },
    Short {
        dcid: ConnectionId,
        pn: u64,
    },
}

impl Header {
    pub fn form(&self) -> HeaderForm {
        match self {
            Header::Long { .. } => HeaderForm::Long,
            Header::Short { .. } => HeaderForm::Short,
        }
    }

    pub fn long_type(&self) -> Option<LongType> {
        match self {
            Header::Long { ty, .. } => Some(*ty),
            Header::Short { .. } => None,
        }
    }

    pub fn dcid(&self) -> ConnectionId {
        match self {
            Header::Long { dcid, .. } | Header::Short { dcid, .. } => *dcid,
        }
    }

    pub fn scid(&self) -> Option<ConnectionId> {
        match self {
            Header::Long { scid, .. } => Some(*scid),
            Header::Short { .. } => None,
        }
    }

    pub fn packet_number(&self) -> u64 {
        match self {
            Header::Long { pn, .. } | Header::Short { pn, .. } => *pn,
        }
    }

    pub fn encoded_len(&self) -> usize {
        match self {
            Header::Long { .. } => LONG_HEADER_LEN,
            Header::Short { .. } => SHORT_HEADER_LEN,
        }
    }

    fn write(&self, payload_len: u16, out: &mut Vec<u8>) {
        match self {
            Header::Long {
                ty,
                version,
                dcid,
                scid,
                pn,
            } => {
                let t = match ty {
                    LongType::Initial => TYPE_INITIAL,
                    LongType::Handshake => TYPE_HANDSHAKE,
                };
                out.push(FORM_LONG | t);
                out.extend_from_slice(&version.to_be_bytes());
                out.extend_from_slice(dcid.as_bytes());
                out.extend_from_slice(scid.as_bytes());
                out.extend_from_slice(&pn.to_be_bytes());
            }
            Header::Short { dcid, pn } => {
                out.push(FORM_SHORT);
                out.extend_from_slice(dcid.as_bytes());
                out.extend_from_slice(&pn.to_be_bytes());
            }
        }
        out.extend_from_slice(&payload_len.to_be_bytes());
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Crypto {
        offset: u64,
        data: Vec<u8>,
    },
    Stream {
        stream_id: u64,
        offset: u64,
        fin: bool,
        data: Vec<u8>,
    },
    Ack {
        largest_acked: u64,
        acked: Vec<u64>,
    },
    PathChallenge {
        data: [u8; 8],
    },
    PathResponse {
        data: [u8; 8],
    },
    HandshakeDone,
    NewConnectionId {
        seq: u64,
        cid: ConnectionId,
    },
}

/// Frame discriminant, handy for logs and trace assertions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameType {
    Crypto,
    Stream,
    Ack,
    PathChallenge,
    PathResponse,
    HandshakeDone,
    NewConnectionId,
}

impl Frame {
    pub fn frame_type(&self) -> FrameType {
        match self {
            Frame::Crypto { .. } => FrameType::Crypto,
            Frame::Stream { .. } => FrameType::Stream,
            Frame::Ack { .. } => FrameType::Ack,
            Frame::PathChallenge { .. } => FrameType::PathChallenge,
            Frame::PathResponse { .. } => FrameType::PathResponse,
            Frame::HandshakeDone => FrameType::HandshakeDone,
            Frame::NewConnectionId { .. } => FrameType::NewConnectionId,
        }
    }

    /// Everything except a bare ACK obliges the receiver to acknowledge.
    pub fn is_ack_eliciting(&self) -> bool {
        !matches!(self, Frame::Ack { .. })
    }

    pub fn encoded_len(&self) -> usize {
        match self {
            Frame::Crypto { data, .. } => 1 + 8 + 2 + data.len(),
            Frame::Stream { data, .. } => 1 + 8 + 8 + 1 + 2 + data.len(),
            Frame::Ack { acked, .. } => 1 + 8 + 2 + 8 * acked.len(),
            Frame::PathChallenge { .. } | Frame::PathResponse { .. } => 1 + 8,
            Frame::HandshakeDone => 1,
            Frame::NewConnectionId { .. } => 1 + 8 + 8,
        }
    }

    fn write(&self, out: &mut Vec<u8>) -> Result<()> {
        match self {
            Frame::Crypto { offset, data } => {
                out.push(FRAME_CRYPTO);
                out.extend_from_slice(&offset.to_be_bytes());
                out.extend_from_slice(&len_u16(data.len())?.to_be_bytes());
                out.extend_from_slice(data);
            }
            Frame::Stream {
                stream_id,
                offset,
                fin,
                data,
            } => {
                out.push(FRAME_STREAM);
                out.extend_from_slice(&stream_id.to_be_bytes());
                out.extend_from_slice(&offset.to_be_bytes());
                out.push(u8::from(*fin));
                out.extend_from_slice(&len_u16(data.len())?.to_be_bytes());
                out.extend_from_slice(data);
            }
            Frame::Ack {
                largest_acked,
                acked,
            } => {
                out.push(FRAME_ACK);
                out.extend_from_slice(&largest_acked.to_be_bytes());
                out.extend_from_slice(&len_u16(acked.len())?.to_be_bytes());
                for pn in acked {
                    out.extend_from_slice(&pn.to_be_bytes());
                }
            }
            Frame::PathChallenge { data } => {
                out.push(FRAME_PATH_CHALLENGE);
                out.extend_from_slice(data);
            }
            Frame::PathResponse { data } => {
                out.push(FRAME_PATH_RESPONSE);
                out.extend_from_slice(data);
            }
            Frame::HandshakeDone => out.push(FRAME_HANDSHAKE_DONE),
            Frame::NewConnectionId { seq, cid } => {
                out.push(FRAME_NEW_CONNECTION_ID);
                out.extend_from_slice(&seq.to_be_bytes());
                out.extend_from_slice(cid.as_bytes());
            }
        }
        Ok(())
    }

    fn read(r: &mut Reader<'_>) -> Result<Self> {
        let ty = r.u8()?;
        Ok(match ty {
            FRAME_CRYPTO => {
                let offset = r.u64()?;
                let len = r.u16()? as usize;
                Frame::Crypto {
                    offset,
                    data: r.take(len)?.to_vec(),
                }
            }
            FRAME_STREAM => {
                let stream_id = r.u64()?;
                let offset = r.u64()?;
                let fin = match r.u8()? {
                    0 => false,
                    1 => true,
                    _ => return Err(WireError::Invalid("fin flag")),
                };
                let len = r.u16()? as usize;
                Frame::Stream {
                    stream_id,
                    offset,
                    fin,
                    data: r.take(len)?.to_vec(),
                }
            }
            FRAME_ACK => {
                let largest_acked = r.u64()?;
                let n = r.u16()? as usize;
                let mut acked = Vec::with_capacity(n.min(256));
                for _ in 0..n {
                    acked.push(r.u64()?);
                }
                Frame::Ack {
                    largest_acked,
                    acked,
                }
            }
            FRAME_PATH_CHALLENGE => Frame::PathChallenge { data: r.array()? },
            FRAME_PATH_RESPONSE => Frame::PathResponse { data: r.array()? },
            FRAME_HANDSHAKE_DONE => Frame::HandshakeDone,
            FRAME_NEW_CONNECTION_ID => {
                let seq = r.u64()?;
                Frame::NewConnectionId {
                    seq,
                    cid: ConnectionId(r.array()?),
                }
            }
            other => return Err(WireError::UnknownFrame(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub header: Header,
    pub frames: Vec<Frame>,
}

impl Packet {
    pub fn payload_len(&self) -> usize {
        self.frames.iter().map(Frame::encoded_len).sum::<usize>() + PAYLOAD_TAG_LEN
    }

    pub fn encoded_len(&self) -> usize {
        self.header.encoded_len() + self.payload_len()
    }
}

/// Result of decoding a packet under some keystream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decoded {
    Packet(Packet),
    /// The header parsed but the payload did not authenticate under the
    /// keystream supplied: this is all a party without the key can see.
    Opaque(Header),
}

impl Decoded {
    pub fn header(&self) -> &Header {
        match self {
            Decoded::Packet(p) => &p.header,
            Decoded::Opaque(h) => h,
        }
    }

    pub fn packet(self) -> Option<Packet> {
        match self {
            Decoded::Packet(p) => Some(p),
            Decoded::Opaque(_) => None,
        }
    }
}

pub fn encode_packet(p: &Packet, keystream: &[u8]) -> Result<Vec<u8>> {
    if p.frames.is_empty() {
        return Err(WireError::EmptyPayload);
    }
    let total = p.encoded_len();
    if total > MAX_PACKET_SIZE {
        return Err(WireError::Oversize(total));
    }
    let payload_len = p.payload_len();
    if keystream.len() < payload_len {
        return Err(WireError::ShortKeystream {
            have: keystream.len(),
            need: payload_len,
        });
    }
    let mut out = Vec::with_capacity(total);
    p.header.write(payload_len as u16, &mut out);
    let header_len = out.len();
    for f in &p.frames {
        f.write(&mut out)?;
    }
    let tag = payload_tag(&out[..header_len], &out[header_len..]);
    out.extend_from_slice(&tag);
    for (b, k) in out[header_len..].iter_mut().zip(keystream) {
        *b ^= k;
    }
    Ok(out)
}

/// Parses only the cleartext header, returning it and the protected payload.
pub fn decode_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let mut r = Reader::new(bytes);
    let first = r.u8()?;
    let header = if first & 0xfe == FORM_LONG {
        let ty = if first & 0x01 == TYPE_INITIAL {
            LongType::Initial
        } else {
            LongType::Handshake
        };
        let version = r.u32()?;
        if version != QUIC_VERSION {
            return Err(WireError::BadVersion(version));
        }
        let dcid = ConnectionId(r.array()?);
        let scid = ConnectionId(r.array()?);
        let pn = r.u64()?;
        Header::Long {
            ty,
            version,
            dcid,
            scid,
            pn,
        }
    } else if first == FORM_SHORT {
        let dcid = ConnectionId(r.array()?);
        let pn = r.u64()?;
        Header::Short { dcid, pn }
    } else {
        return Err(WireError::BadHeaderForm(first));
    };
    let len = r.u16()? as usize;
    let rest = r.rest();
    if rest.len() != len {
        return Err(WireError::LengthMismatch {
            declared: len,
            actual: rest.len(),
        });
    }
    if len <= PAYLOAD_TAG_LEN {
        return Err(WireError::EmptyPayload);
    }
    Ok((header, rest))
}

pub fn decode_packet(bytes: &[u8], keystream: &[u8]) -> Result<Decoded> {
    let (header, payload) = decode_header(bytes)?;
    if keystream.len() < payload.len() {
        return Ok(Decoded::Opaque(header));
    }
    let plain: Vec<u8> = payload.iter().zip(keystream).map(|(b, k)| b ^ k).collect();
    let (body, tag) = plain.split_at(plain.len() - PAYLOAD_TAG_LEN);
    let header_bytes = &bytes[..bytes.len() - payload.len()];
    if payload_tag(header_bytes, body) != tag {
        return Ok(Decoded::Opaque(header));
    }
    let mut r = Reader::new(body);
    let mut frames = Vec::new();
    while !r.is_empty() {
        match Frame::read(&mut r) {
            Ok(f) => frames.push(f),
            Err(_) => return Ok(Decoded::Opaque(header)),
        }
    }
    if frames.is_empty() {
        return Ok(Decoded::Opaque(header));
    }
    Ok(Decoded::Packet(Packet { header, frames }))
}

fn payload_tag(header: &[u8], body: &[u8]) -> [u8; PAYLOAD_TAG_LEN] {
    let mut h = Sha256::new();
    h.update(TAG_LABEL);
    h.update(header);
    h.update(body);
    let d = h.finalize();
    d[..PAYLOAD_TAG_LEN].try_into().expect("digest is 32 bytes")
}

fn counter_keystream(prefix: &[u8], length: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(length + 32);
    let mut i: u32 = 0;
    while out.len() < length {
        let mut h = Sha256::new();
        h.update(prefix);
        h.update(i.to_be_bytes());
        out.extend_from_slice(&h.finalize());
        i += 1;
    }
    out.truncate(length);
    out
}

/// Keystream protecting Initial packets, derivable from the wire-visible
/// destination connection ID alone.
///
/// # Panics
///
/// If `length` exceeds [`MAX_KEYSTREAM_LEN`].
pub fn initial_keystream(dcid: &ConnectionId, length: usize) -> Vec<u8> {
    assert!(
        length <= MAX_KEYSTREAM_LEN,
        "keystream length {length} over limit"
    );
    let mut prefix = INITIAL_LABEL.to_vec();
    prefix.extend_from_slice(dcid.as_bytes());
    counter_keystream(&prefix, length)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    ClientToServer,
    ServerToClient,
}

impl Direction {
    fn byte(self) -> u8 {
        match self {
            Direction::ClientToServer => 0,
            Direction::ServerToClient => 1,
        }
    }
}

pub fn session_keystream(
    shared: u64,
    client_random: &[u8; 8],
    server_random: &[u8; 8],
    direction: Direction,
    packet_number: u64,
    length: usize,
) -> Vec<u8> {
    let mut prefix = SESSION_LABEL.to_vec();
    prefix.extend_from_slice(&shared.to_be_bytes());
    prefix.extend_from_slice(client_random);
    prefix.extend_from_slice(server_random);
    prefix.push(direction.byte());
    prefix.extend_from_slice(&packet_number.to_be_bytes());
    counter_keystream(&prefix, length)
}

/// Verify value carried in a FINISHED message.
pub fn finished_verify(
    shared: u64,
    client_random: &[u8; 8],
    server_random: &[u8; 8],
    sender: Direction,
) -> [u8; 8] {
    let mut h = Sha256::new();
    h.update(FINISHED_LABEL);
    h.update([sender.byte()]);
    h.update(shared.to_be_bytes());
    h.update(client_random);
    h.update(server_random);
    h.finalize()[..8].try_into().expect("digest is 32 bytes")
}

/// Toy Diffie-Hellman key pair in the group of integers mod 2^61 - 1.
/// Not cryptographically meaningful.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DhKeyPair {
    pub private: u64,
    pub public: u64,
}

pub fn mod_pow(base: u64, mut exp: u64, modulus: u64) -> u64 {
    let m = modulus as u128;
    let mut acc: u128 = 1;
    let mut b = base as u128 % m;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = acc * b % m;
        }
        b = b * b % m;
        exp >>= 1;
    }
    acc as u64
}

pub fn dh_keypair_from_rng<R: Rng + ?Sized>(rng: &mut R) -> DhKeyPair {
    let private = rng.gen_range(2..=DH_PRIME - 2);
    dh_keypair_from_private(private)
}

pub fn dh_keypair(seed: u64) -> DhKeyPair {
    dh_keypair_from_rng(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// # Panics
///
/// If `private` is outside `[2, p - 2]`.
pub fn dh_keypair_from_private(private: u64) -> DhKeyPair {
    assert!(
        (2..=DH_PRIME - 2).contains(&private),
        "private exponent out of range"
    );
    DhKeyPair {
        private,
        public: mod_pow(DH_GENERATOR, private, DH_PRIME),
    }
}

pub fn dh_shared(private: u64, peer_public: u64) -> u64 {
    mod_pow(peer_public, private, DH_PRIME)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HandshakeMessage {
    ClientHello {
        sni: String,
        client_random: [u8; 8],
        client_dh_pub: u64,
        disable_active_migration: bool,
    },
    ServerHello {
        server_random: [u8; 8],
        server_dh_pub: u64,
    },
    Finished {
        verify: [u8; 8],
    },
}

pub fn validate_sni(sni: &str) -> Result<()> {
    if sni.is_empty() || sni.len() > MAX_SNI_LEN || !sni.is_ascii() {
        return Err(WireError::BadServerName);
    }
    Ok(())
}

impl HandshakeMessage {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        match self {
            HandshakeMessage::ClientHello {
                sni,
                client_random,
                client_dh_pub,
                disable_active_migration,
            } => {
                validate_sni(sni)?;
                out.push(HS_CLIENT_HELLO);
                out.push(sni.len() as u8);
                out.extend_from_slice(sni.as_bytes());
                out.extend_from_slice(client_random);
                out.extend_from_slice(&client_dh_pub.to_be_bytes());
                out.push(u8::from(*disable_active_migration));
            }
            HandshakeMessage::ServerHello {
                server_random,
                server_dh_pub,
            } => {
                out.push(HS_SERVER_HELLO);
                out.extend_from_slice(server_random);
                out.extend_from_slice(&server_dh_pub.to_be_bytes());
            }
            HandshakeMessage::Finished { verify } => {
                out.push(HS_FINISHED);
                out.extend_from_slice(verify);
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let msg = match r.u8()? {
            HS_CLIENT_HELLO => {
                let n = r.u8()? as usize;
                let raw = r.take(n)?;
                let sni = std::str::from_utf8(raw)
                    .map_err(|_| WireError::BadServerName)?
                    .to_string();
                validate_sni(&sni)?;
                let client_random = r.array()?;
                let client_dh_pub = r.u64()?;
                let disable_active_migration = match r.u8()? {
                    0 => false,
                    1 => true,
                    _ => return Err(WireError::Invalid("migration flag")),
                };
                HandshakeMessage::ClientHello {
                    sni,
                    client_random,
                    client_dh_pub,
                    disable_active_migration,
                }
            }
            HS_SERVER_HELLO => HandshakeMessage::ServerHello {
                server_random: r.array()?,
                server_dh_pub: r.u64()?,
            },
            HS_FINISHED => HandshakeMessage::Finished { verify: r.array()? },
            other => return Err(WireError::UnknownHandshake(other)),
        };
        if !r.is_empty() {
            return Err(WireError::LengthMismatch {
                declared: bytes.len() - r.rest().len(),
                actual: bytes.len(),
            });
        }
        Ok(msg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DnsKind {
    Query,
    Response,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DnsMessage {
    pub kind: DnsKind,
    pub txid: u16,
    pub hostname: String,
    /// Present only on responses.
    pub answer: Option<Addr>,
}

impl DnsMessage {
    pub fn query(txid: u16, hostname: &str) -> Self {
        DnsMessage {
            kind: DnsKind::Query,
            txid,
            hostname: hostname.to_string(),
            answer: None,
        }
    }

    pub fn response(txid: u16, hostname: &str, answer: Addr) -> Self {
        DnsMessage {
            kind: DnsKind::Response,
            txid,
            hostname: hostname.to_string(),
            answer: Some(answer),
        }
    }

    /// Response for a name with no address.
    pub fn nxdomain(txid: u16, hostname: &str) -> Self {
        DnsMessage {
            kind: DnsKind::Response,
            txid,
            hostname: hostname.to_string(),
            answer: None,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        validate_sni(&self.hostname)?;
        let mut out = DNS_MAGIC.to_vec();
        out.push(match (self.kind, self.answer) {
            (DnsKind::Query, _) => 0,
            (DnsKind::Response, Some(_)) => 1,
            (DnsKind::Response, None) => 2,
        });
        out.extend_from_slice(&self.txid.to_be_bytes());
        out.push(self.hostname.len() as u8);
        out.extend_from_slice(self.hostname.as_bytes());
        match (self.kind, self.answer) {
            (DnsKind::Query, None) => {}
            (DnsKind::Response, Some(a)) => a.write(&mut out),
            (DnsKind::Response, None) => {}
            _ => return Err(WireError::Invalid("dns answer presence")),
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(2)? != DNS_MAGIC {
            return Err(WireError::BadMagic);
        }
        let (kind, answered) = match r.u8()? {
            0 => (DnsKind::Query, false),
            1 => (DnsKind::Response, true),
            2 => (DnsKind::Response, false),
            _ => return Err(WireError::Invalid("dns kind")),
        };
        let txid = r.u16()?;
        let n = r.u8()? as usize;
        let hostname = std::str::from_utf8(r.take(n)?)
            .map_err(|_| WireError::BadServerName)?
            .to_string();
        validate_sni(&hostname)?;
        let answer = if answered {
            Some(Addr::read(&mut r)?)
        } else {
            None
        };
        if !r.is_empty() {
            return Err(WireError::Invalid("trailing bytes after dns message"));
        }
        Ok(DnsMessage {
            kind,
            txid,
            hostname,
            answer,
        })
    }
}

/// A network-layer datagram: source, destination and an opaque payload.
/// Its encoding is what a tunnel carries as its inner datagram.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Datagram {
    pub src: Addr,
    pub dst: Addr,
    pub payload: Vec<u8>,
}

impl Datagram {
    pub fn new(src: Addr, dst: Addr, payload: Vec<u8>) -> Self {
        Datagram { src, dst, payload }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ENVELOPE_HEADER_LEN + self.payload.len());
        out.extend_from_slice(&ENVELOPE_MAGIC);
        self.src.write(&mut out);
        self.dst.write(&mut out);
        out.extend_from_slice(&len_u16(self.payload.len())?.to_be_bytes());
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(2)? != ENVELOPE_MAGIC {
            return Err(WireError::BadMagic);
        }
        let src = Addr::read(&mut r)?;
        let dst = Addr::read(&mut r)?;
        let len = r.u16()? as usize;
        let rest = r.rest();
        if rest.len() != len {
            return Err(WireError::LengthMismatch {
                declared: len,
                actual: rest.len(),
            });
        }
        Ok(Datagram {
            src,
            dst,
            payload: rest.to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TunnelDatagram {
    pub nonce: u64,
    pub opaque: Vec<u8>,
}

impl TunnelDatagram {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(TUNNEL_HEADER_LEN + self.opaque.len());
        out.extend_from_slice(&TUNNEL_MAGIC);
        out.extend_from_slice(&self.nonce.to_be_bytes());
        out.extend_from_slice(&len_u16(self.opaque.len())?.to_be_bytes());
        out.extend_from_slice(&self.opaque);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(2)? != TUNNEL_MAGIC {
            return Err(WireError::BadMagic);
        }
        let nonce = r.u64()?;
        let len = r.u16()? as usize;
        let rest = r.rest();
        if rest.len() != len {
            return Err(WireError::LengthMismatch {
                declared: len,
                actual: rest.len(),
            });
        }
        Ok(TunnelDatagram {
            nonce,
            opaque: rest.to_vec(),
        })
    }
}

pub type TunnelKey = [u8; 32];

fn tunnel_keystream(key: &TunnelKey, nonce: u64, length: usize) -> Vec<u8> {
    let mut prefix = key.to_vec();
    prefix.extend_from_slice(&nonce.to_be_bytes());
    counter_keystream(&prefix, length)
}

pub fn tunnel_encap(inner: &[u8], key: &TunnelKey, nonce: u64) -> TunnelDatagram {
    let ks = tunnel_keystream(key, nonce, inner.len());
    TunnelDatagram {
        nonce,
        opaque: inner.iter().zip(&ks).map(|(b, k)| b ^ k).collect(),
    }
}

/// Removes tunnel protection. A wrong key yields garbage, which the caller
/// detects when parsing the inner datagram.
pub fn tunnel_decap(td: &TunnelDatagram, key: &TunnelKey) -> Vec<u8> {
    let ks = tunnel_keystream(key, td.nonce, td.opaque.len());
    td.opaque.iter().zip(&ks).map(|(b, k)| b ^ k).collect()
}

/// Cleartext view of a datagram payload, as used in traces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PayloadView {
    Long {
        ty: LongType,
        dcid: ConnectionId,
        pn: u64,
    },
    Short {
        dcid: ConnectionId,
        pn: u64,
    },
    Tunnel {
        nonce: u64,
    },
    Dns {
        kind: DnsKind,
    },
    Unknown,
}

pub fn classify_payload(bytes: &[u8]) -> PayloadView {
    if let Ok(td) = TunnelDatagram::decode(bytes) {
        return PayloadView::Tunnel { nonce: td.nonce };
    }
    if let Ok(d) = DnsMessage::decode(bytes) {
        return PayloadView::Dns { kind: d.kind };
    }
    match decode_header(bytes) {
        Ok((Header::Long { ty, dcid, pn, .. }, _)) => PayloadView::Long { ty, dcid, pn },
        Ok((Header::Short { dcid, pn }, _)) => PayloadView::Short { dcid, pn },
        Err(_) => PayloadView::Unknown,
    }
}

fn len_u16(n: usize) -> Result<u16> {
    u16::try_from(n).map_err(|_| WireError::Invalid("length exceeds 16 bits"))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn is_empty(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn rest(&mut self) -> &'a [u8] {
        let r = &self.buf[self.pos..];
        self.pos = self.buf.len();
        r
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let have = self.buf.len() - self.pos;
        if have < n {
            return Err(WireError::Truncated { need: n, have });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice of length N"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.array()?))
    }
}
