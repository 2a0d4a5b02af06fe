//! Client and server endpoint state machines.
//!
//! A [`Connection`] is sans-IO: callers feed it datagrams and timer ticks
//! with an explicit `now`, and it hands back [`Output`] holding the events
//! it raised and the datagrams it wants sent. [`Server`] demultiplexes
//! incoming datagrams onto connections by destination connection ID.
//!
//! The handshake takes one round trip:
//!
//! ```text
//! client                                   server
//!   INITIAL{CRYPTO(ClientHello)}  ------->
//!                                 <-------  INITIAL{CRYPTO(ServerHello)}
//!                                 <-------  HANDSHAKE{CRYPTO(Finished)}
//!   HANDSHAKE{CRYPTO(Finished)}   ------->
//!   SHORT{STREAM ...}             ------->
//!                                 <-------  SHORT{HANDSHAKE_DONE, NEW_CONNECTION_ID}
//! ```
//!
//! Connection migration is noticed by the server: a short-header packet with
//! a known connection ID arriving from an unseen address opens a new path,
//! which the server validates with PATH_CHALLENGE before it sends any more
//! application data.

use std::collections::{BTreeMap, HashMap, VecDeque};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::netsim::{Micros, MS, SEC};
use crate::wire::{
    decode_header, decode_packet, dh_keypair_from_rng, dh_shared, encode_packet, finished_verify,
    initial_keystream, session_keystream, Addr, ConnectionId, Decoded, DhKeyPair, Direction, Frame,
    FrameType, HandshakeMessage, Header, HeaderForm, LongType, Packet, WireError, MAX_STREAM_CHUNK,
    QUIC_VERSION,
};

/// Number of recently received packet numbers repeated in every ACK.
const ACK_HISTORY: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportConfig {
    pub seed: u64,
    /// Maximum number of STREAM-bearing packets in flight.
    pub window: usize,
    /// Retransmission timeout is three times this estimate.
    pub rtt_estimate: Micros,
    pub idle_timeout: Micros,
    pub max_retries: u32,
    pub disable_active_migration: bool,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            seed: 0,
            window: 64,
            rtt_estimate: 100 * MS,
            idle_timeout: 10 * SEC,
            max_retries: 4,
            disable_active_migration: false,
        }
    }
}

impl TransportConfig {
    pub fn retransmit_timeout(&self) -> Micros {
        3 * self.rtt_estimate
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("operation requires an established connection (phase {0:?})")]
    NotEstablished(Phase),
    #[error("connection is closed")]
    Closed,
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Client,
    Server,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Idle,
    Handshaking,
    Established,
    Failed,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PathId(pub u32);

/// The address pair identifying a network path from this endpoint's view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PathAddrs {
    pub local: Addr,
    pub remote: Addr,
}

impl PathAddrs {
    pub fn new(local: Addr, remote: Addr) -> Self {
        PathAddrs { local, remote }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PathStatus {
    Unvalidated,
    Validating,
    Validated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathState {
    pub id: PathId,
    pub addrs: PathAddrs,
    pub status: PathStatus,
    pub pending_challenge: Option<[u8; 8]>,
    pub rtt_sample: Option<Micros>,
    challenge_sent_at: Option<Micros>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FailureReason {
    Timeout,
    Protocol,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EndpointEvent {
    HandshakeComplete {
        time: Micros,
    },
    PathValidated {
        path: PathId,
        time: Micros,
    },
    StreamDelivered {
        stream_id: u64,
        data: Vec<u8>,
        fin: bool,
    },
    ConnectionFailed {
        reason: FailureReason,
    },
    Migrated {
        old_path: PathId,
        new_path: PathId,
        time: Micros,
    },
}

/// One datagram the endpoint wants sent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transmit {
    pub path: PathAddrs,
    pub bytes: Vec<u8>,
    pub form: HeaderForm,
    pub long_type: Option<LongType>,
    pub pn: u64,
    pub frames: Vec<FrameType>,
}

impl Transmit {
    pub fn carries(&self, ty: FrameType) -> bool {
        self.frames.contains(&ty)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Output {
    pub events: Vec<EndpointEvent>,
    pub transmits: Vec<Transmit>,
}

impl Output {
    fn extend(&mut self, other: Output) {
        self.events.extend(other.events);
        self.transmits.extend(other.transmits);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConnectionStats {
    pub packets_sent: u64,
    pub packets_received: u64,
    pub retransmissions: u64,
    pub handshake_retransmissions: u64,
}

#[derive(Debug, Clone)]
struct StreamChunk {
    stream_id: u64,
    offset: u64,
    data: Vec<u8>,
    fin: bool,
    attempts: u32,
}

#[derive(Debug, Clone)]
enum Retransmittable {
    Stream(StreamChunk),
    Control(Frame, u32),
    Challenge(PathId, u32),
}

#[derive(Debug, Clone)]
struct SentPacket {
    time_sent: Micros,
    path: PathId,
    items: Vec<Retransmittable>,
    has_stream: bool,
}

#[derive(Debug, Default)]
struct RecvStream {
    delivered: u64,
    segments: BTreeMap<u64, Vec<u8>>,
    fin_at: Option<u64>,
    finished: bool,
}

impl RecvStream {
    /// Buffers a segment and returns any newly contiguous bytes and whether
    /// the stream just finished.
    fn insert(&mut self, offset: u64, data: Vec<u8>, fin: bool) -> Option<(Vec<u8>, bool)> {
        if fin {
            let end = offset + data.len() as u64;
            self.fin_at.get_or_insert(end);
        }
        let end = offset + data.len() as u64;
        if end > self.delivered && !data.is_empty() {
            let (offset, data) = if offset < self.delivered {
                let skip = (self.delivered - offset) as usize;
                (self.delivered, data[skip..].to_vec())
            } else {
                (offset, data)
            };
            self.segments.entry(offset).or_insert(data);
        }
        let mut out = Vec::new();
        while let Some(seg) = self.segments.remove(&self.delivered) {
            self.delivered += seg.len() as u64;
            out.extend_from_slice(&seg);
            // drop segments now wholly behind the delivery point, trim overlaps
            while let Some((&o, _)) = self.segments.range(..self.delivered).next_back() {
                let s = self.segments.remove(&o).expect("present");
                let e = o + s.len() as u64;
                if e > self.delivered {
                    let skip = (self.delivered - o) as usize;
                    self.segments
                        .entry(self.delivered)
                        .or_insert_with(|| s[skip..].to_vec());
                }
            }
        }
        let finishing = !self.finished && self.fin_at == Some(self.delivered);
        if finishing {
            self.finished = true;
        }
        if out.is_empty() && !finishing {
            None
        } else {
            Some((out, finishing))
        }
    }
}

#[derive(Debug)]
pub struct Connection {
    role: Role,
    phase: Phase,
    cfg: TransportConfig,
    rng: ChaCha8Rng,
    server_name: Option<String>,
    peer_disable_active_migration: bool,
    dh: DhKeyPair,
    shared: Option<u64>,
    client_random: [u8; 8],
    server_random: [u8; 8],
    /// Destination CID of the client's first Initial.
    original_dcid: ConnectionId,
    local_cids: Vec<(u64, ConnectionId)>,
    remote_cids: Vec<(u64, ConnectionId)>,
    dcid: ConnectionId,
    dcid_seq: u64,
    rotate_pending: bool,
    next_pn: u64,
    hs_flight: Vec<(LongType, Vec<Frame>)>,
    hs_deadline: Option<Micros>,
    hs_attempts: u32,
    peer_finished: bool,
    handshake_confirmed: bool,
    paths: Vec<PathState>,
    active: PathId,
    migration_target: Option<PathId>,
    largest_short_rx: Option<u64>,
    recent_rx: VecDeque<u64>,
    pending_ack: Option<PathId>,
    send_queue: VecDeque<StreamChunk>,
    control_queue: VecDeque<(Frame, u32)>,
    challenge_queue: VecDeque<(PathId, u32)>,
    response_queue: VecDeque<(PathId, [u8; 8])>,
    next_send_offset: HashMap<u64, u64>,
    in_flight: BTreeMap<u64, SentPacket>,
    recv_streams: BTreeMap<u64, RecvStream>,
    idle_deadline: Option<Micros>,
    stats: ConnectionStats,
}

impl Connection {
    fn blank(role: Role, cfg: TransportConfig, path: PathAddrs) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let dh = dh_keypair_from_rng(&mut rng);
        Connection {
            role,
            phase: Phase::Idle,
            rng,
            server_name: None,
            peer_disable_active_migration: false,
            dh,
            shared: None,
            client_random: [0; 8],
            server_random: [0; 8],
            original_dcid: ConnectionId::default(),
            local_cids: Vec::new(),
            remote_cids: Vec::new(),
            dcid: ConnectionId::default(),
            dcid_seq: 0,
            rotate_pending: false,
            next_pn: 0,
            hs_flight: Vec::new(),
            hs_deadline: None,
            hs_attempts: 0,
            peer_finished: false,
            handshake_confirmed: false,
            paths: vec![PathState {
                id: PathId(0),
                addrs: path,
                status: PathStatus::Validated,
                pending_challenge: None,
                rtt_sample: None,
                challenge_sent_at: None,
            }],
            active: PathId(0),
            migration_target: None,
            largest_short_rx: None,
            recent_rx: VecDeque::new(),
            pending_ack: None,
            send_queue: VecDeque::new(),
            control_queue: VecDeque::new(),
            challenge_queue: VecDeque::new(),
            response_queue: VecDeque::new(),
            next_send_offset: HashMap::new(),
            in_flight: BTreeMap::new(),
            recv_streams: BTreeMap::new(),
            idle_deadline: None,
            stats: ConnectionStats::default(),
            cfg,
        }
    }

    /// Starts a client handshake towards `server`, returning the connection
    /// and its first Initial packet.
    pub fn client_connect(
        server_name: &str,
        local: Addr,
        server: Addr,
        cfg: TransportConfig,
        now: Micros,
    ) -> Result<(Connection, Output), TransportError> {
        crate::wire::validate_sni(server_name)?;
        let mut c = Connection::blank(Role::Client, cfg, PathAddrs::new(local, server));
        c.original_dcid = ConnectionId::random(&mut c.rng);
        let scid = ConnectionId::random(&mut c.rng);
        c.client_random = c.rng.gen();
        c.local_cids.push((0, scid));
        c.dcid = c.original_dcid;
        c.server_name = Some(server_name.to_string());
        let hello = HandshakeMessage::ClientHello {
            sni: server_name.to_string(),
            client_random: c.client_random,
            client_dh_pub: c.dh.public,
            disable_active_migration: c.cfg.disable_active_migration,
        };
        c.hs_flight = vec![(
            LongType::Initial,
            vec![Frame::Crypto {
                offset: 0,
                data: hello.encode()?,
            }],
        )];
        c.phase = Phase::Handshaking;
        let mut out = Output::default();
        c.send_flight(now, &mut out)?;
        Ok((c, out))
    }

    /// Creates the server side of a connection from a decoded client Initial.
    fn accept(
        cfg: TransportConfig,
        path: PathAddrs,
        header: &Header,
        hello: &HandshakeMessage,
        now: Micros,
    ) -> Result<(Connection, Output), TransportError> {
        let HandshakeMessage::ClientHello {
            sni,
            client_random,
            client_dh_pub,
            disable_active_migration,
        } = hello
        else {
            return Err(WireError::Invalid("expected ClientHello").into());
        };
        let Header::Long { dcid, scid, .. } = header else {
            return Err(WireError::Invalid("ClientHello outside a long header").into());
        };
        let mut c = Connection::blank(Role::Server, cfg, path);
        c.original_dcid = *dcid;
        let own = ConnectionId::random(&mut c.rng);
        c.local_cids.push((0, own));
        c.remote_cids.push((0, *scid));
        c.dcid = *scid;
        c.server_name = Some(sni.clone());
        c.peer_disable_active_migration = *disable_active_migration;
        c.client_random = *client_random;
        c.server_random = c.rng.gen();
        c.shared = Some(dh_shared(c.dh.private, *client_dh_pub));
        let hello = HandshakeMessage::ServerHello {
            server_random: c.server_random,
            server_dh_pub: c.dh.public,
        };
        let fin = HandshakeMessage::Finished {
            verify: c.finished_for(Direction::ServerToClient),
        };
        c.hs_flight = vec![
            (
                LongType::Initial,
                vec![Frame::Crypto {
                    offset: 0,
                    data: hello.encode()?,
                }],
            ),
            (
                LongType::Handshake,
                vec![Frame::Crypto {
                    offset: 0,
                    data: fin.encode()?,
                }],
            ),
        ];
        c.phase = Phase::Handshaking;
        c.stats.packets_received += 1;
        let mut out = Output::default();
        c.send_flight(now, &mut out)?;
        Ok((c, out))
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn config(&self) -> &TransportConfig {
        &self.cfg
    }

    pub fn stats(&self) -> ConnectionStats {
        self.stats
    }

    /// The server name offered (client) or received (server).
    pub fn server_name(&self) -> Option<&str> {
        self.server_name.as_deref()
    }

    pub fn peer_disable_active_migration(&self) -> bool {
        self.peer_disable_active_migration
    }

    pub fn handshake_confirmed(&self) -> bool {
        self.handshake_confirmed
    }

    pub fn original_dcid(&self) -> ConnectionId {
        self.original_dcid
    }

    /// Connection ID currently placed in outgoing headers.
    pub fn dcid(&self) -> ConnectionId {
        self.dcid
    }

    pub fn local_cids(&self) -> impl Iterator<Item = ConnectionId> + '_ {
        self.local_cids.iter().map(|(_, c)| *c)
    }

    pub fn remote_cids(&self) -> impl Iterator<Item = ConnectionId> + '_ {
        self.remote_cids.iter().map(|(_, c)| *c)
    }

    pub fn client_random(&self) -> [u8; 8] {
        self.client_random
    }

    pub fn server_random(&self) -> [u8; 8] {
        self.server_random
    }

    pub fn dh_public(&self) -> u64 {
        self.dh.public
    }

    pub fn paths(&self) -> &[PathState] {
        &self.paths
    }

    pub fn path(&self, id: PathId) -> &PathState {
        &self.paths[id.0 as usize]
    }

    pub fn active_path(&self) -> &PathState {
        self.path(self.active)
    }

    pub fn in_flight_stream_packets(&self) -> usize {
        self.in_flight.values().filter(|p| p.has_stream).count()
    }

    /// True when no data, control frames or unacknowledged packets remain.
    pub fn is_quiescent(&self) -> bool {
        self.in_flight.is_empty() && self.send_queue.is_empty() && self.control_queue.is_empty()
    }

    fn owns_cid(&self, cid: &ConnectionId) -> bool {
        self.local_cids.iter().any(|(_, c)| c == cid)
            || (self.role == Role::Server && *cid == self.original_dcid)
    }

    fn finished_for(&self, sender: Direction) -> [u8; 8] {
        finished_verify(
            self.shared.unwrap_or(0),
            &self.client_random,
            &self.server_random,
            sender,
        )
    }

    fn tx_direction(&self) -> Direction {
        match self.role {
            Role::Client => Direction::ClientToServer,
            Role::Server => Direction::ServerToClient,
        }
    }

    fn rx_direction(&self) -> Direction {
        match self.role {
            Role::Client => Direction::ServerToClient,
            Role::Server => Direction::ClientToServer,
        }
    }

    fn path_for(&mut self, addrs: PathAddrs) -> PathId {
        if let Some(p) = self.paths.iter().find(|p| p.addrs == addrs) {
            return p.id;
        }
        let id = PathId(self.paths.len() as u32);
        self.paths.push(PathState {
            id,
            addrs,
            status: PathStatus::Unvalidated,
            pending_challenge: None,
            rtt_sample: None,
            challenge_sent_at: None,
        });
        id
    }

    fn build(
        &mut self,
        long: Option<LongType>,
        frames: Vec<Frame>,
        path: PathId,
    ) -> Result<Transmit, TransportError> {
        let pn = self.next_pn;
        self.next_pn += 1;
        let header = match long {
            Some(ty) => Header::Long {
                ty,
                version: QUIC_VERSION,
                dcid: self.dcid,
                scid: self.local_cids[0].1,
                pn,
            },
            None => Header::Short {
                dcid: self.dcid,
                pn,
            },
        };
        let kinds = frames.iter().map(Frame::frame_type).collect();
        let packet = Packet { header, frames };
        let len = packet.payload_len();
        let ks = match long {
            Some(LongType::Initial) => initial_keystream(&self.dcid, len),
            _ => session_keystream(
                self.shared
                    .expect("session keys derived before protected packets"),
                &self.client_random,
                &self.server_random,
                self.tx_direction(),
                pn,
                len,
            ),
        };
        let bytes = encode_packet(&packet, &ks)?;
        self.stats.packets_sent += 1;
        Ok(Transmit {
            path: self.path(path).addrs,
            bytes,
            form: if long.is_some() {
                HeaderForm::Long
            } else {
                HeaderForm::Short
            },
            long_type: long,
            pn,
            frames: kinds,
        })
    }

    fn send_flight(&mut self, now: Micros, out: &mut Output) -> Result<(), TransportError> {
        let flight = self.hs_flight.clone();
        for (ty, frames) in flight {
            let t = self.build(Some(ty), frames, self.active)?;
            out.transmits.push(t);
        }
        self.hs_deadline = Some(now + self.cfg.retransmit_timeout());
        Ok(())
    }

    fn fail(&mut self, reason: FailureReason, out: &mut Output) {
        if matches!(self.phase, Phase::Failed | Phase::Closed) {
            return;
        }
        self.phase = Phase::Failed;
        self.hs_deadline = None;
        self.idle_deadline = None;
        self.in_flight.clear();
        out.events.push(EndpointEvent::ConnectionFailed { reason });
    }

    /// Ends the connection locally; further calls are rejected.
    pub fn close(&mut self) {
        self.phase = Phase::Closed;
        self.hs_deadline = None;
        self.idle_deadline = None;
        self.in_flight.clear();
    }

    fn establish(&mut self, now: Micros, out: &mut Output) {
        self.phase = Phase::Established;
        self.hs_deadline = None;
        self.idle_deadline = Some(now + self.cfg.idle_timeout);
        out.events
            .push(EndpointEvent::HandshakeComplete { time: now });
        if self.role == Role::Server {
            let cid = ConnectionId::random(&mut self.rng);
            self.local_cids.push((1, cid));
            self.control_queue.push_back((Frame::HandshakeDone, 1));
            self.control_queue
                .push_back((Frame::NewConnectionId { seq: 1, cid }, 1));
        }
    }

    /// Processes one datagram that arrived on `arrival`.
    ///
    /// Datagrams that do not belong to this connection or do not
    /// authenticate are dropped silently. A frame in a packet type that may
    /// not carry it fails the connection with a protocol error.
    pub fn handle_datagram(
        &mut self,
        bytes: &[u8],
        arrival: PathAddrs,
        now: Micros,
    ) -> Result<Output, TransportError> {
        let mut out = Output::default();
        match self.phase {
            Phase::Closed => return Err(TransportError::Closed),
            Phase::Failed => return Ok(out),
            _ => {}
        }
        let Ok((header, payload)) = decode_header(bytes) else {
            return Ok(out);
        };
        if !self.owns_cid(&header.dcid()) {
            return Ok(out);
        }
        let ks = match header.long_type() {
            Some(LongType::Initial) => initial_keystream(&header.dcid(), payload.len()),
            _ => match self.shared {
                Some(shared) => session_keystream(
                    shared,
                    &self.client_random,
                    &self.server_random,
                    self.rx_direction(),
                    header.packet_number(),
                    payload.len(),
                ),
                None => return Ok(out),
            },
        };
        let Ok(Decoded::Packet(packet)) = decode_packet(bytes, &ks) else {
            return Ok(out);
        };
        if !self.frames_allowed(&packet) {
            self.fail(FailureReason::Protocol, &mut out);
            return Ok(out);
        }
        self.stats.packets_received += 1;
        let path = self.path_for(arrival);
        let is_short = header.form() == HeaderForm::Short;

        if is_short && self.role == Role::Server && self.phase == Phase::Handshaking {
            // only a peer holding the session secret can produce this packet
            self.establish(now, &mut out);
        }
        if self.phase == Phase::Established {
            self.idle_deadline = Some(now + self.cfg.idle_timeout);
        }
        if is_short {
            let pn = header.packet_number();
            let newest = self.largest_short_rx.is_none_or(|l| pn > l);
            if newest {
                self.largest_short_rx = Some(pn);
                let probing = packet.frames.iter().all(|f| {
                    matches!(
                        f,
                        Frame::PathChallenge { .. }
                            | Frame::PathResponse { .. }
                            | Frame::NewConnectionId { .. }
                    )
                });
                if !probing && path != self.active && self.role == Role::Server {
                    self.peer_moved(path, now, &mut out);
                }
            }
        }

        let mut ack_eliciting = false;
        for frame in packet.frames {
            ack_eliciting |= frame.is_ack_eliciting();
            self.on_frame(frame, &header, path, now, &mut out)?;
            if self.phase == Phase::Failed {
                return Ok(out);
            }
        }
        if is_short && ack_eliciting {
            self.recent_rx.push_back(header.packet_number());
            if self.recent_rx.len() > ACK_HISTORY {
                self.recent_rx.pop_front();
            }
            self.pending_ack = Some(match self.role {
                Role::Server => path,
                Role::Client => self.active,
            });
        }
        let flushed = self.flush(now)?;
        out.extend(flushed);
        Ok(out)
    }

    fn frames_allowed(&self, p: &Packet) -> bool {
        p.frames.iter().all(|f| match (&p.header, f) {
            (Header::Long { .. }, Frame::Crypto { .. }) => true,
            (Header::Long { .. }, _) => false,
            (Header::Short { .. }, Frame::Crypto { .. }) => false,
            (Header::Short { .. }, Frame::HandshakeDone) => self.role == Role::Client,
            (Header::Short { .. }, _) => true,
        })
    }

    fn peer_moved(&mut self, path: PathId, now: Micros, out: &mut Output) {
        if self.path(path).status == PathStatus::Validated {
            let old = self.active;
            self.active = path;
            self.migration_target = None;
            out.events.push(EndpointEvent::Migrated {
                old_path: old,
                new_path: path,
                time: now,
            });
        } else if self.migration_target != Some(path) {
            let data: [u8; 8] = self.rng.gen();
            let p = &mut self.paths[path.0 as usize];
            p.status = PathStatus::Validating;
            p.pending_challenge = Some(data);
            self.migration_target = Some(path);
            self.challenge_queue.push_back((path, 1));
        }
    }

    fn on_frame(
        &mut self,
        frame: Frame,
        header: &Header,
        path: PathId,
        now: Micros,
        out: &mut Output,
    ) -> Result<(), TransportError> {
        match frame {
            Frame::Crypto { data, .. } => {
                let Ok(msg) = HandshakeMessage::decode(&data) else {
                    self.fail(FailureReason::Protocol, out);
                    return Ok(());
                };
                self.on_handshake(msg, header, now, out)?;
            }
            Frame::Stream {
                stream_id,
                offset,
                fin,
                data,
            } => {
                let rs = self.recv_streams.entry(stream_id).or_default();
                if let Some((data, fin)) = rs.insert(offset, data, fin) {
                    out.events.push(EndpointEvent::StreamDelivered {
                        stream_id,
                        data,
                        fin,
                    });
                }
            }
            Frame::Ack {
                acked,
                largest_acked,
            } => {
                if let Some(sent) = self.in_flight.get(&largest_acked) {
                    let sample = now.saturating_sub(sent.time_sent);
                    self.paths[sent.path.0 as usize].rtt_sample = Some(sample);
                }
                for pn in acked.iter().chain(std::iter::once(&largest_acked)) {
                    self.in_flight.remove(pn);
                }
            }
            Frame::PathChallenge { data } => self.response_queue.push_back((path, data)),
            Frame::PathResponse { data } => {
                let Some(target) = self
                    .paths
                    .iter()
                    .position(|p| p.pending_challenge == Some(data))
                else {
                    return Ok(());
                };
                let p = &mut self.paths[target];
                p.status = PathStatus::Validated;
                p.pending_challenge = None;
                if let Some(at) = p.challenge_sent_at {
                    p.rtt_sample = Some(now.saturating_sub(at));
                }
                let id = p.id;
                out.events.push(EndpointEvent::PathValidated {
                    path: id,
                    time: now,
                });
                if self.migration_target == Some(id) {
                    let old = self.active;
                    self.active = id;
                    self.migration_target = None;
                    out.events.push(EndpointEvent::Migrated {
                        old_path: old,
                        new_path: id,
                        time: now,
                    });
                }
            }
            Frame::HandshakeDone => self.handshake_confirmed = true,
            Frame::NewConnectionId { seq, cid } => {
                if !self.remote_cids.iter().any(|(s, _)| *s == seq) {
                    self.remote_cids.push((seq, cid));
                }
                if self.rotate_pending {
                    self.rotate_dcid();
                }
            }
        }
        Ok(())
    }

    fn on_handshake(
        &mut self,
        msg: HandshakeMessage,
        header: &Header,
        now: Micros,
        out: &mut Output,
    ) -> Result<(), TransportError> {
        let ty = header.long_type();
        match (self.role, msg) {
            (Role::Server, HandshakeMessage::ClientHello { .. })
                if ty == Some(LongType::Initial) =>
            {
                // the client retransmitted, so our flight was probably lost
                if self.phase == Phase::Handshaking {
                    self.send_flight(now, out)?;
                }
            }
            (
                Role::Client,
                HandshakeMessage::ServerHello {
                    server_random,
                    server_dh_pub,
                },
            ) if ty == Some(LongType::Initial) => {
                if self.phase == Phase::Handshaking {
                    self.server_random = server_random;
                    self.shared = Some(dh_shared(self.dh.private, server_dh_pub));
                    let server_cid = header.scid().expect("long header");
                    self.dcid = server_cid;
                    self.remote_cids.push((0, server_cid));
                    self.establish(now, out);
                }
                let fin = HandshakeMessage::Finished {
                    verify: self.finished_for(Direction::ClientToServer),
                };
                let t = self.build(
                    Some(LongType::Handshake),
                    vec![Frame::Crypto {
                        offset: 0,
                        data: fin.encode()?,
                    }],
                    self.active,
                )?;
                out.transmits.push(t);
            }
            (role, HandshakeMessage::Finished { verify }) if ty == Some(LongType::Handshake) => {
                let sender = match role {
                    Role::Client => Direction::ServerToClient,
                    Role::Server => Direction::ClientToServer,
                };
                if verify != self.finished_for(sender) {
                    self.fail(FailureReason::Protocol, out);
                    return Ok(());
                }
                self.peer_finished = true;
                if role == Role::Server && self.phase == Phase::Handshaking {
                    self.establish(now, out);
                }
            }
            _ => self.fail(FailureReason::Protocol, out),
        }
        Ok(())
    }

    fn rotate_dcid(&mut self) {
        if let Some(&(seq, cid)) = self
            .remote_cids
            .iter()
            .filter(|(s, _)| *s > self.dcid_seq)
            .min_by_key(|(s, _)| *s)
        {
            self.dcid = cid;
            self.dcid_seq = seq;
            self.rotate_pending = false;
        } else {
            self.rotate_pending = true;
        }
    }

    /// Queues application data on a stream. Data is split into STREAM
    /// frames of at most [`MAX_STREAM_CHUNK`] bytes, one per short packet,
    /// and released subject to the send window.
    pub fn send_stream(
        &mut self,
        stream_id: u64,
        data: &[u8],
        fin: bool,
        now: Micros,
    ) -> Result<Output, TransportError> {
        match self.phase {
            Phase::Established => {}
            Phase::Closed => return Err(TransportError::Closed),
            p => return Err(TransportError::NotEstablished(p)),
        }
        let offset = self.next_send_offset.entry(stream_id).or_insert(0);
        if data.is_empty() {
            if fin {
                self.send_queue.push_back(StreamChunk {
                    stream_id,
                    offset: *offset,
                    data: Vec::new(),
                    fin,
                    attempts: 1,
                });
            }
        } else {
            let n = data.len().div_ceil(MAX_STREAM_CHUNK);
            for (i, chunk) in data.chunks(MAX_STREAM_CHUNK).enumerate() {
                self.send_queue.push_back(StreamChunk {
                    stream_id,
                    offset: *offset,
                    data: chunk.to_vec(),
                    fin: fin && i + 1 == n,
                    attempts: 1,
                });
                *offset += chunk.len() as u64;
            }
        }
        self.flush(now)
    }

    /// Moves this endpoint onto a new local/remote address pair. The next
    /// short packet leaves on the new path; the peer notices the new address
    /// and validates it.
    pub fn migrate_active_path(
        &mut self,
        new_path: PathAddrs,
        rotate_cid: bool,
        now: Micros,
    ) -> Result<Output, TransportError> {
        match self.phase {
            Phase::Established => {}
            Phase::Closed => return Err(TransportError::Closed),
            p => return Err(TransportError::NotEstablished(p)),
        }
        let mut out = Output::default();
        let id = self.path_for(new_path);
        if id != self.active {
            // the endpoint trusts its own interfaces
            self.paths[id.0 as usize].status = PathStatus::Validated;
            let old = self.active;
            self.active = id;
            out.events.push(EndpointEvent::Migrated {
                old_path: old,
                new_path: id,
                time: now,
            });
        }
        if rotate_cid {
            self.rotate_dcid();
        }
        out.extend(self.flush(now)?);
        Ok(out)
    }

    /// Earliest instant at which [`Connection::on_timer`] has work to do.
    pub fn next_timeout(&self) -> Option<Micros> {
        if matches!(self.phase, Phase::Failed | Phase::Closed) {
            return None;
        }
        let loss = self
            .in_flight
            .values()
            .map(|p| p.time_sent)
            .min()
            .map(|t| t + self.cfg.retransmit_timeout());
        [self.hs_deadline, self.idle_deadline, loss]
            .into_iter()
            .flatten()
            .min()
    }

    pub fn on_timer(&mut self, now: Micros) -> Result<Output, TransportError> {
        let mut out = Output::default();
        match self.phase {
            Phase::Closed => return Err(TransportError::Closed),
            Phase::Failed => return Ok(out),
            _ => {}
        }
        if self.hs_deadline.is_some_and(|d| d <= now) {
            if self.hs_attempts >= self.cfg.max_retries {
                self.fail(FailureReason::Timeout, &mut out);
                return Ok(out);
            }
            self.hs_attempts += 1;
            self.stats.handshake_retransmissions += 1;
            self.send_flight(now, &mut out)?;
        }
        if self.idle_deadline.is_some_and(|d| d <= now) {
            self.fail(FailureReason::Timeout, &mut out);
            return Ok(out);
        }
        let rto = self.cfg.retransmit_timeout();
        let expired: Vec<u64> = self
            .in_flight
            .iter()
            .filter(|(_, p)| p.time_sent + rto <= now)
            .map(|(pn, _)| *pn)
            .collect();
        let mut lost_chunks = Vec::new();
        for pn in expired {
            let sent = self.in_flight.remove(&pn).expect("listed");
            for item in sent.items {
                let attempts = match &item {
                    Retransmittable::Stream(c) => c.attempts,
                    Retransmittable::Control(_, a) | Retransmittable::Challenge(_, a) => *a,
                };
                if attempts > self.cfg.max_retries {
                    self.fail(FailureReason::Timeout, &mut out);
                    return Ok(out);
                }
                self.stats.retransmissions += 1;
                match item {
                    Retransmittable::Stream(mut c) => {
                        c.attempts += 1;
                        lost_chunks.push(c);
                    }
                    Retransmittable::Control(f, a) => self.control_queue.push_back((f, a + 1)),
                    Retransmittable::Challenge(p, a) => {
                        if self.path(p).status == PathStatus::Validating {
                            self.challenge_queue.push_back((p, a + 1));
                        }
                    }
                }
            }
        }
        lost_chunks.sort_by_key(|c| (c.stream_id, c.offset));
        for c in lost_chunks.into_iter().rev() {
            self.send_queue.push_front(c);
        }
        out.extend(self.flush(now)?);
        Ok(out)
    }

    /// Emits everything currently sendable.
    fn flush(&mut self, now: Micros) -> Result<Output, TransportError> {
        let mut out = Output::default();
        if self.phase != Phase::Established {
            return Ok(out);
        }
        while let Some((path, data)) = self.response_queue.pop_front() {
            let t = self.build(None, vec![Frame::PathResponse { data }], path)?;
            out.transmits.push(t);
        }
        while let Some((path, attempts)) = self.challenge_queue.pop_front() {
            let Some(data) = self.path(path).pending_challenge else {
                continue;
            };
            let t = self.build(None, vec![Frame::PathChallenge { data }], path)?;
            self.paths[path.0 as usize].challenge_sent_at = Some(now);
            self.in_flight.insert(
                t.pn,
                SentPacket {
                    time_sent: now,
                    path,
                    items: vec![Retransmittable::Challenge(path, attempts)],
                    has_stream: false,
                },
            );
            out.transmits.push(t);
        }
        if let Some(path) = self.pending_ack.take() {
            let largest = *self
                .recent_rx
                .iter()
                .max()
                .expect("ack implies a received packet");
            let acked = self.recent_rx.iter().copied().collect();
            let t = self.build(
                None,
                vec![Frame::Ack {
                    largest_acked: largest,
                    acked,
                }],
                path,
            )?;
            out.transmits.push(t);
        }
        if !self.control_queue.is_empty() {
            let items: Vec<(Frame, u32)> = self.control_queue.drain(..).collect();
            let frames = items.iter().map(|(f, _)| f.clone()).collect();
            let t = self.build(None, frames, self.active)?;
            self.in_flight.insert(
                t.pn,
                SentPacket {
                    time_sent: now,
                    path: self.active,
                    items: items
                        .into_iter()
                        .map(|(f, a)| Retransmittable::Control(f, a))
                        .collect(),
                    has_stream: false,
                },
            );
            out.transmits.push(t);
        }
        // application data waits while the peer's new address is unproven
        if self.migration_target.is_none() {
            while self.in_flight_stream_packets() < self.cfg.window {
                let Some(chunk) = self.send_queue.pop_front() else {
                    break;
                };
                let frame = Frame::Stream {
                    stream_id: chunk.stream_id,
                    offset: chunk.offset,
                    fin: chunk.fin,
                    data: chunk.data.clone(),
                };
                let t = self.build(None, vec![frame], self.active)?;
                self.in_flight.insert(
                    t.pn,
                    SentPacket {
                        time_sent: now,
                        path: self.active,
                        items: vec![Retransmittable::Stream(chunk)],
                        has_stream: true,
                    },
                );
                out.transmits.push(t);
            }
        }
        Ok(out)
    }
}

/// Server endpoint: accepts new connections from client Initials and routes
/// later datagrams by destination connection ID.
#[derive(Debug)]
pub struct Server {
    cfg: TransportConfig,
    rng: ChaCha8Rng,
    conns: Vec<Connection>,
    by_cid: HashMap<ConnectionId, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConnHandle(pub usize);

impl Server {
    pub fn new(cfg: TransportConfig) -> Self {
        Server {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            conns: Vec::new(),
            by_cid: HashMap::new(),
        }
    }

    pub fn connections(&self) -> impl Iterator<Item = (ConnHandle, &Connection)> {
        self.conns
            .iter()
            .enumerate()
            .map(|(i, c)| (ConnHandle(i), c))
    }

    pub fn connection(&self, h: ConnHandle) -> &Connection {
        &self.conns[h.0]
    }

    pub fn connection_mut(&mut self, h: ConnHandle) -> &mut Connection {
        &mut self.conns[h.0]
    }

    fn index_cids(&mut self, i: usize) {
        let c = &self.conns[i];
        let cids: Vec<ConnectionId> = c
            .local_cids()
            .chain(std::iter::once(c.original_dcid))
            .collect();
        for cid in cids {
            self.by_cid.insert(cid, i);
        }
    }

    /// Routes a datagram to its connection, creating one for a new client.
    /// Returns `None` for datagrams that belong to nothing.
    pub fn handle_datagram(
        &mut self,
        bytes: &[u8],
        arrival: PathAddrs,
        now: Micros,
    ) -> Result<Option<(ConnHandle, Output)>, TransportError> {
        let Ok((header, payload)) = decode_header(bytes) else {
            return Ok(None);
        };
        if let Some(&i) = self.by_cid.get(&header.dcid()) {
            let out = self.conns[i].handle_datagram(bytes, arrival, now)?;
            self.index_cids(i);
            return Ok(Some((ConnHandle(i), out)));
        }
        if header.long_type() != Some(LongType::Initial) {
            return Ok(None);
        }
        let ks = initial_keystream(&header.dcid(), payload.len());
        let Ok(Decoded::Packet(packet)) = decode_packet(bytes, &ks) else {
            return Ok(None);
        };
        let hello = packet.frames.iter().find_map(|f| match f {
            Frame::Crypto { data, .. } => HandshakeMessage::decode(data).ok(),
            _ => None,
        });
        let Some(hello @ HandshakeMessage::ClientHello { .. }) = hello else {
            return Ok(None);
        };
        let cfg = TransportConfig {
            seed: self.rng.gen(),
            ..self.cfg.clone()
        };
        let (conn, out) = Connection::accept(cfg, arrival, &header, &hello, now)?;
        self.conns.push(conn);
        let i = self.conns.len() - 1;
        self.index_cids(i);
        Ok(Some((ConnHandle(i), out)))
    }

    pub fn send_stream(
        &mut self,
        h: ConnHandle,
        stream_id: u64,
        data: &[u8],
        fin: bool,
        now: Micros,
    ) -> Result<Output, TransportError> {
        self.conns[h.0].send_stream(stream_id, data, fin, now)
    }

    pub fn next_timeout(&self) -> Option<Micros> {
        self.conns.iter().filter_map(Connection::next_timeout).min()
    }

    pub fn on_timer(&mut self, now: Micros) -> Result<Vec<(ConnHandle, Output)>, TransportError> {
        let mut outs = Vec::new();
        for i in 0..self.conns.len() {
            if self.conns[i].next_timeout().is_some_and(|t| t <= now) {
                let out = self.conns[i].on_timer(now)?;
                self.index_cids(i);
                outs.push((ConnHandle(i), out));
            }
        }
        Ok(outs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::NodeId;

    const C: Addr = Addr::new(NodeId(0), 1000);
    const C2: Addr = Addr::new(NodeId(0), 1001);
    const S: Addr = Addr::new(NodeId(1), 443);

    fn cfg(seed: u64) -> TransportConfig {
        TransportConfig {
            seed,
            rtt_estimate: 20 * MS,
            ..TransportConfig::default()
        }
    }

    fn client_view(local: Addr) -> PathAddrs {
        PathAddrs::new(local, S)
    }

    fn server_view(remote: Addr) -> PathAddrs {
        PathAddrs::new(S, remote)
    }

    /// Completes a handshake by hand-delivering packets with zero delay.
    fn established_pair() -> (Connection, Server, ConnHandle) {
        let (mut client, out) = Connection::client_connect("example.com", C, S, cfg(1), 0).unwrap();
        let mut server = Server::new(cfg(2));
        let (h, sout) = server
            .handle_datagram(&out.transmits[0].bytes, server_view(C), 0)
            .unwrap()
            .unwrap();
        let mut client_out = Output::default();
        for t in sout.transmits {
            client_out.extend(client.handle_datagram(&t.bytes, client_view(C), 0).unwrap());
        }
        assert_eq!(client.phase(), Phase::Established);
        for t in client_out.transmits {
            server.handle_datagram(&t.bytes, server_view(C), 0).unwrap();
        }
        assert_eq!(server.connection(h).phase(), Phase::Established);
        (client, server, h)
    }

    #[test]
    fn connect_emits_one_initial_with_sni() {
        let (c, out) = Connection::client_connect("example.com", C, S, cfg(5), 0).unwrap();
        assert_eq!(out.transmits.len(), 1);
        let t = &out.transmits[0];
        assert_eq!(t.long_type, Some(LongType::Initial));
        let (h, payload) = decode_header(&t.bytes).unwrap();
        let p = decode_packet(&t.bytes, &initial_keystream(&h.dcid(), payload.len()))
            .unwrap()
            .packet()
            .unwrap();
        let Frame::Crypto { data, .. } = &p.frames[0] else {
            panic!()
        };
        let HandshakeMessage::ClientHello { sni, .. } = HandshakeMessage::decode(data).unwrap()
        else {
            panic!()
        };
        assert_eq!(sni, "example.com");
        assert_eq!(c.phase(), Phase::Handshaking);
    }

    #[test]
    fn connect_is_deterministic_per_seed() {
        let (a, _) = Connection::client_connect("example.com", C, S, cfg(5), 0).unwrap();
        let (b, _) = Connection::client_connect("example.com", C, S, cfg(5), 0).unwrap();
        assert_eq!(a.original_dcid(), b.original_dcid());
        assert_eq!(a.client_random(), b.client_random());
        let (c, _) = Connection::client_connect("example.com", C, S, cfg(6), 0).unwrap();
        assert_ne!(a.original_dcid(), c.original_dcid());
    }

    #[test]
    fn disable_active_migration_flag_reaches_server() {
        let cfg = TransportConfig {
            disable_active_migration: true,
            ..cfg(3)
        };
        let (_, out) = Connection::client_connect("example.com", C, S, cfg, 0).unwrap();
        let mut server = Server::new(super::tests::cfg(4));
        let (h, _) = server
            .handle_datagram(&out.transmits[0].bytes, server_view(C), 0)
            .unwrap()
            .unwrap();
        assert!(server.connection(h).peer_disable_active_migration());
    }

    #[test]
    fn send_before_handshake_is_rejected() {
        let (mut c, _) = Connection::client_connect("example.com", C, S, cfg(1), 0).unwrap();
        assert_eq!(
            c.send_stream(0, b"GET", true, 0),
            Err(TransportError::NotEstablished(Phase::Handshaking))
        );
        assert_eq!(
            c.migrate_active_path(client_view(C2), false, 0)
                .unwrap_err(),
            TransportError::NotEstablished(Phase::Handshaking)
        );
    }

    #[test]
    fn segmentation() {
        let (mut c, _, _) = established_pair();
        let out = c.send_stream(0, b"GET /file", true, 0).unwrap();
        let streams: Vec<_> = out
            .transmits
            .iter()
            .filter(|t| t.carries(FrameType::Stream))
            .collect();
        assert_eq!(streams.len(), 1);
        assert_eq!(streams[0].form, HeaderForm::Short);

        let (mut c, _, _) = established_pair();
        let out = c.send_stream(4, &[], true, 0).unwrap();
        assert_eq!(
            out.transmits
                .iter()
                .filter(|t| t.carries(FrameType::Stream))
                .count(),
            1
        );

        let (_, mut server, h) = established_pair();
        let big = vec![7u8; 1_000_000];
        let out = server.send_stream(h, 0, &big, true, 0).unwrap();
        // the first window goes out immediately, the rest waits for ACKs
        assert_eq!(
            out.transmits
                .iter()
                .filter(|t| t.carries(FrameType::Stream))
                .count(),
            64
        );
        let conn = server.connection(h);
        assert_eq!(conn.send_queue.len() + conn.in_flight_stream_packets(), 834);
    }

    #[test]
    fn migration_rotates_cid_when_available() {
        let (mut c, mut server, _) = established_pair();
        let handshake_dcid = c.dcid();
        // the establishment flush was discarded, so the control packet comes back on timeout
        let rto = cfg(0).retransmit_timeout();
        let mut got_ncid = false;
        for (_, out) in server.on_timer(rto).unwrap() {
            for t in out.transmits {
                got_ncid |= t.carries(FrameType::NewConnectionId);
                c.handle_datagram(&t.bytes, client_view(C), rto).unwrap();
            }
        }
        assert!(got_ncid);
        assert!(c.handshake_confirmed());
        let out = c.migrate_active_path(client_view(C2), true, rto).unwrap();
        assert!(out
            .events
            .iter()
            .any(|e| matches!(e, EndpointEvent::Migrated { .. })));
        assert_ne!(c.dcid(), handshake_dcid);
        let out = c.send_stream(0, b"GET", true, rto).unwrap();
        let t = out
            .transmits
            .iter()
            .find(|t| t.carries(FrameType::Stream))
            .unwrap();
        assert_eq!(t.path.local, C2);
        assert_eq!(decode_header(&t.bytes).unwrap().0.dcid(), c.dcid());
    }

    #[test]
    fn rotation_waits_for_new_connection_id() {
        let (mut c, _, _) = established_pair();
        let before = c.dcid();
        c.migrate_active_path(client_view(C2), true, 0).unwrap();
        assert_eq!(c.dcid(), before);
        assert!(c.rotate_pending);
    }

    #[test]
    fn migration_without_rotation_keeps_cid() {
        let (mut c, _, _) = established_pair();
        let before = c.dcid();
        c.migrate_active_path(client_view(C2), false, 0).unwrap();
        let out = c.send_stream(0, b"GET", true, 0).unwrap();
        let t = out
            .transmits
            .iter()
            .find(|t| t.carries(FrameType::Stream))
            .unwrap();
        assert_eq!(t.path.local, C2);
        assert_eq!(decode_header(&t.bytes).unwrap().0.dcid(), before);
    }

    #[test]
    fn server_validates_new_path_before_sending_data() {
        let (mut c, mut server, h) = established_pair();
        c.migrate_active_path(client_view(C2), false, 0).unwrap();
        let get = c.send_stream(0, b"GET", true, 0).unwrap();
        let mut challenge = None;
        for t in get.transmits {
            let (_, out) = server
                .handle_datagram(&t.bytes, server_view(C2), 10)
                .unwrap()
                .unwrap();
            for st in out.transmits {
                if st.carries(FrameType::PathChallenge) {
                    assert_eq!(st.path.remote, C2);
                    challenge = Some(st);
                }
            }
        }
        let challenge = challenge.expect("server challenged the new path");
        let data = server.send_stream(h, 0, &[1u8; 5000], true, 10).unwrap();
        assert!(data.transmits.iter().all(|t| !t.carries(FrameType::Stream)));
        assert_eq!(
            server.connection(h).path(PathId(1)).status,
            PathStatus::Validating
        );

        let resp = c
            .handle_datagram(&challenge.bytes, client_view(C2), 20)
            .unwrap();
        let r = resp
            .transmits
            .iter()
            .find(|t| t.carries(FrameType::PathResponse))
            .unwrap();
        let (_, out) = server
            .handle_datagram(&r.bytes, server_view(C2), 30)
            .unwrap()
            .unwrap();
        assert!(out
            .events
            .iter()
            .any(|e| matches!(e, EndpointEvent::PathValidated { .. })));
        assert!(out
            .events
            .iter()
            .any(|e| matches!(e, EndpointEvent::Migrated { .. })));
        let sent: Vec<_> = out
            .transmits
            .iter()
            .filter(|t| t.carries(FrameType::Stream))
            .collect();
        assert_eq!(sent.len(), 5);
        assert!(sent.iter().all(|t| t.path.remote == C2));
    }

    #[test]
    fn mismatched_path_response_ignored() {
        let (mut c, mut server, h) = established_pair();
        c.migrate_active_path(client_view(C2), false, 0).unwrap();
        for t in c.send_stream(0, b"GET", true, 0).unwrap().transmits {
            server
                .handle_datagram(&t.bytes, server_view(C2), 10)
                .unwrap();
        }
        // forge a response carrying the wrong echo, protected with the client's keys
        let bogus = c
            .build(
                None,
                vec![Frame::PathResponse { data: [0xee; 8] }],
                c.active,
            )
            .unwrap();
        let (_, out) = server
            .handle_datagram(&bogus.bytes, server_view(C2), 20)
            .unwrap()
            .unwrap();
        assert!(!out
            .events
            .iter()
            .any(|e| matches!(e, EndpointEvent::PathValidated { .. })));
        assert_eq!(
            server.connection(h).path(PathId(1)).status,
            PathStatus::Validating
        );
    }

    #[test]
    fn handshake_gives_up_after_max_retries() {
        let cfg = cfg(9);
        let rto = cfg.retransmit_timeout();
        let (mut c, first) = Connection::client_connect("example.com", C, S, cfg, 0).unwrap();
        let mut initials = first.transmits.len();
        let mut failed = false;
        let mut now = 0;
        while let Some(t) = c.next_timeout() {
            now = t;
            let out = c.on_timer(now).unwrap();
            initials += out
                .transmits
                .iter()
                .filter(|t| t.long_type == Some(LongType::Initial))
                .count();
            failed |= out.events.contains(&EndpointEvent::ConnectionFailed {
                reason: FailureReason::Timeout,
            });
        }
        assert!(failed);
        assert_eq!(initials, 5);
        assert_eq!(now, 5 * rto);
        assert_eq!(c.phase(), Phase::Failed);
    }

    #[test]
    fn idle_timeout_fails_established_connection() {
        let (mut c, _, _) = established_pair();
        let deadline = c.next_timeout().unwrap();
        assert_eq!(deadline, 10 * SEC);
        let out = c.on_timer(deadline).unwrap();
        assert_eq!(
            out.events,
            vec![EndpointEvent::ConnectionFailed {
                reason: FailureReason::Timeout
            }]
        );
    }

    #[test]
    fn lost_data_is_retransmitted_once() {
        let (mut c, mut server, h) = established_pair();
        let mut all = server
            .send_stream(h, 0, &[3u8; 3000], true, 0)
            .unwrap()
            .transmits;
        all.retain(|t| t.carries(FrameType::Stream));
        assert_eq!(all.len(), 3);
        let lost = all.remove(1);
        let mut delivered = Vec::new();
        let mut acks = Vec::new();
        for t in &all {
            let out = c.handle_datagram(&t.bytes, client_view(C), 1).unwrap();
            for e in out.events {
                if let EndpointEvent::StreamDelivered { data, .. } = e {
                    delivered.extend(data);
                }
            }
            acks.extend(out.transmits);
        }
        assert_eq!(delivered.len(), 1200);
        for a in acks {
            server.handle_datagram(&a.bytes, server_view(C), 2).unwrap();
        }
        let rto = server.connection(h).config().retransmit_timeout();
        let outs = server.on_timer(rto).unwrap();
        let re: Vec<_> = outs
            .iter()
            .flat_map(|(_, o)| &o.transmits)
            .filter(|t| t.carries(FrameType::Stream))
            .collect();
        assert_eq!(re.len(), 1);
        assert_ne!(re[0].pn, lost.pn);
        let out = c
            .handle_datagram(&re[0].bytes, client_view(C), rto + 1)
            .unwrap();
        for e in out.events {
            if let EndpointEvent::StreamDelivered { data, fin, .. } = e {
                delivered.extend(data);
                assert!(fin);
            }
        }
        assert_eq!(delivered, vec![3u8; 3000]);
        assert!(server.connection(h).stats().retransmissions >= 1);
    }

    #[test]
    fn stream_frame_in_long_header_is_protocol_error() {
        let (mut c, mut server, h) = established_pair();
        let bad = c
            .build(
                Some(LongType::Handshake),
                vec![Frame::Stream {
                    stream_id: 0,
                    offset: 0,
                    fin: true,
                    data: vec![1],
                }],
                c.active,
            )
            .unwrap();
        let (_, out) = server
            .handle_datagram(&bad.bytes, server_view(C), 5)
            .unwrap()
            .unwrap();
        assert_eq!(
            out.events,
            vec![EndpointEvent::ConnectionFailed {
                reason: FailureReason::Protocol
            }]
        );
        assert_eq!(server.connection(h).phase(), Phase::Failed);
    }

    #[test]
    fn garbage_is_dropped_silently() {
        let (mut c, _, _) = established_pair();
        let out = c.handle_datagram(&[0x40; 40], client_view(C), 5).unwrap();
        assert_eq!(out, Output::default());
        assert_eq!(c.phase(), Phase::Established);
    }

    #[test]
    fn closed_connection_rejects_input() {
        let (mut c, _, _) = established_pair();
        c.close();
        assert_eq!(
            c.handle_datagram(&[0x40], client_view(C), 0),
            Err(TransportError::Closed)
        );
    }

    #[test]
    fn recv_stream_reassembles_out_of_order_and_overlaps() {
        let mut rs = RecvStream::default();
        assert_eq!(rs.insert(3, b"def".to_vec(), true), None);
        assert_eq!(rs.insert(1, b"bc".to_vec(), false), None);
        assert_eq!(
            rs.insert(0, b"abc".to_vec(), false),
            Some((b"abcdef".to_vec(), true))
        );
        assert_eq!(rs.insert(2, b"cd".to_vec(), false), None);
        let mut rs = RecvStream::default();
        assert_eq!(rs.insert(0, Vec::new(), true), Some((Vec::new(), true)));
    }
}
