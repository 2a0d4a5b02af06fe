//! The dual-path client policy and the lab it runs in.
//!
//! Under [`PolicyMode::Quicstep`] the client sends DNS queries and every
//! long-header packet through an encrypted tunnel to a proxy, and sends
//! short-header packets directly. Once the handshake completes over the
//! tunnel the client migrates the connection to its direct address; the
//! server validates that path with one round trip and then streams the
//! response there.
//!
//! [`Lab`] wires a client, censor, proxy, DNS resolver and server into a
//! simulator:
//!
//! ```text
//!            +---- proxy ----+
//!            |       |       |
//! client -- censor --+-- server
//!            |       |
//!            +-- resolver
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::middlebox::{CensorConfig, CensorNode, ProxyNode, ProxyState};
use crate::netsim::{
    Ctx, Handler, HandlerId, Micros, NetsimError, NodeRole, Simulator, Topology, MS, SEC,
};
use crate::transport::{
    Connection, EndpointEvent, FailureReason, Output, PathAddrs, Phase, Server, Transmit,
    TransportConfig,
};
use crate::wire::{
    decode_header, tunnel_decap, tunnel_encap, Addr, Datagram, DnsKind, DnsMessage, FrameType,
    HeaderForm, LongType, NodeId, TunnelDatagram, TunnelKey,
};

pub const SERVER_PORT: u16 = 443;
pub const DNS_PORT: u16 = 53;
/// Client socket used on the direct path.
pub const CLIENT_DIRECT_PORT: u16 = 4433;
/// Second direct socket, used to move the client mid-transfer.
pub const CLIENT_ALT_PORT: u16 = 4434;
pub const CLIENT_DNS_PORT: u16 = 5353;
/// Client address inside the tunnel.
pub const TUNNEL_IFACE_PORT: u16 = 5000;
/// Outer client endpoint of the tunnel.
pub const CLIENT_TUNNEL_PORT: u16 = 7000;
pub const DEFAULT_HOSTNAME: &str = "example.com";
pub const DEFAULT_REQUEST: &[u8] = b"GET /file";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PolicyMode {
    Native,
    FullTunnel,
    Quicstep,
}

impl PolicyMode {
    pub const ALL: [PolicyMode; 3] = [
        PolicyMode::Native,
        PolicyMode::FullTunnel,
        PolicyMode::Quicstep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyMode::Native => "native",
            PolicyMode::FullTunnel => "tunnel",
            PolicyMode::Quicstep => "quicstep",
        }
    }
}

impl fmt::Display for PolicyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown policy `{0}` (expected native, tunnel or quicstep)")]
pub struct UnknownPolicy(pub String);

impl FromStr for PolicyMode {
    type Err = UnknownPolicy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "native" => Ok(PolicyMode::Native),
            "tunnel" | "full_tunnel" | "full-tunnel" => Ok(PolicyMode::FullTunnel),
            "quicstep" => Ok(PolicyMode::Quicstep),
            _ => Err(UnknownPolicy(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatagramKind {
    DnsQuery,
    LongHeader,
    ShortHeader,
}

impl DatagramKind {
    /// Kind of an outgoing client payload, if it is one the policy routes.
    pub fn of(payload: &[u8]) -> Option<DatagramKind> {
        if let Ok(m) = DnsMessage::decode(payload) {
            return (m.kind == DnsKind::Query).then_some(DatagramKind::DnsQuery);
        }
        match decode_header(payload).ok()?.0.form() {
            HeaderForm::Long => Some(DatagramKind::LongHeader),
            HeaderForm::Short => Some(DatagramKind::ShortHeader),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PathChoice {
    Tunnel,
    Direct,
}

pub fn classify(mode: PolicyMode, kind: DatagramKind) -> PathChoice {
    match (mode, kind) {
        (PolicyMode::Native, _) => PathChoice::Direct,
        (PolicyMode::FullTunnel, _) => PathChoice::Tunnel,
        (PolicyMode::Quicstep, DatagramKind::ShortHeader) => PathChoice::Direct,
        (PolicyMode::Quicstep, DatagramKind::DnsQuery | DatagramKind::LongHeader) => {
            PathChoice::Tunnel
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathPolicy {
    pub mode: PolicyMode,
    /// Proxy tunnel address.
    pub proxy: Addr,
    pub tunnel_key: TunnelKey,
    /// Pre-resolved hostnames; DNS is skipped for these.
    pub direct_addr_map: BTreeMap<String, Addr>,
    pub rotate_cid_on_migration: bool,
}

impl PathPolicy {
    pub fn new(mode: PolicyMode, proxy: Addr, tunnel_key: TunnelKey) -> Self {
        PathPolicy {
            mode,
            proxy,
            tunnel_key,
            direct_addr_map: BTreeMap::new(),
            rotate_cid_on_migration: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FetchFailure {
    Timeout,
    Protocol,
    NxDomain,
    Deadline,
}

impl FetchFailure {
    pub fn name(self) -> &'static str {
        match self {
            FetchFailure::Timeout => "timeout",
            FetchFailure::Protocol => "protocol",
            FetchFailure::NxDomain => "nxdomain",
            FetchFailure::Deadline => "deadline",
        }
    }
}

impl fmt::Display for FetchFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FetchFailure {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            FetchFailure::Timeout,
            FetchFailure::Protocol,
            FetchFailure::NxDomain,
            FetchFailure::Deadline,
        ]
        .into_iter()
        .find(|f| f.name() == s)
        .ok_or_else(|| format!("unknown failure reason `{s}`"))
    }
}

/// Result of one fetch. Times are relative to the fetch start.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchOutcome {
    pub mode: PolicyMode,
    pub success: bool,
    pub failure: Option<FetchFailure>,
    pub dns_time: Option<Micros>,
    pub handshake_time: Option<Micros>,
    pub first_byte_time: Option<Micros>,
    pub completion_time: Option<Micros>,
    pub response_len: usize,
    pub response_digest: [u8; 32],
    /// Kept only when requested, see [`FetchRequest::keep_response`].
    pub response: Option<Vec<u8>>,
    pub migrations: usize,
    pub initial_transmissions: usize,
    pub dns_attempts: u32,
    /// Long-header packets the client sent outside the tunnel.
    pub direct_long_packets: usize,
}

impl FetchOutcome {
    fn pending(mode: PolicyMode) -> Self {
        FetchOutcome {
            mode,
            success: false,
            failure: None,
            dns_time: None,
            handshake_time: None,
            first_byte_time: None,
            completion_time: None,
            response_len: 0,
            response_digest: [0; 32],
            response: None,
            migrations: 0,
            initial_transmissions: 0,
            dns_attempts: 0,
            direct_long_packets: 0,
        }
    }

    pub fn is_done(&self) -> bool {
        self.success || self.failure.is_some()
    }
}

/// Client addresses on one host node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClientAddrs {
    pub direct: Addr,
    pub dns: Addr,
    pub tunnel_iface: Addr,
    pub tunnel_endpoint: Addr,
}

impl ClientAddrs {
    pub fn on(node: NodeId) -> Self {
        ClientAddrs {
            direct: Addr::new(node, CLIENT_DIRECT_PORT),
            dns: Addr::new(node, CLIENT_DNS_PORT),
            tunnel_iface: Addr::new(node, TUNNEL_IFACE_PORT),
            tunnel_endpoint: Addr::new(node, CLIENT_TUNNEL_PORT),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchRequest {
    pub mode: PolicyMode,
    pub hostname: String,
    pub request: Vec<u8>,
    pub transport: TransportConfig,
    pub rotate_cid_on_migration: bool,
    /// Start the connection from the roaming access node instead of the
    /// censored one, then move through the censor after the handshake.
    pub roam: bool,
    /// Move the client to a second direct socket once this many response
    /// bytes have arrived.
    pub migrate_after_bytes: Option<usize>,
    pub keep_response: bool,
    pub deadline: Micros,
}

impl FetchRequest {
    pub fn new(mode: PolicyMode) -> Self {
        FetchRequest {
            mode,
            hostname: DEFAULT_HOSTNAME.into(),
            request: DEFAULT_REQUEST.to_vec(),
            transport: TransportConfig::default(),
            rotate_cid_on_migration: true,
            roam: false,
            migrate_after_bytes: None,
            keep_response: false,
            deadline: 60 * SEC,
        }
    }

    pub fn hostname(mut self, h: &str) -> Self {
        self.hostname = h.into();
        self
    }
}

const TOKEN_START: u64 = 0;
const TOKEN_DNS: u64 = 1;
const TOKEN_CONN: u64 = 2;

#[derive(Debug)]
enum ClientStage {
    Idle,
    Resolving { txid: u16, deadline: Micros },
    Connected,
    Done,
}

/// The client host: resolves the name, connects, fetches, and applies the
/// path policy to every outgoing datagram.
#[derive(Debug)]
pub struct ClientHost {
    policy: PathPolicy,
    addrs: ClientAddrs,
    /// Where the connection starts when it does not start in the tunnel.
    start_local: Addr,
    /// Post-handshake migration target, if any.
    migrate_to: Option<Addr>,
    migrate_after_bytes: Option<(usize, Addr)>,
    resolver: Addr,
    req: FetchRequest,
    server: Option<Addr>,
    rng: ChaCha8Rng,
    stage: ClientStage,
    conn: Option<Connection>,
    armed: BTreeSet<Micros>,
    tunnel_nonce: u64,
    start: Micros,
    received: usize,
    hasher: Sha256,
    body: Vec<u8>,
    pub outcome: FetchOutcome,
}

impl ClientHost {
    pub fn new(policy: PathPolicy, addrs: ClientAddrs, resolver: Addr, req: FetchRequest) -> Self {
        let migrate_to = match policy.mode {
            PolicyMode::Quicstep => Some(addrs.direct),
            _ => None,
        };
        ClientHost {
            rng: ChaCha8Rng::seed_from_u64(req.transport.seed ^ 0x646e_735f_7478),
            start_local: addrs.direct,
            migrate_to,
            migrate_after_bytes: req
                .migrate_after_bytes
                .map(|n| (n, Addr::new(addrs.direct.node, CLIENT_ALT_PORT))),
            outcome: FetchOutcome::pending(policy.mode),
            policy,
            addrs,
            resolver,
            req,
            server: None,
            stage: ClientStage::Idle,
            conn: None,
            armed: BTreeSet::new(),
            tunnel_nonce: 0,
            start: 0,
            received: 0,
            hasher: Sha256::new(),
            body: Vec::new(),
        }
    }

    /// Starts the connection from `local` and migrates to the direct
    /// address after the handshake.
    pub fn roaming_from(mut self, local: Addr) -> Self {
        self.start_local = local;
        self.migrate_to = Some(self.addrs.direct);
        self
    }

    pub fn connection(&self) -> Option<&Connection> {
        self.conn.as_ref()
    }

    fn elapsed(&self, now: Micros) -> Micros {
        now - self.start
    }

    fn finish(&mut self, now: Micros, failure: Option<FetchFailure>) {
        if matches!(self.stage, ClientStage::Done) {
            return;
        }
        self.stage = ClientStage::Done;
        match failure {
            None => {
                self.outcome.success = true;
                self.outcome.completion_time = Some(self.elapsed(now));
            }
            Some(f) => self.outcome.failure = Some(f),
        }
        self.outcome.response_len = self.received;
        self.outcome.response_digest = self.hasher.clone().finalize().into();
        if self.req.keep_response {
            self.outcome.response = Some(std::mem::take(&mut self.body));
        }
    }

    fn send_tunneled(&mut self, ctx: &mut Ctx<'_>, inner_src: Addr, dst: Addr, payload: Vec<u8>) {
        let inner = Datagram::new(inner_src, dst, payload)
            .encode()
            .expect("inner datagram fits");
        self.tunnel_nonce += 1;
        let td = tunnel_encap(&inner, &self.policy.tunnel_key, self.tunnel_nonce);
        ctx.send(Datagram::new(
            self.addrs.tunnel_endpoint,
            self.policy.proxy,
            td.encode().expect("tunnel datagram fits"),
        ));
    }

    fn send_dns(&mut self, ctx: &mut Ctx<'_>, txid: u16) {
        let q = DnsMessage::query(txid, &self.req.hostname)
            .encode()
            .expect("valid hostname");
        self.outcome.dns_attempts += 1;
        match classify(self.policy.mode, DatagramKind::DnsQuery) {
            PathChoice::Tunnel => self.send_tunneled(ctx, self.addrs.dns, self.resolver, q),
            PathChoice::Direct => ctx.send(Datagram::new(self.addrs.dns, self.resolver, q)),
        }
    }

    fn emit(&mut self, ctx: &mut Ctx<'_>, t: Transmit) {
        let kind = match t.form {
            HeaderForm::Long => DatagramKind::LongHeader,
            HeaderForm::Short => DatagramKind::ShortHeader,
        };
        if t.long_type == Some(LongType::Initial) {
            self.outcome.initial_transmissions += 1;
        }
        match classify(self.policy.mode, kind) {
            PathChoice::Tunnel => {
                self.send_tunneled(ctx, self.addrs.tunnel_iface, t.path.remote, t.bytes)
            }
            PathChoice::Direct => {
                if t.form == HeaderForm::Long {
                    self.outcome.direct_long_packets += 1;
                }
                let src = if t.path.local == self.addrs.tunnel_iface {
                    self.addrs.direct
                } else {
                    t.path.local
                };
                ctx.send(Datagram::new(src, t.path.remote, t.bytes));
            }
        }
    }

    fn arm(&mut self, ctx: &mut Ctx<'_>) {
        if let Some(t) = self.conn.as_ref().and_then(Connection::next_timeout) {
            if self.armed.insert(t) {
                ctx.set_timer(t, TOKEN_CONN);
            }
        }
    }

    fn apply(&mut self, ctx: &mut Ctx<'_>, out: Output) {
        for t in out.transmits {
            self.emit(ctx, t);
        }
        for ev in out.events {
            self.on_event(ctx, ev);
            if matches!(self.stage, ClientStage::Done) {
                return;
            }
        }
        self.arm(ctx);
    }

    fn on_event(&mut self, ctx: &mut Ctx<'_>, ev: EndpointEvent) {
        let now = ctx.now();
        match ev {
            EndpointEvent::HandshakeComplete { .. } => {
                self.outcome.handshake_time = Some(self.elapsed(now));
                let server = self.server.expect("connected implies resolved");
                if let Some(local) = self.migrate_to {
                    let conn = self.conn.as_mut().expect("event from connection");
                    let out = conn
                        .migrate_active_path(
                            PathAddrs::new(local, server),
                            self.policy.rotate_cid_on_migration,
                            now,
                        )
                        .expect("established");
                    self.apply(ctx, out);
                }
                let req = self.req.request.clone();
                let conn = self.conn.as_mut().expect("event from connection");
                let out = conn.send_stream(0, &req, true, now).expect("established");
                self.apply(ctx, out);
            }
            EndpointEvent::Migrated { .. } => self.outcome.migrations += 1,
            EndpointEvent::PathValidated { .. } => {}
            EndpointEvent::StreamDelivered { data, fin, .. } => {
                if !data.is_empty() && self.outcome.first_byte_time.is_none() {
                    self.outcome.first_byte_time = Some(self.elapsed(now));
                }
                self.received += data.len();
                self.hasher.update(&data);
                if self.req.keep_response {
                    self.body.extend_from_slice(&data);
                }
                if fin {
                    self.finish(now, None);
                    return;
                }
                if let Some((threshold, local)) = self.migrate_after_bytes {
                    if self.received >= threshold {
                        self.migrate_after_bytes = None;
                        let server = self.server.expect("resolved");
                        let conn = self.conn.as_mut().expect("event from connection");
                        let out = conn
                            .migrate_active_path(PathAddrs::new(local, server), false, now)
                            .expect("established");
                        self.apply(ctx, out);
                    }
                }
            }
            EndpointEvent::ConnectionFailed { reason } => {
                let f = match reason {
                    FailureReason::Timeout => FetchFailure::Timeout,
                    FailureReason::Protocol => FetchFailure::Protocol,
                };
                self.finish(now, Some(f));
            }
        }
    }

    fn connect(&mut self, ctx: &mut Ctx<'_>, server: Addr) {
        let now = ctx.now();
        self.server = Some(server);
        self.stage = ClientStage::Connected;
        let local = match self.policy.mode {
            PolicyMode::Native => self.start_local,
            PolicyMode::FullTunnel | PolicyMode::Quicstep => self.addrs.tunnel_iface,
        };
        match Connection::client_connect(
            &self.req.hostname,
            local,
            server,
            self.req.transport.clone(),
            now,
        ) {
            Ok((conn, out)) => {
                self.conn = Some(conn);
                self.apply(ctx, out);
            }
            Err(_) => self.finish(now, Some(FetchFailure::Protocol)),
        }
    }

    fn start(&mut self, ctx: &mut Ctx<'_>) {
        self.start = ctx.now();
        if let Some(addr) = self.policy.direct_addr_map.get(&self.req.hostname).copied() {
            self.outcome.dns_time = Some(0);
            self.connect(ctx, addr);
            return;
        }
        let txid: u16 = self.rng.gen();
        let deadline = ctx.now() + self.req.transport.retransmit_timeout();
        self.stage = ClientStage::Resolving { txid, deadline };
        self.send_dns(ctx, txid);
        ctx.set_timer(deadline, TOKEN_DNS);
    }

    fn on_dns(&mut self, ctx: &mut Ctx<'_>, msg: DnsMessage) {
        let ClientStage::Resolving { txid, .. } = self.stage else {
            return;
        };
        if msg.kind != DnsKind::Response
            || msg.txid != txid
            || !msg.hostname.eq_ignore_ascii_case(&self.req.hostname)
        {
            return;
        }
        self.outcome.dns_time = Some(self.elapsed(ctx.now()));
        match msg.answer {
            Some(addr) => {
                self.policy
                    .direct_addr_map
                    .insert(self.req.hostname.clone(), addr);
                self.connect(ctx, addr);
            }
            None => self.finish(ctx.now(), Some(FetchFailure::NxDomain)),
        }
    }

    fn on_transport(&mut self, ctx: &mut Ctx<'_>, bytes: &[u8], arrival: PathAddrs) {
        let Some(conn) = self.conn.as_mut() else {
            return;
        };
        if matches!(self.stage, ClientStage::Done) {
            return;
        }
        if let Ok(out) = conn.handle_datagram(bytes, arrival, ctx.now()) {
            self.apply(ctx, out);
        }
    }
}

impl Handler for ClientHost {
    fn on_datagram(&mut self, ctx: &mut Ctx<'_>, dgram: Datagram) {
        if dgram.dst == self.addrs.tunnel_endpoint {
            let Ok(td) = TunnelDatagram::decode(&dgram.payload) else {
                return;
            };
            let Ok(inner) = Datagram::decode(&tunnel_decap(&td, &self.policy.tunnel_key)) else {
                return;
            };
            if inner.src == self.resolver {
                if let Ok(m) = DnsMessage::decode(&inner.payload) {
                    self.on_dns(ctx, m);
                }
            } else {
                self.on_transport(ctx, &inner.payload, PathAddrs::new(inner.dst, inner.src));
            }
        } else if dgram.dst == self.addrs.dns {
            if let Ok(m) = DnsMessage::decode(&dgram.payload) {
                self.on_dns(ctx, m);
            }
        } else {
            self.on_transport(ctx, &dgram.payload, PathAddrs::new(dgram.dst, dgram.src));
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_>, token: u64) {
        let now = ctx.now();
        match token {
            TOKEN_START => self.start(ctx),
            TOKEN_DNS => {
                let ClientStage::Resolving { txid, deadline } = self.stage else {
                    return;
                };
                if now < deadline {
                    return;
                }
                if self.outcome.dns_attempts > self.req.transport.max_retries {
                    self.finish(now, Some(FetchFailure::Timeout));
                    return;
                }
                let deadline = now + self.req.transport.retransmit_timeout();
                self.stage = ClientStage::Resolving { txid, deadline };
                self.send_dns(ctx, txid);
                ctx.set_timer(deadline, TOKEN_DNS);
            }
            TOKEN_CONN => {
                self.armed.remove(&now);
                if matches!(self.stage, ClientStage::Done) {
                    return;
                }
                let Some(conn) = self.conn.as_mut() else {
                    return;
                };
                if conn.next_timeout().is_some_and(|t| t <= now) {
                    if let Ok(out) = conn.on_timer(now) {
                        self.apply(ctx, out);
                    }
                } else {
                    self.arm(ctx);
                }
            }
            _ => {}
        }
    }
}

/// One server transmission, as logged by [`ServerHost`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerTx {
    pub time: Micros,
    pub remote: Addr,
    pub form: HeaderForm,
    pub frames: Vec<FrameType>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerRx {
    pub time: Micros,
    pub remote: Addr,
    pub form: Option<HeaderForm>,
}

/// Serves one file on stream 0 to any client that sends a finished request.
#[derive(Debug)]
pub struct ServerHost {
    addr: Addr,
    endpoint: Server,
    file: Vec<u8>,
    armed: BTreeSet<Micros>,
    pub tx_log: Vec<ServerTx>,
    pub rx_log: Vec<ServerRx>,
    pub events: Vec<(Micros, EndpointEvent)>,
}

/// Deterministic pseudo-random response body.
pub fn random_file(seed: u64, size: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6669_6c65);
    let mut buf = vec![0u8; size];
    rng.fill_bytes(&mut buf);
    buf
}

impl ServerHost {
    pub fn new(addr: Addr, cfg: TransportConfig, file: Vec<u8>) -> Self {
        ServerHost {
            addr,
            endpoint: Server::new(cfg),
            file,
            armed: BTreeSet::new(),
            tx_log: Vec::new(),
            rx_log: Vec::new(),
            events: Vec::new(),
        }
    }

    pub fn addr(&self) -> Addr {
        self.addr
    }

    pub fn endpoint(&self) -> &Server {
        &self.endpoint
    }

    pub fn file(&self) -> &[u8] {
        &self.file
    }

    fn apply(&mut self, ctx: &mut Ctx<'_>, h: crate::transport::ConnHandle, out: Output) {
        let now = ctx.now();
        for t in out.transmits {
            self.tx_log.push(ServerTx {
                time: now,
                remote: t.path.remote,
                form: t.form,
                frames: t.frames.clone(),
            });
            ctx.send(Datagram::new(t.path.local, t.path.remote, t.bytes));
        }
        for ev in out.events {
            let serve = matches!(
                &ev,
                EndpointEvent::StreamDelivered {
                    stream_id: 0,
                    fin: true,
                    ..
                }
            );
            let logged = match ev {
                EndpointEvent::StreamDelivered {
                    stream_id,
                    fin,
                    data,
                } => EndpointEvent::StreamDelivered {
                    stream_id,
                    fin,
                    data: data.into_iter().take(64).collect(),
                },
                other => other,
            };
            self.events.push((now, logged));
            if serve {
                let file = std::mem::take(&mut self.file);
                let res = self.endpoint.send_stream(h, 0, &file, true, now);
                self.file = file;
                if let Ok(o) = res {
                    self.apply(ctx, h, o);
                }
            }
        }
        if let Some(t) = self.endpoint.next_timeout() {
            if self.armed.insert(t) {
                ctx.set_timer(t, TOKEN_CONN);
            }
        }
    }
}

impl Handler for ServerHost {
    fn on_datagram(&mut self, ctx: &mut Ctx<'_>, dgram: Datagram) {
        let form = decode_header(&dgram.payload).ok().map(|(h, _)| h.form());
        self.rx_log.push(ServerRx {
            time: ctx.now(),
            remote: dgram.src,
            form,
        });
        if dgram.dst != self.addr {
            return;
        }
        if let Ok(Some((h, out))) = self.endpoint.handle_datagram(
            &dgram.payload,
            PathAddrs::new(dgram.dst, dgram.src),
            ctx.now(),
        ) {
            self.apply(ctx, h, out);
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_>, _token: u64) {
        let now = ctx.now();
        self.armed.remove(&now);
        if let Ok(outs) = self.endpoint.on_timer(now) {
            for (h, out) in outs {
                self.apply(ctx, h, out);
            }
        }
        if let Some(t) = self.endpoint.next_timeout() {
            if self.armed.insert(t) {
                ctx.set_timer(t, TOKEN_CONN);
            }
        }
    }
}

/// Answers queries from a static zone.
#[derive(Debug)]
pub struct DnsResolver {
    pub zone: BTreeMap<String, Addr>,
    pub answered: u64,
}

impl DnsResolver {
    pub fn new(zone: BTreeMap<String, Addr>) -> Self {
        DnsResolver { zone, answered: 0 }
    }
}

impl Handler for DnsResolver {
    fn on_datagram(&mut self, ctx: &mut Ctx<'_>, dgram: Datagram) {
        let Ok(q) = DnsMessage::decode(&dgram.payload) else {
            return;
        };
        if q.kind != DnsKind::Query {
            return;
        }
        let resp = match self.zone.get(&q.hostname.to_ascii_lowercase()) {
            Some(a) => DnsMessage::response(q.txid, &q.hostname, *a),
            None => DnsMessage::nxdomain(q.txid, &q.hostname),
        };
        self.answered += 1;
        if let Ok(bytes) = resp.encode() {
            ctx.send(Datagram::new(dgram.dst, dgram.src, bytes));
        }
    }
}

/// One-way delays of each leg of the lab topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LegDelays {
    pub client_censor: Micros,
    pub censor_server: Micros,
    pub censor_proxy: Micros,
    pub proxy_server: Micros,
    pub censor_resolver: Micros,
    pub proxy_resolver: Micros,
    /// Uncensored access link used by the roaming client.
    pub roam_server: Micros,
}

impl LegDelays {
    /// Proxy near the client (direct RTT 20 ms, tunnel RTT 80 ms).
    pub fn ohio() -> Self {
        LegDelays {
            client_censor: MS,
            censor_server: 9 * MS,
            censor_proxy: 34 * MS,
            proxy_server: 5 * MS,
            censor_resolver: 9 * MS,
            proxy_resolver: 5 * MS,
            roam_server: 10 * MS,
        }
    }

    /// Distant proxy (tunnel RTT 132 ms).
    pub fn oregon() -> Self {
        LegDelays {
            censor_proxy: 60 * MS,
            ..LegDelays::ohio()
        }
    }

    pub fn rtt_direct(&self) -> Micros {
        2 * (self.client_censor + self.censor_server)
    }

    pub fn rtt_tunnel(&self) -> Micros {
        2 * (self.client_censor + self.censor_proxy + self.proxy_server)
    }

    pub fn rtt_dns_direct(&self) -> Micros {
        2 * (self.client_censor + self.censor_resolver)
    }

    pub fn rtt_dns_tunnel(&self) -> Micros {
        2 * (self.client_censor + self.censor_proxy + self.proxy_resolver)
    }

    pub fn legs_mut(&mut self) -> [&mut Micros; 7] {
        [
            &mut self.client_censor,
            &mut self.censor_server,
            &mut self.censor_proxy,
            &mut self.proxy_server,
            &mut self.censor_resolver,
            &mut self.proxy_resolver,
            &mut self.roam_server,
        ]
    }

    /// Scales every leg independently by a uniform factor in
    /// `[1 - pct/100, 1 + pct/100]`.
    pub fn jittered<R: Rng + ?Sized>(mut self, pct: f64, rng: &mut R) -> Self {
        if pct <= 0.0 {
            return self;
        }
        let f = (pct / 100.0).min(1.0);
        for leg in self.legs_mut() {
            let scale = rng.gen_range(1.0 - f..=1.0 + f);
            *leg = (*leg as f64 * scale).round() as Micros;
        }
        self
    }
}

impl Default for LegDelays {
    fn default() -> Self {
        LegDelays::ohio()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabConfig {
    pub legs: LegDelays,
    /// Bytes per second on every link, 0 for unlimited.
    pub bandwidth: u64,
    pub loss_rate: f64,
    /// Legs that get `loss_rate`; all when empty.
    pub lossy_legs: Vec<Leg>,
    pub censor: CensorConfig,
    pub capture: bool,
    pub seed: u64,
    pub file_size: usize,
    pub window: usize,
    pub max_retries: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Leg {
    ClientCensor,
    CensorServer,
    CensorProxy,
    ProxyServer,
    CensorResolver,
    ProxyResolver,
    RoamServer,
}

impl Default for LabConfig {
    fn default() -> Self {
        LabConfig {
            legs: LegDelays::ohio(),
            bandwidth: 0,
            loss_rate: 0.0,
            lossy_legs: Vec::new(),
            censor: CensorConfig::off(),
            capture: false,
            seed: 0,
            file_size: 1_000_000,
            window: 64,
            max_retries: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabNodes {
    pub client: NodeId,
    pub censor: NodeId,
    pub server: NodeId,
    pub proxy: NodeId,
    pub resolver: NodeId,
    pub roam: NodeId,
}

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Netsim(#[from] NetsimError),
    #[error("invalid censor policy: {0}")]
    Policy(#[from] crate::middlebox::PolicyError),
    #[error("this lab already ran a fetch")]
    AlreadyUsed,
}

/// A fresh simulator with the standard topology and all fixed hosts
/// attached. Each lab runs one fetch.
pub struct Lab {
    pub sim: Simulator,
    pub nodes: LabNodes,
    pub cfg: LabConfig,
    tunnel_key: TunnelKey,
    server: HandlerId,
    proxy: HandlerId,
    resolver: HandlerId,
    client: Option<HandlerId>,
}

pub const LAB_HOSTNAMES: [&str; 3] = [DEFAULT_HOSTNAME, "blocked.example", "allowed.example"];

impl Lab {
    pub fn build(cfg: LabConfig) -> Result<Lab, LabError> {
        cfg.censor.validate()?;
        let mut topo = Topology::new();
        let client = topo.add_node("client", NodeRole::Client);
        let censor = topo.add_node("censor", NodeRole::Censor);
        let server = topo.add_node("server", NodeRole::Server);
        let proxy = topo.add_node("proxy", NodeRole::Proxy);
        let resolver = topo.add_node("resolver", NodeRole::DnsResolver);
        let roam = topo.add_node("roam", NodeRole::Host);
        let l = cfg.legs;
        let loss = |leg: Leg| {
            if cfg.lossy_legs.is_empty() || cfg.lossy_legs.contains(&leg) {
                cfg.loss_rate
            } else {
                0.0
            }
        };
        let bw = cfg.bandwidth;
        topo.add_duplex(client, censor, l.client_censor, bw, loss(Leg::ClientCensor))?;
        topo.add_duplex(censor, server, l.censor_server, bw, loss(Leg::CensorServer))?;
        topo.add_duplex(censor, proxy, l.censor_proxy, bw, loss(Leg::CensorProxy))?;
        topo.add_duplex(proxy, server, l.proxy_server, bw, loss(Leg::ProxyServer))?;
        topo.add_duplex(
            censor,
            resolver,
            l.censor_resolver,
            bw,
            loss(Leg::CensorResolver),
        )?;
        topo.add_duplex(
            proxy,
            resolver,
            l.proxy_resolver,
            bw,
            loss(Leg::ProxyResolver),
        )?;
        topo.add_duplex(roam, server, l.roam_server, bw, loss(Leg::RoamServer))?;
        let mut sim = Simulator::build(topo, cfg.seed)?;

        let mut censor_node = CensorNode::new(cfg.censor.clone());
        if cfg.capture {
            censor_node = censor_node.with_capture();
        }
        sim.set_inspector(censor, Box::new(censor_node))?;

        let server_addr = Addr::new(server, SERVER_PORT);
        let file = random_file(cfg.seed, cfg.file_size);
        let server_cfg = Lab::transport_config(&cfg, cfg.seed ^ 0x5345_5256);
        let server_h = sim.attach(
            &[server],
            Box::new(ServerHost::new(server_addr, server_cfg, file)),
        )?;

        let mut key = [0u8; 32];
        ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7475_6e6e).fill_bytes(&mut key);
        let mut proxy_state = ProxyState::new(proxy);
        proxy_state.provision(ClientAddrs::on(client).tunnel_endpoint, key);
        let proxy_h = sim.attach(&[proxy], Box::new(ProxyNode::new(proxy_state)))?;

        let zone = LAB_HOSTNAMES
            .iter()
            .map(|h| (h.to_string(), server_addr))
            .collect();
        let resolver_h = sim.attach(&[resolver], Box::new(DnsResolver::new(zone)))?;

        Ok(Lab {
            sim,
            nodes: LabNodes {
                client,
                censor,
                server,
                proxy,
                resolver,
                roam,
            },
            cfg,
            tunnel_key: key,
            server: server_h,
            proxy: proxy_h,
            resolver: resolver_h,
            client: None,
        })
    }

    /// Transport settings shared by both endpoints: the retransmit timeout
    /// is sized from the slowest path.
    pub fn transport_config(cfg: &LabConfig, seed: u64) -> TransportConfig {
        let l = cfg.legs;
        let rtt = l.rtt_direct().max(l.rtt_tunnel()).max(2 * l.roam_server);
        TransportConfig {
            seed,
            window: cfg.window,
            rtt_estimate: rtt,
            max_retries: cfg.max_retries,
            ..TransportConfig::default()
        }
    }

    pub fn server_addr(&self) -> Addr {
        Addr::new(self.nodes.server, SERVER_PORT)
    }

    pub fn resolver_addr(&self) -> Addr {
        Addr::new(self.nodes.resolver, DNS_PORT)
    }

    pub fn proxy_addr(&self) -> Addr {
        Addr::new(self.nodes.proxy, crate::middlebox::TUNNEL_PORT)
    }

    pub fn client_addrs(&self) -> ClientAddrs {
        ClientAddrs::on(self.nodes.client)
    }

    pub fn tunnel_key(&self) -> TunnelKey {
        self.tunnel_key
    }

    /// Round trip between two nodes along their routes.
    pub fn rtt(&self, a: NodeId, b: NodeId) -> Micros {
        self.sim.path_delay(a, b).unwrap_or(0) + self.sim.path_delay(b, a).unwrap_or(0)
    }

    pub fn policy(&self, mode: PolicyMode) -> PathPolicy {
        PathPolicy::new(mode, self.proxy_addr(), self.tunnel_key)
    }

    /// A request with transport settings derived from this lab.
    pub fn request(&self, mode: PolicyMode) -> FetchRequest {
        FetchRequest {
            transport: Lab::transport_config(&self.cfg, self.cfg.seed ^ 0x434c_4e54),
            ..FetchRequest::new(mode)
        }
    }

    /// Runs one fetch to completion or deadline.
    pub fn fetch(&mut self, req: FetchRequest) -> Result<FetchOutcome, LabError> {
        let mut policy = self.policy(req.mode);
        policy.rotate_cid_on_migration = req.rotate_cid_on_migration;
        self.fetch_with(policy, req)
    }

    pub fn fetch_with(
        &mut self,
        mut policy: PathPolicy,
        req: FetchRequest,
    ) -> Result<FetchOutcome, LabError> {
        if self.client.is_some() {
            return Err(LabError::AlreadyUsed);
        }
        let deadline = req.deadline;
        let roam = req.roam;
        if roam {
            policy
                .direct_addr_map
                .insert(req.hostname.clone(), self.server_addr());
        }
        let mut host = ClientHost::new(policy, self.client_addrs(), self.resolver_addr(), req);
        let nodes: Vec<NodeId> = if roam {
            host = host.roaming_from(Addr::new(self.nodes.roam, CLIENT_DIRECT_PORT));
            vec![self.nodes.roam, self.nodes.client]
        } else {
            vec![self.nodes.client]
        };
        let id = self.sim.attach(&nodes, Box::new(host))?;
        self.client = Some(id);
        let now = self.sim.now();
        self.sim.schedule_timer(id, now, TOKEN_START)?;
        let run = self.sim.run_until(
            |s| {
                s.handler::<ClientHost>(id)
                    .is_some_and(|c| c.outcome.is_done())
            },
            now + deadline,
        );
        let host = self.sim.handler_mut::<ClientHost>(id).expect("attached");
        if !host.outcome.is_done() && run.timed_out {
            host.finish(run.time, Some(FetchFailure::Deadline));
        }
        Ok(host.outcome.clone())
    }

    pub fn client(&self) -> Option<&ClientHost> {
        self.client
            .and_then(|id| self.sim.handler::<ClientHost>(id))
    }

    pub fn server(&self) -> &ServerHost {
        self.sim
            .handler::<ServerHost>(self.server)
            .expect("attached at build")
    }

    pub fn proxy(&self) -> &ProxyNode {
        self.sim
            .handler::<ProxyNode>(self.proxy)
            .expect("attached at build")
    }

    pub fn resolver(&self) -> &DnsResolver {
        self.sim
            .handler::<DnsResolver>(self.resolver)
            .expect("attached at build")
    }

    pub fn censor(&self) -> &CensorNode {
        self.sim
            .inspector::<CensorNode>(self.nodes.censor)
            .expect("installed at build")
    }

    pub fn phase(&self) -> Option<Phase> {
        self.client()
            .and_then(|c| c.connection())
            .map(Connection::phase)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::middlebox::{visible_hostnames, CensorMode};
    use crate::netsim::TraceDirection;
    use crate::wire::PayloadView;

    fn lab(censor: CensorConfig, file_size: usize) -> Lab {
        Lab::build(LabConfig {
            censor,
            file_size,
            capture: true,
            seed: 7,
            ..LabConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn classify_table() {
        use DatagramKind::*;
        assert_eq!(
            classify(PolicyMode::Quicstep, LongHeader),
            PathChoice::Tunnel
        );
        assert_eq!(classify(PolicyMode::Quicstep, DnsQuery), PathChoice::Tunnel);
        assert_eq!(
            classify(PolicyMode::Quicstep, ShortHeader),
            PathChoice::Direct
        );
        for k in [DnsQuery, LongHeader, ShortHeader] {
            assert_eq!(classify(PolicyMode::Native, k), PathChoice::Direct);
            assert_eq!(classify(PolicyMode::FullTunnel, k), PathChoice::Tunnel);
        }
    }

    #[test]
    fn policy_names_parse() {
        for m in PolicyMode::ALL {
            assert_eq!(m.name().parse::<PolicyMode>().unwrap(), m);
        }
        assert!("bogus".parse::<PolicyMode>().is_err());
    }

    #[test]
    fn datagram_kind_of_payloads() {
        assert_eq!(
            DatagramKind::of(&DnsMessage::query(1, "a.example").encode().unwrap()),
            Some(DatagramKind::DnsQuery)
        );
        let cfg = TransportConfig::default();
        let (_, out) = Connection::client_connect(
            "a.example",
            Addr::new(NodeId(0), 1),
            Addr::new(NodeId(1), 2),
            cfg,
            0,
        )
        .unwrap();
        assert_eq!(
            DatagramKind::of(&out.transmits[0].bytes),
            Some(DatagramKind::LongHeader)
        );
        assert_eq!(DatagramKind::of(b"junk"), None);
    }

    #[test]
    fn native_fetch_matches_closed_form() {
        let mut lab = lab(CensorConfig::off(), 1_000_000);
        let req = lab.request(PolicyMode::Native);
        let out = lab.fetch(req).unwrap();
        assert!(out.success, "{out:?}");
        assert_eq!(out.dns_time, Some(20 * MS));
        assert_eq!(out.handshake_time, Some(40 * MS));
        assert_eq!(out.first_byte_time, Some(60 * MS));
        assert_eq!(out.completion_time, Some(320 * MS));
        assert_eq!(out.response_len, 1_000_000);
        assert_eq!(out.migrations, 0);
    }

    #[test]
    fn quicstep_fetch_matches_closed_form() {
        let mut lab = lab(CensorConfig::off(), 1_000_000);
        let req = lab.request(PolicyMode::Quicstep);
        let out = lab.fetch(req).unwrap();
        assert!(out.success, "{out:?}");
        assert_eq!(out.dns_time, Some(80 * MS));
        assert_eq!(out.handshake_time, Some(160 * MS));
        assert_eq!(out.first_byte_time, Some(200 * MS));
        assert_eq!(out.completion_time, Some(460 * MS));
        assert_eq!(out.migrations, 1);
        assert_eq!(out.direct_long_packets, 0);
    }

    #[test]
    fn full_tunnel_fetch_matches_closed_form() {
        let mut lab = lab(CensorConfig::off(), 1_000_000);
        let req = lab.request(PolicyMode::FullTunnel);
        let out = lab.fetch(req).unwrap();
        assert!(out.success, "{out:?}");
        assert_eq!(out.completion_time, Some(3 * 80 * MS + 13 * 80 * MS));
    }

    #[test]
    fn responses_identical_across_policies() {
        let digests: Vec<_> = PolicyMode::ALL
            .into_iter()
            .map(|m| {
                let mut lab = lab(CensorConfig::off(), 50_000);
                let req = lab.request(m);
                let out = lab.fetch(req).unwrap();
                assert!(out.success);
                (out.response_len, out.response_digest)
            })
            .collect();
        assert!(digests.windows(2).all(|w| w[0] == w[1]));
        let expect: [u8; 32] = Sha256::digest(random_file(7, 50_000)).into();
        assert_eq!(digests[0], (50_000, expect));
    }

    #[test]
    fn drop_all_handshake_blocks_native_only() {
        let censor = CensorConfig::off().with_mode(CensorMode::DropAllHandshake);
        let mut l = lab(censor.clone(), 10_000);
        let req = l.request(PolicyMode::Native);
        let native = l.fetch(req).unwrap();
        assert_eq!(native.failure, Some(FetchFailure::Timeout));
        assert_eq!(native.initial_transmissions, 5);

        let mut l = lab(censor, 10_000);
        let req = l.request(PolicyMode::Quicstep);
        let qs = l.fetch(req).unwrap();
        assert!(qs.success);
        let direct = l.client_addrs().direct;
        let trace = l.sim.trace();
        assert!(trace
            .iter()
            .filter(|r| r.src == direct || r.dst == direct)
            .all(|r| !matches!(r.view, PayloadView::Long { .. })));
        assert!(l
            .server()
            .tx_log
            .iter()
            .any(|t| t.remote == direct && t.frames.contains(&FrameType::PathChallenge)));
    }

    #[test]
    fn censor_sees_no_hostnames_under_quicstep() {
        let mut l = lab(CensorConfig::off(), 10_000);
        let req = l.request(PolicyMode::Quicstep);
        assert!(l.fetch(req).unwrap().success);
        assert!(!l.censor().captured().is_empty());
        assert!(l
            .censor()
            .captured()
            .iter()
            .all(|(_, d, _)| visible_hostnames(&d.payload).is_empty()));

        let mut l = lab(CensorConfig::off(), 10_000);
        let req = l.request(PolicyMode::Native);
        assert!(l.fetch(req).unwrap().success);
        let seen: BTreeSet<String> = l
            .censor()
            .captured()
            .iter()
            .flat_map(|(_, d, _)| visible_hostnames(&d.payload))
            .collect();
        assert!(seen.contains(DEFAULT_HOSTNAME));
    }

    #[test]
    fn migration_block_catches_quicstep_and_roamer() {
        let censor = CensorConfig::off().with_mode(CensorMode::MigrationBlock);
        let mut l = lab(censor.clone(), 10_000);
        let req = l.request(PolicyMode::Native);
        assert!(l.fetch(req).unwrap().success);

        let mut l = lab(censor.clone(), 10_000);
        let req = l.request(PolicyMode::Quicstep);
        let out = l.fetch(req).unwrap();
        assert!(!out.success);
        assert!(l.censor().state.counters.unknown_cid > 0);

        let mut l = lab(censor, 10_000);
        let req = FetchRequest {
            roam: true,
            ..l.request(PolicyMode::Native)
        };
        let out = l.fetch(req).unwrap();
        assert!(!out.success);
        assert!(out.handshake_time.is_some());
        assert!(l.censor().state.counters.unknown_cid > 0);
    }

    #[test]
    fn roamer_succeeds_without_migration_block() {
        let mut l = lab(CensorConfig::off(), 10_000);
        let req = FetchRequest {
            roam: true,
            ..l.request(PolicyMode::Native)
        };
        let out = l.fetch(req).unwrap();
        assert!(out.success, "{out:?}");
        assert_eq!(out.migrations, 1);
    }

    #[test]
    fn mid_transfer_move_is_transparent() {
        let mut a = lab(CensorConfig::off(), 200_000);
        let req = FetchRequest {
            keep_response: true,
            ..a.request(PolicyMode::Native)
        };
        let plain = a.fetch(req).unwrap();
        let mut b = lab(CensorConfig::off(), 200_000);
        let req = FetchRequest {
            keep_response: true,
            migrate_after_bytes: Some(60_000),
            ..b.request(PolicyMode::Native)
        };
        let moved = b.fetch(req).unwrap();
        assert!(plain.success && moved.success);
        assert_eq!(plain.response, moved.response);
        assert_eq!(moved.migrations, 1);
        let alt = Addr::new(b.nodes.client, CLIENT_ALT_PORT);
        assert!(b
            .server()
            .tx_log
            .iter()
            .any(|t| t.remote == alt && t.frames.contains(&FrameType::Stream)));
    }

    #[test]
    fn nxdomain_fails_fetch() {
        let mut l = lab(CensorConfig::off(), 1000);
        let req = l.request(PolicyMode::Native).hostname("nowhere.example");
        assert_eq!(l.fetch(req).unwrap().failure, Some(FetchFailure::NxDomain));
    }

    #[test]
    fn dns_filter_blocks_native_resolution() {
        let mut l = lab(CensorConfig::off().block_dns("blocked.example"), 1000);
        let req = l.request(PolicyMode::Native).hostname("blocked.example");
        let out = l.fetch(req).unwrap();
        assert_eq!(out.failure, Some(FetchFailure::Timeout));
        assert_eq!(out.dns_attempts, 5);
        let mut l = lab(CensorConfig::off().block_dns("blocked.example"), 1000);
        let req = l.request(PolicyMode::Quicstep).hostname("blocked.example");
        assert!(l.fetch(req).unwrap().success);
    }

    #[test]
    fn lab_runs_one_fetch() {
        let mut l = lab(CensorConfig::off(), 1000);
        let req = l.request(PolicyMode::Native);
        l.fetch(req.clone()).unwrap();
        assert!(matches!(l.fetch(req), Err(LabError::AlreadyUsed)));
    }

    #[test]
    fn no_drops_in_lossless_uncensored_run() {
        let mut l = lab(CensorConfig::off(), 100_000);
        let req = l.request(PolicyMode::Quicstep);
        assert!(l.fetch(req).unwrap().success);
        assert!(l
            .sim
            .trace()
            .iter()
            .all(|r| r.direction != TraceDirection::Drop));
    }
}
