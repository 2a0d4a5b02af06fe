//! On-path adversary and tunnel proxy.
//!
//! The censor sees every datagram that crosses its node. It can read packet
//! headers, DNS queries and the ClientHello inside Initial packets (whose
//! keys follow from the wire-visible dcid), but tunnel payloads are opaque.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::netsim::{Ctx, Handler, InspectOutcome, Inspector, Micros};
use crate::wire::{
    decode_header, decode_packet, initial_keystream, tunnel_decap, tunnel_encap, Addr,
    ConnectionId, Datagram, Decoded, DnsKind, DnsMessage, Frame, HandshakeMessage, Header,
    LongType, NodeId, TunnelDatagram, TunnelKey, WireError,
};

pub const DEFAULT_STATE_CAPACITY: usize = 65536;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CensorMode {
    Off,
    DropAllHandshake,
    SniBlocklist,
    DnsFilter,
    MigrationBlock,
}

impl CensorMode {
    pub const ALL: [CensorMode; 5] = [
        CensorMode::Off,
        CensorMode::DropAllHandshake,
        CensorMode::SniBlocklist,
        CensorMode::DnsFilter,
        CensorMode::MigrationBlock,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CensorMode::Off => "off",
            CensorMode::DropAllHandshake => "drop_all_handshake",
            CensorMode::SniBlocklist => "sni_blocklist",
            CensorMode::DnsFilter => "dns_filter",
            CensorMode::MigrationBlock => "migration_block",
        }
    }
}

impl fmt::Display for CensorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for CensorMode {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        CensorMode::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| PolicyError::UnknownMode(s.to_string()))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("unknown censor mode `{0}`")]
    UnknownMode(String),
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("mode {0} is enabled but its blocklist is empty")]
    EmptyBlocklist(CensorMode),
    #[error("state capacity must be at least 1")]
    ZeroCapacity,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CensorConfig {
    pub modes: BTreeSet<CensorMode>,
    /// Lowercased hostnames.
    pub sni_blocklist: BTreeSet<String>,
    pub dns_blocklist: BTreeSet<String>,
    pub state_capacity: usize,
}

impl Default for CensorConfig {
    fn default() -> Self {
        CensorConfig {
            modes: BTreeSet::new(),
            sni_blocklist: BTreeSet::new(),
            dns_blocklist: BTreeSet::new(),
            state_capacity: DEFAULT_STATE_CAPACITY,
        }
    }
}

impl CensorConfig {
    pub fn off() -> Self {
        CensorConfig::default()
    }

    pub fn with_mode(mut self, mode: CensorMode) -> Self {
        self.modes.insert(mode);
        self
    }

    pub fn block_sni(mut self, host: &str) -> Self {
        self.modes.insert(CensorMode::SniBlocklist);
        self.sni_blocklist.insert(host.to_ascii_lowercase());
        self
    }

    pub fn block_dns(mut self, host: &str) -> Self {
        self.modes.insert(CensorMode::DnsFilter);
        self.dns_blocklist.insert(host.to_ascii_lowercase());
        self
    }

    pub fn has(&self, mode: CensorMode) -> bool {
        self.modes.contains(&mode)
    }

    /// True when no filtering mode is active.
    pub fn is_off(&self) -> bool {
        self.modes.iter().all(|m| *m == CensorMode::Off)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.has(CensorMode::SniBlocklist) && self.sni_blocklist.is_empty() {
            return Err(PolicyError::EmptyBlocklist(CensorMode::SniBlocklist));
        }
        if self.has(CensorMode::DnsFilter) && self.dns_blocklist.is_empty() {
            return Err(PolicyError::EmptyBlocklist(CensorMode::DnsFilter));
        }
        if self.state_capacity == 0 {
            return Err(PolicyError::ZeroCapacity);
        }
        Ok(())
    }

    /// Applies one `key value` policy line. Returns `Ok(false)` when the key
    /// is not a censor policy key, so callers can layer their own keys.
    pub fn apply_line(&mut self, key: &str, value: &str) -> Result<bool, String> {
        match key {
            "mode" => {
                let mode: CensorMode = value.parse().map_err(|e: PolicyError| e.to_string())?;
                self.modes.insert(mode);
            }
            "sni" => {
                self.sni_blocklist.insert(value.to_ascii_lowercase());
            }
            "dns" => {
                self.dns_blocklist.insert(value.to_ascii_lowercase());
            }
            "capacity" => {
                self.state_capacity = value
                    .parse()
                    .map_err(|_| format!("bad capacity `{value}`"))?;
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses a policy file: `mode <name>` (repeatable), `sni <host>`,
    /// `dns <host>`, `capacity <n>`. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<CensorConfig, PolicyError> {
        let mut cfg = CensorConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |msg: String| PolicyError::Syntax { line: i + 1, msg };
            let (key, value) = line
                .split_once(char::is_whitespace)
                .map(|(k, v)| (k, v.trim()))
                .ok_or_else(|| syntax(format!("expected `key value`, got `{line}`")))?;
            match cfg.apply_line(key, value) {
                Ok(true) => {}
                Ok(false) => return Err(syntax(format!("unknown key `{key}`"))),
                Err(msg) => return Err(syntax(msg)),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Forward,
    Drop,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Reason {
    None,
    HandshakePacket,
    SniMatch { hostname: String },
    DnsMatch { hostname: String },
    UnknownCidMigration,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Verdict {
    pub action: Action,
    pub reason: Reason,
}

impl Verdict {
    pub const FORWARD: Verdict = Verdict {
        action: Action::Forward,
        reason: Reason::None,
    };

    pub fn drop(reason: Reason) -> Self {
        Verdict {
            action: Action::Drop,
            reason,
        }
    }

    pub fn is_drop(&self) -> bool {
        self.action == Action::Drop
    }

    /// Short label used in the trace `verdict` column.
    pub fn label(&self) -> String {
        match &self.reason {
            Reason::None => "forward".into(),
            Reason::HandshakePacket => "drop:handshake".into(),
            Reason::SniMatch { hostname } => format!("drop:sni:{hostname}"),
            Reason::DnsMatch { hostname } => format!("drop:dns:{hostname}"),
            Reason::UnknownCidMigration => "drop:unknown_cid".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VerdictCounters {
    pub forwarded: u64,
    pub handshake: u64,
    pub sni: u64,
    pub dns: u64,
    pub unknown_cid: u64,
}

impl VerdictCounters {
    pub fn total(&self) -> u64 {
        self.forwarded + self.dropped()
    }

    pub fn dropped(&self) -> u64 {
        self.handshake + self.sni + self.dns + self.unknown_cid
    }

    fn count(&mut self, v: &Verdict) {
        match v.reason {
            Reason::None => self.forwarded += 1,
            Reason::HandshakePacket => self.handshake += 1,
            Reason::SniMatch { .. } => self.sni += 1,
            Reason::DnsMatch { .. } => self.dns += 1,
            Reason::UnknownCidMigration => self.unknown_cid += 1,
        }
    }

    pub fn merge(&mut self, o: &VerdictCounters) {
        self.forwarded += o.forwarded;
        self.handshake += o.handshake;
        self.sni += o.sni;
        self.dns += o.dns;
        self.unknown_cid += o.unknown_cid;
    }
}

/// Connection IDs with least-recently-used eviction.
#[derive(Debug, Clone, Default)]
pub struct CidLru {
    capacity: usize,
    clock: u64,
    stamps: HashMap<ConnectionId, u64>,
    order: BTreeMap<u64, ConnectionId>,
}

impl CidLru {
    pub fn new(capacity: usize) -> Self {
        CidLru {
            capacity,
            ..CidLru::default()
        }
    }

    pub fn len(&self) -> usize {
        self.stamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stamps.is_empty()
    }

    pub fn insert(&mut self, cid: ConnectionId) {
        self.touch(cid);
        while self.stamps.len() > self.capacity {
            let (_, old) = self.order.pop_first().expect("nonempty");
            self.stamps.remove(&old);
        }
    }

    /// Looks up `cid`, refreshing its recency on a hit.
    pub fn contains(&mut self, cid: &ConnectionId) -> bool {
        if self.stamps.contains_key(cid) {
            self.touch(*cid);
            true
        } else {
            false
        }
    }

    fn touch(&mut self, cid: ConnectionId) {
        self.clock += 1;
        if let Some(old) = self.stamps.insert(cid, self.clock) {
            self.order.remove(&old);
        }
        self.order.insert(self.clock, cid);
    }
}

#[derive(Debug, Clone)]
pub struct CensorState {
    pub seen_cids: CidLru,
    /// Connection IDs tied to a blocklisted ClientHello, with the hostname.
    flagged: HashMap<ConnectionId, String>,
    pub counters: VerdictCounters,
}

impl CensorState {
    pub fn new(cfg: &CensorConfig) -> Self {
        CensorState {
            seen_cids: CidLru::new(cfg.state_capacity),
            flagged: HashMap::new(),
            counters: VerdictCounters::default(),
        }
    }
}

/// Decides the fate of one datagram payload. Total: any byte string gets a
/// verdict, and anything unparseable is forwarded.
pub fn inspect(cfg: &CensorConfig, state: &mut CensorState, bytes: &[u8]) -> Verdict {
    let v = decide(cfg, state, bytes);
    state.counters.count(&v);
    v
}

fn decide(cfg: &CensorConfig, state: &mut CensorState, bytes: &[u8]) -> Verdict {
    if cfg.is_off() {
        return Verdict::FORWARD;
    }
    if TunnelDatagram::decode(bytes).is_ok() {
        return Verdict::FORWARD;
    }
    if let Ok(dns) = DnsMessage::decode(bytes) {
        let host = dns.hostname.to_ascii_lowercase();
        if cfg.has(CensorMode::DnsFilter)
            && dns.kind == DnsKind::Query
            && cfg.dns_blocklist.contains(&host)
        {
            return Verdict::drop(Reason::DnsMatch { hostname: host });
        }
        return Verdict::FORWARD;
    }
    let Ok((header, _)) = decode_header(bytes) else {
        return Verdict::FORWARD;
    };
    match header {
        Header::Long { ty, dcid, scid, .. } => {
            if cfg.has(CensorMode::MigrationBlock) {
                state.seen_cids.insert(dcid);
                state.seen_cids.insert(scid);
            }
            if cfg.has(CensorMode::DropAllHandshake) {
                return Verdict::drop(Reason::HandshakePacket);
            }
            if cfg.has(CensorMode::SniBlocklist) {
                if ty == LongType::Initial {
                    if let Ok(SniReport {
                        sni: Some(host), ..
                    }) = extract_sni(bytes)
                    {
                        let host = host.to_ascii_lowercase();
                        if cfg.sni_blocklist.contains(&host) {
                            state.flagged.insert(dcid, host.clone());
                            state.flagged.insert(scid, host.clone());
                            return Verdict::drop(Reason::SniMatch { hostname: host });
                        }
                    }
                }
                if let Some(host) = state.flagged.get(&dcid) {
                    return Verdict::drop(Reason::SniMatch {
                        hostname: host.clone(),
                    });
                }
            }
            Verdict::FORWARD
        }
        Header::Short { dcid, .. } => {
            if cfg.has(CensorMode::MigrationBlock) && !state.seen_cids.contains(&dcid) {
                return Verdict::drop(Reason::UnknownCidMigration);
            }
            Verdict::FORWARD
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SniError {
    #[error("not a long-header Initial packet")]
    NotInitial,
    #[error("malformed header: {0}")]
    BadHeader(WireError),
}

/// What an observer learns from an Initial packet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SniReport {
    pub sni: Option<String>,
    /// Set when the payload did not decrypt into frames.
    pub diagnostic: Option<String>,
}

/// Decrypts an Initial packet with keys derived from its own dcid and
/// returns the ClientHello server name, if it carries one.
pub fn extract_sni(bytes: &[u8]) -> Result<SniReport, SniError> {
    let (header, payload) = decode_header(bytes).map_err(SniError::BadHeader)?;
    if header.long_type() != Some(LongType::Initial) {
        return Err(SniError::NotInitial);
    }
    let ks = initial_keystream(&header.dcid(), payload.len());
    let packet = match decode_packet(bytes, &ks) {
        Ok(Decoded::Packet(p)) => p,
        Ok(Decoded::Opaque(_)) => {
            return Ok(SniReport {
                sni: None,
                diagnostic: Some("payload failed to parse under the initial keystream".into()),
            })
        }
        Err(e) => {
            return Ok(SniReport {
                sni: None,
                diagnostic: Some(e.to_string()),
            })
        }
    };
    let sni = packet.frames.iter().find_map(|f| match f {
        Frame::Crypto { data, .. } => match HandshakeMessage::decode(data) {
            Ok(HandshakeMessage::ClientHello { sni, .. }) => Some(sni),
            _ => None,
        },
        _ => None,
    });
    Ok(SniReport {
        sni,
        diagnostic: None,
    })
}

/// Every hostname an observer could read from one datagram payload: DNS
/// query names and ClientHello server names.
pub fn visible_hostnames(bytes: &[u8]) -> Vec<String> {
    if TunnelDatagram::decode(bytes).is_ok() {
        return Vec::new();
    }
    if let Ok(dns) = DnsMessage::decode(bytes) {
        return vec![dns.hostname];
    }
    match extract_sni(bytes) {
        Ok(SniReport { sni: Some(h), .. }) => vec![h],
        _ => Vec::new(),
    }
}

/// Inspector wrapper placing a censor on a simulator node.
#[derive(Debug)]
pub struct CensorNode {
    pub config: CensorConfig,
    pub state: CensorState,
    capture: Option<Vec<(Micros, Datagram, Verdict)>>,
}

impl CensorNode {
    pub fn new(config: CensorConfig) -> Self {
        let state = CensorState::new(&config);
        CensorNode {
            config,
            state,
            capture: None,
        }
    }

    /// Also keeps a copy of every datagram inspected, for audits.
    pub fn with_capture(mut self) -> Self {
        self.capture = Some(Vec::new());
        self
    }

    pub fn captured(&self) -> &[(Micros, Datagram, Verdict)] {
        self.capture.as_deref().unwrap_or(&[])
    }
}

impl Inspector for CensorNode {
    fn inspect(&mut self, now: Micros, dgram: &Datagram) -> InspectOutcome {
        let v = inspect(&self.config, &mut self.state, &dgram.payload);
        let out = InspectOutcome {
            forward: !v.is_drop(),
            label: v.label(),
        };
        if let Some(c) = &mut self.capture {
            c.push((now, dgram.clone(), v));
        }
        out
    }
}

/// Port on which the proxy terminates tunnels.
pub const TUNNEL_PORT: u16 = 51820;
/// First external port handed out to proxied flows.
pub const FIRST_NAT_PORT: u16 = 40000;
/// Proxy-to-client nonces start here so the two directions never share a
/// keystream.
pub const PROXY_NONCE_BASE: u64 = 1 << 63;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Flow {
    client: Addr,
    inner_src: Addr,
    inner_dst: Addr,
}

#[derive(Debug, Clone)]
struct TunnelPeer {
    key: TunnelKey,
    last_rx_nonce: Option<u64>,
    next_tx_nonce: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProxyStats {
    pub decapsulated: u64,
    pub encapsulated: u64,
    pub dropped: u64,
}

#[derive(Debug, Clone)]
pub struct ProxyState {
    node: NodeId,
    peers: HashMap<Addr, TunnelPeer>,
    flows: HashMap<Flow, u16>,
    by_port: HashMap<u16, Flow>,
    next_port: u16,
    pub stats: ProxyStats,
    pub diagnostics: Vec<String>,
}

impl ProxyState {
    pub fn new(node: NodeId) -> Self {
        ProxyState {
            node,
            peers: HashMap::new(),
            flows: HashMap::new(),
            by_port: HashMap::new(),
            next_port: FIRST_NAT_PORT,
            stats: ProxyStats::default(),
            diagnostics: Vec::new(),
        }
    }

    pub fn tunnel_addr(&self) -> Addr {
        Addr::new(self.node, TUNNEL_PORT)
    }

    /// Registers a client tunnel endpoint and its key.
    pub fn provision(&mut self, client: Addr, key: TunnelKey) {
        self.peers.insert(
            client,
            TunnelPeer {
                key,
                last_rx_nonce: None,
                next_tx_nonce: PROXY_NONCE_BASE,
            },
        );
    }

    pub fn flow_count(&self) -> usize {
        self.flows.len()
    }

    fn reject(&mut self, why: String) -> Vec<Datagram> {
        self.stats.dropped += 1;
        self.diagnostics.push(why);
        Vec::new()
    }

    /// Handles one datagram that arrived at the proxy node.
    pub fn proxy_forward(&mut self, dgram: &Datagram, _now: Micros) -> Vec<Datagram> {
        if dgram.dst == self.tunnel_addr() {
            self.on_client_side(dgram)
        } else {
            self.on_server_side(dgram)
        }
    }

    fn on_client_side(&mut self, dgram: &Datagram) -> Vec<Datagram> {
        let Some(peer) = self.peers.get(&dgram.src) else {
            return self.reject(format!("no tunnel provisioned for {}", dgram.src));
        };
        let key = peer.key;
        let last = peer.last_rx_nonce;
        let td = match TunnelDatagram::decode(&dgram.payload) {
            Ok(td) => td,
            Err(e) => return self.reject(format!("non-tunnel datagram from {}: {e}", dgram.src)),
        };
        if last.is_some_and(|l| td.nonce <= l) {
            return self.reject(format!("stale nonce {} from {}", td.nonce, dgram.src));
        }
        let inner = match Datagram::decode(&tunnel_decap(&td, &key)) {
            Ok(d) => d,
            Err(e) => return self.reject(format!("decapsulation failed for {}: {e}", dgram.src)),
        };
        self.peers
            .get_mut(&dgram.src)
            .expect("checked")
            .last_rx_nonce = Some(td.nonce);
        let flow = Flow {
            client: dgram.src,
            inner_src: inner.src,
            inner_dst: inner.dst,
        };
        let port = match self.flows.get(&flow) {
            Some(p) => *p,
            None => {
                let p = self.next_port;
                self.next_port = self.next_port.checked_add(1).unwrap_or(FIRST_NAT_PORT);
                self.flows.insert(flow, p);
                self.by_port.insert(p, flow);
                p
            }
        };
        self.stats.decapsulated += 1;
        vec![Datagram::new(
            Addr::new(self.node, port),
            inner.dst,
            inner.payload,
        )]
    }

    fn on_server_side(&mut self, dgram: &Datagram) -> Vec<Datagram> {
        let Some(flow) = self.by_port.get(&dgram.dst.port).copied() else {
            return self.reject(format!("no flow for {} -> {}", dgram.src, dgram.dst));
        };
        if flow.inner_dst != dgram.src {
            return self.reject(format!(
                "{} is not the peer of flow on port {}",
                dgram.src, dgram.dst.port
            ));
        }
        let inner = Datagram::new(flow.inner_dst, flow.inner_src, dgram.payload.clone());
        let bytes = match inner.encode() {
            Ok(b) => b,
            Err(e) => return self.reject(format!("cannot encapsulate reply: {e}")),
        };
        let peer = self
            .peers
            .get_mut(&flow.client)
            .expect("flows only exist for provisioned peers");
        let nonce = peer.next_tx_nonce;
        peer.next_tx_nonce += 1;
        let td = tunnel_encap(&bytes, &peer.key, nonce);
        let payload = match td.encode() {
            Ok(b) => b,
            Err(e) => return self.reject(format!("cannot encapsulate reply: {e}")),
        };
        self.stats.encapsulated += 1;
        vec![Datagram::new(self.tunnel_addr(), flow.client, payload)]
    }
}

/// Simulator handler running a [`ProxyState`].
#[derive(Debug)]
pub struct ProxyNode {
    pub state: ProxyState,
}

impl ProxyNode {
    pub fn new(state: ProxyState) -> Self {
        ProxyNode { state }
    }
}

impl Handler for ProxyNode {
    fn on_datagram(&mut self, ctx: &mut Ctx<'_>, dgram: Datagram) {
        for d in self.state.proxy_forward(&dgram, ctx.now()) {
            ctx.send(d);
        }
    }
}
