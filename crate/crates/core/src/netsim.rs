//! Deterministic discrete-event network simulator.
//!
//! Nodes are joined by unidirectional FIFO links with a propagation delay,
//! an optional serialization bandwidth and an optional loss rate. Datagrams
//! are forwarded store-and-forward along a static next-hop table. Endpoint
//! logic lives in [`Handler`]s attached to nodes; middleboxes that sit on
//! the forwarding path implement [`Inspector`].
//!
//! Time is an integer count of microseconds. The seeded RNG is consumed only
//! by loss draws, in scheduling order, so identical inputs always produce an
//! identical trace.

use std::any::Any;
use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::fmt;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::wire::{classify_payload, Addr, Datagram, LongType, NodeId, PayloadView};

pub type Micros = u64;

pub const MS: Micros = 1_000;
pub const SEC: Micros = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetsimError {
    #[error("unknown node {0:?}")]
    UnknownNode(NodeId),
    #[error("invalid link {from:?} -> {to:?}: {reason}")]
    InvalidLink {
        from: NodeId,
        to: NodeId,
        reason: String,
    },
    #[error("no route from {src} to {dst}")]
    NoRoute { src: String, dst: String },
    #[error("route from {src} to {dst} loops")]
    RouteLoop { src: String, dst: String },
    #[error("route from {src} to {dst} bypasses the censor")]
    CensorBypass { src: String, dst: String },
    #[error("datagram to unroutable destination {0}")]
    Unroutable(Addr),
    #[error("node {0:?} is not owned by the sending handler")]
    ForeignSource(NodeId),
    #[error("node {0:?} already has a handler")]
    NodeTaken(NodeId),
    #[error("cannot schedule in the past ({at} < {now})")]
    Past { at: Micros, now: Micros },
}

pub type Result<T> = std::result::Result<T, NetsimError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeRole {
    Client,
    Server,
    Censor,
    Proxy,
    DnsResolver,
    /// An ordinary host or router outside the censored network.
    Host,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSpec {
    pub name: String,
    pub role: NodeRole,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkSpec {
    pub from: NodeId,
    pub to: NodeId,
    pub one_way_delay: Micros,
    /// Bytes per second; 0 means infinite.
    pub bandwidth: u64,
    pub loss_rate: f64,
}

impl LinkSpec {
    pub fn new(from: NodeId, to: NodeId, one_way_delay: Micros) -> Self {
        LinkSpec {
            from,
            to,
            one_way_delay,
            bandwidth: 0,
            loss_rate: 0.0,
        }
    }

    pub fn serialization_time(&self, size: usize) -> Micros {
        serialization_time(size, self.bandwidth)
    }
}

/// Time to clock `size` bytes onto a link of `bandwidth` bytes/s, rounded up.
pub fn serialization_time(size: usize, bandwidth: u64) -> Micros {
    if bandwidth == 0 {
        0
    } else {
        (size as u64 * SEC).div_ceil(bandwidth)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Topology {
    nodes: Vec<NodeSpec>,
    links: Vec<LinkSpec>,
    route_overrides: HashMap<(NodeId, NodeId), NodeId>,
}

impl Topology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, name: &str, role: NodeRole) -> NodeId {
        self.nodes.push(NodeSpec {
            name: name.to_string(),
            role,
        });
        NodeId((self.nodes.len() - 1) as u16)
    }

    pub fn add_link(&mut self, link: LinkSpec) -> Result<()> {
        let bad = |reason: &str| NetsimError::InvalidLink {
            from: link.from,
            to: link.to,
            reason: reason.into(),
        };
        self.node(link.from)?;
        self.node(link.to)?;
        if link.from == link.to {
            return Err(bad("self loop"));
        }
        if !(0.0..=1.0).contains(&link.loss_rate) {
            return Err(bad("loss rate outside [0, 1]"));
        }
        if self
            .links
            .iter()
            .any(|l| l.from == link.from && l.to == link.to)
        {
            return Err(bad("duplicate link"));
        }
        self.links.push(link);
        Ok(())
    }

    /// Adds a pair of identical links, one in each direction.
    pub fn add_duplex(
        &mut self,
        a: NodeId,
        b: NodeId,
        delay: Micros,
        bandwidth: u64,
        loss_rate: f64,
    ) -> Result<()> {
        self.add_link(LinkSpec {
            from: a,
            to: b,
            one_way_delay: delay,
            bandwidth,
            loss_rate,
        })?;
        self.add_link(LinkSpec {
            from: b,
            to: a,
            one_way_delay: delay,
            bandwidth,
            loss_rate,
        })
    }

    /// Pins the next hop from `at` towards `dst`, overriding the computed route.
    pub fn set_next_hop(&mut self, at: NodeId, dst: NodeId, next: NodeId) {
        self.route_overrides.insert((at, dst), next);
    }

    pub fn node(&self, id: NodeId) -> Result<&NodeSpec> {
        self.nodes
            .get(id.0 as usize)
            .ok_or(NetsimError::UnknownNode(id))
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &NodeSpec)> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (NodeId(i as u16), n))
    }

    pub fn links(&self) -> &[LinkSpec] {
        &self.links
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes
            .iter()
            .position(|n| n.name == name)
            .map(|i| NodeId(i as u16))
    }

    fn link_index(&self, from: NodeId, to: NodeId) -> Option<usize> {
        self.links.iter().position(|l| l.from == from && l.to == to)
    }

    /// Computes the next-hop table: fewest hops, ties broken by total delay
    /// and then by lower node id. Overrides take precedence.
    fn compute_routes(&self) -> Result<Vec<Vec<Option<usize>>>> {
        let n = self.nodes.len();
        let mut table = vec![vec![None; n]; n];
        for src in 0..n {
            // (hops, delay, first hop link) per destination
            let mut best: Vec<Option<(usize, Micros, usize)>> = vec![None; n];
            let mut queue = VecDeque::new();
            best[src] = Some((0, 0, usize::MAX));
            queue.push_back(src);
            while let Some(u) = queue.pop_front() {
                let (hops, delay, first) = best[u].expect("visited");
                let mut out: Vec<(usize, usize)> = self
                    .links
                    .iter()
                    .enumerate()
                    .filter(|(_, l)| l.from.0 as usize == u)
                    .map(|(i, l)| (i, l.to.0 as usize))
                    .collect();
                out.sort_by_key(|&(_, v)| v);
                for (li, v) in out {
                    let cand = (
                        hops + 1,
                        delay + self.links[li].one_way_delay,
                        if u == src { li } else { first },
                    );
                    let better = match best[v] {
                        None => true,
                        Some((h, d, _)) => (cand.0, cand.1) < (h, d),
                    };
                    if better {
                        let fresh = best[v].is_none();
                        best[v] = Some(cand);
                        if fresh {
                            queue.push_back(v);
                        }
                    }
                }
            }
            for dst in 0..n {
                if dst != src {
                    table[src][dst] = best[dst].map(|(_, _, first)| first);
                }
            }
        }
        for (&(at, dst), &next) in &self.route_overrides {
            let li = self
                .link_index(at, next)
                .ok_or_else(|| NetsimError::InvalidLink {
                    from: at,
                    to: next,
                    reason: "route override uses a missing link".into(),
                })?;
            table[at.0 as usize][dst.0 as usize] = Some(li);
        }
        Ok(table)
    }

    fn name(&self, id: NodeId) -> String {
        self.nodes
            .get(id.0 as usize)
            .map(|n| n.name.clone())
            .unwrap_or_else(|| format!("#{}", id.0))
    }
}

/// Walks the next-hop table from `src` to `dst`.
fn walk(
    topo: &Topology,
    routes: &[Vec<Option<usize>>],
    src: NodeId,
    dst: NodeId,
) -> Result<Vec<NodeId>> {
    let mut path = vec![src];
    let mut at = src;
    while at != dst {
        let li = routes[at.0 as usize][dst.0 as usize].ok_or_else(|| NetsimError::NoRoute {
            src: topo.name(src),
            dst: topo.name(dst),
        })?;
        at = topo.links[li].to;
        if path.contains(&at) {
            return Err(NetsimError::RouteLoop {
                src: topo.name(src),
                dst: topo.name(dst),
            });
        }
        path.push(at);
    }
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TraceDirection {
    Send,
    Recv,
    Drop,
    /// Passed through an inspecting middlebox.
    Fwd,
}

impl TraceDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceDirection::Send => "SEND",
            TraceDirection::Recv => "RECV",
            TraceDirection::Drop => "DROP",
            TraceDirection::Fwd => "FWD",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "SEND" => TraceDirection::Send,
            "RECV" => TraceDirection::Recv,
            "DROP" => TraceDirection::Drop,
            "FWD" => TraceDirection::Fwd,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub time: Micros,
    pub node: NodeId,
    pub direction: TraceDirection,
    pub view: PayloadView,
    pub size: usize,
    pub verdict: Option<String>,
    pub datagram_id: u64,
    pub src: Addr,
    pub dst: Addr,
}

/// One exported trace line, parsed back from text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceLine {
    pub time: Micros,
    pub node: String,
    pub direction: TraceDirection,
    pub form: String,
    pub long_type: Option<String>,
    pub dcid_hex: Option<String>,
    pub pn: Option<u64>,
    pub size: usize,
    pub verdict: Option<String>,
}

pub const TRACE_HEADER: &str = "time_us,node,direction,form,long_type,dcid_hex,pn,size,verdict";

impl TraceLine {
    pub fn parse(line: &str) -> std::result::Result<Self, String> {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 9 {
            return Err(format!("expected 9 columns, got {}", cols.len()));
        }
        let opt = |s: &str| if s == "-" { None } else { Some(s.to_string()) };
        let form = cols[3].to_string();
        if !["long", "short", "tunnel", "dns", "unknown"].contains(&form.as_str()) {
            return Err(format!("bad form {form}"));
        }
        let dcid_hex = opt(cols[5]);
        if let Some(h) = &dcid_hex {
            if h.len() != 16 || !h.chars().all(|c| c.is_ascii_hexdigit()) {
                return Err(format!("bad dcid {h}"));
            }
        }
        Ok(TraceLine {
            time: cols[0].parse().map_err(|e| format!("time: {e}"))?,
            node: cols[1].to_string(),
            direction: TraceDirection::parse(cols[2])
                .ok_or_else(|| format!("bad direction {}", cols[2]))?,
            form,
            long_type: opt(cols[4]),
            dcid_hex,
            pn: opt(cols[6])
                .map(|s| s.parse().map_err(|e| format!("pn: {e}")))
                .transpose()?,
            size: cols[7].parse().map_err(|e| format!("size: {e}"))?,
            verdict: opt(cols[8]),
        })
    }
}

fn format_record(topo: &Topology, r: &TraceRecord) -> String {
    let (form, long_type, dcid, pn) = match &r.view {
        PayloadView::Long { ty, dcid, pn } => {
            let t = match ty {
                LongType::Initial => "initial",
                LongType::Handshake => "handshake",
            };
            ("long", t.to_string(), dcid.to_hex(), pn.to_string())
        }
        PayloadView::Short { dcid, pn } => ("short", "-".into(), dcid.to_hex(), pn.to_string()),
        PayloadView::Tunnel { .. } => ("tunnel", "-".into(), "-".into(), "-".into()),
        PayloadView::Dns { .. } => ("dns", "-".into(), "-".into(), "-".into()),
        PayloadView::Unknown => ("unknown", "-".into(), "-".into(), "-".into()),
    };
    format!(
        "{},{},{},{},{},{},{},{},{}",
        r.time,
        topo.name(r.node),
        r.direction.as_str(),
        form,
        long_type,
        dcid,
        pn,
        r.size,
        r.verdict.as_deref().unwrap_or("-")
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HandlerId(pub usize);

/// Capabilities handed to a handler while it processes an event.
pub struct Ctx<'a> {
    now: Micros,
    node: NodeId,
    outbox: &'a mut Vec<Datagram>,
    timers: &'a mut Vec<(Micros, u64)>,
}

impl Ctx<'_> {
    pub fn now(&self) -> Micros {
        self.now
    }

    /// Node at which the current event occurred.
    pub fn node(&self) -> NodeId {
        self.node
    }

    /// Queues a datagram; it departs from `dgram.src.node` at the current time.
    pub fn send(&mut self, dgram: Datagram) {
        self.outbox.push(dgram);
    }

    pub fn set_timer(&mut self, at: Micros, token: u64) {
        self.timers.push((at.max(self.now), token));
    }
}

/// Endpoint logic bound to one or more nodes.
pub trait Handler: Any {
    fn on_datagram(&mut self, ctx: &mut Ctx<'_>, dgram: Datagram);

    fn on_timer(&mut self, _ctx: &mut Ctx<'_>, _token: u64) {}
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InspectOutcome {
    pub forward: bool,
    pub label: String,
}

/// A middlebox consulted for every datagram transiting its node.
pub trait Inspector: Any {
    fn inspect(&mut self, now: Micros, dgram: &Datagram) -> InspectOutcome;
}

#[derive(Debug)]
enum EventKind {
    Arrive {
        node: NodeId,
        dgram: Datagram,
        id: u64,
    },
    Timer {
        handler: HandlerId,
        token: u64,
    },
}

#[derive(Debug)]
struct Scheduled {
    time: Micros,
    seq: u64,
    kind: EventKind,
}

impl Scheduled {
    // arrivals sort before timers at the same instant
    fn key(&self) -> (Micros, u8, u64) {
        let class = match self.kind {
            EventKind::Arrive { .. } => 0,
            EventKind::Timer { .. } => 1,
        };
        (self.time, class, self.seq)
    }
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap
        other.key().cmp(&self.key())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOutcome {
    pub time: Micros,
    pub timed_out: bool,
}

pub struct Simulator {
    topo: Topology,
    routes: Vec<Vec<Option<usize>>>,
    now: Micros,
    seq: u64,
    queue: BinaryHeap<Scheduled>,
    rng: ChaCha8Rng,
    link_busy_until: Vec<Micros>,
    trace: Vec<TraceRecord>,
    next_datagram_id: u64,
    handlers: Vec<Option<Box<dyn Handler>>>,
    handler_nodes: Vec<Vec<NodeId>>,
    node_handler: Vec<Option<HandlerId>>,
    inspectors: Vec<Option<Box<dyn Inspector>>>,
}

impl fmt::Debug for Simulator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Simulator")
            .field("now", &self.now)
            .field("pending", &self.queue.len())
            .field("trace_len", &self.trace.len())
            .finish()
    }
}

impl Simulator {
    /// Validates the topology, computes routes and returns an idle simulator.
    ///
    /// Every node pair must be routable, and every route between a client
    /// node and a server, proxy or resolver must cross a censor node.
    pub fn build(topo: Topology, seed: u64) -> Result<Self> {
        let routes = topo.compute_routes()?;
        let n = topo.nodes.len();
        for s in 0..n {
            for d in 0..n {
                if s != d {
                    walk(&topo, &routes, NodeId(s as u16), NodeId(d as u16))?;
                }
            }
        }
        for (c, cn) in topo.nodes() {
            if cn.role != NodeRole::Client {
                continue;
            }
            for (t, tn) in topo.nodes() {
                if !matches!(
                    tn.role,
                    NodeRole::Server | NodeRole::Proxy | NodeRole::DnsResolver
                ) {
                    continue;
                }
                for (a, b) in [(c, t), (t, c)] {
                    let path = walk(&topo, &routes, a, b)?;
                    let censored = path[1..path.len() - 1]
                        .iter()
                        .any(|id| topo.nodes[id.0 as usize].role == NodeRole::Censor);
                    if !censored {
                        return Err(NetsimError::CensorBypass {
                            src: topo.name(a),
                            dst: topo.name(b),
                        });
                    }
                }
            }
        }
        let links = topo.links.len();
        Ok(Simulator {
            routes,
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            link_busy_until: vec![0; links],
            trace: Vec::new(),
            next_datagram_id: 0,
            handlers: Vec::new(),
            handler_nodes: Vec::new(),
            node_handler: vec![None; n],
            inspectors: (0..n).map(|_| None).collect(),
            topo,
        })
    }

    pub fn now(&self) -> Micros {
        self.now
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    /// Node sequence a datagram from `src` to `dst` traverses.
    pub fn route(&self, src: NodeId, dst: NodeId) -> Result<Vec<NodeId>> {
        walk(&self.topo, &self.routes, src, dst)
    }

    /// Sum of link delays along the route.
    pub fn path_delay(&self, src: NodeId, dst: NodeId) -> Result<Micros> {
        let path = self.route(src, dst)?;
        Ok(path
            .windows(2)
            .map(|w| {
                self.topo.links[self.topo.link_index(w[0], w[1]).expect("routed link")]
                    .one_way_delay
            })
            .sum())
    }

    pub fn attach(&mut self, nodes: &[NodeId], handler: Box<dyn Handler>) -> Result<HandlerId> {
        for &n in nodes {
            self.topo.node(n)?;
            if self.node_handler[n.0 as usize].is_some() {
                return Err(NetsimError::NodeTaken(n));
            }
        }
        let id = HandlerId(self.handlers.len());
        for &n in nodes {
            self.node_handler[n.0 as usize] = Some(id);
        }
        self.handlers.push(Some(handler));
        self.handler_nodes.push(nodes.to_vec());
        Ok(id)
    }

    pub fn set_inspector(&mut self, node: NodeId, inspector: Box<dyn Inspector>) -> Result<()> {
        self.topo.node(node)?;
        self.inspectors[node.0 as usize] = Some(inspector);
        Ok(())
    }

    pub fn handler<T: Handler>(&self, id: HandlerId) -> Option<&T> {
        let h: &dyn Handler = self.handlers.get(id.0)?.as_deref()?;
        (h as &dyn Any).downcast_ref()
    }

    pub fn handler_mut<T: Handler>(&mut self, id: HandlerId) -> Option<&mut T> {
        let h: &mut dyn Handler = self.handlers.get_mut(id.0)?.as_deref_mut()?;
        (h as &mut dyn Any).downcast_mut()
    }

    pub fn inspector<T: Inspector>(&self, node: NodeId) -> Option<&T> {
        let i: &dyn Inspector = self.inspectors.get(node.0 as usize)?.as_deref()?;
        (i as &dyn Any).downcast_ref()
    }

    pub fn schedule_timer(&mut self, handler: HandlerId, at: Micros, token: u64) -> Result<()> {
        if at < self.now {
            return Err(NetsimError::Past { at, now: self.now });
        }
        self.push(at, EventKind::Timer { handler, token });
        Ok(())
    }

    /// Injects a datagram at `src.node`, departing at `at`.
    pub fn send(&mut self, dgram: Datagram, at: Micros) -> Result<()> {
        if at < self.now {
            return Err(NetsimError::Past { at, now: self.now });
        }
        let from = dgram.src.node;
        self.topo.node(from)?;
        self.topo
            .node(dgram.dst.node)
            .map_err(|_| NetsimError::Unroutable(dgram.dst))?;
        if from == dgram.dst.node {
            return Err(NetsimError::Unroutable(dgram.dst));
        }
        let id = self.next_datagram_id;
        self.next_datagram_id += 1;
        self.record(at, from, TraceDirection::Send, &dgram, None, id);
        self.forward(from, dgram, id, at)
    }

    fn forward(&mut self, at_node: NodeId, dgram: Datagram, id: u64, now: Micros) -> Result<()> {
        let li = self.routes[at_node.0 as usize][dgram.dst.node.0 as usize]
            .ok_or(NetsimError::Unroutable(dgram.dst))?;
        let link = &self.topo.links[li];
        if link.loss_rate > 0.0 && self.rng.gen::<f64>() < link.loss_rate {
            self.record(
                now,
                at_node,
                TraceDirection::Drop,
                &dgram,
                Some("loss".into()),
                id,
            );
            return Ok(());
        }
        let departure =
            now.max(self.link_busy_until[li]) + link.serialization_time(dgram.payload.len());
        self.link_busy_until[li] = departure;
        let arrival = departure + link.one_way_delay;
        let node = link.to;
        self.push(arrival, EventKind::Arrive { node, dgram, id });
        Ok(())
    }

    fn push(&mut self, time: Micros, kind: EventKind) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Scheduled { time, seq, kind });
    }

    fn record(
        &mut self,
        time: Micros,
        node: NodeId,
        direction: TraceDirection,
        d: &Datagram,
        verdict: Option<String>,
        id: u64,
    ) {
        self.trace.push(TraceRecord {
            time,
            node,
            direction,
            view: classify_payload(&d.payload),
            size: d.payload.len(),
            verdict,
            datagram_id: id,
            src: d.src,
            dst: d.dst,
        });
    }

    /// Processes events in order until `done` holds or `deadline` passes.
    pub fn run_until<F: FnMut(&Simulator) -> bool>(
        &mut self,
        mut done: F,
        deadline: Micros,
    ) -> RunOutcome {
        if done(self) {
            return RunOutcome {
                time: self.now,
                timed_out: false,
            };
        }
        while let Some(ev) = self.queue.peek() {
            if ev.time > deadline {
                break;
            }
            let ev = self.queue.pop().expect("peeked");
            self.now = ev.time;
            self.dispatch(ev.kind);
            if done(self) {
                return RunOutcome {
                    time: self.now,
                    timed_out: false,
                };
            }
        }
        self.now = self.now.max(deadline);
        RunOutcome {
            time: self.now,
            timed_out: true,
        }
    }

    /// Runs until the event queue drains or `deadline` passes.
    pub fn run_to_idle(&mut self, deadline: Micros) -> RunOutcome {
        let out = self.run_until(|_| false, deadline);
        RunOutcome {
            time: out.time,
            timed_out: !self.queue.is_empty(),
        }
    }

    fn dispatch(&mut self, kind: EventKind) {
        match kind {
            EventKind::Arrive { node, dgram, id } => {
                let now = self.now;
                if node == dgram.dst.node {
                    self.record(now, node, TraceDirection::Recv, &dgram, None, id);
                    if let Some(h) = self.node_handler[node.0 as usize] {
                        self.invoke(h, node, |handler, ctx| handler.on_datagram(ctx, dgram));
                    }
                    return;
                }
                let verdict = self.inspectors[node.0 as usize]
                    .as_mut()
                    .map(|i| i.inspect(now, &dgram));
                if let Some(v) = verdict {
                    if !v.forward {
                        self.record(now, node, TraceDirection::Drop, &dgram, Some(v.label), id);
                        return;
                    }
                    self.record(now, node, TraceDirection::Fwd, &dgram, Some(v.label), id);
                }
                if self.forward(node, dgram.clone(), id, now).is_err() {
                    self.record(
                        now,
                        node,
                        TraceDirection::Drop,
                        &dgram,
                        Some("unroutable".into()),
                        id,
                    );
                }
            }
            EventKind::Timer { handler, token } => {
                let node = self.handler_nodes[handler.0]
                    .first()
                    .copied()
                    .unwrap_or(NodeId(0));
                self.invoke(handler, node, |h, ctx| h.on_timer(ctx, token));
            }
        }
    }

    fn invoke<F: FnOnce(&mut dyn Handler, &mut Ctx<'_>)>(
        &mut self,
        id: HandlerId,
        node: NodeId,
        f: F,
    ) {
        let Some(mut handler) = self.handlers[id.0].take() else {
            return;
        };
        let mut outbox = Vec::new();
        let mut timers = Vec::new();
        {
            let mut ctx = Ctx {
                now: self.now,
                node,
                outbox: &mut outbox,
                timers: &mut timers,
            };
            f(handler.as_mut(), &mut ctx);
        }
        self.handlers[id.0] = Some(handler);
        let now = self.now;
        for d in outbox {
            let owned = self.handler_nodes[id.0].contains(&d.src.node);
            let sent = if owned {
                self.send(d.clone(), now)
            } else {
                Err(NetsimError::ForeignSource(d.src.node))
            };
            if sent.is_err() {
                let rid = self.next_datagram_id;
                self.next_datagram_id += 1;
                self.record(
                    now,
                    d.src.node,
                    TraceDirection::Drop,
                    &d,
                    Some("unroutable".into()),
                    rid,
                );
            }
        }
        for (at, token) in timers {
            self.push(at, EventKind::Timer { handler: id, token });
        }
    }

    pub fn export_trace(&self) -> String {
        let mut s = String::from(TRACE_HEADER);
        s.push('\n');
        for r in &self.trace {
            s.push_str(&format_record(&self.topo, r));
            s.push('\n');
        }
        s
    }

    /// SHA-256 over the exported trace, hex encoded.
    pub fn trace_digest(&self) -> String {
        Sha256::digest(self.export_trace().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Default)]
    struct Sink {
        got: Vec<(Micros, Datagram)>,
    }

    impl Handler for Sink {
        fn on_datagram(&mut self, ctx: &mut Ctx<'_>, dgram: Datagram) {
            self.got.push((ctx.now(), dgram));
        }
    }

    /// Answers every datagram straight back to its source.
    struct Echo;

    impl Handler for Echo {
        fn on_datagram(&mut self, ctx: &mut Ctx<'_>, d: Datagram) {
            ctx.send(Datagram::new(d.dst, d.src, d.payload));
        }
    }

    fn pair(delay: Micros, bw: u64, loss: f64) -> (Topology, NodeId, NodeId) {
        let mut t = Topology::new();
        let a = t.add_node("a", NodeRole::Host);
        let b = t.add_node("b", NodeRole::Host);
        t.add_duplex(a, b, delay, bw, loss).unwrap();
        (t, a, b)
    }

    #[test]
    fn arrival_includes_serialization_and_delay() {
        let (t, a, b) = pair(10 * MS, 12_500_000, 0.0);
        let mut sim = Simulator::build(t, 1).unwrap();
        let sink = sim.attach(&[b], Box::<Sink>::default()).unwrap();
        sim.send(
            Datagram::new(Addr::new(a, 1), Addr::new(b, 1), vec![0; 1250]),
            0,
        )
        .unwrap();
        sim.run_to_idle(SEC);
        let got = &sim.handler::<Sink>(sink).unwrap().got;
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].0, 100 + 10 * MS);
    }

    #[test]
    fn back_to_back_datagrams_stay_fifo() {
        let (t, a, b) = pair(5 * MS, 1_000_000, 0.0);
        let mut sim = Simulator::build(t, 1).unwrap();
        let sink = sim.attach(&[b], Box::<Sink>::default()).unwrap();
        for i in 0..3u8 {
            sim.send(
                Datagram::new(Addr::new(a, 1), Addr::new(b, 1), vec![i; 1000]),
                0,
            )
            .unwrap();
        }
        sim.run_to_idle(SEC);
        let got = &sim.handler::<Sink>(sink).unwrap().got;
        let times: Vec<_> = got.iter().map(|(t, _)| *t).collect();
        assert_eq!(times, vec![6 * MS, 7 * MS, 8 * MS]);
        assert_eq!(
            got.iter().map(|(_, d)| d.payload[0]).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn total_loss_drops_everything() {
        let (t, a, b) = pair(MS, 0, 1.0);
        let mut sim = Simulator::build(t, 3).unwrap();
        let sink = sim.attach(&[b], Box::<Sink>::default()).unwrap();
        for _ in 0..10 {
            sim.send(
                Datagram::new(Addr::new(a, 1), Addr::new(b, 1), vec![1; 10]),
                0,
            )
            .unwrap();
        }
        sim.run_to_idle(SEC);
        assert!(sim.handler::<Sink>(sink).unwrap().got.is_empty());
        let drops = sim
            .trace()
            .iter()
            .filter(|r| r.direction == TraceDirection::Drop)
            .count();
        assert_eq!(drops, 10);
    }

    #[test]
    fn two_nodes_without_links_rejected() {
        let mut t = Topology::new();
        t.add_node("a", NodeRole::Host);
        t.add_node("b", NodeRole::Host);
        assert!(matches!(
            Simulator::build(t, 0),
            Err(NetsimError::NoRoute { .. })
        ));
    }

    #[test]
    fn client_route_must_cross_censor() {
        let mut t = Topology::new();
        let c = t.add_node("client", NodeRole::Client);
        let r = t.add_node("router", NodeRole::Host);
        let s = t.add_node("server", NodeRole::Server);
        t.add_duplex(c, r, MS, 0, 0.0).unwrap();
        t.add_duplex(r, s, MS, 0, 0.0).unwrap();
        assert!(matches!(
            Simulator::build(t.clone(), 0),
            Err(NetsimError::CensorBypass { .. })
        ));

        let mut t = Topology::new();
        let c = t.add_node("client", NodeRole::Client);
        let x = t.add_node("censor", NodeRole::Censor);
        let s = t.add_node("server", NodeRole::Server);
        t.add_duplex(c, x, MS, 0, 0.0).unwrap();
        t.add_duplex(x, s, MS, 0, 0.0).unwrap();
        assert!(Simulator::build(t, 0).is_ok());
    }

    #[test]
    fn invalid_links_rejected() {
        let mut t = Topology::new();
        let a = t.add_node("a", NodeRole::Host);
        let b = t.add_node("b", NodeRole::Host);
        assert!(t
            .add_link(LinkSpec {
                loss_rate: 1.5,
                ..LinkSpec::new(a, b, 1)
            })
            .is_err());
        assert!(t.add_link(LinkSpec::new(a, a, 1)).is_err());
        assert!(t.add_link(LinkSpec::new(a, NodeId(9), 1)).is_err());
        t.add_link(LinkSpec::new(a, b, 1)).unwrap();
        assert!(t.add_link(LinkSpec::new(a, b, 2)).is_err());
    }

    #[test]
    fn routes_prefer_fewest_hops() {
        let mut t = Topology::new();
        let a = t.add_node("a", NodeRole::Host);
        let b = t.add_node("b", NodeRole::Host);
        let c = t.add_node("c", NodeRole::Host);
        t.add_duplex(a, b, 50 * MS, 0, 0.0).unwrap();
        t.add_duplex(a, c, MS, 0, 0.0).unwrap();
        t.add_duplex(c, b, MS, 0, 0.0).unwrap();
        let sim = Simulator::build(t, 0).unwrap();
        assert_eq!(sim.route(a, b).unwrap(), vec![a, b]);
        assert_eq!(sim.path_delay(a, b).unwrap(), 50 * MS);
    }

    #[test]
    fn unroutable_destination_is_error() {
        let (t, a, _) = pair(MS, 0, 0.0);
        let mut sim = Simulator::build(t, 0).unwrap();
        let err = sim.send(
            Datagram::new(Addr::new(a, 1), Addr::new(NodeId(7), 1), vec![1]),
            0,
        );
        assert!(matches!(err, Err(NetsimError::Unroutable(_))));
    }

    #[test]
    fn run_until_reports_deadline() {
        let (t, _, _) = pair(MS, 0, 0.0);
        let mut sim = Simulator::build(t, 0).unwrap();
        let out = sim.run_until(|_| false, 5 * MS);
        assert_eq!(
            out,
            RunOutcome {
                time: 5 * MS,
                timed_out: true
            }
        );
    }

    #[test]
    fn round_trip_through_echo() {
        let (t, a, b) = pair(10 * MS, 0, 0.0);
        let mut sim = Simulator::build(t, 0).unwrap();
        let sink = sim.attach(&[a], Box::<Sink>::default()).unwrap();
        sim.attach(&[b], Box::new(Echo)).unwrap();
        sim.send(Datagram::new(Addr::new(a, 1), Addr::new(b, 1), vec![7]), 0)
            .unwrap();
        let out = sim.run_until(|s| !s.handler::<Sink>(sink).unwrap().got.is_empty(), SEC);
        assert_eq!(
            out,
            RunOutcome {
                time: 20 * MS,
                timed_out: false
            }
        );
    }

    #[test]
    fn arrivals_precede_timers_at_same_instant() {
        #[derive(Default)]
        struct Order(Vec<&'static str>);
        impl Handler for Order {
            fn on_datagram(&mut self, _: &mut Ctx<'_>, _: Datagram) {
                self.0.push("arrive");
            }
            fn on_timer(&mut self, _: &mut Ctx<'_>, _: u64) {
                self.0.push("timer");
            }
        }
        let (t, a, b) = pair(10 * MS, 0, 0.0);
        let mut sim = Simulator::build(t, 0).unwrap();
        let h = sim.attach(&[b], Box::<Order>::default()).unwrap();
        sim.schedule_timer(h, 10 * MS, 0).unwrap();
        sim.send(Datagram::new(Addr::new(a, 1), Addr::new(b, 1), vec![1]), 0)
            .unwrap();
        sim.run_to_idle(SEC);
        assert_eq!(sim.handler::<Order>(h).unwrap().0, vec!["arrive", "timer"]);
    }

    #[test]
    fn exported_trace_parses() {
        let (t, a, b) = pair(MS, 0, 0.0);
        let mut sim = Simulator::build(t, 0).unwrap();
        sim.send(
            Datagram::new(Addr::new(a, 1), Addr::new(b, 1), vec![9, 9]),
            0,
        )
        .unwrap();
        sim.run_to_idle(SEC);
        let text = sim.export_trace();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(TRACE_HEADER));
        let parsed: Vec<_> = lines.map(|l| TraceLine::parse(l).unwrap()).collect();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[1].direction, TraceDirection::Recv);
        assert_eq!(parsed[1].time, MS);
        assert_eq!(parsed[1].form, "unknown");
    }
}
