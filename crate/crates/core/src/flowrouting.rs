//! End-to-end path computation across heterogeneous links: slices and their
//! reservations, QoS-constrained minimum-latency routing, data-sovereignty filtering,
//! the gateway event-message path and rerouting after failures.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point2;
use crate::linkmodel::{link_metrics, margin_db, ProfileTable, Technology};
use crate::topology::{link_key, FactoryTopology, Flow, InfraKind, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Isolation {
    #[default]
    Logical,
    Physical,
}

fn default_share() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slice {
    pub id: String,
    pub members: Vec<NodeId>,
    /// Every non-device node (cells, switches, servers, gateways) is a member too.
    #[serde(default)]
    pub include_infrastructure: bool,
    /// Fraction of each spanned link's capacity reserved for this slice.
    #[serde(default = "default_share")]
    pub share: f64,
    /// Explicit per-link reservations (key `a|b`, sorted), overriding `share`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub reserved_mbps: BTreeMap<String, f64>,
    #[serde(default)]
    pub isolation: Isolation,
    #[serde(default)]
    pub allow_off_premise: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RNode {
    pub id: NodeId,
    pub on_premise: bool,
    /// May forward traffic that neither starts nor ends here.
    pub transit: bool,
    pub device: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct REdge {
    pub key: String,
    pub a: usize,
    pub b: usize,
    pub technology: Technology,
    pub latency_ms: f64,
    pub reliability: f64,
    pub capacity_mbps: f64,
}

/// Undirected snapshot of the routable network. Node indices follow id order, so
/// comparing index sequences compares node-id sequences.
#[derive(Debug, Clone, Default)]
pub struct RoutingGraph {
    pub nodes: Vec<RNode>,
    pub edges: Vec<REdge>,
    index: BTreeMap<NodeId, usize>,
    adj: Vec<Vec<usize>>,
}

/// Edge description used to build a [`RoutingGraph`].
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSpec {
    pub a: NodeId,
    pub b: NodeId,
    pub technology: Technology,
    pub latency_ms: f64,
    pub reliability: f64,
    pub capacity_mbps: f64,
}

impl RoutingGraph {
    pub fn new(mut nodes: Vec<RNode>, edges: Vec<EdgeSpec>) -> Self {
        nodes.sort_by(|a, b| a.id.cmp(&b.id));
        nodes.dedup_by(|a, b| a.id == b.id);
        let index: BTreeMap<NodeId, usize> =
            nodes.iter().enumerate().map(|(i, n)| (n.id.clone(), i)).collect();
        let mut adj = vec![Vec::new(); nodes.len()];
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        for e in edges {
            let (Some(&a), Some(&b)) = (index.get(&e.a), index.get(&e.b)) else { continue };
            if a == b {
                continue;
            }
            let key = link_key(&e.a, &e.b);
            // parallel links: keep the first
            if !seen.insert(key.clone()) {
                continue;
            }
            let idx = out.len();
            out.push(REdge {
                key,
                a,
                b,
                technology: e.technology,
                latency_ms: e.latency_ms,
                reliability: e.reliability,
                capacity_mbps: e.capacity_mbps,
            });
            adj[a].push(idx);
            adj[b].push(idx);
        }
        Self { nodes, edges: out, index, adj }
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn node(&self, id: &str) -> Option<&RNode> {
        self.node_index(id).map(|i| &self.nodes[i])
    }

    pub fn edge(&self, key: &str) -> Option<&REdge> {
        self.edges.iter().find(|e| e.key == key)
    }

    /// `(neighbor, edge index)` pairs.
    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adj[v].iter().map(move |&ei| {
            let e = &self.edges[ei];
            (if e.a == v { e.b } else { e.a }, ei)
        })
    }

    /// Copy without the given nodes and link keys.
    pub fn without(&self, nodes: &BTreeSet<NodeId>, links: &BTreeSet<String>) -> RoutingGraph {
        let keep: Vec<RNode> = self.nodes.iter().filter(|n| !nodes.contains(&n.id)).cloned().collect();
        let edges = self
            .edges
            .iter()
            .filter(|e| !links.contains(&e.key))
            .map(|e| EdgeSpec {
                a: self.nodes[e.a].id.clone(),
                b: self.nodes[e.b].id.clone(),
                technology: e.technology,
                latency_ms: e.latency_ms,
                reliability: e.reliability,
                capacity_mbps: e.capacity_mbps,
            })
            .collect();
        RoutingGraph::new(keep, edges)
    }
}

/// One wireless access link of an attached device.
#[derive(Debug, Clone, PartialEq)]
pub struct AccessLink {
    pub device: NodeId,
    pub cell: NodeId,
    pub technology: Technology,
}

/// Static links (wired, federation, public gateway) plus the given access links, minus
/// failed elements. Device on-premise status is evaluated at `t` seconds.
pub fn build_routing_graph(
    topology: &FactoryTopology,
    profiles: &ProfileTable,
    access: &[AccessLink],
    failed_nodes: &BTreeSet<NodeId>,
    failed_links: &BTreeSet<String>,
    t: f64,
) -> RoutingGraph {
    let mut nodes = Vec::new();
    for c in &topology.cells {
        nodes.push(RNode { id: c.id.clone(), on_premise: topology.on_premise(&c.id), transit: true, device: false });
    }
    for n in &topology.infra {
        let transit = n.kind != InfraKind::Anchor;
        nodes.push(RNode { id: n.id.clone(), on_premise: topology.on_premise(&n.id), transit, device: false });
    }
    for d in &topology.devices {
        nodes.push(RNode {
            id: d.id.clone(),
            on_premise: topology.on_premise_at(&d.id, t),
            transit: d.kind == crate::topology::DeviceKind::Gateway,
            device: true,
        });
    }
    if let Some(p) = &topology.public_network {
        nodes.push(RNode { id: p.id.clone(), on_premise: false, transit: true, device: false });
    }
    nodes.retain(|n| !failed_nodes.contains(&n.id));

    let mut edges = Vec::new();
    let static_edge = |a: &str, b: &str, tech: Technology| {
        let p = profiles.profile(tech);
        EdgeSpec {
            a: a.to_string(),
            b: b.to_string(),
            technology: tech,
            latency_ms: p.base_latency_ms,
            reliability: p.per_hop_reliability,
            capacity_mbps: p.capacity_mbps,
        }
    };
    for l in topology.wired.iter().chain(topology.federation.iter()) {
        edges.push(static_edge(&l.a, &l.b, l.technology));
    }
    if let Some(p) = &topology.public_network {
        edges.push(EdgeSpec {
            a: p.id.clone(),
            b: p.gateway.clone(),
            technology: Technology::Eth,
            latency_ms: profiles.profile(Technology::Eth).base_latency_ms,
            reliability: profiles.profile(Technology::Eth).per_hop_reliability,
            capacity_mbps: p.capacity_mbps,
        });
    }
    for a in access {
        let p = profiles.profile(a.technology);
        let cell_cap = topology
            .cell(&a.cell)
            .map(|c| c.capacity_mbps)
            .or_else(|| topology.public_network.as_ref().filter(|p| p.id == a.cell).map(|p| p.capacity_mbps))
            .unwrap_or(p.capacity_mbps);
        edges.push(EdgeSpec {
            a: a.device.clone(),
            b: a.cell.clone(),
            technology: a.technology,
            latency_ms: p.base_latency_ms,
            reliability: p.per_hop_reliability,
            capacity_mbps: p.capacity_mbps.min(cell_cap),
        });
    }
    edges.retain(|e| !failed_links.contains(&link_key(&e.a, &e.b)));
    RoutingGraph::new(nodes, edges)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfeasibleReason {
    NoCapacity,
    NoPath,
    SovereigntyViolation,
    LatencyUnreachable,
    ReliabilityUnreachable,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RouteError {
    #[error("infeasible: {0:?}")]
    Infeasible(InfeasibleReason),
    #[error("unknown slice `{0}`")]
    UnknownSlice(String),
    #[error("`{node}` is not a member of slice `{slice}`")]
    NotAMember { node: NodeId, slice: String },
    #[error("`{0}` is not in the routing graph")]
    UnknownNode(NodeId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hop {
    pub link: String,
    pub technology: Technology,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub nodes: Vec<NodeId>,
    pub hops: Vec<Hop>,
    pub latency_ms: f64,
    pub reliability: f64,
    pub bottleneck_mbps: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SliceError {
    #[error("slice `{0}` defined twice")]
    Duplicate(String),
    #[error("reservations on `{link}` exceed its capacity ({reserved} > {capacity} Mbps)")]
    Oversubscribed { link: String, reserved: f64, capacity: f64 },
    #[error("physical slice `{slice}` shares `{element}` with slice `{other}`")]
    PhysicalOverlap { slice: String, other: String, element: String },
    #[error("slice `{0}`: share must be in (0, 1]")]
    BadShare(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdmitError {
    #[error("rejected: no capacity on `{link}`")]
    Rejected { link: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Admission {
    slice: String,
    links: Vec<String>,
    demand: f64,
}

/// Per-link, per-slice reservation bookkeeping.
#[derive(Debug, Clone)]
pub struct SliceLedger {
    slices: BTreeMap<String, Slice>,
    members: BTreeMap<String, BTreeSet<NodeId>>,
    used: BTreeMap<(String, String), f64>,
    total_used: BTreeMap<String, f64>,
    admitted: BTreeMap<String, Admission>,
    /// When false, slices compete for whole-link capacity.
    pub enforce: bool,
}

impl SliceLedger {
    pub fn new(slices: &[Slice]) -> Result<Self, SliceError> {
        let mut map = BTreeMap::new();
        let mut members = BTreeMap::new();
        for s in slices {
            if !(s.share > 0.0 && s.share <= 1.0) {
                return Err(SliceError::BadShare(s.id.clone()));
            }
            if map.insert(s.id.clone(), s.clone()).is_some() {
                return Err(SliceError::Duplicate(s.id.clone()));
            }
            members.insert(s.id.clone(), s.members.iter().cloned().collect());
        }
        Ok(Self {
            slices: map,
            members,
            used: BTreeMap::new(),
            total_used: BTreeMap::new(),
            admitted: BTreeMap::new(),
            enforce: true,
        })
    }

    pub fn slice(&self, id: &str) -> Option<&Slice> {
        self.slices.get(id)
    }

    pub fn slices(&self) -> impl Iterator<Item = &Slice> {
        self.slices.values()
    }

    pub fn is_member(&self, slice: &str, node: &RNode) -> bool {
        let Some(s) = self.slices.get(slice) else { return false };
        (s.include_infrastructure && !node.device) || self.members[slice].contains(&node.id)
    }

    fn spans(&self, slice: &str, g: &RoutingGraph, e: &REdge) -> bool {
        self.is_member(slice, &g.nodes[e.a]) && self.is_member(slice, &g.nodes[e.b])
    }

    /// Reservation of `slice` on edge `e`, zero when the slice does not span it.
    pub fn reservation(&self, slice: &str, g: &RoutingGraph, e: &REdge) -> f64 {
        if !self.spans(slice, g, e) {
            return 0.0;
        }
        let s = &self.slices[slice];
        s.reserved_mbps
            .get(&e.key)
            .copied()
            .unwrap_or(s.share * e.capacity_mbps)
    }

    pub fn used(&self, slice: &str, link: &str) -> f64 {
        self.used.get(&(link.to_string(), slice.to_string())).copied().unwrap_or(0.0)
    }

    pub fn total_used(&self, link: &str) -> f64 {
        self.total_used.get(link).copied().unwrap_or(0.0)
    }

    /// Capacity a flow of `slice` may still claim on `e`.
    pub fn residual(&self, slice: &str, g: &RoutingGraph, e: &REdge) -> f64 {
        if self.enforce {
            self.reservation(slice, g, e) - self.used(slice, &e.key)
        } else {
            e.capacity_mbps - self.total_used(&e.key)
        }
    }

    /// Capacity the slice's traffic sees on `e` when computing load-dependent metrics.
    pub fn effective_capacity(&self, slice: &str, g: &RoutingGraph, e: &REdge) -> f64 {
        if self.enforce {
            self.reservation(slice, g, e)
        } else {
            e.capacity_mbps
        }
    }

    /// Check the reservation and isolation invariants on a graph's links.
    pub fn validate_against(&self, g: &RoutingGraph) -> Result<(), SliceError> {
        for e in &g.edges {
            let spanning: Vec<&Slice> =
                self.slices.values().filter(|s| self.spans(&s.id, g, e)).collect();
            let reserved: f64 = spanning.iter().map(|s| self.reservation(&s.id, g, e)).sum();
            if reserved > e.capacity_mbps * (1.0 + 1e-9) {
                return Err(SliceError::Oversubscribed {
                    link: e.key.clone(),
                    reserved,
                    capacity: e.capacity_mbps,
                });
            }
            if let Some(p) = spanning.iter().find(|s| s.isolation == Isolation::Physical) {
                if let Some(o) = spanning.iter().find(|s| s.id != p.id) {
                    return Err(SliceError::PhysicalOverlap {
                        slice: p.id.clone(),
                        other: o.id.clone(),
                        element: e.key.clone(),
                    });
                }
            }
        }
        for p in self.slices.values().filter(|s| s.isolation == Isolation::Physical) {
            for o in self.slices.values().filter(|s| s.id != p.id) {
                if let Some(shared) = p.members.iter().find(|m| o.members.contains(m)) {
                    return Err(SliceError::PhysicalOverlap {
                        slice: p.id.clone(),
                        other: o.id.clone(),
                        element: shared.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn is_admitted(&self, flow: &str) -> bool {
        self.admitted.contains_key(flow)
    }

    pub fn admitted_links(&self, flow: &str) -> Option<&[String]> {
        self.admitted.get(flow).map(|a| a.links.as_slice())
    }

    /// Reserve `flow.demand_mbps` on every hop, or nothing at all.
    pub fn admit_flow(&mut self, g: &RoutingGraph, flow: &Flow, path: &Path) -> Result<(), AdmitError> {
        if self.admitted.contains_key(&flow.id) {
            self.release_flow(&flow.id);
        }
        for hop in &path.hops {
            let e = g.edge(&hop.link).ok_or_else(|| AdmitError::Rejected { link: hop.link.clone() })?;
            if self.residual(&flow.slice, g, e) < flow.demand_mbps {
                return Err(AdmitError::Rejected { link: hop.link.clone() });
            }
        }
        for hop in &path.hops {
            *self.used.entry((hop.link.clone(), flow.slice.clone())).or_default() += flow.demand_mbps;
            *self.total_used.entry(hop.link.clone()).or_default() += flow.demand_mbps;
        }
        self.admitted.insert(
            flow.id.clone(),
            Admission {
                slice: flow.slice.clone(),
                links: path.hops.iter().map(|h| h.link.clone()).collect(),
                demand: flow.demand_mbps,
            },
        );
        Ok(())
    }

    pub fn release_flow(&mut self, flow: &str) -> bool {
        let Some(a) = self.admitted.remove(flow) else { return false };
        for l in &a.links {
            let k = (l.clone(), a.slice.clone());
            if let Some(u) = self.used.get_mut(&k) {
                *u -= a.demand;
                if u.abs() < 1e-9 {
                    self.used.remove(&k);
                }
            }
            if let Some(u) = self.total_used.get_mut(l) {
                *u -= a.demand;
                if u.abs() < 1e-9 {
                    self.total_used.remove(l);
                }
            }
        }
        true
    }

    /// Sum of admitted demand per link, across slices.
    pub fn link_loads(&self) -> &BTreeMap<String, f64> {
        &self.total_used
    }
}

#[derive(Debug, Clone, Copy)]
struct Constraints {
    sovereignty: bool,
    capacity: bool,
    latency: bool,
    reliability: bool,
}

#[derive(Debug, Clone)]
struct Label {
    latency: f64,
    reliability: f64,
    path: Vec<usize>,
    edges: Vec<usize>,
}

impl PartialEq for Label {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Label {}
impl PartialOrd for Label {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Label {
    // min-heap on (latency, node sequence)
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .latency
            .total_cmp(&self.latency)
            .then_with(|| other.path.cmp(&self.path))
    }
}

struct Query<'a> {
    g: &'a RoutingGraph,
    ledger: &'a SliceLedger,
    flow: &'a Flow,
    src: usize,
    dst: usize,
}

impl Query<'_> {
    fn node_ok(&self, v: usize, c: Constraints) -> bool {
        let n = &self.g.nodes[v];
        if c.sovereignty && !n.on_premise {
            return false;
        }
        v == self.dst || n.transit
    }

    fn edge_ok(&self, e: &REdge, c: Constraints) -> bool {
        !c.capacity || self.ledger.residual(&self.flow.slice, self.g, e) >= self.flow.demand_mbps
    }

    fn reachable(&self, c: Constraints) -> bool {
        if c.sovereignty && !self.g.nodes[self.src].on_premise {
            return false;
        }
        let mut seen = vec![false; self.g.nodes.len()];
        let mut q = VecDeque::from([self.src]);
        seen[self.src] = true;
        while let Some(v) = q.pop_front() {
            if v == self.dst {
                return true;
            }
            if v != self.src && !self.g.nodes[v].transit {
                continue;
            }
            for (w, ei) in self.g.neighbors(v) {
                if !seen[w] && self.node_ok(w, c) && self.edge_ok(&self.g.edges[ei], c) {
                    seen[w] = true;
                    q.push_back(w);
                }
            }
        }
        false
    }

    /// Label-setting search for the minimum-latency simple path; ties resolve to the
    /// lexicographically smallest node sequence.
    fn search(&self, c: Constraints) -> Option<Label> {
        if c.sovereignty && !self.g.nodes[self.src].on_premise {
            return None;
        }
        let mut settled: Vec<Vec<(f64, f64)>> = vec![Vec::new(); self.g.nodes.len()];
        let mut heap = BinaryHeap::new();
        heap.push(Label { latency: 0.0, reliability: 1.0, path: vec![self.src], edges: vec![] });
        while let Some(l) = heap.pop() {
            let v = *l.path.last().expect("non-empty");
            if settled[v].iter().any(|&(lat, rel)| lat <= l.latency && rel >= l.reliability) {
                continue;
            }
            settled[v].push((l.latency, l.reliability));
            if v == self.dst {
                return Some(l);
            }
            if v != self.src && !self.g.nodes[v].transit {
                continue;
            }
            for (w, ei) in self.g.neighbors(v) {
                let e = &self.g.edges[ei];
                if l.path.contains(&w) || !self.node_ok(w, c) || !self.edge_ok(e, c) {
                    continue;
                }
                let latency = l.latency + e.latency_ms;
                let reliability = l.reliability * e.reliability;
                if c.latency && latency > self.flow.max_latency_ms {
                    continue;
                }
                if c.reliability && reliability < self.flow.min_reliability {
                    continue;
                }
                let mut path = l.path.clone();
                path.push(w);
                let mut edges = l.edges.clone();
                edges.push(ei);
                heap.push(Label { latency, reliability, path, edges });
            }
        }
        None
    }
}

/// Minimum-latency path for `flow` meeting its capacity, reliability, latency and
/// sovereignty constraints inside its slice.
pub fn compute_path(flow: &Flow, g: &RoutingGraph, ledger: &SliceLedger) -> Result<Path, RouteError> {
    if ledger.slice(&flow.slice).is_none() {
        return Err(RouteError::UnknownSlice(flow.slice.clone()));
    }
    let src = g.node_index(&flow.source).ok_or_else(|| RouteError::UnknownNode(flow.source.clone()))?;
    let dst = g.node_index(&flow.sink).ok_or_else(|| RouteError::UnknownNode(flow.sink.clone()))?;
    for v in [src, dst] {
        if !ledger.is_member(&flow.slice, &g.nodes[v]) {
            return Err(RouteError::NotAMember { node: g.nodes[v].id.clone(), slice: flow.slice.clone() });
        }
    }
    let restricted = flow.sensitive
        && !ledger.slice(&flow.slice).map(|s| s.allow_off_premise).unwrap_or(false);
    let q = Query { g, ledger, flow, src, dst };
    let full = Constraints { sovereignty: restricted, capacity: true, latency: true, reliability: true };
    if let Some(l) = q.search(full) {
        let bottleneck = l
            .edges
            .iter()
            .map(|&ei| ledger.residual(&flow.slice, g, &g.edges[ei]))
            .fold(f64::INFINITY, f64::min);
        return Ok(Path {
            nodes: l.path.iter().map(|&i| g.nodes[i].id.clone()).collect(),
            hops: l
                .edges
                .iter()
                .map(|&ei| Hop { link: g.edges[ei].key.clone(), technology: g.edges[ei].technology })
                .collect(),
            latency_ms: l.latency,
            reliability: l.reliability,
            bottleneck_mbps: bottleneck,
        });
    }
    let none = Constraints { sovereignty: false, capacity: false, latency: false, reliability: false };
    let reason = if !q.reachable(none) {
        InfeasibleReason::NoPath
    } else if restricted && !q.reachable(Constraints { sovereignty: true, ..none }) {
        InfeasibleReason::SovereigntyViolation
    } else if !q.reachable(Constraints { sovereignty: restricted, capacity: true, ..none }) {
        InfeasibleReason::NoCapacity
    } else if q
        .search(Constraints { sovereignty: restricted, capacity: true, latency: true, reliability: false })
        .is_none()
    {
        InfeasibleReason::LatencyUnreachable
    } else {
        InfeasibleReason::ReliabilityUnreachable
    };
    Err(RouteError::Infeasible(reason))
}

/// Load-dependent end-to-end metrics of a path for one slice's traffic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathMetrics {
    pub latency_ms: f64,
    pub delivered_mbps: f64,
    pub loss_prob: f64,
}

/// Per-hop metrics against the slice's capacity view, combined along the path.
/// `offered(link)` is the slice's offered load on that link (or the whole link's load
/// when slicing is not enforced).
pub fn path_metrics(
    path: &Path,
    slice: &str,
    g: &RoutingGraph,
    ledger: &SliceLedger,
    profiles: &ProfileTable,
    demand_mbps: f64,
    offered: &dyn Fn(&str) -> f64,
) -> PathMetrics {
    let mut latency = 0.0;
    let mut survive = 1.0;
    let mut delivered = demand_mbps;
    for hop in &path.hops {
        let Some(e) = g.edge(&hop.link) else { continue };
        let cap = ledger.effective_capacity(slice, g, e).max(1e-12);
        let load = offered(&hop.link);
        let m = crate::linkmodel::link_metrics_with_capacity(profiles.profile(hop.technology), cap, load);
        latency += m.latency_ms;
        survive *= 1.0 - m.loss_prob;
        if load > 0.0 {
            delivered = delivered.min(demand_mbps * m.delivered_mbps / load);
        }
    }
    PathMetrics { latency_ms: latency, delivered_mbps: delivered, loss_prob: 1.0 - survive }
}

/// Sliding one-second message counter per gateway.
#[derive(Debug, Clone, Default)]
pub struct GatewayRateLimiter {
    pub cap_per_s: u32,
    windows: BTreeMap<NodeId, (u64, u32)>,
}

impl GatewayRateLimiter {
    pub fn new(cap_per_s: u32) -> Self {
        Self { cap_per_s, windows: BTreeMap::new() }
    }

    /// Count a message at `t_us`; false when the gateway's budget for this second is spent.
    pub fn admit(&mut self, gateway: &str, t_us: u64) -> bool {
        let second = t_us / 1_000_000;
        let w = self.windows.entry(gateway.to_string()).or_insert((second, 0));
        if w.0 != second {
            *w = (second, 0);
        }
        if w.1 >= self.cap_per_s {
            return false;
        }
        w.1 += 1;
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayDelivery {
    pub device: NodeId,
    pub gateway: NodeId,
    pub technology: Technology,
    pub latency_ms: f64,
    pub dropped: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("no edge gateway in range of `{0}`")]
    NoGatewayInRange(NodeId),
}

/// Store-and-forward delivery of one event message through the best-margin edge
/// gateway. Bypasses slice reservations; subject to the per-gateway rate cap.
pub fn gateway_event_path(
    topology: &FactoryTopology,
    profiles: &ProfileTable,
    device: &str,
    device_techs: &[Technology],
    position: Point2,
    failed: &BTreeSet<NodeId>,
    limiter: &mut GatewayRateLimiter,
    t_us: u64,
) -> Result<GatewayDelivery, GatewayError> {
    let mut best: Option<(f64, &crate::topology::InfraNode, Technology)> = None;
    for g in topology.infra.iter().filter(|n| n.kind == InfraKind::EdgeGateway) {
        if failed.contains(&g.id) {
            continue;
        }
        for t in device_techs.iter().filter(|t| g.technologies.contains(t)) {
            let p = profiles.profile(*t);
            if !p.is_wireless() || !p.carries_data {
                continue;
            }
            let m = margin_db(p, position.distance(&g.position));
            if m < 0.0 {
                continue;
            }
            let better = match &best {
                None => true,
                Some((bm, bg, _)) => m > *bm || (m == *bm && g.id < bg.id),
            };
            if better {
                best = Some((m, g, *t));
            }
        }
    }
    let (_, gw, tech) = best.ok_or_else(|| GatewayError::NoGatewayInRange(device.to_string()))?;
    let hop = link_metrics(profiles.profile(tech), 0.0).latency_ms;
    let admitted = limiter.admit(&gw.id, t_us);
    Ok(GatewayDelivery {
        device: device.to_string(),
        gateway: gw.id.clone(),
        technology: tech,
        latency_ms: hop + gw.base_latency_ms,
        dropped: !admitted,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "element", rename_all = "snake_case")]
pub enum Failure {
    Node { id: NodeId },
    Link { a: NodeId, b: NodeId },
}

impl Failure {
    pub fn touches(&self, path: &Path) -> bool {
        match self {
            Failure::Node { id } => path.nodes.contains(id),
            Failure::Link { a, b } => {
                let k = link_key(a, b);
                path.hops.iter().any(|h| h.link == k)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum RerouteOutcome {
    Rerouted { path: Path },
    Dropped { reason: InfeasibleReason },
}

/// Recompute every active flow whose path crosses the failed element on the surviving
/// graph. Flows are handled in id order; each keeps or loses its reservation.
pub fn reroute_on_failure(
    failure: &Failure,
    active: &[(Flow, Path)],
    surviving: &RoutingGraph,
    ledger: &mut SliceLedger,
) -> Vec<(String, RerouteOutcome)> {
    let mut affected: Vec<&(Flow, Path)> = active.iter().filter(|(_, p)| failure.touches(p)).collect();
    affected.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    for (f, _) in &affected {
        ledger.release_flow(&f.id);
    }
    affected
        .into_iter()
        .map(|(f, _)| {
            let outcome = match compute_path(f, surviving, ledger) {
                Ok(p) => match ledger.admit_flow(surviving, f, &p) {
                    Ok(()) => RerouteOutcome::Rerouted { path: p },
                    Err(_) => RerouteOutcome::Dropped { reason: InfeasibleReason::NoCapacity },
                },
                Err(RouteError::Infeasible(r)) => RerouteOutcome::Dropped { reason: r },
                Err(_) => RerouteOutcome::Dropped { reason: InfeasibleReason::NoPath },
            };
            (f.id.clone(), outcome)
        })
        .collect()
}
