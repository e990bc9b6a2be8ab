//! Factory domain model: FlexiCells, infrastructure nodes, devices, flows and the
//! validated topology they form.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Point2, Polygon};
use crate::linkmodel::{Endpoint, Technology};

pub type NodeId = String;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlexiCell {
    pub id: NodeId,
    pub position: Point2,
    /// Every FlexiCell runs its own core and can operate as an island.
    #[serde(default = "default_true")]
    pub local_core: bool,
    pub technologies: Vec<Technology>,
    pub capacity_mbps: f64,
    #[serde(default)]
    pub island_mode: bool,
    /// Whether this cell participates in private/public handover.
    #[serde(default = "default_true")]
    pub public_handover: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfraKind {
    Switch,
    EdgeServer,
    EdgeGateway,
    PublicGateway,
    /// Localization anchor (ultrasound beacon, RADAR head, ...).
    Anchor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfraNode {
    pub id: NodeId,
    pub kind: InfraKind,
    pub position: Point2,
    /// Technologies the node speaks, wired or wireless.
    #[serde(default)]
    pub technologies: Vec<Technology>,
    #[serde(default)]
    pub cpu_units: f64,
    #[serde(default)]
    pub memory_units: f64,
    /// Store-and-forward latency added by an edge gateway.
    #[serde(default)]
    pub base_latency_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    Sensor,
    Actuator,
    Plc,
    Gateway,
    MobileManipulator,
    Cobot,
    Camera,
}

impl DeviceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DeviceKind::Sensor => "sensor",
            DeviceKind::Actuator => "actuator",
            DeviceKind::Plc => "plc",
            DeviceKind::Gateway => "gateway",
            DeviceKind::MobileManipulator => "mobile_manipulator",
            DeviceKind::Cobot => "cobot",
            DeviceKind::Camera => "camera",
        }
    }

    /// Sensors and actuators are mirrored as virtual assets.
    pub fn is_virtualizable(&self) -> bool {
        matches!(self, DeviceKind::Sensor | DeviceKind::Actuator | DeviceKind::Camera)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: f64,
    pub position: Point2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Device {
    pub id: NodeId,
    pub kind: DeviceKind,
    pub position: Point2,
    /// Piecewise-linear motion; empty means stationary at `position`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub path: Vec<Waypoint>,
    pub technologies: Vec<Technology>,
    pub credential: String,
    /// `None` is mains powered.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub battery_mj: Option<f64>,
    #[serde(default)]
    pub sensitive_data: bool,
    /// Software bundle applied during onboarding.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bundle: Option<String>,
}

impl Device {
    pub fn is_mobile(&self) -> bool {
        self.path.len() > 1
    }

    /// Position at `t` seconds, linear between waypoints and clamped at both ends.
    pub fn position_at(&self, t: f64) -> Point2 {
        match self.path.as_slice() {
            [] => self.position,
            [only] => only.position,
            path => {
                if t <= path[0].t {
                    return path[0].position;
                }
                for w in path.windows(2) {
                    if t <= w[1].t {
                        let span = w[1].t - w[0].t;
                        let frac = if span > 0.0 { (t - w[0].t) / span } else { 1.0 };
                        return w[0].position.lerp(&w[1].position, frac);
                    }
                }
                path[path.len() - 1].position
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficClass {
    Embb,
    Urllc,
    Mmtc,
    EventMessage,
}

fn default_interval_ms() -> f64 {
    100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flow {
    pub id: String,
    pub source: NodeId,
    /// A node, a device, or an edge application id (resolved to its host).
    pub sink: NodeId,
    pub demand_mbps: f64,
    pub max_latency_ms: f64,
    pub min_reliability: f64,
    pub slice: String,
    #[serde(default)]
    pub sensitive: bool,
    pub traffic_class: TrafficClass,
    #[serde(default)]
    pub start_s: f64,
    #[serde(default = "default_interval_ms")]
    pub interval_ms: f64,
}

impl Flow {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.demand_mbps > 0.0) {
            return Err(format!("flow `{}`: demand_mbps must be positive", self.id));
        }
        if !(self.min_reliability > 0.0 && self.min_reliability <= 1.0) {
            return Err(format!("flow `{}`: min_reliability must be in (0, 1]", self.id));
        }
        if !(self.max_latency_ms > 0.0) {
            return Err(format!("flow `{}`: max_latency_ms must be positive", self.id));
        }
        if !(self.interval_ms > 0.0) {
            return Err(format!("flow `{}`: interval_ms must be positive", self.id));
        }
        Ok(())
    }

    /// Bytes sent per packet batch.
    pub fn batch_bytes(&self) -> u64 {
        (self.demand_mbps * 1e6 / 8.0 * self.interval_ms / 1e3).round() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub a: NodeId,
    pub b: NodeId,
    pub technology: Technology,
}

impl Link {
    pub fn key(&self) -> String {
        link_key(&self.a, &self.b)
    }
}

/// Canonical, orientation-free name for the link between two nodes.
pub fn link_key(a: &str, b: &str) -> String {
    if a <= b {
        format!("{a}|{b}")
    } else {
        format!("{b}|{a}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublicNetwork {
    pub id: NodeId,
    /// Off-premise node through which public traffic reaches the plant.
    pub gateway: NodeId,
    pub technologies: Vec<Technology>,
    /// Constant macro-cell link margin seen everywhere.
    pub margin_db: f64,
    #[serde(default = "default_true")]
    pub handover_support: bool,
    #[serde(default = "default_public_capacity")]
    pub capacity_mbps: f64,
}

fn default_public_capacity() -> f64 {
    1000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TopologySpec {
    #[serde(default)]
    pub premise: Polygon,
    #[serde(default)]
    pub cells: Vec<FlexiCell>,
    #[serde(default)]
    pub infra: Vec<InfraNode>,
    #[serde(default)]
    pub devices: Vec<Device>,
    #[serde(default)]
    pub wired: Vec<Link>,
    #[serde(default)]
    pub federation: Vec<Link>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub public_network: Option<PublicNetwork>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("{context} references unknown node `{id}`")]
    DanglingReference { context: String, id: String },
    #[error("topology has no cells or no devices")]
    EmptyTopology,
    #[error("invalid {what} `{id}`: {reason}")]
    Invalid { what: &'static str, id: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRef {
    Cell(usize),
    Infra(usize),
    Device(usize),
    Public,
}

#[derive(Debug, Clone)]
pub struct FactoryTopology {
    pub premise: Polygon,
    pub cells: Vec<FlexiCell>,
    pub infra: Vec<InfraNode>,
    pub devices: Vec<Device>,
    pub wired: Vec<Link>,
    pub federation: Vec<Link>,
    pub public_network: Option<PublicNetwork>,
    index: BTreeMap<NodeId, NodeRef>,
}

impl FactoryTopology {
    pub fn lookup(&self, id: &str) -> Option<NodeRef> {
        self.index.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn cell(&self, id: &str) -> Option<&FlexiCell> {
        match self.lookup(id)? {
            NodeRef::Cell(i) => Some(&self.cells[i]),
            _ => None,
        }
    }

    pub fn infra_node(&self, id: &str) -> Option<&InfraNode> {
        match self.lookup(id)? {
            NodeRef::Infra(i) => Some(&self.infra[i]),
            _ => None,
        }
    }

    pub fn device(&self, id: &str) -> Option<&Device> {
        match self.lookup(id)? {
            NodeRef::Device(i) => Some(&self.devices[i]),
            _ => None,
        }
    }

    pub fn is_public(&self, id: &str) -> bool {
        matches!(self.lookup(id), Some(NodeRef::Public))
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &NodeId> {
        self.index.keys()
    }

    /// Static position of a node; devices report their initial position.
    pub fn position(&self, id: &str) -> Option<Point2> {
        Some(match self.lookup(id)? {
            NodeRef::Cell(i) => self.cells[i].position,
            NodeRef::Infra(i) => self.infra[i].position,
            NodeRef::Device(i) => self.devices[i].position_at(0.0),
            NodeRef::Public => Point2::new(f64::NAN, f64::NAN),
        })
    }

    pub fn technologies(&self, id: &str) -> &[Technology] {
        match self.lookup(id) {
            Some(NodeRef::Cell(i)) => &self.cells[i].technologies,
            Some(NodeRef::Infra(i)) => &self.infra[i].technologies,
            Some(NodeRef::Device(i)) => &self.devices[i].technologies,
            Some(NodeRef::Public) => match &self.public_network {
                Some(p) => &p.technologies,
                None => &[],
            },
            None => &[],
        }
    }

    /// On-premise status of a node at time `t`. Devices move; everything else is static.
    /// The public network and its gateway are always off-premise.
    pub fn on_premise_at(&self, id: &str, t: f64) -> bool {
        match self.lookup(id) {
            Some(NodeRef::Public) | None => false,
            Some(NodeRef::Infra(i)) if self.infra[i].kind == InfraKind::PublicGateway => false,
            Some(NodeRef::Device(i)) => self.premise.contains(&self.devices[i].position_at(t)),
            Some(_) => self.premise.contains(&self.position(id).expect("indexed")),
        }
    }

    pub fn on_premise(&self, id: &str) -> bool {
        self.on_premise_at(id, 0.0)
    }

    pub fn endpoint<'a>(&'a self, id: &'a str, position: Point2) -> Endpoint<'a> {
        Endpoint { id, position, technologies: self.technologies(id) }
    }

    pub fn wired_links(&self) -> Vec<(String, String, Technology)> {
        self.wired
            .iter()
            .map(|l| (l.a.clone(), l.b.clone(), l.technology))
            .collect()
    }

    /// Cell pairs joined by a federation link (any technology).
    pub fn federated(&self, a: &str, b: &str) -> bool {
        self.federation
            .iter()
            .any(|l| (l.a == a && l.b == b) || (l.a == b && l.b == a))
    }

    pub fn to_spec(&self) -> TopologySpec {
        TopologySpec {
            premise: self.premise.clone(),
            cells: self.cells.clone(),
            infra: self.infra.clone(),
            devices: self.devices.clone(),
            wired: self.wired.clone(),
            federation: self.federation.clone(),
            public_network: self.public_network.clone(),
        }
    }
}

fn invalid(what: &'static str, id: &str, reason: impl Into<String>) -> TopologyError {
    TopologyError::Invalid { what, id: id.to_string(), reason: reason.into() }
}

/// Validate a topology description and index it.
pub fn build_topology(spec: &TopologySpec) -> Result<FactoryTopology, TopologyError> {
    if spec.cells.is_empty() || spec.devices.is_empty() {
        return Err(TopologyError::EmptyTopology);
    }
    let mut index = BTreeMap::new();
    let mut claim = |id: &str, r: NodeRef| -> Result<(), TopologyError> {
        if index.insert(id.to_string(), r).is_some() {
            return Err(TopologyError::DuplicateId(id.to_string()));
        }
        Ok(())
    };
    for (i, c) in spec.cells.iter().enumerate() {
        claim(&c.id, NodeRef::Cell(i))?;
    }
    for (i, n) in spec.infra.iter().enumerate() {
        claim(&n.id, NodeRef::Infra(i))?;
    }
    for (i, d) in spec.devices.iter().enumerate() {
        claim(&d.id, NodeRef::Device(i))?;
    }
    if let Some(p) = &spec.public_network {
        claim(&p.id, NodeRef::Public)?;
    }

    if spec.premise.vertices.len() >= 3 && !spec.premise.is_simple() {
        return Err(invalid("premise", "premise", "polygon is not simple"));
    }
    for c in &spec.cells {
        if !c.local_core {
            return Err(invalid("cell", &c.id, "FlexiCells always carry a local core"));
        }
        if !c.technologies.iter().any(Technology::is_5g) {
            return Err(invalid("cell", &c.id, "needs at least one 5G technology"));
        }
        if !(c.capacity_mbps > 0.0) {
            return Err(invalid("cell", &c.id, "capacity_mbps must be positive"));
        }
    }
    for d in &spec.devices {
        if d.technologies.is_empty() {
            return Err(invalid("device", &d.id, "no radio capabilities"));
        }
        if let Some(b) = d.battery_mj {
            if !(b >= 0.0) {
                return Err(invalid("device", &d.id, "battery must be non-negative"));
            }
        }
        if d.path.windows(2).any(|w| w[1].t < w[0].t) {
            return Err(invalid("device", &d.id, "waypoint times must not decrease"));
        }
    }
    for n in &spec.infra {
        if n.cpu_units < 0.0 || n.memory_units < 0.0 {
            return Err(invalid("infra node", &n.id, "negative compute capacity"));
        }
    }

    let known = |id: &str| index.contains_key(id);
    for l in &spec.wired {
        for end in [&l.a, &l.b] {
            if !known(end) {
                return Err(TopologyError::DanglingReference {
                    context: format!("wired link {}-{}", l.a, l.b),
                    id: end.clone(),
                });
            }
        }
        if l.a == l.b {
            return Err(invalid("wired link", &l.a, "self-loop"));
        }
    }
    for l in &spec.federation {
        for end in [&l.a, &l.b] {
            if !matches!(index.get(end.as_str()), Some(NodeRef::Cell(_))) {
                return Err(TopologyError::DanglingReference {
                    context: format!("federation link {}-{}", l.a, l.b),
                    id: end.clone(),
                });
            }
        }
        if l.a == l.b {
            return Err(invalid("federation link", &l.a, "self-loop"));
        }
    }
    if let Some(p) = &spec.public_network {
        match index.get(p.gateway.as_str()) {
            Some(NodeRef::Infra(i)) if spec.infra[*i].kind == InfraKind::PublicGateway => {}
            _ => {
                return Err(TopologyError::DanglingReference {
                    context: format!("public network `{}` gateway", p.id),
                    id: p.gateway.clone(),
                })
            }
        }
    }
    let mut seen_creds = BTreeSet::new();
    for d in &spec.devices {
        if !seen_creds.insert(d.credential.as_str()) {
            return Err(TopologyError::DuplicateId(d.credential.clone()));
        }
    }

    Ok(FactoryTopology {
        premise: spec.premise.clone(),
        cells: spec.cells.clone(),
        infra: spec.infra.clone(),
        devices: spec.devices.clone(),
        wired: spec.wired.clone(),
        federation: spec.federation.clone(),
        public_network: spec.public_network.clone(),
        index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn minimal() -> TopologySpec {
        TopologySpec {
            premise: Polygon::rect(0.0, 0.0, 100.0, 50.0),
            cells: vec![FlexiCell {
                id: "cell1".into(),
                position: Point2::new(10.0, 10.0),
                local_core: true,
                technologies: vec![Technology::NrEmbb],
                capacity_mbps: 100.0,
                island_mode: false,
                public_handover: true,
            }],
            devices: vec![Device {
                id: "s1".into(),
                kind: DeviceKind::Sensor,
                position: Point2::new(20.0, 10.0),
                path: vec![],
                technologies: vec![Technology::NrEmbb],
                credential: "imsi-1".into(),
                battery_mj: None,
                sensitive_data: false,
                bundle: None,
            }],
            ..Default::default()
        }
    }

    #[test]
    fn minimal_topology_builds() {
        let t = build_topology(&minimal()).unwrap();
        assert!(t.on_premise("cell1"));
        assert!(t.device("s1").is_some());
        assert_eq!(t.technologies("s1"), &[Technology::NrEmbb]);
    }

    #[test]
    fn duplicate_device() {
        let mut s = minimal();
        let mut d = s.devices[0].clone();
        d.credential = "imsi-2".into();
        s.devices.push(d);
        assert_eq!(build_topology(&s).unwrap_err(), TopologyError::DuplicateId("s1".into()));
    }

    #[test]
    fn dangling_edge() {
        let mut s = minimal();
        s.wired.push(Link { a: "cell1".into(), b: "nowhere".into(), technology: Technology::Eth });
        assert!(matches!(
            build_topology(&s).unwrap_err(),
            TopologyError::DanglingReference { .. }
        ));
    }

    #[test]
    fn empty_and_invalid() {
        assert_eq!(build_topology(&TopologySpec::default()).unwrap_err(), TopologyError::EmptyTopology);
        let mut s = minimal();
        s.cells[0].technologies = vec![Technology::Wifi];
        assert!(matches!(build_topology(&s).unwrap_err(), TopologyError::Invalid { .. }));
        let mut s = minimal();
        s.federation.push(Link { a: "cell1".into(), b: "cell1".into(), technology: Technology::Eth });
        assert!(matches!(build_topology(&s).unwrap_err(), TopologyError::Invalid { .. }));
    }

    #[test]
    fn public_gateway_is_off_premise() {
        let mut s = minimal();
        s.infra.push(InfraNode {
            id: "pgw".into(),
            kind: InfraKind::PublicGateway,
            position: Point2::new(5.0, 5.0),
            technologies: vec![Technology::Eth],
            cpu_units: 0.0,
            memory_units: 0.0,
            base_latency_ms: 0.0,
        });
        let t = build_topology(&s).unwrap();
        assert!(!t.on_premise("pgw"));
    }

    #[test]
    fn waypoint_motion() {
        let mut d = minimal().devices[0].clone();
        d.path = vec![
            Waypoint { t: 0.0, position: Point2::new(0.0, 0.0) },
            Waypoint { t: 10.0, position: Point2::new(10.0, 0.0) },
            Waypoint { t: 20.0, position: Point2::new(10.0, 10.0) },
        ];
        assert_eq!(d.position_at(-1.0), Point2::new(0.0, 0.0));
        assert_eq!(d.position_at(5.0), Point2::new(5.0, 0.0));
        assert_eq!(d.position_at(15.0), Point2::new(10.0, 5.0));
        assert_eq!(d.position_at(99.0), Point2::new(10.0, 10.0));
    }

    #[test]
    fn flow_validation() {
        let mut f = Flow {
            id: "f".into(),
            source: "s1".into(),
            sink: "cell1".into(),
            demand_mbps: 1.0,
            max_latency_ms: 10.0,
            min_reliability: 0.9,
            slice: "a".into(),
            sensitive: false,
            traffic_class: TrafficClass::Urllc,
            start_s: 0.0,
            interval_ms: 100.0,
        };
        assert!(f.validate().is_ok());
        assert_eq!(f.batch_bytes(), 12_500);
        f.min_reliability = 0.0;
        assert!(f.validate().is_err());
    }
}
