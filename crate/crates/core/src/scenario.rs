//! Scenario files: a TOML document holding the plant topology, profile overrides,
//! slices, flows, zones, security material, edge applications and a timed event script.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::federation::HandoverConfig;
use crate::flowrouting::{Slice, SliceLedger};
use crate::geometry::{Point2, Polygon};
use crate::linkmodel::{LinkTechnologyProfile, ProfileTable, Technology};
use crate::localization::Zone;
use crate::management::{AppSpec, BundleRegistry, ConfigBundle};
use crate::security::{AccessRule, CredentialKind};
use crate::topology::{
    build_topology, Device, FactoryTopology, FlexiCell, Flow, InfraNode, Link, NodeId, PublicNetwork, TopologySpec,
};

fn default_seed() -> u64 {
    1
}

fn default_ms_100() -> f64 {
    100.0
}

fn default_position_record_ms() -> f64 {
    500.0
}

fn default_true() -> bool {
    true
}

fn default_watchdog_s() -> f64 {
    1.0
}

fn default_gateway_cap() -> u32 {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    #[serde(default)]
    pub handover: HandoverConfig,
    /// False lets slices compete for whole-link capacity.
    #[serde(default = "default_true")]
    pub slice_enforcement: bool,
    #[serde(default = "default_ms_100")]
    pub mobility_period_ms: f64,
    #[serde(default = "default_ms_100")]
    pub localization_period_ms: f64,
    #[serde(default = "default_position_record_ms")]
    pub position_record_ms: f64,
    #[serde(default = "default_watchdog_s")]
    pub watchdog_period_s: f64,
    #[serde(default)]
    pub max_secondaries: usize,
    #[serde(default = "default_gateway_cap")]
    pub gateway_rate_cap: u32,
    /// Multiplier on the offered (not admitted) load of every flow in a slice.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub offered_scale: BTreeMap<String, f64>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            handover: HandoverConfig::default(),
            slice_enforcement: true,
            mobility_period_ms: 100.0,
            localization_period_ms: 100.0,
            position_record_ms: 500.0,
            watchdog_period_s: 1.0,
            max_secondaries: 0,
            gateway_rate_cap: 100,
            offered_scale: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CredentialEntry {
    pub subscriber: String,
    pub kind: CredentialKind,
    /// Secret held by the network (hex key or certificate fingerprint).
    pub key: String,
    /// Secret the device actually holds, when it differs (misprovisioned or forged).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_key: Option<String>,
    #[serde(default)]
    pub sequence_counter: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScriptEvent {
    NodeFailure { at_s: f64, node: NodeId },
    NodeRecovery { at_s: f64, node: NodeId },
    LinkFailure { at_s: f64, a: NodeId, b: NodeId },
    LinkRecovery { at_s: f64, a: NodeId, b: NodeId },
    /// A rogue cell starts broadcasting without a valid token.
    FakeCell { at_s: f64, id: NodeId, position: Point2, technologies: Vec<Technology> },
    /// Offered load of a flow is multiplied by `factor` from now on.
    LoadSurge { at_s: f64, flow: String, factor: f64 },
    /// Pin a flow onto an explicit node sequence, bypassing every routing constraint.
    ForceRoute { at_s: f64, flow: String, via: Vec<NodeId> },
    /// Overwrite the outcome of an already written audit record.
    TamperAudit { at_s: f64, index: u64 },
    /// Replay the device's last observed authentication exchange.
    ReplayAttack { at_s: f64, device: NodeId },
    /// Failed authentication attempts with a wrong key.
    BadAuth { at_s: f64, device: NodeId, count: u32 },
    ApplyBundle { at_s: f64, device: NodeId, bundle: String },
    MoveAsset { at_s: f64, device: NodeId, position: Point2 },
    TerminateApp { at_s: f64, app: String },
}

impl ScriptEvent {
    pub fn at_s(&self) -> f64 {
        match self {
            ScriptEvent::NodeFailure { at_s, .. }
            | ScriptEvent::NodeRecovery { at_s, .. }
            | ScriptEvent::LinkFailure { at_s, .. }
            | ScriptEvent::LinkRecovery { at_s, .. }
            | ScriptEvent::FakeCell { at_s, .. }
            | ScriptEvent::LoadSurge { at_s, .. }
            | ScriptEvent::ForceRoute { at_s, .. }
            | ScriptEvent::TamperAudit { at_s, .. }
            | ScriptEvent::ReplayAttack { at_s, .. }
            | ScriptEvent::BadAuth { at_s, .. }
            | ScriptEvent::ApplyBundle { at_s, .. }
            | ScriptEvent::MoveAsset { at_s, .. }
            | ScriptEvent::TerminateApp { at_s, .. } => *at_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub duration_s: f64,
    #[serde(default)]
    pub settings: Settings,
    #[serde(default)]
    pub premise: Polygon,
    #[serde(default)]
    pub cells: Vec<FlexiCell>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub infra: Vec<InfraNode>,
    #[serde(default)]
    pub devices: Vec<Device>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub wired: Vec<Link>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub federation: Vec<Link>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub public_network: Option<PublicNetwork>,
    /// Full replacement profiles, keyed by their `name`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub profiles: Vec<LinkTechnologyProfile>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub slices: Vec<Slice>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flows: Vec<Flow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub zones: Vec<Zone>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub credentials: Vec<CredentialEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trust_store: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub access_rules: Vec<AccessRule>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bundles: Vec<ConfigBundle>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub apps: Vec<AppSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<ScriptEvent>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{location}: {message}")]
    Parse { location: String, message: String },
    #[error("invalid scenario:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// `line L, column C` for a byte offset.
fn location(text: &str, offset: usize) -> String {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    format!("line {line}, column {col}")
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse {
            location: e.span().map(|r| location(text, r.start)).unwrap_or_else(|| "input".into()),
            message: e.message().to_string(),
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    /// Canonical text form; `parse(to_toml(s)) == s`.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn topology_spec(&self) -> TopologySpec {
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

    pub fn topology(&self) -> Result<FactoryTopology, ScenarioError> {
        build_topology(&self.topology_spec()).map_err(|e| ScenarioError::Validation(vec![e.to_string()]))
    }

    pub fn profile_table(&self) -> Result<ProfileTable, ScenarioError> {
        let mut t = ProfileTable::defaults();
        for p in &self.profiles {
            t.insert(p.clone()).map_err(|e| ScenarioError::Validation(vec![format!("profiles.{}: {e}", p.name)]))?;
        }
        Ok(t)
    }

    pub fn bundle_registry(&self) -> Result<BundleRegistry, ScenarioError> {
        BundleRegistry::new(self.bundles.clone()).map_err(|e| ScenarioError::Validation(vec![e.to_string()]))
    }

    pub fn credential(&self, subscriber: &str) -> Option<&CredentialEntry> {
        self.credentials.iter().find(|c| c.subscriber == subscriber)
    }

    /// Collects every problem instead of stopping at the first.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut errs = Vec::new();
        if !(self.duration_s > 0.0) {
            errs.push("duration_s: must be positive".to_string());
        }
        let topo = match build_topology(&self.topology_spec()) {
            Ok(t) => Some(t),
            Err(e) => {
                errs.push(format!("topology: {e}"));
                None
            }
        };
        let profiles = self.profile_table();
        if let Err(ScenarioError::Validation(v)) = &profiles {
            errs.extend(v.iter().cloned());
        }
        let s = &self.settings;
        for (name, v) in [
            ("settings.mobility_period_ms", s.mobility_period_ms),
            ("settings.localization_period_ms", s.localization_period_ms),
            ("settings.position_record_ms", s.position_record_ms),
            ("settings.watchdog_period_s", s.watchdog_period_s),
        ] {
            if !(v > 0.0) {
                errs.push(format!("{name}: must be positive"));
            }
        }
        if s.handover.hysteresis_db < 0.0 || s.handover.time_to_trigger_ms < 0.0 {
            errs.push("settings.handover: hysteresis and time-to-trigger must be non-negative".into());
        }
        if let Err(e) = SliceLedger::new(&self.slices) {
            errs.push(format!("slices: {e}"));
        }
        let slice_ids: BTreeSet<&str> = self.slices.iter().map(|s| s.id.as_str()).collect();
        let app_ids: BTreeSet<&str> = self.apps.iter().map(|a| a.id.as_str()).collect();
        let known = |id: &str| topo.as_ref().is_none_or(|t| t.contains(id));
        for sl in &self.slices {
            for m in &sl.members {
                if !known(m) {
                    errs.push(format!("slices.{}.members: unknown node `{m}`", sl.id));
                }
            }
        }
        for k in s.offered_scale.keys() {
            if !slice_ids.contains(k.as_str()) {
                errs.push(format!("settings.offered_scale: unknown slice `{k}`"));
            }
        }
        let mut flow_ids = BTreeSet::new();
        for f in &self.flows {
            if !flow_ids.insert(f.id.as_str()) {
                errs.push(format!("flows: duplicate id `{}`", f.id));
            }
            if let Err(e) = f.validate() {
                errs.push(format!("flows.{}: {e}", f.id));
            }
            if !slice_ids.contains(f.slice.as_str()) {
                errs.push(format!("flows.{}.slice: unknown slice `{}`", f.id, f.slice));
            }
            if !known(&f.source) {
                errs.push(format!("flows.{}.source: unknown node `{}`", f.id, f.source));
            }
            if !known(&f.sink) && !app_ids.contains(f.sink.as_str()) {
                errs.push(format!("flows.{}.sink: unknown node or app `{}`", f.id, f.sink));
            }
        }
        let mut zone_ids = BTreeSet::new();
        for z in &self.zones {
            if !zone_ids.insert(z.id.as_str()) {
                errs.push(format!("zones: duplicate id `{}`", z.id));
            }
            if z.polygon.vertices.len() < 3 || !z.polygon.is_simple() {
                errs.push(format!("zones.{}.polygon: must be a simple polygon", z.id));
            }
        }
        let mut subs = BTreeSet::new();
        for c in &self.credentials {
            if !subs.insert(c.subscriber.as_str()) {
                errs.push(format!("credentials: duplicate subscriber `{}`", c.subscriber));
            }
        }
        if let Err(e) = self.bundle_registry() {
            errs.push(format!("bundles: {e}"));
        }
        for a in &self.apps {
            if !(a.cpu_units >= 0.0 && a.memory_units >= 0.0) {
                errs.push(format!("apps.{}: resources must be non-negative", a.id));
            }
            if let Some(f) = &a.bound_flow {
                if !flow_ids.contains(f.as_str()) {
                    errs.push(format!("apps.{}.bound_flow: unknown flow `{f}`", a.id));
                }
            }
        }
        for (i, e) in self.events.iter().enumerate() {
            let at = e.at_s();
            if !(at >= 0.0) {
                errs.push(format!("events[{i}].at_s: must be non-negative"));
            }
            let node_refs: Vec<&str> = match e {
                ScriptEvent::NodeFailure { node, .. } | ScriptEvent::NodeRecovery { node, .. } => vec![node],
                ScriptEvent::LinkFailure { a, b, .. } | ScriptEvent::LinkRecovery { a, b, .. } => vec![a, b],
                ScriptEvent::ForceRoute { via, flow, .. } => {
                    if !flow_ids.contains(flow.as_str()) {
                        errs.push(format!("events[{i}].flow: unknown flow `{flow}`"));
                    }
                    via.iter().map(|s| s.as_str()).collect()
                }
                ScriptEvent::LoadSurge { flow, factor, .. } => {
                    if !flow_ids.contains(flow.as_str()) {
                        errs.push(format!("events[{i}].flow: unknown flow `{flow}`"));
                    }
                    if !(*factor >= 0.0) {
                        errs.push(format!("events[{i}].factor: must be non-negative"));
                    }
                    vec![]
                }
                ScriptEvent::ReplayAttack { device, .. }
                | ScriptEvent::BadAuth { device, .. }
                | ScriptEvent::ApplyBundle { device, .. }
                | ScriptEvent::MoveAsset { device, .. } => vec![device],
                ScriptEvent::TerminateApp { app, .. } => {
                    if !app_ids.contains(app.as_str()) {
                        errs.push(format!("events[{i}].app: unknown app `{app}`"));
                    }
                    vec![]
                }
                ScriptEvent::FakeCell { .. } | ScriptEvent::TamperAudit { .. } => vec![],
            };
            for n in node_refs {
                if !known(n) {
                    errs.push(format!("events[{i}]: unknown node `{n}`"));
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Validation(errs))
        }
    }
}
