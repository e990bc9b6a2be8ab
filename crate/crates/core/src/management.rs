//! Device onboarding, edge application placement and relocation, self-X watchdog,
//! the layered asset configuration model and the virtual asset registry.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point2;
use crate::kernel::SimTime;
use crate::security::{
    authenticate, AccessAction, AccessPolicy, AuthCenter, Challenge, Credential, Decision, Session,
};
use crate::topology::NodeId;

pub const OVERLOAD_THRESHOLD: f64 = 0.9;
pub const AUTH_FAILURE_LIMIT: u32 = 3;
pub const WATCHDOG_PERIOD_S: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnboardingStage {
    Discovered,
    Authenticated,
    Authorized,
    Configured,
    Operational,
    Quarantined,
}

impl OnboardingStage {
    pub fn as_str(&self) -> &'static str {
        match self {
            OnboardingStage::Discovered => "discovered",
            OnboardingStage::Authenticated => "authenticated",
            OnboardingStage::Authorized => "authorized",
            OnboardingStage::Configured => "configured",
            OnboardingStage::Operational => "operational",
            OnboardingStage::Quarantined => "quarantined",
        }
    }

    fn next(&self) -> Option<OnboardingStage> {
        use OnboardingStage::*;
        match self {
            Discovered => Some(Authenticated),
            Authenticated => Some(Authorized),
            Authorized => Some(Configured),
            Configured => Some(Operational),
            Operational | Quarantined => None,
        }
    }
}

/// Forward one stage at a time, or anything (except itself) into quarantine.
pub fn onboarding_step_allowed(from: OnboardingStage, to: OnboardingStage) -> bool {
    (to == OnboardingStage::Quarantined && from != OnboardingStage::Quarantined) || from.next() == Some(to)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnboardingTransition {
    pub from: OnboardingStage,
    pub to: OnboardingStage,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnboardingOutcome {
    pub device: NodeId,
    pub transitions: Vec<OnboardingTransition>,
    pub session: Option<Session>,
    pub bundle: Option<ConfigBundle>,
}

impl OnboardingOutcome {
    pub fn state(&self) -> OnboardingStage {
        self.transitions.last().map(|t| t.to).unwrap_or(OnboardingStage::Discovered)
    }

    pub fn quarantine_reason(&self) -> Option<&str> {
        (self.state() == OnboardingStage::Quarantined).then(|| self.transitions.last().unwrap().reason.as_str())
    }
}

/// Inputs for one onboarding pass.
pub struct OnboardingRequest<'a> {
    pub device: &'a str,
    pub kind: &'a str,
    pub credential: &'a Credential,
    pub challenge: Challenge,
    pub bundle: Option<&'a str>,
}

/// Authenticate, authorize attachment, apply the software bundle, go operational.
/// A failing stage ends in quarantine with the failure code as reason.
pub fn onboard(
    req: &OnboardingRequest<'_>,
    network: &mut AuthCenter,
    policy: &AccessPolicy,
    bundles: &BundleRegistry,
    now: SimTime,
) -> OnboardingOutcome {
    let mut out = OnboardingOutcome { device: req.device.into(), transitions: Vec::new(), session: None, bundle: None };
    let mut stage = OnboardingStage::Discovered;
    let mut step = |out: &mut OnboardingOutcome, to: OnboardingStage, reason: &str| {
        out.transitions.push(OnboardingTransition { from: stage, to, reason: reason.into() });
        stage = to;
    };

    let session = match authenticate(req.device, req.credential, network, &req.challenge, now) {
        Ok(s) => s,
        Err(e) => {
            step(&mut out, OnboardingStage::Quarantined, e.code());
            return out;
        }
    };
    step(&mut out, OnboardingStage::Authenticated, "credential_verified");

    match policy.authorize(&session, now, req.kind, AccessAction::Attach, "network", true) {
        Ok(Decision::Allow) => step(&mut out, OnboardingStage::Authorized, "attach_allowed"),
        Ok(Decision::Deny) => {
            step(&mut out, OnboardingStage::Quarantined, "not_authorized");
            return out;
        }
        Err(e) => {
            step(&mut out, OnboardingStage::Quarantined, e.code());
            return out;
        }
    }
    out.session = Some(session);

    match req.bundle {
        None => step(&mut out, OnboardingStage::Configured, "no_bundle"),
        Some(id) => match bundles.get(id) {
            Some(b) => {
                out.bundle = Some(b.clone());
                step(&mut out, OnboardingStage::Configured, "bundle_applied");
            }
            None => {
                out.session = None;
                step(&mut out, OnboardingStage::Quarantined, "unknown_bundle");
                return out;
            }
        },
    }
    step(&mut out, OnboardingStage::Operational, "onboarded");
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigBundle {
    pub id: String,
    pub version: u32,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: String, source: toml::de::Error },
    #[error("bundle `{0}` defined twice")]
    Duplicate(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BundleRegistry {
    bundles: BTreeMap<String, ConfigBundle>,
}

impl BundleRegistry {
    pub fn new(bundles: impl IntoIterator<Item = ConfigBundle>) -> Result<Self, BundleError> {
        let mut reg = Self::default();
        for b in bundles {
            if reg.bundles.contains_key(&b.id) {
                return Err(BundleError::Duplicate(b.id));
            }
            reg.bundles.insert(b.id.clone(), b);
        }
        Ok(reg)
    }

    /// Every `*.toml` file in `dir` holds one bundle.
    pub fn load_dir(dir: &Path) -> Result<Self, BundleError> {
        let io_err = |source| BundleError::Io { path: dir.display().to_string(), source };
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(io_err)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        paths.sort();
        let mut bundles = Vec::new();
        for p in paths {
            let path = p.display().to_string();
            let text = std::fs::read_to_string(&p).map_err(|source| BundleError::Io { path: path.clone(), source })?;
            bundles.push(toml::from_str(&text).map_err(|source| BundleError::Parse { path, source })?);
        }
        Self::new(bundles)
    }

    pub fn get(&self, id: &str) -> Option<&ConfigBundle> {
        self.bundles.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ConfigBundle> {
        self.bundles.values()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constellation {
    pub hardware: String,
    pub position: Point2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftwareLayer {
    pub bundle: String,
    pub version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetConfiguration {
    pub asset: NodeId,
    pub constellation: Constellation,
    pub software: Option<SoftwareLayer>,
    /// Human-interaction parameters.
    pub adaptation: BTreeMap<String, f64>,
    /// Bumped on every committed change.
    pub revision: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigChange {
    Software { bundle: String },
    Constellation(Constellation),
    Adaptation(BTreeMap<String, f64>),
}

impl ConfigChange {
    pub fn layer(&self) -> &'static str {
        match self {
            ConfigChange::Software { .. } => "software",
            ConfigChange::Constellation(_) => "constellation",
            ConfigChange::Adaptation(_) => "adaptation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("unknown bundle `{0}`")]
    UnknownBundle(String),
    #[error("asset is not operational")]
    AssetNotOperational,
    #[error("change rolled back: {0}")]
    TopologyInvalidAfterChange(String),
}

impl ConfigError {
    pub fn code(&self) -> &'static str {
        match self {
            ConfigError::UnknownBundle(_) => "unknown_bundle",
            ConfigError::AssetNotOperational => "asset_not_operational",
            ConfigError::TopologyInvalidAfterChange(_) => "rolled_back",
        }
    }
}

/// Apply one layer change atomically. Constellation changes go through `validate`
/// (topology invariants); on failure `config` is left untouched.
pub fn apply_configuration(
    config: &mut AssetConfiguration,
    change: ConfigChange,
    operational: bool,
    bundles: &BundleRegistry,
    validate: &dyn Fn(&AssetConfiguration) -> Result<(), String>,
) -> Result<u64, ConfigError> {
    if !operational {
        return Err(ConfigError::AssetNotOperational);
    }
    let mut next = config.clone();
    match change {
        ConfigChange::Software { bundle } => {
            let b = bundles.get(&bundle).ok_or(ConfigError::UnknownBundle(bundle))?;
            next.software = Some(SoftwareLayer { bundle: b.id.clone(), version: b.version });
        }
        ConfigChange::Constellation(c) => {
            next.constellation = c;
            validate(&next).map_err(ConfigError::TopologyInvalidAfterChange)?;
        }
        ConfigChange::Adaptation(params) => next.adaptation.extend(params),
    }
    next.revision += 1;
    *config = next;
    Ok(config.revision)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppState {
    Instantiated,
    Running,
    Relocating,
    Terminated,
    Failed,
}

pub const APP_TRANSITIONS: &[(AppState, AppState)] = &[
    (AppState::Instantiated, AppState::Running),
    (AppState::Instantiated, AppState::Failed),
    (AppState::Running, AppState::Relocating),
    (AppState::Running, AppState::Terminated),
    (AppState::Running, AppState::Failed),
    (AppState::Relocating, AppState::Running),
    (AppState::Relocating, AppState::Failed),
    (AppState::Failed, AppState::Running),
    (AppState::Failed, AppState::Failed),
    (AppState::Failed, AppState::Terminated),
];

pub fn app_step_allowed(from: AppState, to: AppState) -> bool {
    APP_TRANSITIONS.contains(&(from, to))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppSpec {
    pub id: String,
    pub cpu_units: f64,
    pub memory_units: f64,
    /// Flow whose latency the placement must respect.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound_flow: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_latency_ms: Option<f64>,
    #[serde(default)]
    pub priority: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement_hint: Option<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeApplication {
    pub spec: AppSpec,
    pub host: Option<NodeId>,
    pub state: AppState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Host {
    pub cpu_capacity: f64,
    pub memory_capacity: f64,
    pub cpu_used: f64,
    pub memory_used: f64,
    pub alive: bool,
}

impl Host {
    pub fn new(cpu: f64, memory: f64) -> Self {
        Self { cpu_capacity: cpu, memory_capacity: memory, cpu_used: 0.0, memory_used: 0.0, alive: true }
    }

    pub fn fits(&self, cpu: f64, mem: f64) -> bool {
        self.alive && self.cpu_used + cpu <= self.cpu_capacity + 1e-9 && self.memory_used + mem <= self.memory_capacity + 1e-9
    }

    pub fn utilization(&self) -> f64 {
        ratio(self.cpu_used, self.cpu_capacity).max(ratio(self.memory_used, self.memory_capacity))
    }

    pub fn projected(&self, cpu: f64, mem: f64) -> f64 {
        ratio(self.cpu_used + cpu, self.cpu_capacity).max(ratio(self.memory_used + mem, self.memory_capacity))
    }
}

fn ratio(used: f64, cap: f64) -> f64 {
    if cap > 0.0 {
        used / cap
    } else if used > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlacementError {
    #[error("no node can host `{0}`")]
    NoCapacity(String),
}

/// Compute hosts keyed by node id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HostPool {
    pub hosts: BTreeMap<NodeId, Host>,
}

impl HostPool {
    pub fn allocate(&mut self, node: &str, cpu: f64, mem: f64) {
        let h = self.hosts.get_mut(node).expect("allocate on known host");
        h.cpu_used += cpu;
        h.memory_used += mem;
    }

    pub fn release(&mut self, node: &str, cpu: f64, mem: f64) {
        if let Some(h) = self.hosts.get_mut(node) {
            h.cpu_used = (h.cpu_used - cpu).max(0.0);
            h.memory_used = (h.memory_used - mem).max(0.0);
        }
    }

    pub fn max_utilization(&self) -> f64 {
        self.hosts.values().filter(|h| h.alive).map(Host::utilization).fold(0.0, f64::max)
    }

    pub fn within_capacity(&self) -> bool {
        self.hosts
            .values()
            .all(|h| h.cpu_used <= h.cpu_capacity + 1e-9 && h.memory_used <= h.memory_capacity + 1e-9)
    }

    fn candidates<'a>(
        &'a self,
        spec: &'a AppSpec,
        latency: &'a dyn Fn(&str) -> Option<f64>,
        exclude: Option<&'a str>,
    ) -> impl Iterator<Item = (&'a NodeId, &'a Host, f64)> + 'a {
        self.hosts.iter().filter_map(move |(id, h)| {
            if Some(id.as_str()) == exclude || !h.fits(spec.cpu_units, spec.memory_units) {
                return None;
            }
            let lat = latency(id).unwrap_or(f64::INFINITY);
            match spec.max_latency_ms {
                Some(max) if spec.bound_flow.is_some() && lat > max => None,
                _ => Some((id, h, lat)),
            }
        })
    }
}

/// Feasible node with the lowest bound-flow latency, ties by node id; a feasible
/// placement hint wins outright. Resources are taken from the pool.
pub fn instantiate_app(
    spec: &AppSpec,
    pool: &mut HostPool,
    latency: &dyn Fn(&str) -> Option<f64>,
) -> Result<EdgeApplication, PlacementError> {
    let hinted = spec
        .placement_hint
        .as_ref()
        .filter(|h| pool.candidates(spec, latency, None).any(|(id, _, _)| id == *h))
        .cloned();
    let host = hinted
        .or_else(|| {
            pool.candidates(spec, latency, None)
                .min_by(|a, b| a.2.total_cmp(&b.2).then_with(|| a.0.cmp(b.0)))
                .map(|(id, _, _)| id.clone())
        })
        .ok_or_else(|| PlacementError::NoCapacity(spec.id.clone()))?;
    pool.allocate(&host, spec.cpu_units, spec.memory_units);
    Ok(EdgeApplication { spec: spec.clone(), host: Some(host), state: AppState::Running })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelocationTrigger {
    HostOverload,
    HostFailure,
    QosViolation,
}

impl RelocationTrigger {
    pub fn as_str(&self) -> &'static str {
        match self {
            RelocationTrigger::HostOverload => "host_overload",
            RelocationTrigger::HostFailure => "host_failure",
            RelocationTrigger::QosViolation => "qos_violation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum RelocationStep {
    InstantiateShadow { target: NodeId },
    SwitchTraffic { from: Option<NodeId>, to: NodeId },
    TerminateOld { host: Option<NodeId> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RelocationPlan {
    Move { target: NodeId, steps: Vec<RelocationStep> },
    /// Overload with no strictly better host: stay put.
    Keep,
    /// No host left; a retry is due at the next watchdog tick.
    Failed { retry_at: SimTime },
}

/// Pick the feasible node with the lowest projected utilization (ties by id). For an
/// overload the move must leave the target below the current host's utilization.
pub fn relocate_app(
    app: &EdgeApplication,
    trigger: RelocationTrigger,
    pool: &HostPool,
    latency: &dyn Fn(&str) -> Option<f64>,
    now: SimTime,
) -> RelocationPlan {
    let spec = &app.spec;
    let current = app.host.as_deref();
    let current_util = current.and_then(|h| pool.hosts.get(h)).map(Host::utilization).unwrap_or(f64::INFINITY);
    let best = pool
        .candidates(spec, latency, current)
        .map(|(id, h, _)| (id, h.projected(spec.cpu_units, spec.memory_units)))
        .filter(|(_, p)| trigger != RelocationTrigger::HostOverload || *p < current_util)
        .min_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    match best {
        Some((target, _)) => RelocationPlan::Move {
            target: target.clone(),
            steps: vec![
                RelocationStep::InstantiateShadow { target: target.clone() },
                RelocationStep::SwitchTraffic { from: app.host.clone(), to: target.clone() },
                RelocationStep::TerminateOld { host: app.host.clone() },
            ],
        },
        None if trigger == RelocationTrigger::HostOverload => RelocationPlan::Keep,
        None => RelocationPlan::Failed { retry_at: now + SimTime::from_secs(WATCHDOG_PERIOD_S) },
    }
}

/// Execute a move plan against the pool and the app record.
pub fn commit_relocation(app: &mut EdgeApplication, plan: &RelocationPlan, pool: &mut HostPool) {
    match plan {
        RelocationPlan::Move { target, .. } => {
            pool.allocate(target, app.spec.cpu_units, app.spec.memory_units);
            if let Some(old) = app.host.take() {
                pool.release(&old, app.spec.cpu_units, app.spec.memory_units);
            }
            app.host = Some(target.clone());
            app.state = AppState::Running;
        }
        RelocationPlan::Keep => {}
        RelocationPlan::Failed { .. } => {
            if let Some(old) = app.host.take() {
                pool.release(&old, app.spec.cpu_units, app.spec.memory_units);
            }
            app.state = AppState::Failed;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum SelfXAction {
    RestartApp { app: String, host: NodeId },
    RelocateApp { app: String, trigger: RelocationTrigger },
    Onboard { device: NodeId },
    Quarantine { device: NodeId },
}

impl SelfXAction {
    /// Machine-readable reason code.
    pub fn reason(&self) -> &'static str {
        match self {
            SelfXAction::RestartApp { .. } => "self_healing.capacity_available",
            SelfXAction::RelocateApp { trigger, .. } => match trigger {
                RelocationTrigger::HostOverload => "self_optimizing.host_overload",
                RelocationTrigger::HostFailure => "self_healing.host_failure",
                RelocationTrigger::QosViolation => "self_optimizing.qos_violation",
            },
            SelfXAction::Onboard { .. } => "self_configuring.new_device",
            SelfXAction::Quarantine { .. } => "self_protecting.auth_failures",
        }
    }
}

/// Snapshot the watchdog reasons about.
#[derive(Debug, Clone, Default)]
pub struct SystemView {
    pub pool: HostPool,
    pub apps: BTreeMap<String, EdgeApplication>,
    /// Devices in coverage with no onboarding record yet.
    pub discovered: BTreeSet<NodeId>,
    pub auth_failures: BTreeMap<NodeId, u32>,
    pub quarantined: BTreeSet<NodeId>,
    /// Apps whose bound flow misses its latency bound.
    pub qos_violations: BTreeSet<String>,
}

pub fn self_x_tick(view: &SystemView, latency: &dyn Fn(&str, &str) -> Option<f64>) -> Vec<SelfXAction> {
    let mut actions = Vec::new();
    let mut pool = view.pool.clone();
    for (id, app) in &view.apps {
        if app.state != AppState::Failed {
            continue;
        }
        let lat = |node: &str| latency(id, node);
        if let Ok(placed) = instantiate_app(&app.spec, &mut pool, &lat) {
            actions.push(SelfXAction::RestartApp { app: id.clone(), host: placed.host.unwrap() });
        }
    }
    for (id, app) in &view.apps {
        if app.state != AppState::Running {
            continue;
        }
        let Some(host) = app.host.as_ref().and_then(|h| view.pool.hosts.get(h)) else { continue };
        if !host.alive {
            actions.push(SelfXAction::RelocateApp { app: id.clone(), trigger: RelocationTrigger::HostFailure });
        } else if view.qos_violations.contains(id) {
            actions.push(SelfXAction::RelocateApp { app: id.clone(), trigger: RelocationTrigger::QosViolation });
        } else if host.utilization() > OVERLOAD_THRESHOLD {
            actions.push(SelfXAction::RelocateApp { app: id.clone(), trigger: RelocationTrigger::HostOverload });
        }
    }
    for d in &view.discovered {
        if !view.quarantined.contains(d) {
            actions.push(SelfXAction::Onboard { device: d.clone() });
        }
    }
    for (d, n) in &view.auth_failures {
        if *n > AUTH_FAILURE_LIMIT && !view.quarantined.contains(d) {
            actions.push(SelfXAction::Quarantine { device: d.clone() });
        }
    }
    actions
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualAsset {
    pub id: String,
    pub device: NodeId,
    pub topics: Vec<String>,
    pub subscribers: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegistryError {
    #[error("device `{0}` already has a virtual asset")]
    AlreadyVirtualized(NodeId),
    #[error("no virtual asset `{0}`")]
    UnknownAsset(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VirtualAssetRegistry {
    assets: BTreeMap<String, VirtualAsset>,
    by_device: BTreeMap<NodeId, String>,
}

impl VirtualAssetRegistry {
    pub fn register(&mut self, device: &str, topics: Vec<String>) -> Result<&VirtualAsset, RegistryError> {
        if self.by_device.contains_key(device) {
            return Err(RegistryError::AlreadyVirtualized(device.into()));
        }
        let id = format!("v-{device}");
        self.by_device.insert(device.into(), id.clone());
        self.assets.insert(
            id.clone(),
            VirtualAsset { id: id.clone(), device: device.into(), topics, subscribers: BTreeSet::new() },
        );
        Ok(&self.assets[&id])
    }

    pub fn subscribe(&mut self, asset: &str, app: &str) -> Result<(), RegistryError> {
        self.assets
            .get_mut(asset)
            .ok_or_else(|| RegistryError::UnknownAsset(asset.into()))?
            .subscribers
            .insert(app.into());
        Ok(())
    }

    pub fn asset_for(&self, device: &str) -> Option<&VirtualAsset> {
        self.by_device.get(device).map(|id| &self.assets[id])
    }

    pub fn assets(&self) -> impl Iterator<Item = &VirtualAsset> {
        self.assets.values()
    }

    /// Fan one data record out to every subscriber.
    pub fn publish<T: Clone>(&self, asset: &str, record: &T) -> Result<Vec<(String, T)>, RegistryError> {
        let a = self.assets.get(asset).ok_or_else(|| RegistryError::UnknownAsset(asset.into()))?;
        Ok(a.subscribers.iter().map(|s| (s.clone(), record.clone())).collect())
    }
}
