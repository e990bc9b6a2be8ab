//! The simulated plant: one deterministic kernel run of a scenario, producing the
//! NDJSON trace, the hash-chained audit log and the aggregated metrics.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::federation::{
    best_technology, candidates_for, cell_candidate, rebalance, score_cell, select_attachment, AttachmentState,
    BalanceDevice, CellCandidate, HandoverAction, HandoverContext, HandoverMode, HandoverState, RebalanceConfig,
    StepOutcome,
};
use crate::flowrouting::{
    build_routing_graph, compute_path, gateway_event_path, path_metrics, AccessLink, GatewayRateLimiter, Hop,
    Path, RouteError, RoutingGraph, SliceLedger,
};
use crate::geometry::Point2;
use crate::kernel::{EventQueue, SimTime};
use crate::linkmodel::{energy_cost, ProfileTable, Technology};
use crate::localization::{
    fuse_fresh, localize_epoch, track_update, zone_events, Anchor, PositionEstimate, Track, ZoneTransition,
    DEFAULT_PROCESS_NOISE, DEFAULT_STALENESS_MS,
};
use crate::management::{
    apply_configuration, commit_relocation, instantiate_app, onboard, relocate_app, self_x_tick, AppState,
    AssetConfiguration, BundleRegistry, ConfigChange, Constellation, EdgeApplication, Host, HostPool,
    OnboardingRequest, OnboardingStage, RelocationPlan, RelocationTrigger, SelfXAction, SoftwareLayer, SystemView,
    VirtualAssetRegistry,
};
use crate::metrics::MetricsReport;
use crate::rng::{RngRoot, SimRng};
use crate::scenario::{Scenario, ScenarioError, ScriptEvent};
use crate::security::{
    authenticate, device_proof, AccessPolicy, AuditLog, AuthCenter, AuthProof, Challenge, Credential,
    CredentialKind, Session, TrustAnchor,
};
use crate::topology::{link_key, DeviceKind, FactoryTopology, FlexiCell, Flow, InfraKind, NodeId, TrafficClass};
use crate::trace::{DropCause, TraceLog, TraceRecord, TRACE_VERSION};

/// A track not updated for this long is restarted from the next fix.
const TRACK_RESET_S: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ev {
    Mobility,
    Watchdog,
    Localization,
    Batch(usize),
    Admission { device: usize, epoch: u64 },
    Execution { device: usize, epoch: u64 },
    Script(usize),
}

#[derive(Debug)]
struct DeviceRt {
    id: NodeId,
    kind: DeviceKind,
    techs: Vec<Technology>,
    subscriber: String,
    discovered: bool,
    onboard_attempted: bool,
    stage: OnboardingStage,
    session: Option<Session>,
    attach: AttachmentState,
    /// Access links currently carrying traffic.
    links_up: BTreeSet<NodeId>,
    ho: HandoverContext,
    ho_epoch: u64,
    ho_started: SimTime,
    gap_since: Option<SimTime>,
    last_gap_ms: f64,
    on_premise: bool,
    battery_mj: Option<f64>,
    energy_mj: f64,
    track: Option<Track>,
    last_position_record: Option<SimTime>,
    zones_inside: BTreeSet<String>,
    auth_failures: u32,
    last_exchange: Option<(Challenge, AuthProof)>,
    checked_cells: BTreeSet<NodeId>,
    config: AssetConfiguration,
    loc_rng: SimRng,
}

#[derive(Debug)]
struct FlowRt {
    flow: Flow,
    path: Option<Path>,
    forced: bool,
    last_reason: Option<String>,
    seq: u64,
    rng: SimRng,
    surge: f64,
    /// Last delivered batch missed the latency bound.
    late: bool,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: TraceLog,
    pub audit: AuditLog,
    pub metrics: MetricsReport,
}

struct World<'a> {
    sc: &'a Scenario,
    topo: FactoryTopology,
    profiles: ProfileTable,
    bundles: BundleRegistry,
    ledger: SliceLedger,
    policy: AccessPolicy,
    auth: AuthCenter,
    anchor: TrustAnchor,
    devices: Vec<DeviceRt>,
    dev_index: BTreeMap<NodeId, usize>,
    flows: Vec<FlowRt>,
    apps: BTreeMap<String, EdgeApplication>,
    pool: HostPool,
    vassets: VirtualAssetRegistry,
    fakes: Vec<(FlexiCell, String)>,
    failed_nodes: BTreeSet<NodeId>,
    failed_links: BTreeSet<String>,
    graph: RoutingGraph,
    graph_dirty: bool,
    routes_dirty: bool,
    offered: BTreeMap<String, BTreeMap<String, f64>>,
    offered_dirty: bool,
    limiter: GatewayRateLimiter,
    rng_auth: SimRng,
    rng_attack: SimRng,
    q: EventQueue<Ev>,
    end: SimTime,
    records: Vec<TraceRecord>,
    audit: AuditLog,
    /// Trace index of each audit record, by audit index.
    audit_at: Vec<usize>,
    loc_errors: Vec<f64>,
}

fn ms(v: f64) -> SimTime {
    SimTime::from_millis_f64(v)
}

/// Run `scenario` to its duration with its own seed.
pub fn run(scenario: &Scenario) -> Result<RunOutput, ScenarioError> {
    scenario.validate()?;
    let mut w = World::new(scenario)?;
    w.init();
    while let Some(ev) = w.q.pop_until(w.end) {
        w.handle(ev.payload);
        w.settle();
    }
    Ok(w.finish())
}

impl<'a> World<'a> {
    fn new(sc: &'a Scenario) -> Result<Self, ScenarioError> {
        let topo = sc.topology()?;
        let profiles = sc.profile_table()?;
        let bundles = sc.bundle_registry()?;
        let mut ledger = SliceLedger::new(&sc.slices).map_err(|e| ScenarioError::Validation(vec![e.to_string()]))?;
        ledger.enforce = sc.settings.slice_enforcement;
        let root = RngRoot::new(sc.seed);

        let mut auth = AuthCenter::new();
        for c in &sc.credentials {
            let cred = Credential {
                kind: c.kind,
                subscriber: c.subscriber.clone(),
                secret: c.key.clone(),
                sequence_counter: c.sequence_counter,
            };
            auth.register(cred).map_err(|e| ScenarioError::Validation(vec![e.to_string()]))?;
        }
        for fp in &sc.trust_store {
            auth.trust(fp);
        }

        let devices: Vec<DeviceRt> = topo
            .devices
            .iter()
            .map(|d| DeviceRt {
                id: d.id.clone(),
                kind: d.kind,
                techs: d.technologies.clone(),
                subscriber: d.credential.clone(),
                discovered: false,
                onboard_attempted: false,
                stage: OnboardingStage::Discovered,
                session: None,
                attach: AttachmentState::unattached(&d.id),
                links_up: BTreeSet::new(),
                ho: HandoverContext::new(&d.id, None, sc.settings.handover.clone()),
                ho_epoch: 0,
                ho_started: SimTime::ZERO,
                gap_since: None,
                last_gap_ms: 0.0,
                on_premise: topo.premise.contains(&d.position_at(0.0)),
                battery_mj: d.battery_mj,
                energy_mj: 0.0,
                track: None,
                last_position_record: None,
                zones_inside: BTreeSet::new(),
                auth_failures: 0,
                last_exchange: None,
                checked_cells: BTreeSet::new(),
                config: AssetConfiguration {
                    asset: d.id.clone(),
                    constellation: Constellation { hardware: d.kind.as_str().into(), position: d.position_at(0.0) },
                    software: None,
                    adaptation: BTreeMap::new(),
                    revision: 0,
                },
                loc_rng: root.fork(&format!("localization/{}", d.id)),
            })
            .collect();
        let dev_index = devices.iter().enumerate().map(|(i, d)| (d.id.clone(), i)).collect();
        let flows = sc
            .flows
            .iter()
            .map(|f| FlowRt {
                flow: f.clone(),
                path: None,
                forced: false,
                last_reason: None,
                seq: 0,
                rng: root.fork(&format!("flow/{}", f.id)),
                surge: 1.0,
                late: false,
            })
            .collect();
        let pool = HostPool {
            hosts: topo
                .infra
                .iter()
                .filter(|n| n.kind == InfraKind::EdgeServer && (n.cpu_units > 0.0 || n.memory_units > 0.0))
                .map(|n| (n.id.clone(), Host::new(n.cpu_units, n.memory_units)))
                .collect(),
        };
        Ok(Self {
            sc,
            topo,
            profiles,
            bundles,
            ledger,
            policy: AccessPolicy { rules: sc.access_rules.clone() },
            auth,
            anchor: TrustAnchor::from_seed(sc.seed),
            devices,
            dev_index,
            flows,
            apps: BTreeMap::new(),
            pool,
            vassets: VirtualAssetRegistry::default(),
            fakes: Vec::new(),
            failed_nodes: BTreeSet::new(),
            failed_links: BTreeSet::new(),
            graph: RoutingGraph::default(),
            graph_dirty: true,
            routes_dirty: true,
            offered: BTreeMap::new(),
            offered_dirty: true,
            limiter: GatewayRateLimiter::new(sc.settings.gateway_rate_cap),
            rng_auth: root.fork("auth"),
            rng_attack: root.fork("attack"),
            q: EventQueue::new(),
            end: SimTime::from_secs(sc.duration_s),
            records: Vec::new(),
            audit: AuditLog::new(),
            audit_at: Vec::new(),
            loc_errors: Vec::new(),
        })
    }

    fn now(&self) -> SimTime {
        self.q.now()
    }

    fn at(&mut self, t: SimTime, ev: Ev) {
        if t < self.end {
            self.q.schedule(t, ev).expect("future event");
        }
    }

    fn init(&mut self) {
        self.records.push(TraceRecord::Header {
            version: TRACE_VERSION,
            name: self.sc.name.clone(),
            seed: self.sc.seed,
            duration_s: self.sc.duration_s,
            scenario: self.sc.to_toml(),
        });
        self.rebuild_graph();
        for spec in self.sc.apps.clone() {
            self.emit(TraceRecord::App {
                t: SimTime::ZERO,
                app: spec.id.clone(),
                from: None,
                to: AppState::Instantiated,
                host: None,
                reason: "deployed".into(),
            });
            let lat = self.app_latency_fn(&spec.id);
            match instantiate_app(&spec, &mut self.pool, &lat) {
                Ok(app) => {
                    let host = app.host.clone();
                    self.apps.insert(spec.id.clone(), app);
                    self.emit(TraceRecord::App {
                        t: SimTime::ZERO,
                        app: spec.id.clone(),
                        from: Some(AppState::Instantiated),
                        to: AppState::Running,
                        host,
                        reason: "placed".into(),
                    });
                }
                Err(_) => {
                    self.apps.insert(
                        spec.id.clone(),
                        EdgeApplication { spec: spec.clone(), host: None, state: AppState::Failed },
                    );
                    self.emit(TraceRecord::App {
                        t: SimTime::ZERO,
                        app: spec.id.clone(),
                        from: Some(AppState::Instantiated),
                        to: AppState::Failed,
                        host: None,
                        reason: "no_capacity".into(),
                    });
                }
            }
        }
        self.at(SimTime::ZERO, Ev::Mobility);
        self.at(SimTime::ZERO, Ev::Watchdog);
        self.at(SimTime::ZERO, Ev::Localization);
        for (i, e) in self.sc.events.iter().enumerate() {
            self.at(SimTime::from_secs(e.at_s()), Ev::Script(i));
        }
        for i in 0..self.flows.len() {
            let start = SimTime::from_secs(self.flows[i].flow.start_s);
            self.at(start, Ev::Batch(i));
        }
    }

    fn finish(self) -> RunOutput {
        let trace = TraceLog { records: self.records };
        let audit = AuditLog::from_records(trace.audit_records());
        let energy = self.devices.iter().map(|d| (d.id.clone(), d.energy_mj)).collect();
        let metrics = MetricsReport::from_trace(&trace, &self.sc.flows, self.q.processed(), energy, &self.loc_errors);
        RunOutput { trace, audit, metrics }
    }

    /// Append a record; state changes get their audit record right behind them.
    fn emit(&mut self, rec: TraceRecord) {
        let audit = rec.audit_fields();
        let t = rec.time().unwrap_or(SimTime::ZERO);
        self.records.push(rec);
        if let Some((actor, action, object, outcome)) = audit {
            let r = self.audit.append(t, actor, &action, &object, &outcome).clone();
            self.audit_at.push(self.records.len());
            self.records.push(TraceRecord::Audit(r));
        }
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::Mobility => self.on_mobility(),
            Ev::Watchdog => self.on_watchdog(),
            Ev::Localization => self.on_localization(),
            Ev::Batch(i) => self.on_batch(i),
            Ev::Admission { device, epoch } => {
                if self.devices[device].ho_epoch == epoch {
                    self.on_admission(device);
                }
            }
            Ev::Execution { device, epoch } => {
                if self.devices[device].ho_epoch == epoch {
                    self.on_execution(device);
                }
            }
            Ev::Script(i) => self.on_script(i),
        }
    }

    fn settle(&mut self) {
        if self.graph_dirty {
            self.rebuild_graph();
            self.routes_dirty = true;
        }
        if self.routes_dirty {
            self.routes_dirty = false;
            self.refresh_routes();
        }
    }

    // ---- topology state ----

    fn rebuild_graph(&mut self) {
        let mut access = Vec::new();
        for d in &self.devices {
            if !self.has_session(d) {
                continue;
            }
            for c in &d.links_up {
                if let Some(tech) = d.attach.technology(c) {
                    access.push(AccessLink { device: d.id.clone(), cell: c.clone(), technology: tech });
                }
            }
        }
        let mut topo_now = self.topo.clone();
        let t = self.now().as_secs();
        // device premise status comes from the current positions
        for dev in topo_now.devices.iter_mut() {
            let p = dev.position_at(t);
            dev.position = p;
            dev.path.clear();
        }
        self.graph = build_routing_graph(&topo_now, &self.profiles, &access, &self.failed_nodes, &self.failed_links, t);
        self.graph_dirty = false;
    }

    fn has_session(&self, d: &DeviceRt) -> bool {
        d.stage == OnboardingStage::Operational && d.session.as_ref().is_some_and(|s| s.is_valid(self.now()))
    }

    fn device_position(&self, i: usize) -> Point2 {
        self.topo.devices[i].position_at(self.now().as_secs())
    }

    fn public_allowed(&self) -> bool {
        self.topo.public_network.as_ref().is_some_and(|p| p.handover_support)
    }

    /// Nominal (admitted) demand terminating at each device.
    fn device_demand(&self) -> BTreeMap<NodeId, f64> {
        let mut out: BTreeMap<NodeId, f64> = BTreeMap::new();
        for f in &self.flows {
            if f.path.is_none() {
                continue;
            }
            for end in [&f.flow.source, &f.flow.sink] {
                if self.dev_index.contains_key(end) {
                    *out.entry(end.clone()).or_default() += f.flow.demand_mbps;
                }
            }
        }
        out
    }

    fn cell_capacity(&self, cell: &str) -> Option<f64> {
        if let Some(c) = self.topo.cell(cell) {
            return Some(c.capacity_mbps);
        }
        self.topo.public_network.as_ref().filter(|p| p.id == cell).map(|p| p.capacity_mbps)
    }

    fn cell_utilization(&self) -> BTreeMap<NodeId, f64> {
        let demand = self.device_demand();
        let mut load: BTreeMap<NodeId, f64> = BTreeMap::new();
        for d in &self.devices {
            if let Some(p) = &d.attach.primary {
                *load.entry(p.clone()).or_default() += demand.get(&d.id).copied().unwrap_or(0.0);
            }
        }
        load.into_iter()
            .map(|(c, l)| {
                let cap = self.cell_capacity(&c).unwrap_or(f64::INFINITY);
                (c, l / cap)
            })
            .collect()
    }

    fn candidates(&self, i: usize, util: &BTreeMap<NodeId, f64>) -> Vec<CellCandidate> {
        let pos = self.device_position(i);
        let u = |c: &str| util.get(c).copied().unwrap_or(0.0);
        candidates_for(&self.topo, &self.profiles, &self.devices[i].techs, pos, &u, &self.failed_nodes, self.public_allowed())
    }

    fn link_technology(&self, i: usize, cell: &str) -> Option<Technology> {
        let d = &self.devices[i];
        if let Some(c) = self.topo.cell(cell) {
            let pos = self.device_position(i);
            return best_technology(&self.profiles, &d.techs, &c.technologies, pos.distance(&c.position))
                .filter(|(_, m)| *m >= 0.0)
                .map(|(t, _)| t);
        }
        let p = self.topo.public_network.as_ref().filter(|p| p.id == cell)?;
        d.techs.iter().copied().filter(|t| p.technologies.contains(t)).min()
    }

    // ---- attachment and handover ----

    fn attach_fresh(&mut self, i: usize, cands: &[CellCandidate], cause: &str) {
        let att = select_attachment(&self.devices[i].id, cands, self.sc.settings.max_secondaries);
        let Some(primary) = att.primary.clone() else { return };
        let tech = att.technology(&primary);
        let d = &mut self.devices[i];
        d.links_up = std::iter::once(primary.clone()).chain(att.secondaries.iter().cloned()).collect();
        d.attach = att;
        d.ho = HandoverContext::new(&d.id, Some(primary.clone()), self.sc.settings.handover.clone());
        d.ho_epoch += 1;
        d.gap_since = None;
        let id = d.id.clone();
        self.graph_dirty = true;
        self.emit(TraceRecord::Attach { t: self.now(), device: id, cell: Some(primary), technology: tech, cause: cause.into() });
    }

    fn abort_handover(&mut self, i: usize) {
        let t = self.now();
        let d = &mut self.devices[i];
        let steps: Vec<(HandoverState, HandoverState)> = match d.ho.state {
            HandoverState::Triggered => vec![(HandoverState::Triggered, HandoverState::Idle)],
            s @ (HandoverState::Preparing | HandoverState::Executing) => {
                vec![(s, HandoverState::Reverted), (HandoverState::Reverted, HandoverState::Idle)]
            }
            _ => vec![],
        };
        let target = d.ho.candidate.clone();
        d.ho = HandoverContext::new(&d.id, d.attach.primary.clone(), self.sc.settings.handover.clone());
        d.ho_epoch += 1;
        let id = d.id.clone();
        for (from, to) in steps {
            self.emit(TraceRecord::HandoverState { t, device: id.clone(), from, to, target: target.clone() });
        }
    }

    fn detach(&mut self, i: usize, cause: &str) {
        self.abort_handover(i);
        let d = &mut self.devices[i];
        let was = d.attach.is_attached() || !d.links_up.is_empty();
        d.attach = AttachmentState::unattached(&d.id);
        d.links_up.clear();
        d.gap_since = None;
        d.ho = HandoverContext::new(&d.id, None, self.sc.settings.handover.clone());
        let id = d.id.clone();
        self.graph_dirty = true;
        if was {
            self.emit(TraceRecord::Attach { t: self.now(), device: id, cell: None, technology: None, cause: cause.into() });
        }
    }

    /// Serving link lost: drop everything and attach to the best feasible cell.
    fn radio_link_failure(&mut self, i: usize) {
        self.detach(i, "link_lost");
        let util = self.cell_utilization();
        let cands = self.candidates(i, &util);
        self.attach_fresh(i, &cands, "reattach");
    }

    fn apply_ho(&mut self, i: usize, out: StepOutcome, target: Option<NodeId>) {
        let t = self.now();
        let id = self.devices[i].id.clone();
        for (from, to) in &out.transitions {
            self.emit(TraceRecord::HandoverState { t, device: id.clone(), from: *from, to: *to, target: target.clone() });
        }
        let cfg = self.sc.settings.handover.clone();
        for a in out.actions {
            match a {
                HandoverAction::RequestAdmission { .. } => {
                    self.devices[i].ho_started = t;
                    let epoch = self.devices[i].ho_epoch;
                    self.at(t + ms(cfg.preparation_ms), Ev::Admission { device: i, epoch });
                }
                HandoverAction::ScheduleExecution => {
                    let epoch = self.devices[i].ho_epoch;
                    self.at(t + ms(cfg.execution_ms), Ev::Execution { device: i, epoch });
                }
                HandoverAction::AddLink { cell } => {
                    let tech = self.link_technology(i, &cell);
                    let d = &mut self.devices[i];
                    if let Some(tech) = tech {
                        d.attach.technologies.insert(cell.clone(), tech);
                        d.links_up.insert(cell);
                    }
                    if let Some(since) = d.gap_since.take() {
                        d.last_gap_ms = t.saturating_sub(since).as_millis_f64();
                    }
                    self.graph_dirty = true;
                }
                HandoverAction::ReleaseLink { cell } => {
                    let d = &mut self.devices[i];
                    d.links_up.remove(&cell);
                    if d.attach.primary.as_ref() == Some(&cell) {
                        if cfg.mode == HandoverMode::BreakBeforeMake {
                            d.gap_since = Some(t);
                        }
                    } else {
                        d.attach.technologies.remove(&cell);
                        d.attach.secondaries.retain(|s| s != &cell);
                    }
                    self.graph_dirty = true;
                }
                HandoverAction::SwitchPrimary { from, to } => {
                    let d = &mut self.devices[i];
                    d.attach.primary = Some(to.clone());
                    d.attach.secondaries.retain(|s| s != &to);
                    let tech = d.attach.technology(&to);
                    let link_down_ms = match cfg.mode {
                        HandoverMode::MakeBeforeBreak => 0.0,
                        HandoverMode::BreakBeforeMake => d.last_gap_ms,
                    };
                    let started = d.ho_started;
                    self.graph_dirty = true;
                    self.emit(TraceRecord::Attach {
                        t,
                        device: id.clone(),
                        cell: Some(to.clone()),
                        technology: tech,
                        cause: "handover".into(),
                    });
                    self.records.push(TraceRecord::Handover {
                        t,
                        device: id.clone(),
                        from,
                        to,
                        mode: cfg.mode,
                        started,
                        link_down_ms,
                    });
                }
            }
        }
        // the old primary's release in make-before-break must reroute at this instant
        if self.graph_dirty {
            self.settle();
        }
    }

    fn on_admission(&mut self, i: usize) {
        let Some(target) = self.devices[i].ho.candidate.clone() else { return };
        let util = self.cell_utilization();
        let demand = self.device_demand().get(&self.devices[i].id).copied().unwrap_or(0.0);
        let admitted = !self.failed_nodes.contains(&target)
            && self.link_technology(i, &target).is_some()
            && self.cell_capacity(&target).is_some_and(|cap| util.get(&target).copied().unwrap_or(0.0) + demand / cap <= 1.0);
        match self.devices[i].ho.on_admission(admitted) {
            Ok(out) => self.apply_ho(i, out, Some(target)),
            Err(crate::federation::FederationError::AdmissionRejected { transitions, .. }) => {
                self.apply_ho(i, StepOutcome { transitions, actions: vec![] }, Some(target))
            }
            Err(_) => {}
        }
    }

    fn on_execution(&mut self, i: usize) {
        let Some(target) = self.devices[i].ho.candidate.clone() else { return };
        let ok = !self.failed_nodes.contains(&target) && self.link_technology(i, &target).is_some();
        let out = self.devices[i].ho.on_execution_done(ok);
        self.apply_ho(i, out, Some(target));
    }

    // ---- periodic work ----

    fn on_mobility(&mut self) {
        let t = self.now();
        self.at(t + ms(self.sc.settings.mobility_period_ms), Ev::Mobility);
        for i in 0..self.devices.len() {
            self.mobility_step(i);
        }
    }

    fn mobility_step(&mut self, i: usize) {
        let t = self.now();
        let pos = self.device_position(i);
        let prem = self.topo.premise.contains(&pos);
        if prem != self.devices[i].on_premise {
            self.devices[i].on_premise = prem;
            self.graph_dirty = true;
        }
        if self.devices[i].stage == OnboardingStage::Quarantined {
            return;
        }
        let util = self.cell_utilization();
        let cands = self.candidates(i, &util);

        // network authenticity of every newly heard cell
        for k in 0..self.fakes.len() {
            let (cell, token) = &self.fakes[k];
            if self.devices[i].checked_cells.contains(&cell.id) {
                continue;
            }
            let heard = cell_candidate(&self.profiles, &self.devices[i].techs, pos, cell, 0.0)
                .is_some_and(|c| c.margin_db.is_some());
            if !heard {
                continue;
            }
            let cell_id = cell.id.clone();
            let verdict = crate::security::verify_network(&cell_id, token, &self.anchor);
            self.devices[i].checked_cells.insert(cell_id.clone());
            if verdict.is_err() {
                let id = self.devices[i].id.clone();
                self.emit(TraceRecord::FakeCellRejected { t, device: id, cell: cell_id });
            }
        }
        for c in cands.iter().filter(|c| c.margin_db.is_some()) {
            if self.topo.cell(&c.cell).is_some() && !self.devices[i].checked_cells.contains(&c.cell) {
                let token = self.anchor.issue(&c.cell);
                if crate::security::verify_network(&c.cell, &token, &self.anchor).is_ok() {
                    self.devices[i].checked_cells.insert(c.cell.clone());
                }
            }
        }

        let feasible: Vec<CellCandidate> = cands.into_iter().filter(|c| c.margin_db.is_some()).collect();
        if !self.devices[i].discovered && !feasible.is_empty() {
            self.devices[i].discovered = true;
            let id = self.devices[i].id.clone();
            self.emit(TraceRecord::Management { t, action: "discover".into(), target: id, reason: "in_coverage".into() });
        }
        if !self.has_session(&self.devices[i]) {
            return;
        }
        let Some(primary) = self.devices[i].attach.primary.clone() else {
            self.attach_fresh(i, &feasible, "initial");
            return;
        };
        if !feasible.iter().any(|c| c.cell == primary) {
            self.radio_link_failure(i);
            return;
        }
        let lost: Vec<NodeId> = self.devices[i]
            .attach
            .secondaries
            .iter()
            .filter(|s| !feasible.iter().any(|c| &c.cell == *s))
            .cloned()
            .collect();
        if !lost.is_empty() {
            let d = &mut self.devices[i];
            for s in &lost {
                d.links_up.remove(s);
                d.attach.technologies.remove(s);
            }
            d.attach.secondaries.retain(|s| !lost.contains(s));
            self.graph_dirty = true;
        }
        if self.devices[i].ho.is_busy() {
            return;
        }
        let scores: BTreeMap<NodeId, f64> =
            feasible.iter().filter_map(|c| score_cell(c).ok().map(|s| (c.cell.clone(), s))).collect();
        let before = self.devices[i].ho.candidate.clone();
        let out = self.devices[i].ho.on_scores(&scores, t);
        if !out.transitions.is_empty() {
            let target = self.devices[i].ho.candidate.clone().or(before);
            self.apply_ho(i, out, target);
        }
    }

    fn anchors(&self) -> Vec<Anchor> {
        let cells = self.topo.cells.iter().map(|c| Anchor {
            id: c.id.clone(),
            position: c.position,
            technologies: c.technologies.clone(),
        });
        let infra = self.topo.infra.iter().map(|n| Anchor {
            id: n.id.clone(),
            position: n.position,
            technologies: n.technologies.clone(),
        });
        cells.chain(infra).filter(|a| !self.failed_nodes.contains(&a.id)).collect()
    }

    fn on_localization(&mut self) {
        let t = self.now();
        self.at(t + ms(self.sc.settings.localization_period_ms), Ev::Localization);
        let anchors = self.anchors();
        let staleness = ms(DEFAULT_STALENESS_MS);
        let record_every = ms(self.sc.settings.position_record_ms);
        for i in 0..self.devices.len() {
            if !self.has_session(&self.devices[i]) {
                continue;
            }
            let truth = self.device_position(i);
            let d = &mut self.devices[i];
            let estimates = localize_epoch(&anchors, &d.id, &d.techs, truth, &self.profiles, &mut d.loc_rng, t);
            if estimates.is_empty() {
                continue;
            }
            let Ok(fused) = fuse_fresh(&estimates, t, staleness) else { continue };
            let track = match &d.track {
                Some(tr) if (t.saturating_sub(tr.timestamp)).as_secs() <= TRACK_RESET_S && t > tr.timestamp => {
                    track_update(tr, &fused, t.saturating_sub(tr.timestamp).as_secs())
                        .unwrap_or_else(|_| Track::start(&fused, DEFAULT_PROCESS_NOISE))
                }
                _ => Track::start(&fused, DEFAULT_PROCESS_NOISE),
            };
            let est: PositionEstimate = track.estimate();
            d.track = Some(track);
            let error_m = est.error_to(&truth);
            self.loc_errors.push(error_m);
            let due = d.last_position_record.is_none_or(|last| t.saturating_sub(last) >= record_every);
            let id = d.id.clone();
            if due {
                d.last_position_record = Some(t);
                let inputs = if estimates.len() > 1 { estimates.iter().map(|e| e.covariance).collect() } else { vec![] };
                self.records.push(TraceRecord::Position {
                    t,
                    device: id.clone(),
                    mean: est.mean,
                    covariance: est.covariance,
                    sources: est.sources.clone(),
                    error_m,
                    fused: fused.covariance,
                    inputs,
                });
            }
            let mut inside = std::mem::take(&mut self.devices[i].zones_inside);
            let events = zone_events(&est.mean, &self.sc.zones, &mut inside);
            self.devices[i].zones_inside = inside;
            for z in events {
                self.emit(TraceRecord::Zone {
                    t,
                    device: id.clone(),
                    zone: z.zone.clone(),
                    transition: z.transition,
                    trigger: z.trigger.clone(),
                });
                if let Some(trigger) = z.trigger {
                    let dir = if z.transition == ZoneTransition::Enter { "enter" } else { "exit" };
                    self.emit(TraceRecord::Management {
                        t,
                        action: "zone_trigger".into(),
                        target: trigger,
                        reason: format!("{}:{}:{dir}", id, z.zone),
                    });
                }
            }
        }
    }

    fn on_watchdog(&mut self) {
        let t = self.now();
        self.at(t + SimTime::from_secs(self.sc.settings.watchdog_period_s), Ev::Watchdog);
        let qos_violations = self
            .apps
            .iter()
            .filter(|(_, a)| {
                a.spec
                    .bound_flow
                    .as_ref()
                    .and_then(|f| self.flows.iter().find(|r| &r.flow.id == f))
                    .is_some_and(|r| r.late)
            })
            .map(|(id, _)| id.clone())
            .collect();
        let view = SystemView {
            pool: self.pool.clone(),
            apps: self.apps.clone(),
            discovered: self
                .devices
                .iter()
                .filter(|d| d.discovered && !d.onboard_attempted)
                .map(|d| d.id.clone())
                .collect(),
            auth_failures: self
                .devices
                .iter()
                .filter(|d| d.auth_failures > 0)
                .map(|d| (d.id.clone(), d.auth_failures))
                .collect(),
            quarantined: self
                .devices
                .iter()
                .filter(|d| d.stage == OnboardingStage::Quarantined)
                .map(|d| d.id.clone())
                .collect(),
            qos_violations,
        };
        let latency = self.app_latency_all();
        let lat = |app: &str, node: &str| latency.get(app).and_then(|m| m.get(node)).copied().flatten();
        let actions = self_x_tick(&view, &lat);
        for a in actions {
            let (kind, target) = match &a {
                SelfXAction::RestartApp { app, .. } => ("restart_app", app.clone()),
                SelfXAction::RelocateApp { app, .. } => ("relocate_app", app.clone()),
                SelfXAction::Onboard { device } => ("onboard", device.clone()),
                SelfXAction::Quarantine { device } => ("quarantine", device.clone()),
            };
            self.emit(TraceRecord::Management { t, action: kind.into(), target, reason: a.reason().into() });
            match a {
                SelfXAction::RestartApp { app, host } => self.restart_app(&app, &host),
                SelfXAction::RelocateApp { app, trigger } => self.relocate(&app, trigger),
                SelfXAction::Onboard { device } => self.onboard_device(self.dev_index[&device]),
                SelfXAction::Quarantine { device } => self.quarantine(self.dev_index[&device], "auth_failures"),
            }
        }
        self.settle();
        self.balance();
    }

    fn balance(&mut self) {
        let t = self.now();
        let util = self.cell_utilization();
        let demand = self.device_demand();
        let mut capacity = BTreeMap::new();
        for c in &self.topo.cells {
            if !self.failed_nodes.contains(&c.id) {
                capacity.insert(c.id.clone(), c.capacity_mbps);
            }
        }
        let mut devs = Vec::new();
        for i in 0..self.devices.len() {
            let d = &self.devices[i];
            let Some(primary) = d.attach.primary.clone() else { continue };
            if d.ho.state != HandoverState::Idle || !capacity.contains_key(&primary) {
                continue;
            }
            let scores = self
                .candidates(i, &util)
                .iter()
                .filter_map(|c| score_cell(c).ok().map(|s| (c.cell.clone(), s)))
                .collect();
            devs.push(BalanceDevice {
                device: d.id.clone(),
                demand_mbps: demand.get(&d.id).copied().unwrap_or(0.0),
                primary,
                scores,
            });
        }
        for m in rebalance(&capacity, &devs, RebalanceConfig::default()) {
            let i = self.dev_index[&m.device];
            self.emit(TraceRecord::Rebalance { t, device: m.device.clone(), from: m.from.clone(), to: m.to.clone() });
            if let Ok(out) = self.devices[i].ho.force(&m.to, t) {
                self.apply_ho(i, out, Some(m.to.clone()));
            }
        }
    }

    // ---- onboarding and security ----

    fn device_credential(&self, i: usize) -> Credential {
        let sub = &self.devices[i].subscriber;
        match self.sc.credential(sub) {
            Some(e) => Credential {
                kind: e.kind,
                subscriber: sub.clone(),
                secret: e.device_key.clone().unwrap_or_else(|| e.key.clone()),
                sequence_counter: 0,
            },
            None => Credential {
                kind: CredentialKind::PhysicalSim,
                subscriber: sub.clone(),
                secret: hex::encode([0u8; 16]),
                sequence_counter: 0,
            },
        }
    }

    fn onboard_device(&mut self, i: usize) {
        let t = self.now();
        self.devices[i].onboard_attempted = true;
        let cred = self.device_credential(i);
        let challenge = self.auth.challenge(&cred.subscriber, &mut self.rng_auth);
        let proof = device_proof(&cred, &challenge);
        self.devices[i].last_exchange = Some((challenge.clone(), proof));
        let bundle = self.topo.devices[i].bundle.clone();
        let kind = self.devices[i].kind.as_str();
        let id = self.devices[i].id.clone();
        let req = OnboardingRequest { device: &id, kind, credential: &cred, challenge, bundle: bundle.as_deref() };
        let outcome = onboard(&req, &mut self.auth, &self.policy, &self.bundles, t);
        let auth_outcome = match outcome.transitions.first() {
            Some(tr) if tr.to == OnboardingStage::Authenticated => "session".to_string(),
            Some(tr) => tr.reason.clone(),
            None => "none".into(),
        };
        self.emit(TraceRecord::Auth {
            t,
            device: id.clone(),
            subscriber: cred.subscriber.clone(),
            outcome: auth_outcome,
            attacker: false,
        });
        for tr in &outcome.transitions {
            self.emit(TraceRecord::Onboarding { t, device: id.clone(), from: tr.from, to: tr.to, reason: tr.reason.clone() });
        }
        let d = &mut self.devices[i];
        d.stage = outcome.state();
        d.session = outcome.session.clone();
        if let Some(b) = &outcome.bundle {
            d.config.software = Some(SoftwareLayer { bundle: b.id.clone(), version: b.version });
        }
        if d.stage != OnboardingStage::Operational {
            return;
        }
        if d.kind.is_virtualizable() {
            let topics = vec![format!("{}/telemetry", d.id)];
            if let Ok(a) = self.vassets.register(&id, topics) {
                let asset = a.id.clone();
                self.emit(TraceRecord::Management {
                    t,
                    action: "register_virtual_asset".into(),
                    target: asset,
                    reason: id.clone(),
                });
            }
        }
        let util = self.cell_utilization();
        let cands: Vec<CellCandidate> =
            self.candidates(i, &util).into_iter().filter(|c| c.margin_db.is_some()).collect();
        self.attach_fresh(i, &cands, "initial");
    }

    fn quarantine(&mut self, i: usize, reason: &str) {
        let t = self.now();
        let from = self.devices[i].stage;
        if from == OnboardingStage::Quarantined {
            return;
        }
        let id = self.devices[i].id.clone();
        self.emit(TraceRecord::Onboarding { t, device: id, from, to: OnboardingStage::Quarantined, reason: reason.into() });
        self.devices[i].stage = OnboardingStage::Quarantined;
        self.devices[i].session = None;
        self.detach(i, "quarantined");
        self.graph_dirty = true;
    }

    // ---- edge applications ----

    /// Latency estimate from a node towards where the app's bound flow originates.
    fn app_latency_fn(&self, app: &str) -> impl Fn(&str) -> Option<f64> + use<> {
        let table = self.app_latency_all().remove(app).unwrap_or_default();
        move |node: &str| table.get(node).copied().flatten()
    }

    fn app_latency_all(&self) -> BTreeMap<String, BTreeMap<NodeId, Option<f64>>> {
        let mut out = BTreeMap::new();
        let specs: Vec<_> = self.sc.apps.iter().collect();
        for spec in specs {
            let mut m = BTreeMap::new();
            let flow = spec.bound_flow.as_ref().and_then(|f| self.sc.flows.iter().find(|x| &x.id == f));
            let dist = flow.map(|f| self.latency_from(&f.source));
            for host in self.pool.hosts.keys() {
                let v = match &dist {
                    None => Some(0.0),
                    Some(d) => d.get(host).copied(),
                };
                m.insert(host.clone(), v);
            }
            out.insert(spec.id.clone(), m);
        }
        out
    }

    /// Shortest base latency from `source` to every reachable node. Unattached device
    /// sources start at their best-margin cell plus that cell's access latency.
    fn latency_from(&self, source: &str) -> BTreeMap<NodeId, f64> {
        let g = &self.graph;
        let mut starts: Vec<(usize, f64)> = Vec::new();
        if let Some(s) = g.node_index(source).filter(|&s| g.neighbors(s).next().is_some()) {
            starts.push((s, 0.0));
        } else if let Some(&i) = self.dev_index.get(source) {
            let pos = self.device_position(i);
            let best = self
                .topo
                .cells
                .iter()
                .filter_map(|c| {
                    best_technology(&self.profiles, &self.devices[i].techs, &c.technologies, pos.distance(&c.position))
                        .map(|(t, m)| (m, c.id.clone(), t))
                })
                .max_by(|a, b| a.0.total_cmp(&b.0).then_with(|| b.1.cmp(&a.1)));
            if let Some((_, cell, tech)) = best {
                if let Some(ci) = g.node_index(&cell) {
                    starts.push((ci, self.profiles.profile(tech).base_latency_ms));
                }
            }
        } else if let Some(s) = g.node_index(source) {
            starts.push((s, 0.0));
        }
        let n = g.nodes.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut done = vec![false; n];
        for (s, d) in &starts {
            dist[*s] = *d;
        }
        loop {
            let Some(v) = (0..n).filter(|&v| !done[v] && dist[v].is_finite()).min_by(|&a, &b| dist[a].total_cmp(&dist[b]))
            else {
                break;
            };
            done[v] = true;
            let is_start = starts.iter().any(|(s, _)| *s == v);
            if !is_start && !g.nodes[v].transit {
                continue;
            }
            for (w, ei) in g.neighbors(v) {
                let nd = dist[v] + g.edges[ei].latency_ms;
                if nd < dist[w] {
                    dist[w] = nd;
                }
            }
        }
        (0..n).filter(|&v| dist[v].is_finite()).map(|v| (g.nodes[v].id.clone(), dist[v])).collect()
    }

    fn relocate(&mut self, app_id: &str, trigger: RelocationTrigger) {
        let t = self.now();
        let Some(app) = self.apps.get(app_id).cloned() else { return };
        if app.state != AppState::Running {
            return;
        }
        let lat = self.app_latency_fn(app_id);
        let plan = relocate_app(&app, trigger, &self.pool, &lat, t);
        if plan == RelocationPlan::Keep {
            return;
        }
        self.emit(TraceRecord::App {
            t,
            app: app_id.into(),
            from: Some(AppState::Running),
            to: AppState::Relocating,
            host: app.host.clone(),
            reason: trigger.as_str().into(),
        });
        let (steps, target) = match &plan {
            RelocationPlan::Move { target, steps } => (steps.clone(), Some(target.clone())),
            _ => (vec![], None),
        };
        self.emit(TraceRecord::Relocation { t, app: app_id.into(), trigger, steps, target });
        let mut app = app;
        commit_relocation(&mut app, &plan, &mut self.pool);
        let (to, reason) = match app.state {
            AppState::Running => (AppState::Running, "relocated"),
            _ => (AppState::Failed, "no_capacity"),
        };
        let host = app.host.clone();
        self.apps.insert(app_id.into(), app);
        self.emit(TraceRecord::App { t, app: app_id.into(), from: Some(AppState::Relocating), to, host, reason: reason.into() });
        self.routes_dirty = true;
    }

    fn restart_app(&mut self, app_id: &str, host: &str) {
        let t = self.now();
        let Some(app) = self.apps.get_mut(app_id) else { return };
        if app.state != AppState::Failed || !self.pool.hosts.get(host).is_some_and(|h| h.fits(app.spec.cpu_units, app.spec.memory_units)) {
            return;
        }
        self.pool.allocate(host, app.spec.cpu_units, app.spec.memory_units);
        app.host = Some(host.into());
        app.state = AppState::Running;
        self.emit(TraceRecord::App {
            t,
            app: app_id.into(),
            from: Some(AppState::Failed),
            to: AppState::Running,
            host: Some(host.into()),
            reason: "restarted".into(),
        });
        self.routes_dirty = true;
    }

    // ---- flows ----

    fn resolve_sink(&self, sink: &str) -> Option<NodeId> {
        match self.apps.get(sink) {
            Some(a) if a.state == AppState::Running => a.host.clone(),
            Some(_) => None,
            None => Some(sink.to_string()),
        }
    }

    fn endpoint_connected(&self, node: &str) -> bool {
        match self.dev_index.get(node) {
            Some(&i) => self.has_session(&self.devices[i]) && !self.devices[i].links_up.is_empty(),
            None => !self.failed_nodes.contains(node),
        }
    }

    fn restricted(&self, f: &Flow) -> bool {
        f.sensitive && !self.ledger.slice(&f.slice).is_some_and(|s| s.allow_off_premise)
    }

    fn path_valid(&self, i: usize) -> Result<(), &'static str> {
        let fr = &self.flows[i];
        let Some(p) = &fr.path else { return Ok(()) };
        for h in &p.hops {
            if self.graph.edge(&h.link).is_none() {
                return Err("path_broken");
            }
        }
        if p.nodes.iter().any(|n| self.graph.node(n).is_none()) {
            return Err("path_broken");
        }
        if fr.forced {
            return Ok(());
        }
        if self.resolve_sink(&fr.flow.sink).as_ref() != p.nodes.last() {
            return Err("sink_moved");
        }
        if self.restricted(&fr.flow) && p.nodes.iter().any(|n| !self.graph.node(n).is_some_and(|x| x.on_premise)) {
            return Err("left_premise");
        }
        Ok(())
    }

    fn release(&mut self, i: usize, reason: &str) {
        let id = self.flows[i].flow.id.clone();
        self.ledger.release_flow(&id);
        self.flows[i].path = None;
        self.flows[i].forced = false;
        self.offered_dirty = true;
        self.emit(TraceRecord::FlowRelease { t: self.now(), flow: id, reason: reason.into() });
    }

    fn refresh_routes(&mut self) {
        for i in 0..self.flows.len() {
            if let Err(reason) = self.path_valid(i) {
                self.release(i, reason);
            }
            if self.flows[i].path.is_none() && self.flows[i].flow.traffic_class != TrafficClass::EventMessage {
                self.try_route(i);
            }
        }
    }

    fn try_route(&mut self, i: usize) {
        let t = self.now();
        let mut f = self.flows[i].flow.clone();
        let result: Result<Path, String> = (|| {
            if !self.endpoint_connected(&f.source) {
                return Err("source_not_connected".to_string());
            }
            let sink = self.resolve_sink(&f.sink).ok_or_else(|| "sink_unavailable".to_string())?;
            if !self.endpoint_connected(&sink) {
                return Err("sink_not_connected".to_string());
            }
            f.sink = sink;
            match compute_path(&f, &self.graph, &self.ledger) {
                Ok(p) => Ok(p),
                Err(RouteError::Infeasible(r)) => Err(serde_json::to_value(r)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_else(|| format!("{r:?}"))),
                Err(e) => Err(e.to_string()),
            }
        })();
        let result = result.and_then(|p| {
            self.ledger.admit_flow(&self.graph, &f, &p).map(|_| p).map_err(|_| "no_capacity".to_string())
        });
        match result {
            Ok(p) => {
                let nodes = p.nodes.clone();
                self.flows[i].path = Some(p);
                self.flows[i].last_reason = None;
                self.offered_dirty = true;
                self.emit(TraceRecord::FlowAdmission {
                    t,
                    flow: f.id.clone(),
                    slice: f.slice.clone(),
                    admitted: true,
                    nodes,
                    reason: "routed".into(),
                });
            }
            Err(reason) => {
                if self.flows[i].last_reason.as_deref() != Some(reason.as_str()) {
                    self.flows[i].last_reason = Some(reason.clone());
                    self.emit(TraceRecord::FlowAdmission {
                        t,
                        flow: f.id.clone(),
                        slice: f.slice.clone(),
                        admitted: false,
                        nodes: vec![],
                        reason,
                    });
                }
            }
        }
    }

    fn scale(&self, slice: &str) -> f64 {
        self.sc.settings.offered_scale.get(slice).copied().unwrap_or(1.0)
    }

    fn refresh_offered(&mut self) {
        let mut offered: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for fr in &self.flows {
            let Some(p) = &fr.path else { continue };
            let load = fr.flow.demand_mbps * self.scale(&fr.flow.slice) * fr.surge;
            for h in &p.hops {
                *offered.entry(h.link.clone()).or_default().entry(fr.flow.slice.clone()).or_default() += load;
            }
        }
        self.offered = offered;
        self.offered_dirty = false;
    }

    fn on_batch(&mut self, i: usize) {
        let t = self.now();
        let interval = ms(self.flows[i].flow.interval_ms);
        self.at(t + interval, Ev::Batch(i));
        if self.offered_dirty {
            self.refresh_offered();
        }
        let fr = &mut self.flows[i];
        let seq = fr.seq;
        fr.seq += 1;
        // exactly one draw per batch keeps every flow's stream aligned across runs
        let u: f64 = fr.rng.random();
        let flow = fr.flow.clone();
        let surge = fr.surge;
        let scale = self.scale(&flow.slice) * surge;
        let bytes = (flow.batch_bytes() as f64 * scale).round() as u64;
        let src = self.dev_index.get(&flow.source).copied();

        let packet = |delivered: bool, latency: Option<f64>, cause: Option<DropCause>, nodes: Vec<NodeId>| {
            TraceRecord::Packet {
                t,
                flow: flow.id.clone(),
                slice: flow.slice.clone(),
                seq,
                bytes,
                delivered,
                latency_ms: latency,
                cause,
                nodes,
            }
        };

        if let Some(d) = src {
            if !self.has_session(&self.devices[d]) {
                let rec = packet(false, None, Some(DropCause::Unauthenticated), vec![]);
                self.records.push(rec);
                return;
            }
            if self.devices[d].battery_mj.is_some_and(|b| b <= 0.0) {
                let rec = packet(false, None, Some(DropCause::Battery), vec![]);
                self.records.push(rec);
                return;
            }
        }

        if flow.traffic_class == TrafficClass::EventMessage {
            let rec = match src {
                None => packet(false, None, Some(DropCause::NoRoute), vec![]),
                Some(d) => {
                    let pos = self.device_position(d);
                    match gateway_event_path(
                        &self.topo,
                        &self.profiles,
                        &flow.source,
                        &self.devices[d].techs,
                        pos,
                        &self.failed_nodes,
                        &mut self.limiter,
                        t.as_micros(),
                    ) {
                        Err(_) => packet(false, None, Some(DropCause::NoRoute), vec![]),
                        Ok(g) if g.dropped => packet(false, None, Some(DropCause::RateLimited), vec![flow.source.clone(), g.gateway]),
                        Ok(g) if self.restricted(&flow) && !self.topo.on_premise(&g.gateway) => {
                            packet(false, None, Some(DropCause::Sovereignty), vec![])
                        }
                        Ok(g) => {
                            self.spend_energy(d, g.technology, bytes);
                            let loss = 1.0 - self.profiles.profile(g.technology).per_hop_reliability;
                            if u >= loss {
                                self.flows[i].late = g.latency_ms > flow.max_latency_ms;
                                packet(true, Some(g.latency_ms), None, vec![flow.source.clone(), g.gateway])
                            } else {
                                packet(false, None, Some(DropCause::Channel), vec![flow.source.clone(), g.gateway])
                            }
                        }
                    }
                }
            };
            self.records.push(rec);
            return;
        }

        let Some(path) = self.flows[i].path.clone() else {
            let in_gap = [&flow.source, &flow.sink]
                .iter()
                .filter_map(|n| self.dev_index.get(*n))
                .any(|&d| self.devices[d].gap_since.is_some());
            let cause = if in_gap {
                DropCause::Handover
            } else if self.flows[i].last_reason.as_deref() == Some("sovereignty_violation") {
                DropCause::Sovereignty
            } else {
                DropCause::NoRoute
            };
            let rec = packet(false, None, Some(cause), vec![]);
            self.records.push(rec);
            return;
        };

        let ts = t.as_secs();
        if !self.flows[i].forced && self.restricted(&flow) {
            let off = path.nodes.iter().any(|n| !self.on_premise_now(n, ts));
            if off {
                let rec = packet(false, None, Some(DropCause::Sovereignty), vec![]);
                self.records.push(rec);
                self.release(i, "left_premise");
                self.flows[i].last_reason = Some("sovereignty_violation".into());
                self.graph_dirty = true;
                return;
            }
        }
        let enforce = self.ledger.enforce;
        let offered = &self.offered;
        let slice = flow.slice.clone();
        let off = |link: &str| -> f64 {
            let Some(m) = offered.get(link) else { return 0.0 };
            if enforce {
                m.get(&slice).copied().unwrap_or(0.0)
            } else {
                m.values().sum()
            }
        };
        let m = path_metrics(&path, &flow.slice, &self.graph, &self.ledger, &self.profiles, flow.demand_mbps * scale, &off);
        if let (Some(d), Some(h)) = (src, path.hops.first()) {
            self.spend_energy(d, h.technology, bytes);
        }
        let rec = if u >= m.loss_prob {
            self.flows[i].late = m.latency_ms > flow.max_latency_ms;
            packet(true, Some(m.latency_ms), None, path.nodes.clone())
        } else {
            packet(false, None, Some(DropCause::Channel), path.nodes.clone())
        };
        self.records.push(rec);
    }

    fn on_premise_now(&self, node: &str, t: f64) -> bool {
        if self.dev_index.contains_key(node) {
            self.topo.on_premise_at(node, t)
        } else {
            self.topo.on_premise(node)
        }
    }

    fn spend_energy(&mut self, d: usize, tech: Technology, bytes: u64) {
        let mj = energy_cost(self.profiles.profile(tech), bytes) / 1000.0;
        let dev = &mut self.devices[d];
        dev.energy_mj += mj;
        if let Some(b) = dev.battery_mj.as_mut() {
            *b = (*b - mj).max(0.0);
        }
    }

    // ---- event script ----

    fn on_script(&mut self, k: usize) {
        let t = self.now();
        let ev = self.sc.events[k].clone();
        match ev {
            ScriptEvent::NodeFailure { node, .. } => {
                self.failed_nodes.insert(node.clone());
                self.emit(TraceRecord::Failure { t, element: node.clone(), recovered: false });
                self.graph_dirty = true;
                if let Some(h) = self.pool.hosts.get_mut(&node) {
                    h.alive = false;
                    let hosted: Vec<String> = self
                        .apps
                        .iter()
                        .filter(|(_, a)| a.host.as_ref() == Some(&node) && a.state == AppState::Running)
                        .map(|(id, _)| id.clone())
                        .collect();
                    for app in hosted {
                        self.relocate(&app, RelocationTrigger::HostFailure);
                    }
                }
                for i in 0..self.devices.len() {
                    if self.devices[i].links_up.contains(&node) || self.devices[i].attach.primary.as_ref() == Some(&node) {
                        self.radio_link_failure(i);
                    }
                }
            }
            ScriptEvent::NodeRecovery { node, .. } => {
                self.failed_nodes.remove(&node);
                if let Some(h) = self.pool.hosts.get_mut(&node) {
                    h.alive = true;
                }
                self.emit(TraceRecord::Failure { t, element: node, recovered: true });
                self.graph_dirty = true;
            }
            ScriptEvent::LinkFailure { a, b, .. } => {
                let key = link_key(&a, &b);
                self.failed_links.insert(key.clone());
                self.emit(TraceRecord::Failure { t, element: key, recovered: false });
                self.graph_dirty = true;
            }
            ScriptEvent::LinkRecovery { a, b, .. } => {
                let key = link_key(&a, &b);
                self.failed_links.remove(&key);
                self.emit(TraceRecord::Failure { t, element: key, recovered: true });
                self.graph_dirty = true;
            }
            ScriptEvent::FakeCell { id, position, technologies, .. } => {
                let token = hex::encode(self.rng_attack.random::<[u8; 32]>());
                let cell = FlexiCell {
                    id,
                    position,
                    local_core: true,
                    technologies,
                    capacity_mbps: 100.0,
                    island_mode: false,
                    public_handover: false,
                };
                self.fakes.push((cell, token));
            }
            ScriptEvent::LoadSurge { flow, factor, .. } => {
                if let Some(fr) = self.flows.iter_mut().find(|f| f.flow.id == flow) {
                    fr.surge = factor;
                    self.offered_dirty = true;
                }
            }
            ScriptEvent::ForceRoute { flow, via, .. } => self.force_route(&flow, &via),
            ScriptEvent::TamperAudit { index, .. } => {
                if let Some(&pos) = self.audit_at.get(index as usize) {
                    if let TraceRecord::Audit(r) = &mut self.records[pos] {
                        r.outcome.push_str("+altered");
                    }
                }
            }
            ScriptEvent::ReplayAttack { device, .. } => {
                let Some(&i) = self.dev_index.get(&device) else { return };
                let sub = self.devices[i].subscriber.clone();
                let outcome = match self.devices[i].last_exchange.clone() {
                    Some((ch, proof)) => match self.auth.verify(&device, &sub, &ch, &proof, t) {
                        Ok(_) => "session".to_string(),
                        Err(e) => e.code().to_string(),
                    },
                    None => "no_exchange_observed".to_string(),
                };
                self.emit(TraceRecord::Auth { t, device, subscriber: sub, outcome, attacker: true });
            }
            ScriptEvent::BadAuth { device, count, .. } => {
                let Some(&i) = self.dev_index.get(&device) else { return };
                let sub = self.devices[i].subscriber.clone();
                let kind = self.sc.credential(&sub).map(|c| c.kind).unwrap_or(CredentialKind::PhysicalSim);
                for _ in 0..count {
                    let forged = Credential {
                        kind,
                        subscriber: sub.clone(),
                        secret: hex::encode(self.rng_attack.random::<[u8; 16]>()),
                        sequence_counter: 0,
                    };
                    let ch = self.auth.challenge(&sub, &mut self.rng_auth);
                    let outcome = match authenticate(&device, &forged, &mut self.auth, &ch, t) {
                        Ok(_) => "session".to_string(),
                        Err(e) => {
                            self.devices[i].auth_failures += 1;
                            e.code().to_string()
                        }
                    };
                    self.emit(TraceRecord::Auth { t, device: device.clone(), subscriber: sub.clone(), outcome, attacker: false });
                }
            }
            ScriptEvent::ApplyBundle { device, bundle, .. } => {
                let Some(&i) = self.dev_index.get(&device) else { return };
                let operational = self.devices[i].stage == OnboardingStage::Operational;
                let mut cfg = self.devices[i].config.clone();
                let res = apply_configuration(&mut cfg, ConfigChange::Software { bundle }, operational, &self.bundles, &|_| Ok(()));
                self.finish_config(i, cfg, res, "software");
            }
            ScriptEvent::MoveAsset { device, position, .. } => {
                let Some(&i) = self.dev_index.get(&device) else { return };
                let operational = self.devices[i].stage == OnboardingStage::Operational;
                let mut cfg = self.devices[i].config.clone();
                let hardware = cfg.constellation.hardware.clone();
                let carries_sensitive = self.flows.iter().any(|f| {
                    self.restricted(&f.flow) && (f.flow.source == device || f.flow.sink == device)
                });
                let premise = self.topo.premise.clone();
                let check = move |c: &AssetConfiguration| {
                    if carries_sensitive && !premise.contains(&c.constellation.position) {
                        Err("sensitive flows would leave the premise".to_string())
                    } else {
                        Ok(())
                    }
                };
                let res = apply_configuration(
                    &mut cfg,
                    ConfigChange::Constellation(Constellation { hardware, position }),
                    operational,
                    &self.bundles,
                    &check,
                );
                if res.is_ok() {
                    let dev = &mut self.topo.devices[i];
                    dev.position = position;
                    dev.path.clear();
                    self.graph_dirty = true;
                }
                self.finish_config(i, cfg, res, "constellation");
            }
            ScriptEvent::TerminateApp { app, .. } => {
                let Some(a) = self.apps.get_mut(&app) else { return };
                if a.state != AppState::Running && a.state != AppState::Failed {
                    return;
                }
                let from = a.state;
                if let Some(h) = a.host.take() {
                    self.pool.release(&h, a.spec.cpu_units, a.spec.memory_units);
                }
                a.state = AppState::Terminated;
                self.emit(TraceRecord::App { t, app, from: Some(from), to: AppState::Terminated, host: None, reason: "terminated".into() });
                self.routes_dirty = true;
            }
        }
    }

    fn finish_config(
        &mut self,
        i: usize,
        cfg: AssetConfiguration,
        res: Result<u64, crate::management::ConfigError>,
        layer: &str,
    ) {
        let t = self.now();
        let id = self.devices[i].id.clone();
        let (outcome, revision) = match res {
            Ok(r) => {
                self.devices[i].config = cfg;
                ("committed".to_string(), r)
            }
            Err(e) => (e.code().to_string(), self.devices[i].config.revision),
        };
        self.emit(TraceRecord::Config { t, asset: id, layer: layer.into(), outcome, revision });
    }

    fn force_route(&mut self, flow: &str, via: &[NodeId]) {
        let t = self.now();
        let Some(i) = self.flows.iter().position(|f| f.flow.id == flow) else { return };
        let mut hops = Vec::new();
        let mut latency = 0.0;
        let mut reliability = 1.0;
        let mut ok = via.len() >= 2;
        for w in via.windows(2) {
            match self.graph.edge(&link_key(&w[0], &w[1])) {
                Some(e) => {
                    hops.push(Hop { link: e.key.clone(), technology: e.technology });
                    latency += e.latency_ms;
                    reliability *= e.reliability;
                }
                None => ok = false,
            }
        }
        let slice = self.flows[i].flow.slice.clone();
        if !ok {
            self.emit(TraceRecord::FlowAdmission {
                t,
                flow: flow.into(),
                slice,
                admitted: false,
                nodes: vec![],
                reason: "forced_route_invalid".into(),
            });
            return;
        }
        self.ledger.release_flow(flow);
        let fr = &mut self.flows[i];
        fr.path = Some(Path { nodes: via.to_vec(), hops, latency_ms: latency, reliability, bottleneck_mbps: f64::INFINITY });
        fr.forced = true;
        self.offered_dirty = true;
        self.emit(TraceRecord::FlowAdmission { t, flow: flow.into(), slice, admitted: true, nodes: via.to_vec(), reason: "forced".into() });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
name = "small"
seed = 7
duration_s = 3.0
premise = { vertices = [{ x = -10.0, y = -10.0 }, { x = 60.0, y = -10.0 }, { x = 60.0, y = 40.0 }, { x = -10.0, y = 40.0 }] }

[[cells]]
id = "cell-a"
position = { x = 0.0, y = 0.0 }
technologies = ["nr_urllc", "nr_embb"]
capacity_mbps = 200.0

[[infra]]
id = "edge-1"
kind = "edge_server"
position = { x = 1.0, y = 0.0 }
technologies = ["eth"]
cpu_units = 4.0
memory_units = 4.0

[[devices]]
id = "sensor-1"
kind = "sensor"
position = { x = 10.0, y = 5.0 }
technologies = ["nr_urllc"]
credential = "sub-1"

[[devices]]
id = "rogue"
kind = "sensor"
position = { x = 12.0, y = 5.0 }
technologies = ["nr_urllc"]
credential = "sub-x"

[[wired]]
a = "cell-a"
b = "edge-1"
technology = "eth"

[[slices]]
id = "control"
members = ["sensor-1", "rogue"]
include_infrastructure = true
share = 0.5

[[flows]]
id = "f1"
source = "sensor-1"
sink = "edge-1"
demand_mbps = 1.0
max_latency_ms = 20.0
min_reliability = 0.99
slice = "control"
sensitive = true
traffic_class = "urllc"

[[flows]]
id = "f2"
source = "rogue"
sink = "edge-1"
demand_mbps = 1.0
max_latency_ms = 20.0
min_reliability = 0.99
slice = "control"
traffic_class = "urllc"

[[credentials]]
subscriber = "sub-1"
kind = "physical_sim"
key = "000102030405060708090a0b0c0d0e0f"

[[access_rules]]
subject = "*"
action = "attach"
object = "network"
"#;

    #[test]
    fn small_run_onboards_routes_and_chains() {
        let sc = Scenario::parse(SMALL).unwrap();
        let out = run(&sc).unwrap();
        let recs = &out.trace.records;
        assert!(recs.iter().any(|r| matches!(r, TraceRecord::Onboarding { device, to: OnboardingStage::Operational, .. } if device == "sensor-1")));
        assert!(recs.iter().any(|r| matches!(r, TraceRecord::Onboarding { device, to: OnboardingStage::Quarantined, .. } if device == "rogue")));
        let delivered = |flow: &str| {
            recs.iter().filter(|r| matches!(r, TraceRecord::Packet { flow: f, delivered: true, .. } if f == flow)).count()
        };
        assert!(delivered("f1") > 20);
        assert_eq!(delivered("f2"), 0);
        assert_eq!(out.audit.verify(), Ok(()));
        // every state change is followed by its audit record
        for w in recs.windows(2) {
            if w[0].is_state_change() {
                assert!(matches!(w[1], TraceRecord::Audit(_)), "{:?}", w[0]);
            }
        }
    }

    #[test]
    fn same_seed_same_trace() {
        let sc = Scenario::parse(SMALL).unwrap();
        assert_eq!(run(&sc).unwrap().trace.to_ndjson(), run(&sc).unwrap().trace.to_ndjson());
    }
}
