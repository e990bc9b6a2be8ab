//! Requirement checks over a finished trace. Every check either cites trace lines
//! (1-based, header is line 1) or states why it passed vacuously.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::federation::{transition_allowed, HandoverMode};
use crate::geometry::Point2;
use crate::kernel::SimTime;
use crate::management::{app_step_allowed, onboarding_step_allowed, AppState, OnboardingStage};
use crate::scenario::{Scenario, ScenarioError, ScriptEvent};
use crate::security::{verify_chain, verify_export, AccessAction, AuditLog, CredentialKind};
use crate::sim;
use crate::topology::FactoryTopology;
use crate::trace::{DropCause, TraceLog, TraceRecord};

/// Tolerance on the smallest eigenvalue of `input - fused`.
pub const FUSION_EIG_TOL: f64 = -1e-9;
/// Longest acceptable link interruption of a break-before-make handover.
pub const BBM_OUTAGE_LIMIT_MS: f64 = 50.0;
const MAX_EVIDENCE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    /// Requirement family letter, `A` to `F`.
    pub requirement: char,
    pub name: String,
    pub passed: bool,
    /// Trace lines backing the verdict; for failures the first is the earliest offender.
    pub evidence: Vec<usize>,
    /// Set when the check passed without anything to inspect.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vacuous: Option<String>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequirementReport {
    pub scenario: String,
    pub seed: u64,
    pub checks: Vec<Check>,
}

impl RequirementReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn requirement_passed(&self, req: char) -> bool {
        self.checks.iter().filter(|c| c.requirement == req).all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "requirements for {} (seed {})", self.scenario, self.seed);
        for c in &self.checks {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            let ev = match &c.vacuous {
                Some(why) => format!("vacuous: {why}"),
                None => format!("lines {:?}", c.evidence),
            };
            let _ = writeln!(s, "Req-{} {verdict} {:<32} {ev}  {}", c.requirement, c.name, c.detail);
        }
        let _ = writeln!(s, "{}", if self.passed() { "all checks passed" } else { "some checks failed" });
        s
    }
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("trace has no header")]
    MissingHeader,
    #[error("scenario embedded in trace header: {0}")]
    Scenario(#[from] ScenarioError),
}

struct CheckBuilder {
    req: char,
    name: &'static str,
    seen: Vec<usize>,
    bad: Vec<usize>,
    detail: Vec<String>,
}

impl CheckBuilder {
    fn new(req: char, name: &'static str) -> Self {
        Self { req, name, seen: vec![], bad: vec![], detail: vec![] }
    }

    fn ok(&mut self, line: usize) {
        if self.seen.len() < MAX_EVIDENCE {
            self.seen.push(line);
        }
    }

    fn fail(&mut self, line: usize, why: impl Into<String>) {
        if self.bad.len() < MAX_EVIDENCE {
            self.bad.push(line);
            self.detail.push(why.into());
        }
    }

    fn finish(self, vacuous_reason: &str) -> Check {
        let (passed, evidence, vacuous, detail) = if !self.bad.is_empty() {
            (false, self.bad, None, self.detail.join("; "))
        } else if self.seen.is_empty() {
            (true, vec![], Some(vacuous_reason.to_string()), String::new())
        } else {
            (true, self.seen, None, self.detail.join("; "))
        };
        Check { requirement: self.req, name: self.name.into(), passed, evidence, vacuous, detail }
    }
}

struct Ctx<'a> {
    sc: &'a Scenario,
    topo: FactoryTopology,
    trace: &'a TraceLog,
    /// Committed asset moves per device, in time order.
    moves: BTreeMap<String, Vec<(SimTime, Point2)>>,
}

impl Ctx<'_> {
    fn lines(&self) -> impl Iterator<Item = (usize, &TraceRecord)> {
        self.trace.lines()
    }

    fn on_premise(&self, node: &str, t: SimTime) -> bool {
        if let Some(d) = self.topo.device(node) {
            let pos = self
                .moves
                .get(node)
                .and_then(|m| m.iter().rev().find(|(at, _)| *at <= t))
                .map(|(_, p)| *p)
                .unwrap_or_else(|| d.position_at(t.as_secs()));
            return self.topo.premise.contains(&pos);
        }
        self.topo.lookup(node).is_some() && self.topo.on_premise(node)
    }

    fn restricted(&self, flow: &str) -> bool {
        self.sc.flows.iter().find(|f| f.id == flow).is_some_and(|f| {
            f.sensitive && !self.sc.slices.iter().any(|s| s.id == f.slice && s.allow_off_premise)
        })
    }
}

/// Verify a trace against the scenario embedded in its header.
pub fn verify_trace(trace: &TraceLog) -> Result<RequirementReport, VerifyError> {
    let Some(TraceRecord::Header { scenario, .. }) = trace.records.first() else {
        return Err(VerifyError::MissingHeader);
    };
    let sc = Scenario::parse(scenario)?;
    verify_requirements(trace, &sc)
}

pub fn verify_requirements(trace: &TraceLog, sc: &Scenario) -> Result<RequirementReport, VerifyError> {
    let topo = sc.topology()?;
    let mut moves: BTreeMap<String, Vec<(SimTime, Point2)>> = BTreeMap::new();
    for r in &trace.records {
        if let TraceRecord::Config { t, asset, layer, outcome, .. } = r {
            if layer == "constellation" && outcome == "committed" {
                let pos = sc.events.iter().find_map(|e| match e {
                    ScriptEvent::MoveAsset { at_s, device, position } if device == asset && SimTime::from_secs(*at_s) == *t => {
                        Some(*position)
                    }
                    _ => None,
                });
                if let Some(p) = pos {
                    moves.entry(asset.clone()).or_default().push((*t, p));
                }
            }
        }
    }
    let ctx = Ctx { sc, topo, trace, moves };
    let rerun = sim::run(sc)?;
    let mut checks = vec![
        mbb_no_interruption(&ctx),
        bbm_outage_bound(&ctx),
        fusion_dominance(&ctx),
        operational_devices_attach(&ctx),
        sensitive_packets_on_premise(&ctx),
        sensitive_routes_on_premise(&ctx),
        valid_devices_operational(&ctx),
        invalid_devices_quarantined(&ctx),
        lifecycle_transitions_legal(&ctx),
        relocation_succeeds(&ctx),
        relocation_restores_route(&ctx),
        failed_hosts_vacated(&ctx),
        audit_chain_intact(&ctx),
        state_changes_audited(&ctx),
        no_unauthenticated_delivery(&ctx),
        fake_cells_rejected(&ctx),
        replays_rejected(&ctx),
        trace_reproducible(&ctx, &rerun.trace),
    ];
    checks.extend(slice_isolation(&ctx)?);
    Ok(RequirementReport { scenario: sc.name.clone(), seed: sc.seed, checks })
}

// ---- A: convergence and non-disruptive handover ----

fn mbb_no_interruption(c: &Ctx) -> Check {
    let mut b = CheckBuilder::new('A', "mbb_handover_no_interruption");
    let mbb = c.sc.settings.handover.mode == HandoverMode::MakeBeforeBreak;
    for (line, r) in c.lines() {
        match r {
            TraceRecord::Handover { mode: HandoverMode::MakeBeforeBreak, link_down_ms, device, .. } => {
                if *link_down_ms == 0.0 {
                    b.ok(line);
                } else {
                    b.fail(line, format!("{device} link down {link_down_ms} ms"));
                }
            }
            TraceRecord::Packet { flow, cause: Some(DropCause::Handover), .. } if mbb => {
                b.fail(line, format!("{flow} lost a batch to handover"));
            }
            _ => {}
        }
    }
    b.finish("no make-before-break handover occurred")
}

fn bbm_outage_bound(c: &Ctx) -> Check {
    let mut b = CheckBuilder::new('A', "bbm_outage_within_bound");
    for (line, r) in c.lines() {
        if let TraceRecord::Handover { mode: HandoverMode::BreakBeforeMake, link_down_ms, device, .. } = r {
            if *link_down_ms <= BBM_OUTAGE_LIMIT_MS {
                b.ok(line);
            } else {
                b.fail(line, format!("{device} link down {link_down_ms} ms > {BBM_OUTAGE_LIMIT_MS} ms"));
            }
        }
    }
    b.finish("no break-before-make handover occurred")
}

fn min_eig_sym(m: [[f64; 2]; 2]) -> f64 {
    let (a, d) = (m[0][0], m[1][1]);
    let off = 0.5 * (m[0][1] + m[1][0]);
    let mean = 0.5 * (a + d);
    let r = (0.25 * (a - d) * (a - d) + off * off).sqrt();
    mean - r
}

fn fusion_dominance(c: &Ctx) -> Check {
    let mut b = CheckBuilder::new('A', "fusion_dominates_inputs");
    for (line, r) in c.lines() {
        if let TraceRecord::Position { fused, inputs, device, .. } = r {
            if inputs.is_empty() {
                continue;
            }
            let worst = inputs
                .iter()
                .map(|p| min_eig_sym([[p[0][0] - fused[0][0], p[0][1] - fused[0][1]], [p[1][0] - fused[1][0], p[1][1] - fused[1][1]]]))
                .fold(f64::INFINITY, f64::min);
            if worst >= FUSION_EIG_TOL {
                b.ok(line);
            } else {
                b.fail(line, format!("{device}: input minus fused has eigenvalue {worst:e}"));
            }
        }
    }
    b.finish("no position fused from more than one technology")
}

fn operational_devices_attach(c: &Ctx) -> Check {
    let mut b = CheckBuilder::new('A', "operational_devices_attach");
    let mut pending: BTreeMap<&str, usize> = BTreeMap::new();
    for (line, r) in c.lines() {
        match r {
            TraceRecord::Onboarding { device, to: OnboardingStage::Operational, .. } => {
                pending.insert(device.as_str(), line);
            }
            TraceRecord::Onboarding { device, to: OnboardingStage::Quarantined, .. } => {
                pending.remove(device.as_str());
            }
            TraceRecord::Attach { device, cell: Some(_), .. } => {
                if pending.remove(device.as_str()).is_some() {
                    b.ok(line);
                }
            }
            _ => {}
        }
    }
    for (device, line) in pending {
        b.fail(line, format!("{device} operational but never attached"));
    }
    b.finish("no device became operational")
}

// ---- B: data sovereignty ----

fn sensitive_packets_on_premise(c: &Ctx) -> Check {
    let mut b = CheckBuilder::new('B', "sensitive_packets_on_premise");
    for (line, r) in c.lines() {
        if let TraceRecord::Packet { t, flow, delivered: true, nodes, .. } = r {
            if !c.restricted(flow) {
                continue;
            }
            match nodes.iter().find(|n| !c.on_premise(n, *t)) {
                Some(n) => b.fail(line, format!("{flow} traversed off-premise {n}")),
                None => b.ok(line),
            }
        }
    }
    b.finish("no sensitive batch was delivered")
}

fn sensitive_routes_on_premise(c: &Ctx) -> Check {
    let mut b = CheckBuilder::new('B', "sensitive_routes_on_premise");
    for (line, r) in c.lines() {
        if let TraceRecord::FlowAdmission { t, flow, admitted: true, nodes, .. } = r {
            if !c.restricted(flow) {
                continue;
            }
            match nodes.iter().find(|n| !c.on_premise(n, *t)) {
                Some(n) => b.fail(line, format!("{flow} admitted over off-premise {n}")),
                None => b.ok(line),
            }
        }
    }
    b.finish("no sensitive flow was admitted")
}

// ---- C: zero-touch onboarding ----

/// Independent reading of the scenario: would this device pass authentication and
/// attach authorization?
fn expected_valid(sc: &Scenario, device: &str) -> bool {
    let Some(d) = sc.devices.iter().find(|d| d.id == device) else { return false };
    let Some(entry) = sc.credentials.iter().find(|e| e.subscriber == d.credential) else { return false };
    let held = entry.device_key.as_deref().unwrap_or(&entry.key);
    let credential_ok = match entry.kind {
        CredentialKind::PhysicalSim | CredentialKind::VirtualSim => held.eq_ignore_ascii_case(&entry.key),
        CredentialKind::Certificate | CredentialKind::EapExternal => sc.trust_store.iter().any(|f| f == held),
    };
    let kind = d.kind.as_str();
    let rules: Vec<_> = sc
        .access_rules
        .iter()
        .filter(|r| r.action == AccessAction::Attach && (r.subject == "*" || r.subject == kind))
        .filter(|r| r.object == "*" || r.object == "network")
        .collect();
    credential_ok && rules.iter().any(|r| r.allow) && rules.iter().all(|r| r.allow)
}

fn onboarded_devices(c: &Ctx) -> BTreeMap<String, Vec<(usize, OnboardingStage, String)>> {
    let mut out: BTreeMap<String, Vec<(usize, OnboardingStage, String)>> = BTreeMap::new();
    for (line, r) in c.lines() {
        if let TraceRecord::Onboarding { device, to, reason, .. } = r {
            out.entry(device.clone()).or_default().push((line, *to, reason.clone()));
        }
    }
    out
}

fn valid_devices_operational(c: &Ctx) -> Check {
    let mut b = CheckBuilder::new('C', "valid_devices_operational");
    let seen = onboarded_devices(c);
    let watchdog = SimTime::from_secs(c.sc.settings.watchdog_period_s);
    let end = SimTime::from_secs(c.sc.duration_s);
    for (line, r) in c.lines() {
        let TraceRecord::Management { t, action, target, .. } = r else { continue };
        if action != "discover" || !expected_valid(c.sc, target) {
            continue;
        }
        match seen.get(target) {
            Some(steps) => {
                if let Some((l, _, _)) = steps.iter().find(|s| s.1 == OnboardingStage::Operational) {
                    b.ok(*l);
                } else if let Some((l, _, _)) = steps.iter().find(|s| s.2 == "auth_failures") {
                    // locked out by repeated forged attempts before it could finish
                    b.ok(*l);
                } else {
                    let (l, stage, reason) = steps.last().expect("non-empty");
                    b.fail(*l, format!("valid {target} ended {} ({reason})", stage.as_str()));
                }
            }
            None if *t + watchdog + watchdog < end => b.fail(line, format!("{target} discovered but never onboarded")),
            None => {}
        }
    }
    b.finish("no valid device was discovered")
}

fn invalid_devices_quarantined(c: &Ctx) -> Check {
    let mut b = CheckBuilder::new('C', "invalid_devices_quarantined");
    for (device, steps) in onboarded_devices(c) {
        if expected_valid(c.sc, &device) {
            continue;
        }
        if let Some((l, _, _)) = steps.iter().find(|s| s.1 == OnboardingStage::Operational) {
            b.fail(*l, format!("invalid {device} became operational"));
        } else {
            let (l, stage, _) = steps.last().expect("non-empty");
            if *stage == OnboardingStage::Quarantined {
                b.ok(*l);
            } else {
                b.fail(*l, format!("invalid {device} left in {}", stage.as_str()));
            }
        }
    }
    b.finish("no invalid device attempted onboarding")
}

fn lifecycle_transitions_legal(c: &Ctx) -> Check {
    let mut b = CheckBuilder::new('C', "lifecycle_transitions_legal");
    let mut onboarding: BTreeMap<&str, OnboardingStage> = BTreeMap::new();
    let mut apps: BTreeMap<&str, AppState> = BTreeMap::new();
    let mut handover: BTreeMap<&str, crate::federation::HandoverState> = BTreeMap::new();
    for (line, r) in c.lines() {
        match r {
            TraceRecord::Onboarding { device, from, to, .. } => {
                let prev = onboarding.get(device.as_str()).copied().unwrap_or(OnboardingStage::Discovered);
                if prev != *from || !onboarding_step_allowed(*from, *to) {
                    b.fail(line, format!("{device} onboarding {}->{}", from.as_str(), to.as_str()));
                } else {
                    b.ok(line);
                }
                onboarding.insert(device, *to);
            }
            TraceRecord::App { app, from, to, .. } => {
                let legal = match (apps.get(app.as_str()), from) {
                    (None, None) => *to == AppState::Instantiated,
                    (Some(prev), Some(f)) => prev == f && app_step_allowed(*f, *to),
                    _ => false,
                };
                if legal {
                    b.ok(line);
                } else {
                    b.fail(line, format!("{app} lifecycle step to {to:?} is illegal"));
                }
                apps.insert(app, *to);
            }
            TraceRecord::HandoverState { device, from, to, .. } => {
                let prev = handover.get(device.as_str()).copied().unwrap_or(crate::federation::HandoverState::Idle);
                if prev != *from || !transition_allowed(*from, *to) {
                    b.fail(line, format!("{device} handover {}->{}", from.as_str(), to.as_str()));
                } else {
                    b.ok(line);
                }
                handover.insert(device, *to);
            }
            // a fresh attachment restarts the handover machine
            TraceRecord::Attach { device, cause, .. } if cause != "handover" => {
                handover.insert(device, crate::federation::HandoverState::Idle);
            }
            _ => {}
        }
    }
    b.finish("no lifecycle transitions recorded")
}

// ---- D: edge application continuity ----

fn relocation_succeeds(c: &Ctx) -> Check {
    let mut b = CheckBuilder::new('D', "relocation_finds_host");
    for (line, r) in c.lines() {
        if let TraceRecord::Relocation { app, target, trigger, .. } = r {
            match target {
                Some(_) => b.ok(line),
                None => b.fail(line, format!("{app} could not be relocated after {}", trigger.as_str())),
            }
        }
    }
    b.finish("no relocation was needed")
}

fn relocation_restores_route(c: &Ctx) -> Check {
    let mut b = CheckBuilder::new('D', "relocation_restores_route");
    let recs: Vec<(usize, &TraceRecord)> = c.lines().collect();
    let mut routed: BTreeSet<&str> = BTreeSet::new();
    for (k, (line, r)) in recs.iter().enumerate() {
        match r {
            TraceRecord::FlowAdmission { flow, admitted: true, .. } => {
                routed.insert(flow.as_str());
            }
            TraceRecord::FlowRelease { flow, .. } => {
                routed.remove(flow.as_str());
            }
            TraceRecord::Relocation { t, app, target: Some(target), .. } => {
                let Some(flow) = c.sc.apps.iter().find(|a| &a.id == app).and_then(|a| a.bound_flow.as_deref()) else {
                    continue;
                };
                if !routed.contains(flow) {
                    continue;
                }
                let restored = recs[k + 1..].iter().take_while(|(_, x)| x.time() == Some(*t)).find_map(|(l, x)| match x {
                    TraceRecord::FlowAdmission { flow: f, admitted: true, nodes, .. } if f == flow => {
                        Some((*l, nodes.last() == Some(target)))
                    }
                    _ => None,
                });
                match restored {
                    Some((l, true)) => b.ok(l),
                    Some((l, false)) => b.fail(l, format!("{flow} rerouted but not to {target}")),
                    None => b.fail(*line, format!("{flow} not rerouted to relocated {app}")),
                }
            }
            _ => {}
        }
    }
    b.finish("no relocation of an app serving a routed flow")
}

fn failed_hosts_vacated(c: &Ctx) -> Check {
    let mut b = CheckBuilder::new('D', "failed_hosts_vacated");
    let recs: Vec<(usize, &TraceRecord)> = c.lines().collect();
    let mut running: BTreeMap<&str, &str> = BTreeMap::new();
    for (k, (line, r)) in recs.iter().enumerate() {
        match r {
            TraceRecord::App { app, to: AppState::Running, host: Some(h), .. } => {
                running.insert(app.as_str(), h.as_str());
            }
            TraceRecord::App { app, .. } => {
                running.remove(app.as_str());
            }
            TraceRecord::Failure { t, element, recovered: false } => {
                for (app, _) in running.iter().filter(|(_, h)| **h == element.as_str()) {
                    let moved = recs[k + 1..]
                        .iter()
                        .take_while(|(_, x)| x.time() == Some(*t))
                        .find(|(_, x)| matches!(x, TraceRecord::App { app: a, .. } if a == app));
                    match moved {
                        Some((l, _)) => b.ok(*l),
                        None => b.fail(*line, format!("{app} left on failed {element}")),
                    }
                }
            }
            _ => {}
        }
    }
    b.finish("no host carrying an app failed")
}

// ---- E: security and accountability ----

fn audit_lines(c: &Ctx) -> Vec<usize> {
    c.lines().filter(|(_, r)| matches!(r, TraceRecord::Audit(_))).map(|(l, _)| l).collect()
}

fn audit_chain_intact(c: &Ctx) -> Check {
    let mut b = CheckBuilder::new('E', "audit_chain_intact");
    let lines = audit_lines(c);
    match verify_chain(&c.trace.audit_records()) {
        Ok(()) => {
            if let Some(l) = lines.last() {
                b.ok(*l);
            }
        }
        Err(i) => b.fail(lines[i], format!("first_broken_index {i}")),
    }
    b.finish("no audit records")
}

fn state_changes_audited(c: &Ctx) -> Check {
    let mut b = CheckBuilder::new('E', "state_changes_audited");
    let recs = &c.trace.records;
    for (k, r) in recs.iter().enumerate() {
        let Some((actor, action, object, outcome)) = r.audit_fields() else { continue };
        let line = k + 1;
        match recs.get(k + 1) {
            Some(TraceRecord::Audit(a))
                if a.actor == actor && a.action == action && a.object == object && a.outcome == outcome =>
            {
                b.ok(line + 1)
            }
            Some(TraceRecord::Audit(_)) => b.fail(line + 1, format!("audit record does not match line {line}")),
            _ => b.fail(line, "state change without audit record"),
        }
    }
    b.finish("no state changes")
}

fn no_unauthenticated_delivery(c: &Ctx) -> Check {
    let mut b = CheckBuilder::new('E', "no_unauthenticated_delivery");
    let mut stage: BTreeMap<&str, OnboardingStage> = BTreeMap::new();
    for (line, r) in c.lines() {
        match r {
            TraceRecord::Onboarding { device, to, .. } => {
                stage.insert(device.as_str(), *to);
            }
            TraceRecord::Packet { flow, delivered, cause, .. } => {
                let Some(f) = c.sc.flows.iter().find(|f| &f.id == flow) else { continue };
                if c.topo.device(&f.source).is_none() {
                    continue;
                }
                let operational = stage.get(f.source.as_str()) == Some(&OnboardingStage::Operational);
                if *delivered && !operational {
                    b.fail(line, format!("{flow} delivered from unauthenticated {}", f.source));
                } else if !*delivered && *cause == Some(DropCause::Unauthenticated) {
                    b.ok(line);
                }
            }
            _ => {}
        }
    }
    if b.seen.is_empty() && b.bad.is_empty() {
        // nothing was ever held back; cite the first authenticated delivery instead
        if let Some((l, _)) = c.lines().find(|(_, r)| matches!(r, TraceRecord::Packet { delivered: true, .. })) {
            b.ok(l);
        }
    }
    b.finish("no device-sourced traffic")
}

fn fake_cells_rejected(c: &Ctx) -> Check {
    let mut b = CheckBuilder::new('E', "fake_cells_rejected");
    let real = |cell: &str| c.topo.lookup(cell).is_some();
    for (line, r) in c.lines() {
        match r {
            TraceRecord::FakeCellRejected { .. } => b.ok(line),
            TraceRecord::Attach { device, cell: Some(cell), .. } if !real(cell) => {
                b.fail(line, format!("{device} attached to unknown cell {cell}"))
            }
            TraceRecord::Handover { device, to, .. } if !real(to) => b.fail(line, format!("{device} handed over to unknown cell {to}")),
            _ => {}
        }
    }
    b.finish("no rogue cell was heard")
}

fn replays_rejected(c: &Ctx) -> Check {
    let mut b = CheckBuilder::new('E', "replays_rejected");
    for (line, r) in c.lines() {
        if let TraceRecord::Auth { device, outcome, attacker: true, .. } = r {
            if outcome == "session" {
                b.fail(line, format!("replayed exchange of {device} accepted"));
            } else {
                b.ok(line);
            }
        }
    }
    b.finish("no replay was attempted")
}

fn trace_reproducible(c: &Ctx, rerun: &TraceLog) -> Check {
    let mut b = CheckBuilder::new('E', "trace_reproducible");
    let n = c.trace.records.len().max(rerun.records.len());
    let first_diff = (0..n).find(|&k| c.trace.records.get(k) != rerun.records.get(k));
    match first_diff {
        Some(k) => b.fail(k + 1, "trace differs from a rerun of its own header"),
        None => b.ok(c.trace.records.len()),
    }
    b.finish("empty trace")
}

/// Check an exported audit log (text or binary) against the trace it came from.
pub fn audit_export_check(trace: &TraceLog, export: &[u8]) -> Check {
    let mut b = CheckBuilder::new('E', "audit_export_intact");
    let lines: Vec<usize> = trace.lines().filter(|(_, r)| matches!(r, TraceRecord::Audit(_))).map(|(l, _)| l).collect();
    let line_of = |i: usize| lines.get(i).or(lines.last()).copied().unwrap_or(1);
    match verify_export(export) {
        Ok(n) => {
            let ours = trace.audit_records();
            let exported = AuditLog::import_text(std::str::from_utf8(export).unwrap_or(""))
                .or_else(|_| AuditLog::import_binary(export))
                .map(|l| l.records().to_vec())
                .unwrap_or_default();
            match (0..ours.len().max(n)).find(|&i| ours.get(i) != exported.get(i)) {
                Some(i) => b.fail(line_of(i), format!("export diverges from trace at index {i}")),
                None => b.ok(line_of(n.saturating_sub(1))),
            }
        }
        Err(Some(i)) => b.fail(line_of(i), format!("first_broken_index {i}")),
        Err(None) => b.fail(1, "export header unreadable"),
    }
    b.finish("empty export")
}

// ---- F: slice isolation ----

fn slice_isolation(c: &Ctx) -> Result<Vec<Check>, VerifyError> {
    let flow_slice: BTreeMap<&str, &str> = c.sc.flows.iter().map(|f| (f.id.as_str(), f.slice.as_str())).collect();
    let active: BTreeSet<&str> = flow_slice.values().copied().collect();
    let mut b = CheckBuilder::new('F', "slice_isolation");
    if active.len() < 2 {
        return Ok(vec![b.finish("fewer than two slices carry flows")]);
    }
    let packets = |t: &TraceLog, skip: &str| -> Vec<(usize, TraceRecord)> {
        t.lines()
            .filter(|(_, r)| matches!(r, TraceRecord::Packet { slice, .. } if slice != skip))
            .map(|(l, r)| (l, r.clone()))
            .collect()
    };
    for slice in active {
        let mut doubled = c.sc.clone();
        *doubled.settings.offered_scale.entry(slice.to_string()).or_insert(1.0) *= 2.0;
        let other = sim::run(&doubled)?;
        let base = packets(c.trace, slice);
        let alt = packets(&other.trace, slice);
        let diff = (0..base.len().max(alt.len())).find(|&k| base.get(k).map(|x| &x.1) != alt.get(k).map(|x| &x.1));
        match diff {
            Some(k) => {
                let line = base.get(k).or(base.last()).map_or(1, |x| x.0);
                b.fail(line, format!("doubling {slice} changed this record of another slice"));
            }
            None => match base.first() {
                Some((l, _)) => b.ok(*l),
                None => {}
            },
        }
    }
    Ok(vec![b.finish("other slices carried no batches")])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_eigen_of_diagonal_and_rotated() {
        assert_eq!(min_eig_sym([[2.0, 0.0], [0.0, 5.0]]), 2.0);
        // [[2,1],[1,2]] has eigenvalues 1 and 3
        assert!((min_eig_sym([[2.0, 1.0], [1.0, 2.0]]) - 1.0).abs() < 1e-12);
        assert!(min_eig_sym([[1.0, 2.0], [2.0, 1.0]]) < 0.0);
    }

    #[test]
    fn vacuous_checks_say_why() {
        let c = CheckBuilder::new('A', "x").finish("nothing");
        assert!(c.passed);
        assert_eq!(c.vacuous.as_deref(), Some("nothing"));
        let mut b = CheckBuilder::new('A', "x");
        b.ok(3);
        b.fail(9, "bad");
        let c = b.finish("nothing");
        assert!(!c.passed);
        assert_eq!(c.evidence, vec![9]);
    }
}
