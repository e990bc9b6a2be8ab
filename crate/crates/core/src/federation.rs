//! Cell attachment, multi-connectivity, load balancing and the federation handover
//! state machine.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point2;
use crate::kernel::SimTime;
use crate::linkmodel::{margin_db, ProfileTable, Technology};
use crate::topology::{FactoryTopology, FlexiCell, NodeId, PublicNetwork};

/// Utilization above which a cell's score is penalized.
pub const LOAD_PENALTY_KNEE: f64 = 0.8;
pub const LOAD_PENALTY_DB: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FederationError {
    #[error("link to `{0}` is infeasible")]
    Infeasible(NodeId),
    #[error("target `{target}` rejected admission")]
    AdmissionRejected { target: NodeId, transitions: Vec<Transition> },
    #[error("public/private handover not supported by `{0}`")]
    NotSupported(NodeId),
    #[error("device `{0}` is not authorized on both networks")]
    NotAuthorized(NodeId),
    #[error("handover context busy in state {0:?}")]
    Busy(HandoverState),
}

/// A radio candidate as seen by one device at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct CellCandidate {
    pub cell: NodeId,
    pub technology: Technology,
    /// `None` when no shared technology closes the link budget.
    pub margin_db: Option<f64>,
    pub utilization: f64,
}

pub fn score_cell(c: &CellCandidate) -> Result<f64, FederationError> {
    match c.margin_db {
        Some(m) if m >= 0.0 => {
            Ok(m - LOAD_PENALTY_DB * (c.utilization - LOAD_PENALTY_KNEE).max(0.0))
        }
        _ => Err(FederationError::Infeasible(c.cell.clone())),
    }
}

/// Best data-carrying wireless technology shared by a device and a cell, with its margin.
pub fn best_technology(
    profiles: &ProfileTable,
    device_techs: &[Technology],
    cell_techs: &[Technology],
    distance_m: f64,
) -> Option<(Technology, f64)> {
    let mut best: Option<(Technology, f64)> = None;
    for t in device_techs.iter().filter(|t| cell_techs.contains(t)) {
        let Some(p) = profiles.get(*t) else { continue };
        if !p.is_wireless() || !p.carries_data {
            continue;
        }
        let m = margin_db(p, distance_m);
        if best.map_or(true, |(_, bm)| m > bm) {
            best = Some((*t, m));
        }
    }
    best
}

pub fn cell_candidate(
    profiles: &ProfileTable,
    device_techs: &[Technology],
    device_pos: Point2,
    cell: &FlexiCell,
    utilization: f64,
) -> Option<CellCandidate> {
    let d = device_pos.distance(&cell.position);
    best_technology(profiles, device_techs, &cell.technologies, d).map(|(technology, m)| {
        CellCandidate {
            cell: cell.id.clone(),
            technology,
            margin_db: if m >= 0.0 { Some(m) } else { None },
            utilization,
        }
    })
}

pub fn public_candidate(
    device_techs: &[Technology],
    public: &PublicNetwork,
    utilization: f64,
) -> Option<CellCandidate> {
    let technology = device_techs
        .iter()
        .copied()
        .filter(|t| public.technologies.contains(t))
        .min()?;
    Some(CellCandidate {
        cell: public.id.clone(),
        technology,
        margin_db: Some(public.margin_db),
        utilization,
    })
}

/// Every candidate for a device at a position: cells (minus `excluded`) plus the public
/// network when `public_allowed`.
pub fn candidates_for(
    topology: &FactoryTopology,
    profiles: &ProfileTable,
    device_techs: &[Technology],
    position: Point2,
    utilization: &dyn Fn(&str) -> f64,
    excluded: &BTreeSet<NodeId>,
    public_allowed: bool,
) -> Vec<CellCandidate> {
    let mut out: Vec<CellCandidate> = topology
        .cells
        .iter()
        .filter(|c| !excluded.contains(&c.id))
        .filter_map(|c| cell_candidate(profiles, device_techs, position, c, utilization(&c.id)))
        .collect();
    if public_allowed {
        if let Some(p) = &topology.public_network {
            if !excluded.contains(&p.id) {
                out.extend(public_candidate(device_techs, p, utilization(&p.id)));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttachmentState {
    pub device: NodeId,
    /// `None` is the legal Unattached state.
    pub primary: Option<NodeId>,
    pub technologies: BTreeMap<NodeId, Technology>,
    pub secondaries: Vec<NodeId>,
}

impl AttachmentState {
    pub fn unattached(device: &str) -> Self {
        Self {
            device: device.to_string(),
            primary: None,
            technologies: BTreeMap::new(),
            secondaries: vec![],
        }
    }

    pub fn is_attached(&self) -> bool {
        self.primary.is_some()
    }

    pub fn technology(&self, cell: &str) -> Option<Technology> {
        self.technologies.get(cell).copied()
    }
}

/// Sorted best-first: higher score, then lexicographically smaller id.
fn ranked(candidates: &[CellCandidate]) -> Vec<(f64, &CellCandidate)> {
    let mut scored: Vec<(f64, &CellCandidate)> = candidates
        .iter()
        .filter_map(|c| score_cell(c).ok().map(|s| (s, c)))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cell.cmp(&b.1.cell)));
    scored
}

pub fn select_attachment(
    device: &str,
    candidates: &[CellCandidate],
    max_secondaries: usize,
) -> AttachmentState {
    let ranked = ranked(candidates);
    let Some((_, first)) = ranked.first() else {
        return AttachmentState::unattached(device);
    };
    let mut technologies = BTreeMap::new();
    technologies.insert(first.cell.clone(), first.technology);
    let secondaries: Vec<NodeId> = ranked
        .iter()
        .skip(1)
        .take(max_secondaries)
        .map(|(_, c)| {
            technologies.insert(c.cell.clone(), c.technology);
            c.cell.clone()
        })
        .collect();
    AttachmentState {
        device: device.to_string(),
        primary: Some(first.cell.clone()),
        technologies,
        secondaries,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandoverState {
    Idle,
    Triggered,
    Preparing,
    Executing,
    Completed,
    Reverted,
}

impl HandoverState {
    pub const ALL: [HandoverState; 6] = [
        HandoverState::Idle,
        HandoverState::Triggered,
        HandoverState::Preparing,
        HandoverState::Executing,
        HandoverState::Completed,
        HandoverState::Reverted,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            HandoverState::Idle => "idle",
            HandoverState::Triggered => "triggered",
            HandoverState::Preparing => "preparing",
            HandoverState::Executing => "executing",
            HandoverState::Completed => "completed",
            HandoverState::Reverted => "reverted",
        }
    }
}

/// Every edge the handover machine may take.
pub const ALLOWED_TRANSITIONS: [(HandoverState, HandoverState); 9] = [
    (HandoverState::Idle, HandoverState::Triggered),
    (HandoverState::Triggered, HandoverState::Idle),
    (HandoverState::Triggered, HandoverState::Preparing),
    (HandoverState::Preparing, HandoverState::Executing),
    (HandoverState::Preparing, HandoverState::Reverted),
    (HandoverState::Executing, HandoverState::Completed),
    (HandoverState::Executing, HandoverState::Reverted),
    (HandoverState::Completed, HandoverState::Idle),
    (HandoverState::Reverted, HandoverState::Idle),
];

pub fn transition_allowed(from: HandoverState, to: HandoverState) -> bool {
    ALLOWED_TRANSITIONS.contains(&(from, to))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandoverMode {
    MakeBeforeBreak,
    BreakBeforeMake,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HandoverConfig {
    pub hysteresis_db: f64,
    pub time_to_trigger_ms: f64,
    pub mode: HandoverMode,
    /// Delay between admission request and the admission answer.
    pub preparation_ms: f64,
    /// Make-before-break: time both links are up. Break-before-make: the outage gap.
    pub execution_ms: f64,
    pub enabled: bool,
}

impl Default for HandoverConfig {
    fn default() -> Self {
        Self {
            hysteresis_db: 3.0,
            time_to_trigger_ms: 160.0,
            mode: HandoverMode::MakeBeforeBreak,
            preparation_ms: 10.0,
            execution_ms: 20.0,
            enabled: true,
        }
    }
}

impl HandoverConfig {
    /// Break-before-make gap used when the scenario does not set one.
    pub const DEFAULT_BREAK_GAP_MS: f64 = 50.0;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum HandoverAction {
    RequestAdmission { target: NodeId },
    AddLink { cell: NodeId },
    SwitchPrimary { from: Option<NodeId>, to: NodeId },
    ReleaseLink { cell: NodeId },
    /// Completion of the execution phase is due after the configured delay.
    ScheduleExecution,
}

pub type Transition = (HandoverState, HandoverState);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepOutcome {
    pub transitions: Vec<Transition>,
    pub actions: Vec<HandoverAction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandoverContext {
    pub device: NodeId,
    pub serving: Option<NodeId>,
    pub state: HandoverState,
    pub candidate: Option<NodeId>,
    pub trigger_start: Option<SimTime>,
    pub config: HandoverConfig,
}

impl HandoverContext {
    pub fn new(device: &str, serving: Option<NodeId>, config: HandoverConfig) -> Self {
        Self {
            device: device.to_string(),
            serving,
            state: HandoverState::Idle,
            candidate: None,
            trigger_start: None,
            config,
        }
    }

    pub fn is_busy(&self) -> bool {
        matches!(self.state, HandoverState::Preparing | HandoverState::Executing)
    }

    fn go(&mut self, to: HandoverState, out: &mut StepOutcome) {
        debug_assert!(transition_allowed(self.state, to), "{:?} -> {:?}", self.state, to);
        out.transitions.push((self.state, to));
        self.state = to;
    }

    /// Best non-serving candidate beating the serving score by the hysteresis.
    fn qualifying(&self, scores: &BTreeMap<NodeId, f64>) -> Option<(NodeId, f64)> {
        let serving = self
            .serving
            .as_ref()
            .and_then(|s| scores.get(s))
            .copied()
            .unwrap_or(f64::NEG_INFINITY);
        scores
            .iter()
            .filter(|(id, _)| Some(*id) != self.serving.as_ref())
            .filter(|(_, s)| **s > serving + self.config.hysteresis_db)
            // ties on score resolve to the smaller id
            .max_by(|a, b| a.1.total_cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(id, s)| (id.clone(), *s))
    }

    /// Measurement-driven step. Acts only in `Idle` and `Triggered`.
    pub fn on_scores(&mut self, scores: &BTreeMap<NodeId, f64>, now: SimTime) -> StepOutcome {
        let mut out = StepOutcome::default();
        if !self.config.enabled {
            return out;
        }
        let ttt = SimTime::from_millis_f64(self.config.time_to_trigger_ms);
        let best = self.qualifying(scores);
        if self.state == HandoverState::Triggered {
            match &best {
                Some((id, _)) if Some(id) == self.candidate.as_ref() => {
                    let since = self.trigger_start.unwrap_or(now);
                    if now.saturating_sub(since) >= ttt {
                        self.go(HandoverState::Preparing, &mut out);
                        out.actions.push(HandoverAction::RequestAdmission { target: id.clone() });
                    }
                    return out;
                }
                _ => {
                    self.go(HandoverState::Idle, &mut out);
                    self.candidate = None;
                    self.trigger_start = None;
                }
            }
        }
        if self.state == HandoverState::Idle {
            if let Some((id, _)) = best {
                self.go(HandoverState::Triggered, &mut out);
                self.candidate = Some(id.clone());
                self.trigger_start = Some(now);
                if ttt == SimTime::ZERO {
                    self.go(HandoverState::Preparing, &mut out);
                    out.actions.push(HandoverAction::RequestAdmission { target: id });
                }
            }
        }
        out
    }

    /// Start a handover to `target` without waiting for measurements (load balancing,
    /// explicit public/private moves). Only from `Idle`.
    pub fn force(&mut self, target: &str, now: SimTime) -> Result<StepOutcome, FederationError> {
        if self.state != HandoverState::Idle {
            return Err(FederationError::Busy(self.state));
        }
        let mut out = StepOutcome::default();
        self.go(HandoverState::Triggered, &mut out);
        self.candidate = Some(target.to_string());
        self.trigger_start = Some(now);
        self.go(HandoverState::Preparing, &mut out);
        out.actions.push(HandoverAction::RequestAdmission { target: target.to_string() });
        Ok(out)
    }

    /// Target cell's admission answer. Rejection ends in `Reverted` and back to `Idle`.
    pub fn on_admission(&mut self, admitted: bool) -> Result<StepOutcome, FederationError> {
        let mut out = StepOutcome::default();
        if self.state != HandoverState::Preparing {
            return Ok(out);
        }
        let target = self.candidate.clone().expect("preparing without candidate");
        if !admitted {
            self.go(HandoverState::Reverted, &mut out);
            self.go(HandoverState::Idle, &mut out);
            self.candidate = None;
            self.trigger_start = None;
            return Err(FederationError::AdmissionRejected { target, transitions: out.transitions });
        }
        self.go(HandoverState::Executing, &mut out);
        match self.config.mode {
            HandoverMode::MakeBeforeBreak => {
                out.actions.push(HandoverAction::AddLink { cell: target });
            }
            HandoverMode::BreakBeforeMake => {
                if let Some(old) = &self.serving {
                    out.actions.push(HandoverAction::ReleaseLink { cell: old.clone() });
                }
            }
        }
        out.actions.push(HandoverAction::ScheduleExecution);
        Ok(out)
    }

    /// End of the execution phase. `target_ok` is false when the target failed meanwhile.
    pub fn on_execution_done(&mut self, target_ok: bool) -> StepOutcome {
        let mut out = StepOutcome::default();
        if self.state != HandoverState::Executing {
            return out;
        }
        let target = self.candidate.clone().expect("executing without candidate");
        let old = self.serving.clone();
        match (self.config.mode, target_ok) {
            (HandoverMode::MakeBeforeBreak, true) => {
                out.actions.push(HandoverAction::SwitchPrimary { from: old.clone(), to: target.clone() });
                if let Some(o) = old {
                    out.actions.push(HandoverAction::ReleaseLink { cell: o });
                }
                self.serving = Some(target);
                self.go(HandoverState::Completed, &mut out);
            }
            (HandoverMode::BreakBeforeMake, true) => {
                out.actions.push(HandoverAction::AddLink { cell: target.clone() });
                out.actions.push(HandoverAction::SwitchPrimary { from: old, to: target.clone() });
                self.serving = Some(target);
                self.go(HandoverState::Completed, &mut out);
            }
            (HandoverMode::MakeBeforeBreak, false) => {
                out.actions.push(HandoverAction::ReleaseLink { cell: target });
                self.go(HandoverState::Reverted, &mut out);
            }
            (HandoverMode::BreakBeforeMake, false) => {
                if let Some(o) = old {
                    out.actions.push(HandoverAction::AddLink { cell: o });
                }
                self.go(HandoverState::Reverted, &mut out);
            }
        }
        self.go(HandoverState::Idle, &mut out);
        self.candidate = None;
        self.trigger_start = None;
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PublicDirection {
    ToPublic,
    ToPrivate,
}

/// Checks both sides allow a public/private handover, then forces the FSM toward the
/// other network. `private_cell` is the FlexiCell on the private side.
pub fn public_private_handover(
    ctx: &mut HandoverContext,
    private_cell: &FlexiCell,
    public: &PublicNetwork,
    direction: PublicDirection,
    authorized_private: bool,
    authorized_public: bool,
    now: SimTime,
) -> Result<StepOutcome, FederationError> {
    if !public.handover_support {
        return Err(FederationError::NotSupported(public.id.clone()));
    }
    if !private_cell.public_handover {
        return Err(FederationError::NotSupported(private_cell.id.clone()));
    }
    if !(authorized_private && authorized_public) {
        return Err(FederationError::NotAuthorized(ctx.device.clone()));
    }
    let target = match direction {
        PublicDirection::ToPublic => &public.id,
        PublicDirection::ToPrivate => &private_cell.id,
    };
    ctx.force(target, now)
}

/// Load and feasible alternatives of one attached device.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceDevice {
    pub device: NodeId,
    pub demand_mbps: f64,
    pub primary: NodeId,
    /// Feasible cells and their scores, including the primary.
    pub scores: BTreeMap<NodeId, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reassignment {
    pub device: NodeId,
    pub from: NodeId,
    pub to: NodeId,
    pub score_gap_db: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RebalanceConfig {
    pub overload: f64,
    pub underload: f64,
}

impl Default for RebalanceConfig {
    fn default() -> Self {
        Self { overload: 0.9, underload: 0.7 }
    }
}

/// Greedy load balancing: while some cell is above `overload` and one of its devices can
/// move to a feasible cell under `underload`, move the device with the smallest score
/// gap. A move is only taken if the target stays at or below `overload` afterwards, and
/// each device moves at most once per call.
pub fn rebalance(
    capacity: &BTreeMap<NodeId, f64>,
    devices: &[BalanceDevice],
    cfg: RebalanceConfig,
) -> Vec<Reassignment> {
    let mut load: BTreeMap<NodeId, f64> = capacity.keys().map(|k| (k.clone(), 0.0)).collect();
    let mut primary: Vec<NodeId> = devices.iter().map(|d| d.primary.clone()).collect();
    for d in devices {
        *load.entry(d.primary.clone()).or_default() += d.demand_mbps;
    }
    let util = |load: &BTreeMap<NodeId, f64>, c: &str| -> f64 {
        let cap = capacity.get(c).copied().unwrap_or(0.0);
        if cap > 0.0 {
            load.get(c).copied().unwrap_or(0.0) / cap
        } else {
            f64::INFINITY
        }
    };
    let mut moved = vec![false; devices.len()];
    let mut out = Vec::new();
    loop {
        let mut overloaded: Vec<(f64, NodeId)> = capacity
            .keys()
            .map(|c| (util(&load, c), c.clone()))
            .filter(|(u, _)| *u > cfg.overload)
            .collect();
        overloaded.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));

        let mut chosen: Option<(usize, NodeId, f64)> = None;
        for (_, cell) in &overloaded {
            for (i, d) in devices.iter().enumerate() {
                if moved[i] || &primary[i] != cell {
                    continue;
                }
                let own = d.scores.get(cell).copied().unwrap_or(f64::NEG_INFINITY);
                for (target, s) in &d.scores {
                    if target == cell || !capacity.contains_key(target) {
                        continue;
                    }
                    if util(&load, target) >= cfg.underload {
                        continue;
                    }
                    let cap = capacity[target];
                    let after = (load.get(target).copied().unwrap_or(0.0) + d.demand_mbps) / cap;
                    if after > cfg.overload {
                        continue;
                    }
                    let gap = own - s;
                    let better = match &chosen {
                        None => true,
                        Some((ci, ct, cg)) => {
                            gap < *cg
                                || (gap == *cg
                                    && (&devices[*ci].device, ct) > (&d.device, target))
                        }
                    };
                    if better {
                        chosen = Some((i, target.clone(), gap));
                    }
                }
            }
            if chosen.is_some() {
                break;
            }
        }
        let Some((i, target, gap)) = chosen else { break };
        let from = primary[i].clone();
        *load.get_mut(&from).expect("source load") -= devices[i].demand_mbps;
        *load.entry(target.clone()).or_default() += devices[i].demand_mbps;
        primary[i] = target.clone();
        moved[i] = true;
        out.push(Reassignment {
            device: devices[i].device.clone(),
            from,
            to: target,
            score_gap_db: gap,
        });
    }
    out
}

/// Utilization per cell after applying `moves` to the devices' primaries.
pub fn utilization_after(
    capacity: &BTreeMap<NodeId, f64>,
    devices: &[BalanceDevice],
    moves: &[Reassignment],
) -> BTreeMap<NodeId, f64> {
    let mut load: BTreeMap<NodeId, f64> = capacity.keys().map(|k| (k.clone(), 0.0)).collect();
    for d in devices {
        let cell = moves
            .iter()
            .find(|m| m.device == d.device)
            .map(|m| &m.to)
            .unwrap_or(&d.primary);
        *load.entry(cell.clone()).or_default() += d.demand_mbps;
    }
    load.into_iter()
        .map(|(c, l)| {
            let cap = capacity.get(&c).copied().unwrap_or(f64::INFINITY);
            (c, l / cap)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(cell: &str, margin: Option<f64>, util: f64) -> CellCandidate {
        CellCandidate {
            cell: cell.into(),
            technology: Technology::NrEmbb,
            margin_db: margin,
            utilization: util,
        }
    }

    #[test]
    fn score_examples() {
        assert_eq!(score_cell(&cand("a", Some(10.0), 0.5)).unwrap(), 10.0);
        assert!((score_cell(&cand("a", Some(10.0), 1.0)).unwrap() - 8.0).abs() < 1e-12);
        assert_eq!(
            score_cell(&cand("a", None, 0.0)),
            Err(FederationError::Infeasible("a".into()))
        );
    }

    #[test]
    fn attachment_examples() {
        let one = select_attachment("d", &[cand("cellA", Some(5.0), 0.0)], 1);
        assert_eq!(one.primary.as_deref(), Some("cellA"));
        assert!(one.secondaries.is_empty());

        let tie = select_attachment(
            "d",
            &[cand("cellB", Some(5.0), 0.0), cand("cellA", Some(5.0), 0.0)],
            1,
        );
        assert_eq!(tie.primary.as_deref(), Some("cellA"));
        assert_eq!(tie.secondaries, vec!["cellB".to_string()]);

        let none = select_attachment("d", &[cand("cellA", None, 0.0)], 1);
        assert!(!none.is_attached());
    }

    fn scores(pairs: &[(&str, f64)]) -> BTreeMap<NodeId, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn ctx(mode: HandoverMode) -> HandoverContext {
        HandoverContext::new(
            "d",
            Some("a".into()),
            HandoverConfig { mode, ..HandoverConfig::default() },
        )
    }

    #[test]
    fn hysteresis_holds_idle() {
        let mut c = ctx(HandoverMode::MakeBeforeBreak);
        let out = c.on_scores(&scores(&[("a", 10.0), ("b", 12.0)]), SimTime::ZERO);
        assert!(out.transitions.is_empty());
        assert_eq!(c.state, HandoverState::Idle);
    }

    #[test]
    fn sustained_candidate_reaches_preparing() {
        let mut c = ctx(HandoverMode::MakeBeforeBreak);
        let s = scores(&[("a", 10.0), ("b", 14.0)]);
        c.on_scores(&s, SimTime::ZERO);
        assert_eq!(c.state, HandoverState::Triggered);
        c.on_scores(&s, SimTime::from_millis(100));
        assert_eq!(c.state, HandoverState::Triggered);
        let out = c.on_scores(&s, SimTime::from_millis(200));
        assert_eq!(c.state, HandoverState::Preparing);
        assert_eq!(out.actions, vec![HandoverAction::RequestAdmission { target: "b".into() }]);
    }

    #[test]
    fn fading_candidate_returns_idle() {
        let mut c = ctx(HandoverMode::MakeBeforeBreak);
        c.on_scores(&scores(&[("a", 10.0), ("b", 14.0)]), SimTime::ZERO);
        let out = c.on_scores(&scores(&[("a", 10.0), ("b", 11.0)]), SimTime::from_millis(100));
        assert_eq!(out.transitions, vec![(HandoverState::Triggered, HandoverState::Idle)]);
    }

    #[test]
    fn make_before_break_sequence() {
        let mut c = ctx(HandoverMode::MakeBeforeBreak);
        c.force("b", SimTime::ZERO).unwrap();
        let mut actions = c.on_admission(true).unwrap().actions;
        actions.extend(c.on_execution_done(true).actions);
        let kinds: Vec<_> = actions
            .iter()
            .filter(|a| !matches!(a, HandoverAction::ScheduleExecution))
            .cloned()
            .collect();
        assert_eq!(
            kinds,
            vec![
                HandoverAction::AddLink { cell: "b".into() },
                HandoverAction::SwitchPrimary { from: Some("a".into()), to: "b".into() },
                HandoverAction::ReleaseLink { cell: "a".into() },
            ]
        );
        assert_eq!(c.serving.as_deref(), Some("b"));
        assert_eq!(c.state, HandoverState::Idle);
    }

    #[test]
    fn admission_rejection_reverts() {
        let mut c = ctx(HandoverMode::MakeBeforeBreak);
        c.force("b", SimTime::ZERO).unwrap();
        let err = c.on_admission(false).unwrap_err();
        match err {
            FederationError::AdmissionRejected { target, transitions } => {
                assert_eq!(target, "b");
                assert_eq!(transitions[0], (HandoverState::Preparing, HandoverState::Reverted));
            }
            e => panic!("{e:?}"),
        }
        assert_eq!(c.serving.as_deref(), Some("a"));
    }

    /// Every reachable state crossed with every input only uses allowed edges.
    #[test]
    fn fsm_small_model_is_safe() {
        #[derive(Clone, Copy, Debug)]
        enum Input {
            Scores(f64),
            Admission(bool),
            Exec(bool),
            Force,
        }
        let inputs = [
            Input::Scores(9.0),
            Input::Scores(12.0),
            Input::Scores(20.0),
            Input::Admission(true),
            Input::Admission(false),
            Input::Exec(true),
            Input::Exec(false),
            Input::Force,
        ];
        for mode in [HandoverMode::MakeBeforeBreak, HandoverMode::BreakBeforeMake] {
            for ttt in [0.0, 160.0] {
                // breadth-first over input sequences up to length 6
                let mut frontier = vec![(HandoverContext::new(
                    "d",
                    Some("a".into()),
                    HandoverConfig { mode, time_to_trigger_ms: ttt, ..Default::default() },
                ), 0u64)];
                let mut seen_states = BTreeSet::new();
                for _depth in 0..6 {
                    let mut next = Vec::new();
                    for (c, t) in &frontier {
                        for input in inputs {
                            let mut c2 = c.clone();
                            let now = SimTime::from_millis(t + 100);
                            let transitions = match input {
                                Input::Scores(v) => {
                                    let other = if c2.serving.as_deref() == Some("a") { "b" } else { "a" };
                                    let s = scores(&[(c2.serving.clone().unwrap().as_str(), 10.0), (other, v)]);
                                    c2.on_scores(&s, now).transitions
                                }
                                Input::Admission(ok) => match c2.on_admission(ok) {
                                    Ok(o) => o.transitions,
                                    Err(FederationError::AdmissionRejected { transitions, .. }) => transitions,
                                    Err(e) => panic!("{e:?}"),
                                },
                                Input::Exec(ok) => c2.on_execution_done(ok).transitions,
                                Input::Force => {
                                    let other = if c2.serving.as_deref() == Some("a") { "b" } else { "a" };
                                    c2.force(other, now).map(|o| o.transitions).unwrap_or_default()
                                }
                            };
                            let mut prev = c.state;
                            for (from, to) in &transitions {
                                assert_eq!(*from, prev, "transition chain broken");
                                assert!(transition_allowed(*from, *to), "{from:?}->{to:?} via {input:?}");
                                prev = *to;
                            }
                            assert_eq!(prev, c2.state);
                            assert!(!matches!(c2.state, HandoverState::Completed | HandoverState::Reverted));
                            seen_states.insert(c2.state);
                            next.push((c2, t + 100));
                        }
                    }
                    // keep the frontier bounded: one representative per state
                    next.sort_by_key(|(c, _)| c.state);
                    next.dedup_by_key(|(c, _)| (c.state, c.serving.clone()));
                    frontier = next;
                }
                for s in [HandoverState::Idle, HandoverState::Triggered, HandoverState::Preparing, HandoverState::Executing] {
                    if s == HandoverState::Triggered && ttt == 0.0 {
                        continue;
                    }
                    assert!(seen_states.contains(&s), "{s:?} unreachable");
                }
            }
        }
    }

    #[test]
    fn public_private_checks() {
        let cell = FlexiCell {
            id: "c1".into(),
            position: Point2::default(),
            local_core: true,
            technologies: vec![Technology::NrEmbb],
            capacity_mbps: 100.0,
            island_mode: false,
            public_handover: true,
        };
        let mut public = PublicNetwork {
            id: "public".into(),
            gateway: "pgw".into(),
            technologies: vec![Technology::NrEmbb],
            margin_db: 10.0,
            handover_support: true,
            capacity_mbps: 1000.0,
        };
        let mut c = HandoverContext::new("d", Some("c1".into()), HandoverConfig::default());
        let out = public_private_handover(&mut c, &cell, &public, PublicDirection::ToPublic, true, true, SimTime::ZERO).unwrap();
        assert_eq!(out.actions, vec![HandoverAction::RequestAdmission { target: "public".into() }]);

        let mut c = HandoverContext::new("d", Some("c1".into()), HandoverConfig::default());
        public.handover_support = false;
        assert_eq!(
            public_private_handover(&mut c, &cell, &public, PublicDirection::ToPublic, true, true, SimTime::ZERO),
            Err(FederationError::NotSupported("public".into()))
        );
        public.handover_support = true;
        assert_eq!(
            public_private_handover(&mut c, &cell, &public, PublicDirection::ToPublic, true, false, SimTime::ZERO),
            Err(FederationError::NotAuthorized("d".into()))
        );
    }

    #[test]
    fn rebalance_examples() {
        let cap: BTreeMap<NodeId, f64> = [("a".to_string(), 10.0), ("b".to_string(), 10.0)].into();
        let dev = |id: &str, primary: &str, demand: f64| BalanceDevice {
            device: id.into(),
            demand_mbps: demand,
            primary: primary.into(),
            scores: scores(&[("a", 20.0), ("b", 15.0)]),
        };
        assert!(rebalance(&cap, &[dev("d1", "a", 5.0)], RebalanceConfig::default()).is_empty());
        let loaded = [dev("d1", "a", 5.0), dev("d2", "a", 3.0), dev("d3", "a", 2.0)];
        let moves = rebalance(&cap, &loaded, RebalanceConfig::default());
        assert!(!moves.is_empty());
        assert_eq!(moves[0].to, "b");
    }

    #[test]
    fn argmax_invariant_under_affine_rescale() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let cands: Vec<CellCandidate> = (0..5)
                .map(|i| cand(&format!("c{i}"), Some(rng.random_range(0.0..30.0)), 0.0))
                .collect();
            let base = select_attachment("d", &cands, 0).primary;
            let k = rng.random_range(0.1..10.0);
            let off = rng.random_range(0.0..50.0);
            let scaled: Vec<CellCandidate> = cands
                .iter()
                .map(|c| CellCandidate { margin_db: c.margin_db.map(|m| m * k + off), ..c.clone() })
                .collect();
            assert_eq!(select_attachment("d", &scaled, 0).primary, base);
        }
    }
}
