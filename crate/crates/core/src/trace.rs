//! NDJSON trace: a header line carrying the scenario, then one record per line.
//! Line numbers (1-based, header included) are the evidence pointers used by the verifier.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::federation::{HandoverMode, HandoverState};
use crate::geometry::Point2;
use crate::kernel::SimTime;
use crate::linkmodel::Technology;
use crate::localization::ZoneTransition;
use crate::management::{AppState, OnboardingStage, RelocationStep, RelocationTrigger};
use crate::security::AuditRecord;

pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropCause {
    /// Random per-hop loss or congestion overflow.
    Channel,
    /// The serving link was down mid-handover.
    Handover,
    /// No admitted route (no coverage, infeasible QoS, failed element).
    NoRoute,
    /// Held back because the route would leave the premise.
    Sovereignty,
    Unauthenticated,
    Battery,
    RateLimited,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceRecord {
    Header {
        version: u32,
        name: String,
        seed: u64,
        duration_s: f64,
        scenario: String,
    },
    Onboarding {
        t: SimTime,
        device: String,
        from: OnboardingStage,
        to: OnboardingStage,
        reason: String,
    },
    Auth {
        t: SimTime,
        device: String,
        subscriber: String,
        outcome: String,
        /// Attempt injected by the event script rather than the device itself.
        attacker: bool,
    },
    FakeCellRejected {
        t: SimTime,
        device: String,
        cell: String,
    },
    Attach {
        t: SimTime,
        device: String,
        cell: Option<String>,
        technology: Option<Technology>,
        cause: String,
    },
    HandoverState {
        t: SimTime,
        device: String,
        from: HandoverState,
        to: HandoverState,
        target: Option<String>,
    },
    /// Summary of one completed handover.
    Handover {
        t: SimTime,
        device: String,
        from: Option<String>,
        to: String,
        mode: HandoverMode,
        started: SimTime,
        link_down_ms: f64,
    },
    Rebalance {
        t: SimTime,
        device: String,
        from: String,
        to: String,
    },
    FlowAdmission {
        t: SimTime,
        flow: String,
        slice: String,
        admitted: bool,
        nodes: Vec<String>,
        reason: String,
    },
    FlowRelease {
        t: SimTime,
        flow: String,
        reason: String,
    },
    Failure {
        t: SimTime,
        element: String,
        recovered: bool,
    },
    Packet {
        t: SimTime,
        flow: String,
        slice: String,
        seq: u64,
        bytes: u64,
        delivered: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        latency_ms: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cause: Option<DropCause>,
        /// Nodes the batch traversed; empty when it never left the source.
        nodes: Vec<String>,
    },
    Position {
        t: SimTime,
        device: String,
        mean: Point2,
        covariance: [[f64; 2]; 2],
        sources: BTreeSet<Technology>,
        error_m: f64,
        /// Covariance of the fused (pre-tracking) estimate.
        fused: [[f64; 2]; 2],
        /// Per-technology covariances that went into the fused estimate.
        inputs: Vec<[[f64; 2]; 2]>,
    },
    Zone {
        t: SimTime,
        device: String,
        zone: String,
        transition: ZoneTransition,
        trigger: Option<String>,
    },
    App {
        t: SimTime,
        app: String,
        from: Option<AppState>,
        to: AppState,
        host: Option<String>,
        reason: String,
    },
    Relocation {
        t: SimTime,
        app: String,
        trigger: RelocationTrigger,
        steps: Vec<RelocationStep>,
        target: Option<String>,
    },
    Management {
        t: SimTime,
        action: String,
        target: String,
        reason: String,
    },
    Config {
        t: SimTime,
        asset: String,
        layer: String,
        outcome: String,
        revision: u64,
    },
    Audit(AuditRecord),
}

impl TraceRecord {
    /// State-changing records, each followed by exactly one audit record.
    pub fn is_state_change(&self) -> bool {
        !matches!(
            self,
            TraceRecord::Header { .. }
                | TraceRecord::Packet { .. }
                | TraceRecord::Position { .. }
                | TraceRecord::Handover { .. }
                | TraceRecord::Audit(_)
        )
    }

    pub fn time(&self) -> Option<SimTime> {
        use TraceRecord::*;
        match self {
            Header { .. } => None,
            Audit(r) => Some(r.timestamp),
            Onboarding { t, .. }
            | Auth { t, .. }
            | FakeCellRejected { t, .. }
            | Attach { t, .. }
            | HandoverState { t, .. }
            | Handover { t, .. }
            | Rebalance { t, .. }
            | FlowAdmission { t, .. }
            | FlowRelease { t, .. }
            | Failure { t, .. }
            | Packet { t, .. }
            | Position { t, .. }
            | Zone { t, .. }
            | App { t, .. }
            | Relocation { t, .. }
            | Management { t, .. }
            | Config { t, .. } => Some(*t),
        }
    }

    /// Audit fields `(actor, action, object, outcome)` for a state change.
    pub fn audit_fields(&self) -> Option<(&'static str, String, String, String)> {
        use TraceRecord::*;
        Some(match self {
            Onboarding { device, to, reason, .. } => {
                ("management", "onboarding".into(), device.clone(), format!("{}:{reason}", to.as_str()))
            }
            Auth { device, outcome, attacker, .. } => (
                "security",
                if *attacker { "auth_replay".into() } else { "authenticate".into() },
                device.clone(),
                outcome.clone(),
            ),
            FakeCellRejected { device, cell, .. } => ("security", "verify_network".into(), cell.clone(), format!("rejected_by:{device}")),
            Attach { device, cell, cause, .. } => (
                "federation",
                "attach".into(),
                device.clone(),
                format!("{}:{cause}", cell.as_deref().unwrap_or("none")),
            ),
            HandoverState { device, from, to, .. } => (
                "federation",
                "handover_state".into(),
                device.clone(),
                format!("{}->{}", from.as_str(), to.as_str()),
            ),
            Rebalance { device, from, to, .. } => ("federation", "rebalance".into(), device.clone(), format!("{from}->{to}")),
            FlowAdmission { flow, admitted, reason, .. } => (
                "flowrouting",
                "admit_flow".into(),
                flow.clone(),
                if *admitted { "admitted".into() } else { format!("rejected:{reason}") },
            ),
            FlowRelease { flow, reason, .. } => ("flowrouting", "release_flow".into(), flow.clone(), reason.clone()),
            Failure { element, recovered, .. } => (
                "harness",
                if *recovered { "recover".into() } else { "fail".into() },
                element.clone(),
                "applied".into(),
            ),
            Zone { device, zone, transition, .. } => (
                "localization",
                "zone".into(),
                device.clone(),
                format!("{}:{}", zone, if *transition == ZoneTransition::Enter { "enter" } else { "exit" }),
            ),
            App { app, to, reason, .. } => ("management", "app_state".into(), app.clone(), format!("{to:?}:{reason}")),
            Relocation { app, target, .. } => (
                "management",
                "relocate_app".into(),
                app.clone(),
                target.clone().unwrap_or_else(|| "none".into()),
            ),
            Management { action, target, reason, .. } => ("management", action.clone(), target.clone(), reason.clone()),
            Config { asset, layer, outcome, .. } => ("management", format!("configure_{layer}"), asset.clone(), outcome.clone()),
            Header { .. } | Packet { .. } | Position { .. } | Handover { .. } | Audit(_) => return None,
        })
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("trace has no header")]
    MissingHeader,
    #[error("unsupported trace version {0}")]
    Version(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parsed trace; `records[0]` is the header, so record `i` sits on line `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceLog {
    pub records: Vec<TraceRecord>,
}

impl TraceLog {
    pub fn header(&self) -> (&str, u64, f64, &str) {
        match &self.records[0] {
            TraceRecord::Header { name, seed, duration_s, scenario, .. } => (name, *seed, *duration_s, scenario),
            _ => unreachable!("validated on read"),
        }
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self, TraceError> {
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let rec: TraceRecord =
                serde_json::from_str(&line).map_err(|e| TraceError::Parse { line: i + 1, message: e.to_string() })?;
            records.push(rec);
        }
        match records.first() {
            Some(TraceRecord::Header { version, .. }) if *version == TRACE_VERSION => Ok(Self { records }),
            Some(TraceRecord::Header { version, .. }) => Err(TraceError::Version(*version)),
            _ => Err(TraceError::MissingHeader),
        }
    }

    pub fn parse(text: &str) -> Result<Self, TraceError> {
        Self::read(text.as_bytes())
    }

    pub fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_ndjson(&self) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("json is utf-8")
    }

    /// `(line, record)` pairs.
    pub fn lines(&self) -> impl Iterator<Item = (usize, &TraceRecord)> {
        self.records.iter().enumerate().map(|(i, r)| (i + 1, r))
    }

    pub fn audit_records(&self) -> Vec<AuditRecord> {
        self.records
            .iter()
            .filter_map(|r| match r {
                TraceRecord::Audit(a) => Some(a.clone()),
                _ => None,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ndjson_round_trip() {
        let log = TraceLog {
            records: vec![
                TraceRecord::Header { version: 1, name: "x".into(), seed: 3, duration_s: 1.0, scenario: "a = 1\n".into() },
                TraceRecord::Packet {
                    t: SimTime::from_millis(100),
                    flow: "f".into(),
                    slice: "s".into(),
                    seq: 0,
                    bytes: 10,
                    delivered: false,
                    latency_ms: None,
                    cause: Some(DropCause::Handover),
                    nodes: vec![],
                },
            ],
        };
        let text = log.to_ndjson();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().nth(1).unwrap().starts_with("{\"kind\":\"packet\""));
        assert_eq!(TraceLog::parse(&text).unwrap(), log);
    }

    #[test]
    fn rejects_headerless() {
        let err = TraceLog::parse("{\"kind\":\"failure\",\"t\":0,\"element\":\"x\",\"recovered\":false}\n").unwrap_err();
        assert!(matches!(err, TraceError::MissingHeader));
        assert!(matches!(TraceLog::parse("nope\n"), Err(TraceError::Parse { line: 1, .. })));
    }
}
