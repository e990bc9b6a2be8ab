//! Run metrics aggregated from a trace: per flow, per slice (tactical) and plant-wide
//! (strategic), exported as NDJSON lines and as a plain summary table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::security::verify_chain;
use crate::topology::Flow;
use crate::trace::{DropCause, TraceLog, TraceRecord};

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowMetrics {
    pub flow: String,
    pub slice: String,
    pub batches: u64,
    pub delivered: u64,
    pub loss: f64,
    pub p50_ms: Option<f64>,
    pub p95_ms: Option<f64>,
    pub p99_ms: Option<f64>,
    pub throughput_mbps: f64,
    pub deadline_misses: u64,
    pub drops: BTreeMap<DropCause, u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub slice: String,
    pub flows: usize,
    pub batches: u64,
    pub delivered: u64,
    pub loss: f64,
    pub p99_ms: Option<f64>,
    pub throughput_mbps: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HandoverMetrics {
    pub count: u64,
    pub max_outage_ms: f64,
    pub mean_outage_ms: f64,
    pub rebalances: u64,
    pub handover_drops: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalizationMetrics {
    pub fixes: usize,
    /// `(error_m, cumulative fraction)` at the 10th..100th percentiles.
    pub cdf: Vec<(f64, f64)>,
    pub within_1m: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlantMetrics {
    pub events_processed: u64,
    pub trace_records: usize,
    pub devices_operational: usize,
    pub devices_quarantined: usize,
    pub apps_running: usize,
    pub relocations: u64,
    pub failures: u64,
    pub audit_records: usize,
    pub audit_head: String,
    pub audit_intact: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub seed: u64,
    pub duration_s: f64,
    pub plant: PlantMetrics,
    pub slices: Vec<SliceMetrics>,
    pub flows: Vec<FlowMetrics>,
    pub handovers: HandoverMetrics,
    pub localization: LocalizationMetrics,
    pub energy_mj: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn from_trace(
        trace: &TraceLog,
        flows: &[Flow],
        events_processed: u64,
        energy_mj: BTreeMap<String, f64>,
        loc_errors: &[f64],
    ) -> Self {
        let (scenario, seed, duration_s) = match trace.records.first() {
            Some(TraceRecord::Header { name, seed, duration_s, .. }) => (name.clone(), *seed, *duration_s),
            _ => (String::new(), 0, 0.0),
        };
        let mut lat: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        let mut per_flow: BTreeMap<&str, FlowMetrics> = flows
            .iter()
            .map(|f| (f.id.as_str(), FlowMetrics { flow: f.id.clone(), slice: f.slice.clone(), ..Default::default() }))
            .collect();
        let bound: BTreeMap<&str, f64> = flows.iter().map(|f| (f.id.as_str(), f.max_latency_ms)).collect();
        let mut bytes: BTreeMap<&str, u64> = BTreeMap::new();
        let mut ho = HandoverMetrics::default();
        let mut outage_sum = 0.0;
        let mut stage: BTreeMap<&str, &str> = BTreeMap::new();
        let mut apps: BTreeMap<&str, bool> = BTreeMap::new();
        let mut plant = PlantMetrics { events_processed, trace_records: trace.records.len(), ..Default::default() };

        for r in &trace.records {
            match r {
                TraceRecord::Packet { flow, delivered, latency_ms, cause, bytes: b, .. } => {
                    let Some(m) = per_flow.get_mut(flow.as_str()) else { continue };
                    m.batches += 1;
                    if *delivered {
                        m.delivered += 1;
                        *bytes.entry(flow.as_str()).or_default() += b;
                        if let Some(l) = latency_ms {
                            lat.entry(flow.as_str()).or_default().push(*l);
                            if bound.get(flow.as_str()).is_some_and(|bd| l > bd) {
                                m.deadline_misses += 1;
                            }
                        }
                    } else if let Some(c) = cause {
                        *m.drops.entry(*c).or_default() += 1;
                        if *c == DropCause::Handover {
                            ho.handover_drops += 1;
                        }
                    }
                }
                TraceRecord::Handover { link_down_ms, .. } => {
                    ho.count += 1;
                    outage_sum += link_down_ms;
                    ho.max_outage_ms = ho.max_outage_ms.max(*link_down_ms);
                }
                TraceRecord::Rebalance { .. } => ho.rebalances += 1,
                TraceRecord::Onboarding { device, to, .. } => {
                    stage.insert(device.as_str(), to.as_str());
                }
                TraceRecord::App { app, to, .. } => {
                    apps.insert(app.as_str(), *to == crate::management::AppState::Running);
                }
                TraceRecord::Relocation { .. } => plant.relocations += 1,
                TraceRecord::Failure { recovered: false, .. } => plant.failures += 1,
                _ => {}
            }
        }
        if ho.count > 0 {
            ho.mean_outage_ms = outage_sum / ho.count as f64;
        }
        let secs = duration_s.max(f64::MIN_POSITIVE);
        let mut slice_lat: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut slices: BTreeMap<String, SliceMetrics> = BTreeMap::new();
        for (id, m) in per_flow.iter_mut() {
            let mut l = lat.remove(id).unwrap_or_default();
            l.sort_by(f64::total_cmp);
            m.p50_ms = percentile(&l, 50.0);
            m.p95_ms = percentile(&l, 95.0);
            m.p99_ms = percentile(&l, 99.0);
            m.loss = if m.batches == 0 { 0.0 } else { 1.0 - m.delivered as f64 / m.batches as f64 };
            m.throughput_mbps = bytes.get(id).copied().unwrap_or(0) as f64 * 8.0 / 1e6 / secs;
            let s = slices
                .entry(m.slice.clone())
                .or_insert_with(|| SliceMetrics { slice: m.slice.clone(), ..Default::default() });
            s.flows += 1;
            s.batches += m.batches;
            s.delivered += m.delivered;
            s.throughput_mbps += m.throughput_mbps;
            slice_lat.entry(m.slice.clone()).or_default().extend(l);
        }
        for (id, s) in slices.iter_mut() {
            s.loss = if s.batches == 0 { 0.0 } else { 1.0 - s.delivered as f64 / s.batches as f64 };
            let mut l = slice_lat.remove(id).unwrap_or_default();
            l.sort_by(f64::total_cmp);
            s.p99_ms = percentile(&l, 99.0);
        }

        let mut errs = loc_errors.to_vec();
        errs.sort_by(f64::total_cmp);
        let localization = LocalizationMetrics {
            fixes: errs.len(),
            cdf: (1..=10).filter_map(|k| percentile(&errs, k as f64 * 10.0).map(|e| (e, k as f64 / 10.0))).collect(),
            within_1m: if errs.is_empty() { 0.0 } else { errs.iter().filter(|e| **e < 1.0).count() as f64 / errs.len() as f64 },
        };

        let audit = trace.audit_records();
        plant.devices_operational = stage.values().filter(|s| **s == "operational").count();
        plant.devices_quarantined = stage.values().filter(|s| **s == "quarantined").count();
        plant.apps_running = apps.values().filter(|r| **r).count();
        plant.audit_records = audit.len();
        plant.audit_head = audit.last().map(|r| r.hash.clone()).unwrap_or_default();
        plant.audit_intact = verify_chain(&audit).is_ok();

        Self {
            scenario,
            seed,
            duration_s,
            plant,
            slices: slices.into_values().collect(),
            flows: per_flow.into_values().collect(),
            handovers: ho,
            localization,
            energy_mj,
        }
    }

    /// One JSON object per line, each tagged with its `scope`.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        let mut line = |scope: &str, v: serde_json::Value| {
            let mut obj = serde_json::Map::new();
            obj.insert("scope".into(), scope.into());
            if let serde_json::Value::Object(m) = v {
                obj.extend(m);
            }
            out.push_str(&serde_json::Value::Object(obj).to_string());
            out.push('\n');
        };
        let ser = |v: &dyn erased::Ser| v.value();
        line(
            "run",
            serde_json::json!({ "scenario": self.scenario, "seed": self.seed, "duration_s": self.duration_s }),
        );
        line("plant", ser(&self.plant));
        for s in &self.slices {
            line("slice", ser(s));
        }
        for f in &self.flows {
            line("flow", ser(f));
        }
        line("handover", ser(&self.handovers));
        line("localization", ser(&self.localization));
        for (d, e) in &self.energy_mj {
            line("energy", serde_json::json!({ "device": d, "energy_mj": e }));
        }
        out
    }

    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
        let _ = writeln!(s, "scenario {}  seed {}  duration {} s", self.scenario, self.seed, self.duration_s);
        let p = &self.plant;
        let _ = writeln!(
            s,
            "events {}  records {}  operational {}  quarantined {}  apps running {}  relocations {}  failures {}",
            p.events_processed, p.trace_records, p.devices_operational, p.devices_quarantined, p.apps_running, p.relocations, p.failures
        );
        let _ = writeln!(s, "\n{:<24} {:<12} {:>8} {:>8} {:>8} {:>8} {:>8} {:>10}", "flow", "slice", "batches", "loss", "p50", "p95", "p99", "mbps");
        for f in &self.flows {
            let _ = writeln!(
                s,
                "{:<24} {:<12} {:>8} {:>8.4} {:>8} {:>8} {:>8} {:>10.3}",
                f.flow, f.slice, f.batches, f.loss, fmt(f.p50_ms), fmt(f.p95_ms), fmt(f.p99_ms), f.throughput_mbps
            );
        }
        let _ = writeln!(s, "\n{:<24} {:>6} {:>8} {:>8} {:>8} {:>10}", "slice", "flows", "batches", "loss", "p99", "mbps");
        for sl in &self.slices {
            let _ = writeln!(
                s,
                "{:<24} {:>6} {:>8} {:>8.4} {:>8} {:>10.3}",
                sl.slice, sl.flows, sl.batches, sl.loss, fmt(sl.p99_ms), sl.throughput_mbps
            );
        }
        let h = &self.handovers;
        let _ = writeln!(
            s,
            "\nhandovers {}  max outage {:.1} ms  mean outage {:.1} ms  handover drops {}  rebalances {}",
            h.count, h.max_outage_ms, h.mean_outage_ms, h.handover_drops, h.rebalances
        );
        let l = &self.localization;
        let median = l.cdf.get(4).map(|c| c.0);
        let p90 = l.cdf.get(8).map(|c| c.0);
        let _ = writeln!(s, "localization fixes {}  median {} m  p90 {} m  within 1 m {:.3}", l.fixes, fmt(median), fmt(p90), l.within_1m);
        let total: f64 = self.energy_mj.values().sum();
        let _ = writeln!(s, "energy total {total:.3} mJ over {} devices", self.energy_mj.len());
        let _ = writeln!(s, "audit records {}  intact {}  head {}", p.audit_records, p.audit_intact, p.audit_head);
        s
    }
}

mod erased {
    pub trait Ser {
        fn value(&self) -> serde_json::Value;
    }
    impl<T: serde::Serialize> Ser for T {
        fn value(&self) -> serde_json::Value {
            serde_json::to_value(self).expect("metrics serialize")
        }
    }
}
