//! Trace-level invariants checked over seeded runs of the bundled scenarios.

use std::collections::BTreeMap;
use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use flexicell::kernel::SimTime;
use flexicell::management::{app_step_allowed, AppState, WATCHDOG_PERIOD_S};
use flexicell::scenario::Scenario;
use flexicell::security::{device_proof, AuthCenter, Credential};
use flexicell::sim;
use flexicell::trace::{TraceLog, TraceRecord};
use flexicell::verify::verify_trace;

fn load(rel: &str) -> Scenario {
    Scenario::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(rel)).unwrap()
}

const SCENARIOS: [&str; 4] = [
    "cobot_molding.toml",
    "quality_control.toml",
    "intra_logistics.toml",
    "violations/req_d_no_spare_host.toml",
];

fn short_run(rel: &str, seed: u64, duration: f64) -> (Scenario, TraceLog) {
    let mut sc = load(rel);
    sc.seed = seed;
    sc.duration_s = duration;
    let out = sim::run(&sc).unwrap();
    (sc, out.trace)
}

fn check_apps(sc: &Scenario, trace: &TraceLog) -> Result<(), String> {
    let spec: BTreeMap<&str, (f64, f64)> = sc.apps.iter().map(|a| (a.id.as_str(), (a.cpu_units, a.memory_units))).collect();
    let cap: BTreeMap<&str, (f64, f64)> = sc.infra.iter().map(|n| (n.id.as_str(), (n.cpu_units, n.memory_units))).collect();
    let mut state: BTreeMap<String, AppState> = BTreeMap::new();
    let mut placed: BTreeMap<String, String> = BTreeMap::new();
    for r in &trace.records {
        let TraceRecord::App { app, from, to, host, t, .. } = r else { continue };
        if let Some(f) = from {
            if state.get(app) != Some(f) {
                return Err(format!("{app} at {t}: recorded from {f:?}, was {:?}", state.get(app)));
            }
            if !app_step_allowed(*f, *to) {
                return Err(format!("{app} at {t}: illegal {f:?} -> {to:?}"));
            }
        }
        state.insert(app.clone(), *to);
        match (to, host) {
            (AppState::Running, Some(h)) => {
                placed.insert(app.clone(), h.clone());
            }
            (AppState::Relocating, _) => {}
            _ => {
                placed.remove(app);
            }
        }
        let mut used: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
        for (a, h) in &placed {
            let (c, m) = spec[a.as_str()];
            let u = used.entry(h.as_str()).or_default();
            u.0 += c;
            u.1 += m;
        }
        for (h, (c, m)) in used {
            let (cc, mc) = cap[h];
            if c > cc + 1e-9 || m > mc + 1e-9 {
                return Err(format!("{h} over capacity at {t}: {c}/{cc} cpu, {m}/{mc} mem"));
            }
        }
    }
    Ok(())
}

/// Failed apps come back within two watchdog ticks of their host recovering.
fn check_self_healing(trace: &TraceLog) -> Result<(), String> {
    let mut failed_since: BTreeMap<String, SimTime> = BTreeMap::new();
    let mut recovered_at: Option<SimTime> = None;
    for r in &trace.records {
        match r {
            TraceRecord::App { app, to: AppState::Failed, t, .. } => {
                failed_since.insert(app.clone(), *t);
            }
            TraceRecord::App { app, to: AppState::Running, t, .. } => {
                if let (Some(_), Some(rec)) = (failed_since.remove(app), recovered_at) {
                    let waited = t.as_secs() - rec.as_secs();
                    if waited > 2.0 * WATCHDOG_PERIOD_S + 1e-9 {
                        return Err(format!("{app} restarted {waited} s after recovery"));
                    }
                }
            }
            TraceRecord::Failure { recovered: true, t, .. } => recovered_at = Some(*t),
            _ => {}
        }
    }
    let end = SimTime::from_secs(trace.header().2);
    if let Some(rec) = recovered_at {
        if let Some((app, _)) = failed_since.iter().find(|(_, since)| **since <= rec) {
            if end.as_secs() - rec.as_secs() > 2.0 * WATCHDOG_PERIOD_S {
                return Err(format!("{app} still failed at the end"));
            }
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, ..ProptestConfig::default() })]

    #[test]
    fn app_lifecycle_and_host_capacity(seed in 0u64..1_000, which in 0usize..SCENARIOS.len()) {
        let (sc, trace) = short_run(SCENARIOS[which], seed, 50.0);
        prop_assert_eq!(check_apps(&sc, &trace), Ok(()));
        prop_assert_eq!(check_self_healing(&trace), Ok(()));
    }

    #[test]
    fn every_state_change_is_audited_once(seed in 0u64..1_000, which in 0usize..3) {
        let (_, trace) = short_run(SCENARIOS[which], seed, 15.0);
        let changes = trace.records.iter().filter(|r| r.is_state_change()).count();
        let audits = trace.records.iter().filter(|r| matches!(r, TraceRecord::Audit(_))).count();
        prop_assert_eq!(changes, audits);
        prop_assert!(changes > 0);
    }

    #[test]
    fn verify_is_reproducible(seed in 0u64..1_000, which in 0usize..3) {
        let (_, trace) = short_run(SCENARIOS[which], seed, 8.0);
        let a = serde_json::to_string(&verify_trace(&trace).unwrap()).unwrap();
        let b = serde_json::to_string(&verify_trace(&trace).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn trace_survives_ndjson(seed in 0u64..1_000, which in 0usize..3) {
        let (_, trace) = short_run(SCENARIOS[which], seed, 5.0);
        let text = trace.to_ndjson();
        prop_assert_eq!(TraceLog::parse(&text).unwrap().to_ndjson(), text);
    }
}

proptest! {
    #[test]
    fn replayed_exchanges_never_open_a_session(key in any::<[u8; 16]>(), rounds in 1usize..6, pick in any::<proptest::sample::Index>(), seed in any::<u64>()) {
        let cred = Credential::sim("sub-1", key);
        let mut net = AuthCenter::new();
        net.register(cred.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = Vec::new();
        for _ in 0..rounds {
            let ch = net.challenge("sub-1", &mut rng);
            let proof = device_proof(&cred, &ch);
            prop_assert!(net.verify("dev", "sub-1", &ch, &proof, SimTime::ZERO).is_ok());
            seen.push((ch, proof));
        }
        let (ch, proof) = pick.get(&seen);
        prop_assert!(net.verify("dev", "sub-1", ch, proof, SimTime::ZERO).is_err());
    }

    /// Arbitrary line edits of a valid scenario either fail to load with an error or
    /// load and run; nothing panics.
    #[test]
    fn malformed_scenarios_fail_cleanly(edits in proptest::collection::vec((any::<proptest::sample::Index>(), 0u8..4, "[a-z_ =\\[\\]\"0-9.-]{0,12}"), 1..6)) {
        let base = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/violations/req_f_shared_bottleneck.toml")).unwrap();
        let mut lines: Vec<String> = base.lines().map(String::from).collect();
        for (at, op, junk) in edits {
            if lines.is_empty() {
                break;
            }
            let i = at.index(lines.len());
            match op {
                0 => { lines.remove(i); }
                1 => { let l = lines[i].clone(); lines.insert(i, l); }
                2 => lines[i] = junk,
                _ => lines[i].push_str(&junk),
            }
        }
        if let Ok(mut sc) = Scenario::parse(&lines.join("\n")) {
            if sc.validate().is_ok() {
                sc.duration_s = sc.duration_s.min(2.0);
                let _ = sim::run(&sc);
            }
        }
    }
}

#[test]
fn scenarios_round_trip_through_the_serializer() {
    for rel in SCENARIOS.iter().copied().chain([
        "violations/req_a_bbm_outage.toml",
        "violations/req_b_forced_public_route.toml",
        "violations/req_c_missing_bundle.toml",
        "violations/req_e_tampered_audit.toml",
        "violations/req_f_shared_bottleneck.toml",
    ]) {
        let sc = load(rel);
        assert_eq!(Scenario::parse(&sc.to_toml()).unwrap(), sc, "{rel}");
    }
}
