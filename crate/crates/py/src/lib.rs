//! Python bindings: load and run scenarios, verify traces and audit exports, and call
//! the localization and routing primitives directly.

use std::collections::BTreeSet;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use flexicell::flowrouting::{compute_path, EdgeSpec, Isolation, RNode, RoutingGraph, Slice, SliceLedger};
use flexicell::geometry::Point2;
use flexicell::kernel::SimTime;
use flexicell::linkmodel::Technology;
use flexicell::localization::{self, PositionEstimate, RangeMeasurement};
use flexicell::scenario;
use flexicell::security::verify_export;
use flexicell::sim;
use flexicell::topology::{Flow, TrafficClass};
use flexicell::trace::TraceLog;
use flexicell::verify;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Scenario", module = "flexicell", skip_from_py_object)]
#[derive(Clone)]
struct PyScenario {
    inner: scenario::Scenario,
}

#[pymethods]
impl PyScenario {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = scenario::Scenario::load(std::path::Path::new(path)).map_err(value_err)?;
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        let inner = scenario::Scenario::parse(text).map_err(value_err)?;
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn duration_s(&self) -> f64 {
        self.inner.duration_s
    }

    #[setter]
    fn set_duration_s(&mut self, d: f64) -> PyResult<()> {
        if !(d > 0.0) {
            return Err(PyValueError::new_err("duration must be positive"));
        }
        self.inner.duration_s = d;
        Ok(())
    }

    #[getter]
    fn device_ids(&self) -> Vec<String> {
        self.inner.devices.iter().map(|d| d.id.clone()).collect()
    }

    #[getter]
    fn cell_ids(&self) -> Vec<String> {
        self.inner.cells.iter().map(|c| c.id.clone()).collect()
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    /// Run the scenario; the GIL is released while the kernel runs.
    fn run(&self, py: Python<'_>) -> PyResult<RunResult> {
        let sc = self.inner.clone();
        let out = py.detach(move || sim::run(&sc)).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(RunResult { out })
    }

    fn __repr__(&self) -> String {
        format!(
            "Scenario(name={:?}, seed={}, duration_s={}, cells={}, devices={})",
            self.inner.name,
            self.inner.seed,
            self.inner.duration_s,
            self.inner.cells.len(),
            self.inner.devices.len()
        )
    }
}

#[pyclass(module = "flexicell")]
struct RunResult {
    out: sim::RunOutput,
}

#[pymethods]
impl RunResult {
    fn trace_ndjson(&self) -> String {
        self.out.trace.to_ndjson()
    }

    fn metrics_ndjson(&self) -> String {
        self.out.metrics.to_ndjson()
    }

    fn summary(&self) -> String {
        self.out.metrics.summary_table()
    }

    fn audit_text(&self) -> String {
        self.out.audit.export_text()
    }

    fn audit_binary<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.out.audit.export_binary())
    }

    #[getter]
    fn events_processed(&self) -> u64 {
        self.out.metrics.plant.events_processed
    }

    #[getter]
    fn record_count(&self) -> usize {
        self.out.trace.records.len()
    }

    /// Requirement report as a JSON string.
    fn verify(&self) -> PyResult<String> {
        let rep = verify::verify_trace(&self.out.trace).map_err(value_err)?;
        serde_json::to_string(&rep).map_err(value_err)
    }
}

/// Verify an NDJSON trace; returns (passed, report JSON).
#[pyfunction]
fn verify_trace(ndjson: &str) -> PyResult<(bool, String)> {
    let trace = TraceLog::parse(ndjson).map_err(value_err)?;
    let rep = verify::verify_trace(&trace).map_err(value_err)?;
    Ok((rep.passed(), serde_json::to_string(&rep).map_err(value_err)?))
}

/// Check an audit export (text or binary). Returns the record count, or raises with the
/// first broken record index (None for a bad header).
#[pyfunction]
fn verify_audit(data: &[u8]) -> PyResult<usize> {
    verify_export(data).map_err(|idx| match idx {
        Some(i) => PyValueError::new_err(format!("audit broken at record {i}")),
        None => PyValueError::new_err("audit header invalid"),
    })
}

/// Weighted least-squares fix from `(anchor_x, anchor_y, range_m)` triples with a
/// common ranging sigma. Returns (x, y, covariance 2x2).
#[pyfunction]
fn trilaterate(ranges: Vec<(f64, f64, f64)>, sigma_m: f64) -> PyResult<(f64, f64, [[f64; 2]; 2])> {
    let ms: Vec<RangeMeasurement> = ranges
        .iter()
        .enumerate()
        .map(|(i, &(x, y, r))| RangeMeasurement {
            anchor: format!("anchor-{i}"),
            anchor_position: Point2::new(x, y),
            device: "device".into(),
            range_m: r,
            sigma_m,
            technology: Technology::NrUrllc,
            timestamp: SimTime::ZERO,
        })
        .collect();
    let e = localization::trilaterate(&ms).map_err(value_err)?;
    Ok((e.mean.x, e.mean.y, e.covariance))
}

/// Inverse-covariance fusion of `((x, y), cov)` estimates taken at the same instant.
#[pyfunction]
fn fuse(estimates: Vec<((f64, f64), [[f64; 2]; 2])>) -> PyResult<(f64, f64, [[f64; 2]; 2])> {
    let es: Vec<PositionEstimate> = estimates
        .into_iter()
        .map(|((x, y), c)| PositionEstimate { mean: Point2::new(x, y), covariance: c, timestamp: SimTime::ZERO, sources: BTreeSet::new() })
        .collect();
    let f = localization::fuse(&es, SimTime::ZERO).map_err(value_err)?;
    Ok((f.mean.x, f.mean.y, f.covariance))
}

/// Minimum-latency path over `(a, b, latency_ms, reliability, capacity_mbps)` edges.
/// `off_premise` nodes are avoided when `sensitive`. Returns (nodes, latency_ms) or
/// raises with the infeasibility reason.
#[pyfunction]
#[pyo3(signature = (edges, source, sink, demand_mbps, max_latency_ms, min_reliability, sensitive=false, off_premise=Vec::new()))]
#[allow(clippy::too_many_arguments)]
fn shortest_path(
    edges: Vec<(String, String, f64, f64, f64)>,
    source: &str,
    sink: &str,
    demand_mbps: f64,
    max_latency_ms: f64,
    min_reliability: f64,
    sensitive: bool,
    off_premise: Vec<String>,
) -> PyResult<(Vec<String>, f64)> {
    let off: BTreeSet<String> = off_premise.into_iter().collect();
    let mut ids: BTreeSet<String> = BTreeSet::new();
    for (a, b, ..) in &edges {
        ids.insert(a.clone());
        ids.insert(b.clone());
    }
    let nodes = ids
        .into_iter()
        .map(|id| RNode { on_premise: !off.contains(&id), id, transit: true, device: false })
        .collect();
    let specs = edges
        .into_iter()
        .map(|(a, b, latency_ms, reliability, capacity_mbps)| EdgeSpec { a, b, technology: Technology::Eth, latency_ms, reliability, capacity_mbps })
        .collect();
    let g = RoutingGraph::new(nodes, specs);
    let slice = Slice {
        id: "default".into(),
        members: vec![],
        include_infrastructure: true,
        share: 1.0,
        reserved_mbps: Default::default(),
        isolation: Isolation::Logical,
        allow_off_premise: false,
    };
    let ledger = SliceLedger::new(&[slice]).map_err(value_err)?;
    let flow = Flow {
        id: "query".into(),
        source: source.into(),
        sink: sink.into(),
        demand_mbps,
        max_latency_ms,
        min_reliability,
        slice: "default".into(),
        sensitive,
        traffic_class: TrafficClass::Embb,
        start_s: 0.0,
        interval_ms: 100.0,
    };
    let p = compute_path(&flow, &g, &ledger).map_err(value_err)?;
    Ok((p.nodes, p.latency_ms))
}

#[pymodule]
fn flexicell_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<RunResult>()?;
    m.add_function(wrap_pyfunction!(verify_trace, m)?)?;
    m.add_function(wrap_pyfunction!(verify_audit, m)?)?;
    m.add_function(wrap_pyfunction!(trilaterate, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(shortest_path, m)?)?;
    Ok(())
}
