// Python bindings for the gpssim parallel GPSS simulator.
//
// Exposes model parsing/rendering, deterministic parallel simulation runs
// and the sequential reference run:
// - parse_model(text) -> Model
// - run_simulation(text, **settings) -> dict report
// - run_sequential(text, seed=0, default_tc=None) -> dict outcome

use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use gpssim::config::Config;
use gpssim::logging::Log;
use gpssim::model;
use gpssim::report::ReportSet;
use gpssim::runner::{run_deterministic, RunOptions};

/// A parsed and validated GPSS model.
#[pyclass]
struct Model {
    inner: model::ModelSpec,
}

#[pymethods]
impl Model {
    /// Number of partitions in the model.
    #[getter]
    fn partition_count(&self) -> usize {
        self.inner.partitions.len()
    }

    /// Partition names in model order.
    #[getter]
    fn partition_names(&self) -> Vec<String> {
        self.inner.partitions.iter().map(|p| p.name.clone()).collect()
    }

    /// Textual model dump in the ParseModelOnly layout.
    fn render(&self) -> String {
        self.inner.render()
    }

    /// The model as canonical model-file text.
    fn to_model_text(&self) -> String {
        self.inner.to_model_text()
    }

    fn __repr__(&self) -> String {
        format!("Model(partitions={})", self.inner.partitions.len())
    }
}

#[pyfunction]
fn parse_model(text: &str) -> PyResult<Model> {
    match model::parse_model(text) {
        Ok(inner) => Ok(Model { inner }),
        Err(e) => Err(PyValueError::new_err(e.to_string())),
    }
}

fn report_to_dict<'py>(py: Python<'py>, report: &ReportSet) -> PyResult<Bound<'py, PyDict>> {
    let dict = PyDict::new(py);
    dict.set_item("end_time", report.end_time)?;
    dict.set_item("end_transaction_id", report.end_xact.id)?;
    dict.set_item("end_transaction", report.end_xact.to_string())?;
    dict.set_item("performance", report.performance)?;

    let blocks = PyList::empty(py);
    for p in &report.partitions {
        for b in &p.blocks {
            let row = PyDict::new(py);
            row.set_item("partition", b.reference.partition_no)?;
            row.set_item("block", b.reference.block_no)?;
            row.set_item("current", b.current)?;
            row.set_item("total", b.total)?;
            row.set_item("text", &b.text)?;
            blocks.append(row)?;
        }
    }
    dict.set_item("blocks", blocks)?;

    let queues = PyList::empty(py);
    for q in &report.queues {
        let row = PyDict::new(py);
        row.set_item("name", &q.name)?;
        row.set_item("max_content", q.max_content)?;
        row.set_item("average_content", q.average_content)?;
        row.set_item("entries", q.entries)?;
        row.set_item("zero_entries", q.zero_entries)?;
        row.set_item("average_time_per_unit", q.average_time_per_unit)?;
        queues.append(row)?;
    }
    dict.set_item("queues", queues)?;

    let storages = PyList::empty(py);
    for s in &report.storages {
        let row = PyDict::new(py);
        row.set_item("name", &s.name)?;
        row.set_item("average_usage", s.average_usage)?;
        row.set_item("entries", s.entries)?;
        row.set_item("average_time_per_unit", s.average_time_per_unit)?;
        storages.append(row)?;
    }
    dict.set_item("storages", storages)?;

    let stats = PyList::empty(py);
    for (lp, st) in &report.lp_stats {
        let row = PyDict::new(py);
        row.set_item("lp", lp)?;
        row.set_item("committed_moves", st.committed_moves)?;
        row.set_item("moves_rolled_back", st.moves_rolled_back)?;
        row.set_item("simulated_moves", st.simulated_moves)?;
        row.set_item("xacts_sent", st.xacts_sent)?;
        row.set_item("anti_xacts_sent", st.anti_xacts_sent)?;
        row.set_item("xacts_received", st.xacts_received)?;
        row.set_item("anti_xacts_received", st.anti_xacts_received)?;
        stats.append(row)?;
    }
    dict.set_item("lp_stats", stats)?;
    Ok(dict)
}

/// Runs the parallel simulation on the deterministic harness and returns
/// the combined post-simulation report as a dictionary.
#[pyfunction]
#[pyo3(signature = (text, seed=0, default_tc=None, lpcc_enabled=true, harness_seed=0))]
fn run_simulation<'py>(
    py: Python<'py>,
    text: &str,
    seed: u64,
    default_tc: Option<i64>,
    lpcc_enabled: bool,
    harness_seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let mut spec = model::parse_model(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let unresolved = spec.resolve_termination_counters(default_tc);
    if !unresolved.is_empty() {
        return Err(PyValueError::new_err(format!(
            "no termination counter for partition(s) {}",
            unresolved.join(", ")
        )));
    }
    let config = Config {
        rng_seed: seed,
        lpcc_enabled,
        ..Config::default()
    };
    let opts = RunOptions {
        harness_seed,
        ..RunOptions::default()
    };
    let (_, report) = run_deterministic(Arc::new(spec), &config, Log::off(), &opts, None)
        .map_err(PyRuntimeError::new_err)?;
    report_to_dict(py, &report)
}

/// Runs the merged sequential reference simulation.
#[pyfunction]
#[pyo3(signature = (text, seed=0, default_tc=None, max_ticks=10_000_000))]
fn run_sequential<'py>(
    py: Python<'py>,
    text: &str,
    seed: u64,
    default_tc: Option<i64>,
    max_ticks: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let mut spec = model::parse_model(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let unresolved = spec.resolve_termination_counters(default_tc);
    if !unresolved.is_empty() {
        return Err(PyValueError::new_err(format!(
            "no termination counter for partition(s) {}",
            unresolved.join(", ")
        )));
    }
    let outcome =
        gpssim::sequential::run_sequential(Arc::new(spec), seed, None, Log::off(), max_ticks)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let dict = PyDict::new(py);
    dict.set_item("end_time", outcome.end_time)?;
    dict.set_item("end_transaction_id", outcome.end_xact.id)?;
    dict.set_item("end_transaction", outcome.end_xact.to_string())?;
    dict.set_item("total_moves", outcome.total_moves)?;
    let blocks = PyList::empty(py);
    for (r, current, total) in &outcome.block_totals {
        let row = PyDict::new(py);
        row.set_item("partition", r.partition_no)?;
        row.set_item("block", r.block_no)?;
        row.set_item("current", current)?;
        row.set_item("total", total)?;
        blocks.append(row)?;
    }
    dict.set_item("blocks", blocks)?;
    Ok(dict)
}

#[pymodule]
fn gpssim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(parse_model, m)?)?;
    m.add_function(wrap_pyfunction!(run_simulation, m)?)?;
    m.add_function(wrap_pyfunction!(run_sequential, m)?)?;
    Ok(())
}
