//! Python bindings. Structured values cross the boundary as plain dicts and
//! lists, converted through the `json` module.

use std::collections::BTreeMap;

use cloudsched::matcher;
use cloudsched::model::{Cluster, Job};
use cloudsched::scheduler::{fair_share_targets as targets, UserDemand};
use cloudsched::sim::{run_scenario as run, Scenario};
use cloudsched::submit;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(value: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = value.py().import("json")?.call_method1("dumps", (value,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Parses submit text into `{"standard_attrs", "vm_attrs", "queue_count"}`.
#[pyfunction]
fn parse_submit<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    let d = submit::parse_submit(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
    to_py(py, &d)
}

/// Expands submit text into job dicts with ids starting at `id_seed`.
#[pyfunction]
#[pyo3(signature = (text, user, id_seed = 1))]
fn jobs_from_submit<'py>(py: Python<'py>, text: &str, user: &str, id_seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let jobs = submit::parse_submit(text)
        .and_then(|d| submit::descriptor_to_jobs(&d, user, id_seed))
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    to_py(py, &jobs)
}

/// `demands` is a list of `(user, demand, earliest_submit_ms)`.
#[pyfunction]
fn fair_share_targets(demands: Vec<(String, u32, u64)>, capacity: u32) -> BTreeMap<String, u32> {
    let users: Vec<UserDemand> =
        demands.into_iter().map(|(user, demand, earliest)| UserDemand { user, demand, earliest }).collect();
    targets(&users, capacity)
}

/// Whether a job dict fits a cluster dict, both in their JSON shapes.
#[pyfunction]
fn fits(job: &Bound<'_, PyAny>, cluster: &Bound<'_, PyAny>) -> PyResult<bool> {
    let job: Job = from_py(job)?;
    let cluster: Cluster = from_py(cluster)?;
    Ok(matcher::fits(&job, &cluster))
}

/// Runs a scenario file and returns its metrics dict.
#[pyfunction]
fn run_scenario<'py>(py: Python<'py>, path: &str) -> PyResult<Bound<'py, PyAny>> {
    let scenario = Scenario::from_file(std::path::Path::new(path)).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let result = py.detach(|| run(&scenario)).map_err(|e| PyValueError::new_err(e.to_string()))?;
    to_py(py, &result.metrics)
}

#[pymodule]
fn cloudsched_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(parse_submit, m)?)?;
    m.add_function(wrap_pyfunction!(jobs_from_submit, m)?)?;
    m.add_function(wrap_pyfunction!(fair_share_targets, m)?)?;
    m.add_function(wrap_pyfunction!(fits, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    Ok(())
}
