//! Python bindings: the `icsm` extension module.
//!
//! Structured results (marginals, cohort agents, log records, reports) cross
//! into Python as plain dicts and lists.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::path::PathBuf;

use icsm_core::analysis::{self, BenchmarkSpec, InflationMode, StateShare};
use icsm_core::experiment::{self, RoundRecord};
use icsm_core::population::{self, AgentProfile};
use icsm_core::prompting::{self, PromptTemplate};
use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(icsm, IcsmError, PyValueError);

fn err(e: impl std::fmt::Display) -> PyErr {
    IcsmError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn open(path: &PathBuf) -> PyResult<File> {
    File::open(path).map_err(|e| err(format!("{}: {e}", path.display())))
}

fn pick_round(records: &[RoundRecord], round: Option<u32>) -> PyResult<u32> {
    let rounds: BTreeSet<u32> = records.iter().map(|r| r.round_index).collect();
    match round {
        Some(r) if rounds.contains(&r) => Ok(r),
        Some(r) => Err(err(format!("round {r} is not in the log"))),
        None => rounds.first().copied().ok_or_else(|| err("empty log")),
    }
}

#[pyclass(module = "icsm", frozen)]
struct Scenario {
    inner: prompting::Scenario,
}

#[pymethods]
impl Scenario {
    /// Without `context_sentence` the standard two-candidate sentence is used.
    #[new]
    #[pyo3(signature = (election_name, candidate_dem, candidate_rep, context_sentence=None))]
    fn new(
        election_name: &str,
        candidate_dem: &str,
        candidate_rep: &str,
        context_sentence: Option<&str>,
    ) -> PyResult<Self> {
        let inner = match context_sentence {
            Some(c) => prompting::Scenario::new(election_name, candidate_dem, candidate_rep, c),
            None => prompting::Scenario::two_candidate(election_name, candidate_dem, candidate_rep),
        }
        .map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn election_name(&self) -> &str {
        &self.inner.election_name
    }

    #[getter]
    fn candidate_dem(&self) -> &str {
        &self.inner.candidate_dem
    }

    #[getter]
    fn candidate_rep(&self) -> &str {
        &self.inner.candidate_rep
    }

    #[getter]
    fn context_sentence(&self) -> &str {
        &self.inner.context_sentence
    }
}

#[pyclass(module = "icsm", frozen)]
struct Cohort {
    inner: population::Cohort,
}

#[pymethods]
impl Cohort {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: population::Cohort::from_json(text).map_err(err)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn state(&self) -> &str {
        &self.inner.state
    }

    #[getter]
    fn size(&self) -> usize {
        self.inner.size
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn source_digest(&self) -> &str {
        &self.inner.source_digest
    }

    /// Agents as `{"agent_id", "state", "attributes"}` dicts.
    #[getter]
    fn agents<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.agents)
    }

    /// `(category, count)` pairs of one variable.
    fn category_counts(&self, variable: &str) -> PyResult<Vec<(String, usize)>> {
        self.inner.category_counts(variable).ok_or_else(|| err(format!("cohort has no variable {variable:?}")))
    }

    fn __len__(&self) -> usize {
        self.inner.agents.len()
    }
}

#[pyfunction]
fn apportion(proportions: Vec<f64>, n: usize) -> PyResult<Vec<usize>> {
    population::apportion(&proportions, n).map_err(err)
}

/// Renormalized marginals of a census CSV as a list of dicts.
#[pyfunction]
fn load_marginals<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let marginals =
        population::load_marginals(open(&path)?, None).map_err(|e| err(format!("{}: {e}", path.display())))?;
    to_py(py, &marginals)
}

#[pyfunction]
fn synthesize_cohort(census: PathBuf, state: &str, n: usize, seed: u64) -> PyResult<Cohort> {
    let marginals =
        population::load_marginals(open(&census)?, None).map_err(|e| err(format!("{}: {e}", census.display())))?;
    let mine: Vec<_> = marginals.into_iter().filter(|m| m.state == state).collect();
    if mine.is_empty() {
        return Err(err(format!("{}: no rows for state {state}", census.display())));
    }
    let inner = population::synthesize_cohort(&mine, n, seed).map_err(err)?;
    Ok(Cohort { inner })
}

/// With `variables`, profile lines of any other variable are masked out.
#[pyfunction]
#[pyo3(signature = (template, state, attributes, scenario, variables=None, agent_id=0))]
fn render_prompt(
    template: &str,
    state: &str,
    attributes: BTreeMap<String, String>,
    scenario: &Scenario,
    variables: Option<Vec<String>>,
    agent_id: u64,
) -> PyResult<String> {
    let mut template = PromptTemplate::parse(template).map_err(err)?;
    if let Some(enabled) = variables {
        template = template.restricted_to(&enabled).map_err(err)?;
    }
    let profile = AgentProfile { agent_id, state: state.to_string(), attributes };
    prompting::render_prompt(&profile, &scenario.inner, &template).map_err(err)
}

/// `{"p_dem", "p_rep", "p_other", "reason"}` or `IcsmError`.
#[pyfunction]
fn parse_response<'py>(py: Python<'py>, raw: &str, scenario: &Scenario) -> PyResult<Bound<'py, PyAny>> {
    let response = prompting::parse_response(raw, &scenario.inner).map_err(err)?;
    to_py(py, &response)
}

#[pyfunction]
fn first_sentence(reason: &str) -> &str {
    prompting::first_sentence(reason)
}

#[pyfunction]
fn cramers_v(counts: Vec<Vec<u64>>) -> PyResult<f64> {
    let table = analysis::ContingencyTable::from_counts(counts).map_err(err)?;
    analysis::cramers_v(&table).map_err(err)
}

#[pyfunction]
fn margin_of_error(simulated_dem_norm: f64, actual_dem_norm: f64) -> f64 {
    analysis::margin_of_error(simulated_dem_norm, actual_dem_norm)
}

/// `"correct"`, `"incorrect"` or `"no_call"`.
#[pyfunction]
fn winner_call(simulated_dem_norm: f64, actual_dem_norm: f64) -> &'static str {
    analysis::winner_call(simulated_dem_norm, actual_dem_norm).as_str()
}

#[pyfunction]
fn reliability<'py>(py: Python<'py>, state: &str, per_round: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &analysis::reliability(state, &per_round).map_err(err)?)
}

#[pyfunction]
fn read_log<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &experiment::read_log(&path).map_err(err)?)
}

/// Per-state shares of one round (default: the first) of a run log.
#[pyfunction]
#[pyo3(signature = (log, round=None))]
fn shares<'py>(py: Python<'py>, log: PathBuf, round: Option<u32>) -> PyResult<Bound<'py, PyAny>> {
    let records = experiment::read_log(&log).map_err(err)?;
    let round = pick_round(&records, round)?;
    to_py(py, &analysis::shares_for_round(&records, round).map_err(err)?)
}

#[pyfunction]
#[pyo3(signature = (log, benchmark, inflation=analysis::DEFAULT_INFLATION, per_state=false, round=None))]
fn validity<'py>(
    py: Python<'py>,
    log: PathBuf,
    benchmark: PathBuf,
    inflation: f64,
    per_state: bool,
    round: Option<u32>,
) -> PyResult<Bound<'py, PyAny>> {
    let mode = if per_state { InflationMode::PerState } else { InflationMode::Range };
    let spec = BenchmarkSpec::from_csv(open(&benchmark)?, inflation, mode)
        .map_err(|e| err(format!("{}: {e}", benchmark.display())))?;
    let records = experiment::read_log(&log).map_err(err)?;
    let round = pick_round(&records, round)?;
    let shares: Vec<StateShare> = analysis::shares_for_round(&records, round).map_err(err)?.into_values().collect();
    to_py(py, &analysis::validity(&shares, &spec).map_err(err)?)
}

#[pyfunction]
#[pyo3(signature = (log, term, round=None))]
fn explanatory_weight<'py>(
    py: Python<'py>,
    log: PathBuf,
    term: &str,
    round: Option<u32>,
) -> PyResult<Bound<'py, PyAny>> {
    let records = experiment::read_log(&log).map_err(err)?;
    let selected = records.iter().filter(|r| round.is_none_or(|want| r.round_index == want));
    to_py(py, &analysis::explanatory_weight(selected, term).map_err(err)?)
}

#[pymodule]
fn icsm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("IcsmError", m.py().get_type::<IcsmError>())?;
    m.add_class::<Scenario>()?;
    m.add_class::<Cohort>()?;
    m.add_function(wrap_pyfunction!(apportion, m)?)?;
    m.add_function(wrap_pyfunction!(load_marginals, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize_cohort, m)?)?;
    m.add_function(wrap_pyfunction!(render_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(parse_response, m)?)?;
    m.add_function(wrap_pyfunction!(first_sentence, m)?)?;
    m.add_function(wrap_pyfunction!(cramers_v, m)?)?;
    m.add_function(wrap_pyfunction!(margin_of_error, m)?)?;
    m.add_function(wrap_pyfunction!(winner_call, m)?)?;
    m.add_function(wrap_pyfunction!(reliability, m)?)?;
    m.add_function(wrap_pyfunction!(read_log, m)?)?;
    m.add_function(wrap_pyfunction!(shares, m)?)?;
    m.add_function(wrap_pyfunction!(validity, m)?)?;
    m.add_function(wrap_pyfunction!(explanatory_weight, m)?)?;
    Ok(())
}
