//! Multi-round experiment orchestration over an append-only JSONL log.
//!
//! Every agent of every configured state is queried once per round. Queries
//! run in parallel up to `max_in_flight`, but records are released to the
//! log in job order, so a mock-backed run always produces the same log (up
//! to timestamps) however the threads are scheduled. A run interrupted by a
//! backend failure keeps its contiguous prefix and can be resumed.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{prompt_digest, Backend, BackendConfig, BackendError, QueryRecord, QueryRequest, ResponseCache};
use crate::digest::sha256_hex;
use crate::population::{CategoricalVariable, Cohort, PopulationError};
use crate::prompting::{parse_response, render_prompt, PromptError, PromptTemplate, Scenario, VoteResponse};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("corrupt run log at line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
    #[error("run log {0} already has records; resume it or choose another path")]
    LogExists(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Population(#[from] PopulationError),
    #[error("{error} ({summary})")]
    Backend { error: BackendError, summary: RunSummary },
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

/// Experiment definition, read from a TOML file whose keys match the field
/// names. Relative paths are resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub states: Vec<String>,
    /// Directory holding one cohort file per state.
    pub cohorts: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub census: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cohort_size: Option<usize>,
    /// Declared variables and their category order, used when synthesizing.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub variables: Vec<CategoricalVariable>,
    pub variables_enabled: Vec<String>,
    pub scenario: Scenario,
    pub template: PathBuf,
    pub rounds: u32,
    pub root_seed: u64,
    pub backend: BackendConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    /// Reads a config file and anchors its relative paths at the file's directory.
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_error(path))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let anchor = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        anchor(&mut config.cohorts);
        anchor(&mut config.template);
        if let Some(census) = config.census.as_mut() {
            anchor(census);
        }
        if let Some(fixtures) = config.backend.fixtures.as_mut() {
            anchor(fixtures);
        }
        if let Some(cache) = config.backend.cache_dir.as_mut() {
            anchor(cache);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |msg: String| Err(ExperimentError::Config(msg));
        if self.experiment_id.is_empty() {
            return bad("experiment_id must be set".into());
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.states.is_empty() {
            return bad("at least one state is required".into());
        }
        let unique: HashSet<&String> = self.states.iter().collect();
        if unique.len() != self.states.len() {
            return bad("states listed twice".into());
        }
        if !self.variables.is_empty() {
            for name in &self.variables_enabled {
                if !self.variables.iter().any(|v| &v.name == name) {
                    return bad(format!("enabled variable {name:?} is not declared"));
                }
            }
        }
        self.scenario.validate()?;
        self.backend.validate().map_err(|e| ExperimentError::Config(e.to_string()))
    }

    /// Digest of the canonical JSON form of the config.
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_vec(self).expect("config serializes"))
    }
}

/// File name of a state's cohort inside the cohort directory.
pub fn cohort_file_name(state: &str) -> String {
    let slug: String =
        state.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect();
    format!("{slug}.json")
}

/// Loads the cohort of every listed state from `dir`.
pub fn load_cohorts(dir: &Path, states: &[String]) -> Result<Vec<Cohort>, ExperimentError> {
    states
        .iter()
        .map(|state| {
            let path = dir.join(cohort_file_name(state));
            let text = fs::read_to_string(&path).map_err(io_error(&path))?;
            let cohort = Cohort::from_json(&text)?;
            if &cohort.state != state {
                return Err(ExperimentError::Config(format!(
                    "{} holds the cohort of {}, expected {state}",
                    path.display(),
                    cohort.state
                )));
            }
            Ok(cohort)
        })
        .collect()
}

/// One agent's answer in one round, as persisted in the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub experiment_id: String,
    pub round_index: u32,
    pub agent_id: u64,
    pub state: String,
    /// The agent's full identity, including variables masked from the prompt.
    pub attributes: BTreeMap<String, String>,
    pub raw_text: String,
    pub parsed: Option<VoteResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
    pub prompt_digest: String,
    pub model_id: String,
    pub timestamp: String,
}

/// Uniqueness key of a record. Agent ids restart at zero in every state's
/// cohort, so the state is part of the key.
pub type RecordKey = (String, u32, String, u64);

impl RoundRecord {
    pub fn key(&self) -> RecordKey {
        (self.experiment_id.clone(), self.round_index, self.state.clone(), self.agent_id)
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    /// The record with its timestamp blanked, for content comparison.
    pub fn without_timestamp(&self) -> RoundRecord {
        RoundRecord { timestamp: String::new(), ..self.clone() }
    }
}

/// Reads and checks a run log: every line must parse and keys must be unique.
pub fn read_log(path: &Path) -> Result<Vec<RoundRecord>, ExperimentError> {
    let file = File::open(path).map_err(io_error(path))?;
    let mut records = Vec::new();
    let mut keys = HashSet::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line_no = index + 1;
        let line = line.map_err(io_error(path))?;
        if line.trim().is_empty() {
            return Err(ExperimentError::CorruptLog { line: line_no, reason: "blank line".into() });
        }
        let record: RoundRecord = serde_json::from_str(&line)
            .map_err(|e| ExperimentError::CorruptLog { line: line_no, reason: e.to_string() })?;
        if record.parsed.is_some() == record.parse_error.is_some() {
            return Err(ExperimentError::CorruptLog {
                line: line_no,
                reason: "exactly one of parsed and parse_error must be present".into(),
            });
        }
        if !keys.insert(record.key()) {
            return Err(ExperimentError::CorruptLog {
                line: line_no,
                reason: format!(
                    "duplicate record for round {} agent {} in {}",
                    record.round_index, record.agent_id, record.state
                ),
            });
        }
        records.push(record);
    }
    Ok(records)
}

/// Digest of a log's content with timestamps excluded and records in key order.
pub fn log_content_digest(records: &[RoundRecord]) -> String {
    let mut lines: Vec<(RecordKey, String)> =
        records.iter().map(|r| (r.key(), r.without_timestamp().to_line())).collect();
    lines.sort();
    let joined: Vec<String> = lines.into_iter().map(|(_, line)| line).collect();
    sha256_hex(joined.join("\n"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogMode {
    /// Refuse to touch a log that already has records.
    Fresh,
    /// Skip keys already present and append the rest.
    Resume,
}

/// Completion accounting for one invocation:
/// `attempted = persisted + aborted_remainder`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub already_present: usize,
    pub attempted: usize,
    pub persisted: usize,
    pub aborted_remainder: usize,
    pub parse_failures: usize,
    pub cache_hits: usize,
}

impl std::fmt::Display for RunSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "attempted {}, persisted {}, aborted {}, parse failures {}, already present {}, cache hits {}",
            self.attempted,
            self.persisted,
            self.aborted_remainder,
            self.parse_failures,
            self.already_present,
            self.cache_hits
        )
    }
}

struct Job {
    round_index: u32,
    cohort: usize,
    agent: usize,
    prompt: String,
}

/// Everything a run needs besides the config.
pub struct ExperimentInputs<'a> {
    pub cohorts: &'a [Cohort],
    pub template: &'a PromptTemplate,
    pub backend: &'a Backend,
    pub cache: Option<&'a ResponseCache>,
}

fn check_inputs(config: &ExperimentConfig, inputs: &ExperimentInputs<'_>) -> Result<PromptTemplate, ExperimentError> {
    config.validate()?;
    if inputs.cohorts.len() != config.states.len()
        || inputs.cohorts.iter().zip(&config.states).any(|(c, s)| &c.state != s)
    {
        return Err(ExperimentError::Config("cohorts do not match the configured states".into()));
    }
    for cohort in inputs.cohorts {
        for name in &config.variables_enabled {
            if cohort.variable(name).is_none() {
                return Err(ExperimentError::Config(format!("cohort of {} has no variable {name:?}", cohort.state)));
            }
        }
    }
    let template = inputs.template.restricted_to(&config.variables_enabled)?;
    template.check_covers(&config.variables_enabled)?;
    Ok(template)
}

fn build_jobs(
    config: &ExperimentConfig,
    cohorts: &[Cohort],
    template: &PromptTemplate,
    done: &HashSet<RecordKey>,
) -> Result<(Vec<Job>, usize), ExperimentError> {
    let mut prompts: Vec<Vec<String>> = Vec::with_capacity(cohorts.len());
    for cohort in cohorts {
        let rendered = cohort
            .agents
            .iter()
            .map(|agent| render_prompt(&agent.restricted_to(&config.variables_enabled), &config.scenario, template))
            .collect::<Result<Vec<_>, _>>()?;
        prompts.push(rendered);
    }
    let mut jobs = Vec::new();
    let mut skipped = 0;
    for round_index in 0..config.rounds {
        for (c, cohort) in cohorts.iter().enumerate() {
            for (a, agent) in cohort.agents.iter().enumerate() {
                let key = (config.experiment_id.clone(), round_index, cohort.state.clone(), agent.agent_id);
                if done.contains(&key) {
                    skipped += 1;
                    continue;
                }
                jobs.push(Job { round_index, cohort: c, agent: a, prompt: prompts[c][a].clone() });
            }
        }
    }
    Ok((jobs, skipped))
}

fn query_with_cache(
    backend: &Backend,
    cache: Option<&ResponseCache>,
    request: &QueryRequest<'_>,
) -> Result<(QueryRecord, bool), BackendError> {
    let query_id = format!("{}/{}/{}", request.round_index, request.profile.state, request.profile.agent_id);
    if let Some(cache) = cache {
        if let Some(hit) = cache.lookup(&prompt_digest(request.prompt), backend.model_id(), &query_id)? {
            return Ok((hit, true));
        }
    }
    let record = backend.query(request)?;
    if let Some(cache) = cache {
        cache.store(&query_id, &record)?;
    }
    Ok((record, false))
}

/// Runs (or resumes) an experiment, appending records to `log_path`.
pub fn run_experiment(
    config: &ExperimentConfig,
    inputs: &ExperimentInputs<'_>,
    log_path: &Path,
    mode: LogMode,
) -> Result<RunSummary, ExperimentError> {
    let template = check_inputs(config, inputs)?;

    let existing = if log_path.exists() { read_log(log_path)? } else { Vec::new() };
    if mode == LogMode::Fresh && !existing.is_empty() {
        return Err(ExperimentError::LogExists(log_path.to_path_buf()));
    }
    for (index, record) in existing.iter().enumerate() {
        let known_state = inputs.cohorts.iter().find(|c| c.state == record.state);
        let fits = record.experiment_id == config.experiment_id
            && record.round_index < config.rounds
            && known_state.is_some_and(|c| (record.agent_id as usize) < c.size);
        if !fits {
            return Err(ExperimentError::CorruptLog {
                line: index + 1,
                reason: "record does not belong to this experiment".into(),
            });
        }
    }
    let done: HashSet<RecordKey> = existing.iter().map(RoundRecord::key).collect();
    let (jobs, skipped) = build_jobs(config, inputs.cohorts, &template, &done)?;

    let mut summary = RunSummary { already_present: skipped, attempted: jobs.len(), ..Default::default() };
    if jobs.is_empty() {
        info!("run log already complete ({skipped} records)");
        return Ok(summary);
    }

    if let Some(parent) = log_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_error(parent))?;
    }
    let mut log = OpenOptions::new().create(true).append(true).open(log_path).map_err(io_error(log_path))?;

    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let workers = config.backend.max_in_flight.min(jobs.len()).max(1);
    let (tx, rx) = mpsc::channel::<(usize, Result<(QueryRecord, bool), BackendError>)>();
    let progress_step = (jobs.len() / 10).max(1);

    let outcome: Result<(), ExperimentError> = thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (jobs, next, abort) = (&jobs, &next, &abort);
            scope.spawn(move || loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let index = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(index) else { break };
                let agent = &inputs.cohorts[job.cohort].agents[job.agent];
                let masked = agent.restricted_to(&config.variables_enabled);
                let request = QueryRequest { prompt: &job.prompt, profile: &masked, round_index: job.round_index };
                let result = query_with_cache(inputs.backend, inputs.cache, &request);
                if result.is_err() {
                    abort.store(true, Ordering::SeqCst);
                }
                if tx.send((index, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        // Release records strictly in job order; stop at the first failure.
        let mut pending: BTreeMap<usize, Result<(QueryRecord, bool), BackendError>> = BTreeMap::new();
        let mut next_to_write = 0usize;
        let mut failure: Option<BackendError> = None;
        for (index, result) in rx {
            pending.insert(index, result);
            while failure.is_none() {
                let Some(result) = pending.remove(&next_to_write) else { break };
                match result {
                    Ok((query, hit)) => {
                        let job = &jobs[next_to_write];
                        let record = to_round_record(config, inputs.cohorts, job, query);
                        if record.parsed.is_none() {
                            summary.parse_failures += 1;
                        }
                        summary.cache_hits += usize::from(hit);
                        let mut line = record.to_line();
                        line.push('\n');
                        log.write_all(line.as_bytes()).map_err(io_error(log_path))?;
                        summary.persisted += 1;
                        next_to_write += 1;
                        if next_to_write.is_multiple_of(progress_step) || next_to_write == jobs.len() {
                            info!("{next_to_write}/{} queries persisted", jobs.len());
                        }
                    }
                    Err(error) => {
                        abort.store(true, Ordering::SeqCst);
                        failure = Some(error);
                    }
                }
            }
        }
        log.flush().map_err(io_error(log_path))?;
        summary.aborted_remainder = summary.attempted - summary.persisted;
        match failure {
            Some(error) => {
                warn!("backend failure after {} records: {error}", summary.persisted);
                Err(ExperimentError::Backend { error, summary })
            }
            None => Ok(()),
        }
    });
    log.sync_all().map_err(io_error(log_path))?;
    outcome?;
    Ok(summary)
}

fn to_round_record(config: &ExperimentConfig, cohorts: &[Cohort], job: &Job, query: QueryRecord) -> RoundRecord {
    let cohort = &cohorts[job.cohort];
    let agent = &cohort.agents[job.agent];
    let (parsed, parse_error) = match parse_response(&query.raw_text, &config.scenario) {
        Ok(response) => (Some(response), None),
        Err(error) => (None, Some(error.to_string())),
    };
    RoundRecord {
        experiment_id: config.experiment_id.clone(),
        round_index: job.round_index,
        agent_id: agent.agent_id,
        state: cohort.state.clone(),
        attributes: agent.attributes.clone(),
        raw_text: query.raw_text,
        parsed,
        parse_error,
        prompt_digest: query.prompt_digest,
        model_id: query.model_id,
        timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cohort_file_names_are_slugs() {
        assert_eq!(cohort_file_name("New York"), "new_york.json");
        assert_eq!(cohort_file_name("Texas"), "texas.json");
    }

    #[test]
    fn config_parses_and_validates() {
        let text = r#"
experiment_id = "x"
states = ["Texas"]
cohorts = "cohorts"
variables_enabled = ["race"]
template = "t.txt"
rounds = 0
root_seed = 1

[scenario]
election_name = "2020 presidential election"
candidate_dem = "Joe Biden"
candidate_rep = "Donald Trump"
context_sentence = "Joe Biden vs Donald Trump."

[backend]
kind = "parametric_mock"
model_id = "mock"
[backend.parametric]
base = 0.0
"#;
        let config = ExperimentConfig::from_toml(text).unwrap();
        assert!(matches!(config.validate(), Err(ExperimentError::Config(_))));
        let config = ExperimentConfig { rounds: 2, ..config };
        config.validate().unwrap();
        assert_eq!(config.digest(), config.clone().digest());
        assert!(ExperimentConfig::from_toml("experiment_id = 3").is_err());
    }
}
