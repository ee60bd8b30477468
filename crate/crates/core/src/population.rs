//! Census marginals and deterministic cohort synthesis.
//!
//! A census file gives, per state, the share of the population in each
//! category of a handful of identity variables. Cohorts are built so that
//! every variable's category counts equal the largest-remainder
//! apportionment of the cohort size; variables are combined independently
//! through seeded shuffles.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{derive_seed, sha256_hex};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PopulationError {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("line {line}: duplicate row for {state}/{variable}/{category}")]
    DuplicateRow { line: u64, state: String, variable: String, category: String },
    #[error("category {category:?} of variable {variable:?} missing for state {state:?}")]
    MissingCategory { state: String, variable: String, category: String },
    #[error("line {line}: category {category:?} is not declared for variable {variable:?}")]
    UnknownCategory { line: u64, variable: String, category: String },
    #[error("proportions of {variable:?} in {state:?} sum to zero")]
    NonPositiveTotal { state: String, variable: String },
    #[error("inconsistent variables: {0}")]
    InconsistentVariables(String),
    #[error("invalid variable {name:?}: {reason}")]
    InvalidVariable { name: String, reason: String },
    #[error("invalid apportionment input: {0}")]
    InvalidSimplex(String),
    #[error("invalid cohort: {0}")]
    InvalidCohort(String),
}

/// An identity variable with its ordered category labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoricalVariable {
    pub name: String,
    pub categories: Vec<String>,
}

impl CategoricalVariable {
    pub fn new(
        name: impl Into<String>,
        categories: impl IntoIterator<Item = impl Into<String>>,
    ) -> Result<Self, PopulationError> {
        let variable = Self { name: name.into(), categories: categories.into_iter().map(Into::into).collect() };
        variable.validate()?;
        Ok(variable)
    }

    pub fn validate(&self) -> Result<(), PopulationError> {
        let invalid =
            |reason: &str| PopulationError::InvalidVariable { name: self.name.clone(), reason: reason.to_string() };
        if self.name.is_empty() {
            return Err(invalid("empty name"));
        }
        if self.categories.is_empty() {
            return Err(invalid("no categories"));
        }
        let unique: BTreeSet<&String> = self.categories.iter().collect();
        if unique.len() != self.categories.len() {
            return Err(invalid("duplicate category labels"));
        }
        Ok(())
    }

    pub fn index_of(&self, category: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == category)
    }
}

/// Per-state category shares of one variable, aligned with
/// `variable.categories` and summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalDistribution {
    pub state: String,
    pub variable: CategoricalVariable,
    pub proportions: Vec<f64>,
}

impl MarginalDistribution {
    pub fn proportion(&self, category: &str) -> Option<f64> {
        self.variable.index_of(category).map(|index| self.proportions[index])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub agent_id: u64,
    pub state: String,
    pub attributes: BTreeMap<String, String>,
}

impl AgentProfile {
    /// The same agent with only the listed variables kept.
    pub fn restricted_to(&self, enabled: &[String]) -> AgentProfile {
        AgentProfile {
            agent_id: self.agent_id,
            state: self.state.clone(),
            attributes: self
                .attributes
                .iter()
                .filter(|(name, _)| enabled.contains(name))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cohort {
    pub state: String,
    pub size: usize,
    pub seed: u64,
    pub source_digest: String,
    pub variables: Vec<CategoricalVariable>,
    pub agents: Vec<AgentProfile>,
}

impl Cohort {
    /// Pretty JSON with a trailing newline; the on-disk cohort format.
    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("cohort serializes");
        out.push('\n');
        out
    }

    pub fn from_json(text: &str) -> Result<Self, PopulationError> {
        let cohort: Cohort = serde_json::from_str(text).map_err(|e| PopulationError::InvalidCohort(e.to_string()))?;
        cohort.validate()?;
        Ok(cohort)
    }

    pub fn validate(&self) -> Result<(), PopulationError> {
        let bad = |msg: String| Err(PopulationError::InvalidCohort(msg));
        if self.size == 0 || self.agents.len() != self.size {
            return bad(format!("size {} does not match {} agents", self.size, self.agents.len()));
        }
        for variable in &self.variables {
            variable.validate()?;
        }
        for (index, agent) in self.agents.iter().enumerate() {
            if agent.agent_id != index as u64 {
                return bad(format!("agent at position {index} has id {}", agent.agent_id));
            }
            if agent.state != self.state {
                return bad(format!("agent {index} belongs to {}", agent.state));
            }
            if agent.attributes.len() != self.variables.len() {
                return bad(format!("agent {index} has wrong attribute count"));
            }
            for variable in &self.variables {
                match agent.attributes.get(&variable.name) {
                    Some(value) if variable.index_of(value).is_some() => {}
                    Some(value) => {
                        return bad(format!("agent {index} has undeclared {} category {value:?}", variable.name))
                    }
                    None => return bad(format!("agent {index} lacks {}", variable.name)),
                }
            }
        }
        Ok(())
    }

    pub fn variable(&self, name: &str) -> Option<&CategoricalVariable> {
        self.variables.iter().find(|v| v.name == name)
    }

    /// Per-category counts of `variable`, in declared category order.
    pub fn category_counts(&self, variable: &str) -> Option<Vec<(String, usize)>> {
        let variable = self.variable(variable)?;
        let mut counts = vec![0usize; variable.categories.len()];
        for agent in &self.agents {
            let value = &agent.attributes[&variable.name];
            counts[variable.index_of(value)?] += 1;
        }
        Some(variable.categories.iter().cloned().zip(counts).collect())
    }
}

/// Reads a `state,variable,category,proportion` census table.
///
/// With `schema`, variables and category order come from the schema and any
/// undeclared category is an error. Without it, the declared categories of a
/// variable are the union over all states in byte order, so the result never
/// depends on row order. Proportions are renormalized per (state, variable).
pub fn load_marginals<R: Read>(
    source: R,
    schema: Option<&[CategoricalVariable]>,
) -> Result<Vec<MarginalDistribution>, PopulationError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let header_error = |message: String| PopulationError::Parse { line: 1, message };
    let headers = reader.headers().map_err(|e| header_error(e.to_string()))?.clone();
    let expected = ["state", "variable", "category", "proportion"];
    if headers.len() != expected.len() || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(header_error(format!("expected header `{}`", expected.join(","))));
    }

    // (state, variable) -> category -> proportion
    let mut cells: BTreeMap<(String, String), HashMap<String, f64>> = BTreeMap::new();
    let mut seen_categories: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| PopulationError::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 4 {
            return Err(PopulationError::Parse { line, message: format!("expected 4 fields, found {}", record.len()) });
        }
        let (state, variable, category) = (&record[0], &record[1], &record[2]);
        if state.is_empty() || variable.is_empty() || category.is_empty() {
            return Err(PopulationError::Parse { line, message: "empty state, variable or category".into() });
        }
        let proportion: f64 = record[3].parse().map_err(|_| PopulationError::Parse {
            line,
            message: format!("proportion {:?} is not a number", &record[3]),
        })?;
        if !proportion.is_finite() || proportion < 0.0 {
            return Err(PopulationError::Parse {
                line,
                message: format!("proportion {proportion} must be a non-negative number"),
            });
        }
        if let Some(schema) = schema {
            let declared = schema.iter().find(|v| v.name == variable);
            if !declared.is_some_and(|v| v.index_of(category).is_some()) {
                return Err(PopulationError::UnknownCategory {
                    line,
                    variable: variable.to_string(),
                    category: category.to_string(),
                });
            }
        }
        let entry = cells.entry((state.to_string(), variable.to_string())).or_default();
        if entry.insert(category.to_string(), proportion).is_some() {
            return Err(PopulationError::DuplicateRow {
                line,
                state: state.to_string(),
                variable: variable.to_string(),
                category: category.to_string(),
            });
        }
        seen_categories.entry(variable.to_string()).or_default().insert(category.to_string());
    }

    let variables: Vec<CategoricalVariable> = match schema {
        Some(schema) => {
            for variable in schema {
                variable.validate()?;
            }
            schema.iter().filter(|v| seen_categories.contains_key(&v.name)).cloned().collect()
        }
        None => seen_categories
            .into_iter()
            .map(|(name, categories)| CategoricalVariable { name, categories: categories.into_iter().collect() })
            .collect(),
    };
    let states: BTreeSet<String> = cells.keys().map(|(state, _)| state.clone()).collect();

    let mut out = Vec::with_capacity(states.len() * variables.len());
    for state in &states {
        for variable in &variables {
            let key = (state.clone(), variable.name.clone());
            let Some(row) = cells.get(&key) else {
                return Err(PopulationError::MissingCategory {
                    state: state.clone(),
                    variable: variable.name.clone(),
                    category: variable.categories[0].clone(),
                });
            };
            let mut proportions = Vec::with_capacity(variable.categories.len());
            for category in &variable.categories {
                match row.get(category) {
                    Some(p) => proportions.push(*p),
                    None => {
                        return Err(PopulationError::MissingCategory {
                            state: state.clone(),
                            variable: variable.name.clone(),
                            category: category.clone(),
                        })
                    }
                }
            }
            let total: f64 = proportions.iter().sum();
            if total <= 0.0 {
                return Err(PopulationError::NonPositiveTotal {
                    state: state.clone(),
                    variable: variable.name.clone(),
                });
            }
            if total != 1.0 {
                proportions.iter_mut().for_each(|p| *p /= total);
            }
            out.push(MarginalDistribution { state: state.clone(), variable: variable.clone(), proportions });
        }
    }
    Ok(out)
}

/// Largest-remainder (Hamilton) apportionment of `n` units.
///
/// Each category receives `floor(n * p)`; the leftover units go to the
/// largest fractional remainders, earlier categories winning ties.
pub fn apportion(proportions: &[f64], n: usize) -> Result<Vec<usize>, PopulationError> {
    if n == 0 {
        return Err(PopulationError::InvalidSimplex("n must be at least 1".into()));
    }
    if proportions.is_empty() {
        return Err(PopulationError::InvalidSimplex("no categories".into()));
    }
    if proportions.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(PopulationError::InvalidSimplex("proportions must be finite and non-negative".into()));
    }
    let total: f64 = proportions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(PopulationError::InvalidSimplex(format!("proportions sum to {total}, not 1")));
    }

    let quotas: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let leftover = n.saturating_sub(assigned);

    let mut order: Vec<usize> = (0..proportions.len()).collect();
    // stable sort keeps declared order among equal remainders
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra)
    });
    for &index in order.iter().cycle().take(leftover) {
        counts[index] += 1;
    }
    Ok(counts)
}

/// Builds one state's cohort of `n` agents from its marginals.
///
/// Each variable's column is the apportioned multiset of categories,
/// shuffled with a sub-seed derived from `(seed, state, variable)`.
pub fn synthesize_cohort(marginals: &[MarginalDistribution], n: usize, seed: u64) -> Result<Cohort, PopulationError> {
    let Some(first) = marginals.first() else {
        return Err(PopulationError::InconsistentVariables("no marginals given".into()));
    };
    let state = first.state.clone();
    let mut by_name: BTreeMap<&str, &MarginalDistribution> = BTreeMap::new();
    for marginal in marginals {
        if marginal.state != state {
            return Err(PopulationError::InconsistentVariables(format!(
                "marginals mix states {state:?} and {:?}",
                marginal.state
            )));
        }
        marginal.variable.validate()?;
        if marginal.proportions.len() != marginal.variable.categories.len() {
            return Err(PopulationError::InconsistentVariables(format!(
                "{} has {} proportions for {} categories",
                marginal.variable.name,
                marginal.proportions.len(),
                marginal.variable.categories.len()
            )));
        }
        if by_name.insert(&marginal.variable.name, marginal).is_some() {
            return Err(PopulationError::InconsistentVariables(format!(
                "variable {:?} given twice",
                marginal.variable.name
            )));
        }
    }

    let mut columns: Vec<(&str, Vec<usize>)> = Vec::with_capacity(by_name.len());
    for (name, marginal) in &by_name {
        let counts = apportion(&marginal.proportions, n)?;
        let mut column: Vec<usize> =
            counts.iter().enumerate().flat_map(|(category, &count)| std::iter::repeat_n(category, count)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[&state, name]));
        column.shuffle(&mut rng);
        columns.push((name, column));
    }

    let agents = (0..n)
        .map(|agent| AgentProfile {
            agent_id: agent as u64,
            state: state.clone(),
            attributes: columns
                .iter()
                .map(|(name, column)| {
                    let variable = &by_name[name].variable;
                    (name.to_string(), variable.categories[column[agent]].clone())
                })
                .collect(),
        })
        .collect();

    Ok(Cohort {
        state,
        size: n,
        seed,
        source_digest: marginals_digest(by_name.values().copied()),
        variables: by_name.values().map(|m| m.variable.clone()).collect(),
        agents,
    })
}

/// Digest over the canonical form of a set of marginals.
pub fn marginals_digest<'a>(marginals: impl IntoIterator<Item = &'a MarginalDistribution>) -> String {
    let mut lines: Vec<String> = marginals
        .into_iter()
        .flat_map(|m| {
            m.variable.categories.iter().zip(&m.proportions).map(move |(category, p)| {
                format!("{}\t{}\t{}\t{:016x}", m.state, m.variable.name, category, p.to_bits())
            })
        })
        .collect();
    lines.sort();
    sha256_hex(lines.join("\n"))
}

/// Marginals of one state, in loader order.
pub fn marginals_for_state<'a>(marginals: &'a [MarginalDistribution], state: &str) -> Vec<&'a MarginalDistribution> {
    marginals.iter().filter(|m| m.state == state).collect()
}
