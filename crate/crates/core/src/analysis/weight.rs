use std::collections::BTreeMap;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::experiment::RoundRecord;
use crate::prompting::after_first_sentence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateWeight {
    pub state: String,
    pub mentions: usize,
    pub responses: usize,
    pub proportion: f64,
}

/// Share of agents whose reason cites `term` after its first sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanatoryWeightReport {
    pub term: String,
    pub states: Vec<StateWeight>,
    /// Unweighted mean of the per-state proportions.
    pub overall_mean: f64,
}

fn term_pattern(term: &str) -> Result<Regex, AnalysisError> {
    let term = term.trim();
    if term.is_empty() {
        return Err(AnalysisError::InvalidInput("empty term".into()));
    }
    RegexBuilder::new(&format!(r"\b{}\b", regex::escape(term)))
        .case_insensitive(true)
        .build()
        .map_err(|e| AnalysisError::InvalidInput(e.to_string()))
}

/// Counts, per state, parsed responses whose reason mentions `term` as a
/// whole word (case-insensitive) once the first sentence is removed.
pub fn explanatory_weight<'a>(
    records: impl IntoIterator<Item = &'a RoundRecord>,
    term: &str,
) -> Result<ExplanatoryWeightReport, AnalysisError> {
    let pattern = term_pattern(term)?;
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for record in records {
        let Some(response) = record.parsed.as_ref() else { continue };
        let entry = counts.entry(&record.state).or_default();
        entry.1 += 1;
        if pattern.is_match(after_first_sentence(&response.reason)) {
            entry.0 += 1;
        }
    }
    if counts.is_empty() {
        return Err(AnalysisError::EmptyCorpus);
    }
    let states: Vec<StateWeight> = counts
        .into_iter()
        .map(|(state, (mentions, responses))| StateWeight {
            state: state.to_string(),
            mentions,
            responses,
            proportion: mentions as f64 / responses as f64,
        })
        .collect();
    let overall_mean = states.iter().map(|s| s.proportion).sum::<f64>() / states.len() as f64;
    Ok(ExplanatoryWeightReport { term: term.trim().to_string(), states, overall_mean })
}
