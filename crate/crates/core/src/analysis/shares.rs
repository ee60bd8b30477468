use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::experiment::RoundRecord;

/// Aggregated candidate shares of one state in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateShare {
    pub state: String,
    pub raw_dem: f64,
    pub raw_rep: f64,
    pub raw_other: f64,
    pub dem_norm: f64,
    pub rep_norm: f64,
    /// Parsed responses that entered the means.
    pub responses: usize,
}

impl StateShare {
    /// Builds a share from raw means, applying two-party normalization.
    pub fn from_raw(
        state: impl Into<String>,
        raw_dem: f64,
        raw_rep: f64,
        raw_other: f64,
        responses: usize,
    ) -> Result<Self, AnalysisError> {
        let state = state.into();
        let two_party = raw_dem + raw_rep;
        if !(two_party > 0.0) {
            return Err(AnalysisError::DegenerateShares(state));
        }
        let dem_norm = raw_dem / two_party;
        Ok(Self { state, raw_dem, raw_rep, raw_other, dem_norm, rep_norm: 1.0 - dem_norm, responses })
    }
}

/// Mean-of-probabilities shares for one state's records of one round.
/// Records without a parsed response are skipped.
pub fn aggregate<'a>(
    state: &str,
    records: impl IntoIterator<Item = &'a RoundRecord>,
) -> Result<StateShare, AnalysisError> {
    let (mut dem, mut rep, mut other, mut n) = (0.0, 0.0, 0.0, 0usize);
    for response in records.into_iter().filter(|r| r.state == state).filter_map(|r| r.parsed.as_ref()) {
        dem += response.p_dem;
        rep += response.p_rep;
        other += response.p_other;
        n += 1;
    }
    if n == 0 {
        return Err(AnalysisError::EmptyState(state.to_string()));
    }
    let count = n as f64;
    StateShare::from_raw(state, dem / count, rep / count, other / count, n)
}

/// Shares of every state present in `round_index`, keyed by state.
pub fn shares_for_round(
    records: &[RoundRecord],
    round_index: u32,
) -> Result<BTreeMap<String, StateShare>, AnalysisError> {
    let mut by_state: BTreeMap<&str, Vec<&RoundRecord>> = BTreeMap::new();
    for record in records.iter().filter(|r| r.round_index == round_index) {
        by_state.entry(&record.state).or_default().push(record);
    }
    by_state.into_iter().map(|(state, group)| Ok((state.to_string(), aggregate(state, group)?))).collect()
}

/// Absolute difference between simulated and actual two-party Democratic share.
pub fn margin_of_error(simulated_dem_norm: f64, actual_dem_norm: f64) -> f64 {
    (simulated_dem_norm - actual_dem_norm).abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WinnerCall {
    Correct,
    Incorrect,
    NoCall,
}

impl WinnerCall {
    pub fn as_str(self) -> &'static str {
        match self {
            WinnerCall::Correct => "correct",
            WinnerCall::Incorrect => "incorrect",
            WinnerCall::NoCall => "no_call",
        }
    }
}

fn majority(dem_norm: f64) -> Option<bool> {
    if dem_norm > 0.5 {
        Some(true)
    } else if dem_norm < 0.5 {
        Some(false)
    } else {
        None
    }
}

/// Strict-majority winner call on two-party shares. A simulated tie is no
/// call; against an actual tie any call is incorrect.
pub fn winner_call(simulated_dem_norm: f64, actual_dem_norm: f64) -> WinnerCall {
    match (majority(simulated_dem_norm), majority(actual_dem_norm)) {
        (None, _) => WinnerCall::NoCall,
        (Some(predicted), Some(actual)) if predicted == actual => WinnerCall::Correct,
        _ => WinnerCall::Incorrect,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::VoteResponse;

    fn record(state: &str, round: u32, id: u64, p: (f64, f64, f64)) -> RoundRecord {
        RoundRecord {
            experiment_id: "e".into(),
            round_index: round,
            agent_id: id,
            state: state.into(),
            attributes: Default::default(),
            raw_text: String::new(),
            parsed: Some(VoteResponse {
                p_dem: p.0,
                p_rep: p.1,
                p_other: p.2,
                reason: String::new(),
                renormalized: false,
            }),
            parse_error: None,
            prompt_digest: String::new(),
            model_id: "m".into(),
            timestamp: String::new(),
        }
    }

    #[test]
    fn symmetric_agents_split_evenly() {
        let records: Vec<_> = (0..4).map(|i| record("Ohio", 0, i, (0.5, 0.5, 0.0))).collect();
        let share = aggregate("Ohio", &records).unwrap();
        assert_eq!(share.dem_norm, 0.5);
        assert_eq!(share.responses, 4);
    }

    #[test]
    fn raw_means_normalize() {
        let share = StateShare::from_raw("Ohio", 0.62, 0.31, 0.07, 1).unwrap();
        assert!((share.dem_norm - 0.666667).abs() < 1e-6);
        assert!((share.dem_norm + share.rep_norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_and_empty() {
        assert_eq!(StateShare::from_raw("Ohio", 0.0, 0.0, 1.0, 1), Err(AnalysisError::DegenerateShares("Ohio".into())));
        let mut r = record("Ohio", 0, 0, (0.5, 0.5, 0.0));
        r.parsed = None;
        r.parse_error = Some("bad".into());
        assert_eq!(aggregate("Ohio", [&r]), Err(AnalysisError::EmptyState("Ohio".into())));
    }

    #[test]
    fn shares_split_by_round_and_state() {
        let records = vec![
            record("Ohio", 0, 0, (0.6, 0.4, 0.0)),
            record("Iowa", 0, 0, (0.2, 0.8, 0.0)),
            record("Ohio", 1, 0, (0.1, 0.9, 0.0)),
        ];
        let round0 = shares_for_round(&records, 0).unwrap();
        assert_eq!(round0.len(), 2);
        assert!((round0["Ohio"].dem_norm - 0.6).abs() < 1e-12);
    }

    #[test]
    fn table2_margins() {
        assert_eq!(format!("{:.3}", margin_of_error(0.7050, 0.6492)), "0.056");
        assert_eq!(format!("{:.3}", margin_of_error(0.5401, 0.5061)), "0.034");
        assert_eq!(margin_of_error(0.5, 0.5), 0.0);
    }

    #[test]
    fn winner_calls() {
        assert_eq!(winner_call(0.4971, 0.5030), WinnerCall::Incorrect);
        assert_eq!(winner_call(0.5165, 0.5030), WinnerCall::Correct);
        assert_eq!(winner_call(0.5, 0.5030), WinnerCall::NoCall);
        assert_eq!(winner_call(0.4359, 0.4715), WinnerCall::Correct);
        assert_eq!(winner_call(0.6, 0.5), WinnerCall::Incorrect);
    }
}
