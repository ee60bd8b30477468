use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::shares::aggregate;
use super::AnalysisError;
use crate::experiment::RoundRecord;

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.96;

/// Spread of a state's Democratic two-party share across rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub state: String,
    pub n_rounds: usize,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub sd: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Largest difference between any two rounds.
    pub max_fluctuation: f64,
}

impl ReliabilityReport {
    pub fn ci_width(&self) -> f64 {
        self.ci_high - self.ci_low
    }
}

pub fn reliability(state: &str, per_round: &[f64]) -> Result<ReliabilityReport, AnalysisError> {
    let n = per_round.len();
    if n < 2 {
        return Err(AnalysisError::InsufficientRounds(n));
    }
    if per_round.iter().any(|x| !x.is_finite()) {
        return Err(AnalysisError::InvalidInput("non-finite share".into()));
    }
    let count = n as f64;
    // shifted by the first value so constant series have exactly zero spread
    let shift = per_round[0];
    let mean = shift + per_round.iter().map(|x| x - shift).sum::<f64>() / count;
    let variance = per_round.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1.0);
    let sd = variance.sqrt();
    let half_width = Z_95 * sd / count.sqrt();
    let max = per_round.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = per_round.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(ReliabilityReport {
        state: state.to_string(),
        n_rounds: n,
        mean,
        sd,
        ci_low: mean - half_width,
        ci_high: mean + half_width,
        max_fluctuation: max - min,
    })
}

/// Per-state series of Democratic two-party shares, in round order.
pub fn per_round_dem_shares(records: &[RoundRecord]) -> Result<BTreeMap<String, Vec<f64>>, AnalysisError> {
    let mut groups: BTreeMap<(String, u32), Vec<&RoundRecord>> = BTreeMap::new();
    for record in records {
        groups.entry((record.state.clone(), record.round_index)).or_default().push(record);
    }
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for ((state, _), group) in groups {
        let share = aggregate(&state, group)?;
        out.entry(state).or_default().push(share.dem_norm);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_variance() {
        let r = reliability("Michigan", &[0.479; 30]).unwrap();
        assert_eq!(r.sd, 0.0);
        assert_eq!((r.ci_low, r.ci_high), (0.479, 0.479));
        assert_eq!(r.max_fluctuation, 0.0);
    }

    #[test]
    fn two_values_by_hand() {
        let r = reliability("x", &[0.48, 0.50]).unwrap();
        assert!((r.mean - 0.49).abs() < 1e-12);
        assert!((r.sd - 0.014142).abs() < 1e-6);
        assert!((r.ci_low - 0.47040).abs() < 1e-5);
        assert!((r.ci_high - 0.50960).abs() < 1e-5);
        assert!((r.max_fluctuation - 0.02).abs() < 1e-12);
    }

    #[test]
    fn width_formula_is_exact() {
        let values = [0.41, 0.47, 0.44, 0.52, 0.39];
        let r = reliability("x", &values).unwrap();
        let expected = 2.0 * Z_95 * r.sd / (values.len() as f64).sqrt();
        assert!((r.ci_width() - expected).abs() < 1e-15);
        assert!(r.ci_low <= r.mean && r.mean <= r.ci_high);
    }

    #[test]
    fn one_round_is_insufficient() {
        assert_eq!(reliability("x", &[0.5]), Err(AnalysisError::InsufficientRounds(1)));
        assert_eq!(reliability("x", &[]), Err(AnalysisError::InsufficientRounds(0)));
    }
}
