use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

use super::shares::{margin_of_error, winner_call, StateShare, WinnerCall};
use super::AnalysisError;

/// Allowed slack over the criterion study's errors.
pub const DEFAULT_INFLATION: f64 = 0.65;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InflationMode {
    /// Inflate the [min, max] of the benchmark errors; every state is held
    /// to the inflated maximum.
    #[default]
    Range,
    /// Hold each state to its own row's inflated benchmark error.
    PerState,
}

/// One row of the benchmark file: a simulated state's actual result and the
/// criterion study's error on its paired row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub state: String,
    pub actual_dem: f64,
    pub actual_rep: f64,
    pub benchmark_state: Option<String>,
    pub benchmark_error: f64,
}

impl BenchmarkRow {
    pub fn actual_dem_norm(&self) -> f64 {
        self.actual_dem / (self.actual_dem + self.actual_rep)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub rows: Vec<BenchmarkRow>,
    pub inflation_factor: f64,
    #[serde(default)]
    pub mode: InflationMode,
}

impl BenchmarkSpec {
    pub fn new(rows: Vec<BenchmarkRow>, inflation_factor: f64, mode: InflationMode) -> Result<Self, AnalysisError> {
        let spec = Self { rows, inflation_factor, mode };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        let bad = |msg: String| Err(AnalysisError::InvalidBenchmark(msg));
        if self.rows.is_empty() {
            return bad("no rows".into());
        }
        if !(self.inflation_factor >= 0.0) {
            return bad("inflation factor must be non-negative".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for row in &self.rows {
            if !seen.insert(&row.state) {
                return bad(format!("state {:?} listed twice", row.state));
            }
            if !(row.actual_dem >= 0.0 && row.actual_rep >= 0.0) {
                return bad(format!("{}: actual shares must be non-negative", row.state));
            }
            let norm = row.actual_dem_norm();
            if !(norm > 0.0 && norm < 1.0) {
                return bad(format!("{}: actual two-party share must lie in (0, 1)", row.state));
            }
            if !(row.benchmark_error >= 0.0) {
                return bad(format!("{}: benchmark error must be non-negative", row.state));
            }
        }
        Ok(())
    }

    /// Reads a benchmark CSV. Columns are found by header name; `state`,
    /// `actual_dem`, `actual_rep` and `benchmark_error` are required and
    /// `benchmark_state` is optional. Other columns are ignored.
    pub fn from_csv<R: Read>(source: R, inflation_factor: f64, mode: InflationMode) -> Result<Self, AnalysisError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
        let headers = reader.headers().map_err(|e| AnalysisError::InvalidBenchmark(e.to_string()))?.clone();
        let column = |name: &str| headers.iter().position(|h| h == name);
        let need = |name: &str| {
            column(name).ok_or_else(|| AnalysisError::InvalidBenchmark(format!("missing column {name:?}")))
        };
        let (state, dem, rep, error) =
            (need("state")?, need("actual_dem")?, need("actual_rep")?, need("benchmark_error")?);
        let paired = column("benchmark_state");
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| AnalysisError::InvalidBenchmark(e.to_string()))?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            let number = |index: usize| -> Result<f64, AnalysisError> {
                record.get(index).and_then(|s| s.parse().ok()).ok_or_else(|| {
                    AnalysisError::InvalidBenchmark(format!(
                        "line {line}: column {} is not a number",
                        headers[index].to_string()
                    ))
                })
            };
            rows.push(BenchmarkRow {
                state: record.get(state).unwrap_or_default().to_string(),
                actual_dem: number(dem)?,
                actual_rep: number(rep)?,
                benchmark_state: paired.and_then(|i| record.get(i)).filter(|s| !s.is_empty()).map(str::to_string),
                benchmark_error: number(error)?,
            });
        }
        Self::new(rows, inflation_factor, mode)
    }

    pub fn actual_dem_norm(&self, state: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.state == state).map(BenchmarkRow::actual_dem_norm)
    }

    /// `[min, max]` of the benchmark errors scaled by `1 + inflation_factor`.
    pub fn threshold_range(&self) -> (f64, f64) {
        let scale = 1.0 + self.inflation_factor;
        let min = self.rows.iter().map(|r| r.benchmark_error).fold(f64::INFINITY, f64::min);
        let max = self.rows.iter().map(|r| r.benchmark_error).fold(f64::NEG_INFINITY, f64::max);
        (min * scale, max * scale)
    }

    fn threshold_for(&self, state: &str) -> Option<f64> {
        match self.mode {
            InflationMode::Range => Some(self.threshold_range().1),
            InflationMode::PerState => {
                self.rows.iter().find(|r| r.state == state).map(|r| r.benchmark_error * (1.0 + self.inflation_factor))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateValidity {
    pub state: String,
    pub simulated_dem_norm: f64,
    pub actual_dem_norm: f64,
    pub margin: f64,
    pub winner_call: WinnerCall,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub states: Vec<StateValidity>,
    pub threshold_lo: f64,
    pub threshold_hi: f64,
    pub inflation_factor: f64,
    pub mode: InflationMode,
    pub pass: bool,
}

impl ValidityReport {
    pub fn correct_calls(&self) -> usize {
        self.states.iter().filter(|s| s.winner_call == WinnerCall::Correct).count()
    }

    pub fn mean_margin(&self) -> f64 {
        self.states.iter().map(|s| s.margin).sum::<f64>() / self.states.len() as f64
    }

    pub fn margin_range(&self) -> (f64, f64) {
        let min = self.states.iter().map(|s| s.margin).fold(f64::INFINITY, f64::min);
        let max = self.states.iter().map(|s| s.margin).fold(f64::NEG_INFINITY, f64::max);
        (min, max)
    }
}

/// Margins, winner calls and the pass verdict of simulated shares against
/// the benchmark. Passing needs every margin strictly below its threshold.
pub fn validity(shares: &[StateShare], benchmark: &BenchmarkSpec) -> Result<ValidityReport, AnalysisError> {
    benchmark.validate()?;
    if shares.is_empty() {
        return Err(AnalysisError::EmptyCorpus);
    }
    let (threshold_lo, threshold_hi) = benchmark.threshold_range();
    let mut states = Vec::with_capacity(shares.len());
    for share in shares {
        let actual =
            benchmark.actual_dem_norm(&share.state).ok_or_else(|| AnalysisError::MissingActual(share.state.clone()))?;
        let threshold =
            benchmark.threshold_for(&share.state).ok_or_else(|| AnalysisError::MissingActual(share.state.clone()))?;
        states.push(StateValidity {
            state: share.state.clone(),
            simulated_dem_norm: share.dem_norm,
            actual_dem_norm: actual,
            margin: margin_of_error(share.dem_norm, actual),
            winner_call: winner_call(share.dem_norm, actual),
            threshold,
        });
    }
    let pass = states.iter().all(|s| s.margin < s.threshold);
    Ok(ValidityReport {
        states,
        threshold_lo,
        threshold_hi,
        inflation_factor: benchmark.inflation_factor,
        mode: benchmark.mode,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDelta {
    pub state: String,
    pub margin_a: f64,
    pub margin_b: f64,
    /// `margin_b - margin_a`; negative means configuration B fits better.
    pub delta: f64,
    pub call_a: WinnerCall,
    pub call_b: WinnerCall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub states: Vec<StateDelta>,
    pub correct_a: usize,
    pub correct_b: usize,
    pub mean_error_a: f64,
    pub mean_error_b: f64,
    /// B's added variable counts as validated knowledge.
    pub validated: bool,
}

/// Judges configuration B against baseline A: validated iff B makes strictly
/// more correct winner calls, or as many with a lower mean error.
pub fn compare_configs(a: &ValidityReport, b: &ValidityReport) -> Result<ComparisonReport, AnalysisError> {
    let index_a: BTreeMap<&str, &StateValidity> = a.states.iter().map(|s| (s.state.as_str(), s)).collect();
    let index_b: BTreeMap<&str, &StateValidity> = b.states.iter().map(|s| (s.state.as_str(), s)).collect();
    if index_a.len() != a.states.len() || index_b.len() != b.states.len() {
        return Err(AnalysisError::MismatchedStates("a report lists a state twice".into()));
    }
    if index_a.keys().ne(index_b.keys()) {
        return Err(AnalysisError::MismatchedStates(format!(
            "{:?} vs {:?}",
            index_a.keys().collect::<Vec<_>>(),
            index_b.keys().collect::<Vec<_>>()
        )));
    }
    let mut states = Vec::with_capacity(index_a.len());
    for (state, sa) in &index_a {
        let sb = index_b[state];
        if (sa.actual_dem_norm - sb.actual_dem_norm).abs() > 1e-12 {
            return Err(AnalysisError::MismatchedStates(format!("actual results differ for {state}")));
        }
        states.push(StateDelta {
            state: state.to_string(),
            margin_a: sa.margin,
            margin_b: sb.margin,
            delta: sb.margin - sa.margin,
            call_a: sa.winner_call,
            call_b: sb.winner_call,
        });
    }
    let (correct_a, correct_b) = (a.correct_calls(), b.correct_calls());
    let (mean_error_a, mean_error_b) = (a.mean_margin(), b.mean_margin());
    let validated = correct_b > correct_a || (correct_b == correct_a && mean_error_b < mean_error_a);
    Ok(ComparisonReport { states, correct_a, correct_b, mean_error_a, mean_error_b, validated })
}
