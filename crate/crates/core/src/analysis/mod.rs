//! Statistics of the validation cycle, computed from run logs.
//!
//! Shares are the mean of per-agent probabilities, normalized to the two
//! major parties. Everything here is a pure function of immutable records.

mod association;
mod reliability;
mod shares;
mod validity;
mod weight;

use thiserror::Error;

pub use association::{binary_support, contingency_from_records, cramers_v, BinarySupport, ContingencyTable, Party};
pub use reliability::{per_round_dem_shares, reliability, ReliabilityReport, Z_95};
pub use shares::{aggregate, margin_of_error, shares_for_round, winner_call, StateShare, WinnerCall};
pub use validity::{
    compare_configs, validity, BenchmarkRow, BenchmarkSpec, ComparisonReport, InflationMode, StateDelta, StateValidity,
    ValidityReport, DEFAULT_INFLATION,
};
pub use weight::{explanatory_weight, ExplanatoryWeightReport, StateWeight};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("no parsed responses for state {0:?}")]
    EmptyState(String),
    #[error("Democratic and Republican shares of {0:?} are both zero")]
    DegenerateShares(String),
    #[error("{0} rounds given; at least 2 are needed for a confidence interval")]
    InsufficientRounds(usize),
    #[error("no parsed responses to analyze")]
    EmptyCorpus,
    #[error("contingency table has an all-zero {0}")]
    ZeroMargin(String),
    #[error("invalid contingency table: {0}")]
    InvalidTable(String),
    #[error("reports cover different states or actuals: {0}")]
    MismatchedStates(String),
    #[error("no actual result for state {0:?}")]
    MissingActual(String),
    #[error("invalid benchmark: {0}")]
    InvalidBenchmark(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}
