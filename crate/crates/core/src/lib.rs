//! Intelligent computing social modeling: build census-faithful agent
//! cohorts, elicit probabilistic vote intentions from a language-model
//! backend, and validate the aggregated results against real outcomes.
//!
//! The pipeline is split into five modules that mirror its stages:
//!
//! * [`population`] ingests census marginals and synthesizes cohorts.
//! * [`prompting`] renders agent prompts and parses model responses.
//! * [`backend`] queries a remote chat-completion endpoint or an offline mock.
//! * [`experiment`] runs multi-round simulations into a resumable JSONL log.
//! * [`analysis`] computes shares, reliability, validity, explanatory weight
//!   and Cramer's V from run logs.

pub mod analysis;
pub mod backend;
pub mod digest;
pub mod experiment;
pub mod population;
pub mod prompting;

pub use analysis::{
    aggregate, binary_support, compare_configs, cramers_v, explanatory_weight, margin_of_error, reliability, validity,
    winner_call, AnalysisError, BenchmarkSpec, ContingencyTable, ExplanatoryWeightReport, ReliabilityReport,
    StateShare, ValidityReport, WinnerCall,
};
pub use backend::{Backend, BackendConfig, BackendError, BackendKind, QueryRecord};
pub use experiment::{ExperimentConfig, ExperimentError, RoundRecord};
pub use population::{
    apportion, load_marginals, synthesize_cohort, AgentProfile, CategoricalVariable, Cohort, MarginalDistribution,
    PopulationError,
};
pub use prompting::{
    first_sentence, parse_response, render_prompt, PromptError, PromptTemplate, Scenario, VoteResponse,
};
