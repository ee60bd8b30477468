use std::collections::BTreeMap;
use std::fs::{self, File};

use icsm_core::experiment::{cohort_file_name, ExperimentConfig};
use icsm_core::population::{load_marginals, marginals_for_state, synthesize_cohort, MarginalDistribution};
use serde::Serialize;

use crate::manifest::{FileDigest, TOOL_VERSION};
use crate::{io_err, CliError, Result, SynthesizeArgs};

const DEFAULT_COHORT_SIZE: usize = 1000;

#[derive(Serialize)]
struct CohortManifest {
    census: FileDigest,
    seed: u64,
    size: usize,
    cohorts: BTreeMap<String, FileDigest>,
    tool_version: String,
}

pub fn cmd_synthesize(args: &SynthesizeArgs) -> Result<()> {
    let config = ExperimentConfig::load(&args.config)?;
    let census = args
        .census
        .clone()
        .or_else(|| config.census.clone())
        .ok_or_else(|| CliError::Input("no census file: set `census` in the config or pass --census".into()))?;
    let seed = args.seed.unwrap_or(config.root_seed);
    let size = args.size.or(config.cohort_size).unwrap_or(DEFAULT_COHORT_SIZE);
    let out = args.out.clone().unwrap_or_else(|| config.cohorts.clone());

    let file = File::open(&census).map_err(io_err(&census))?;
    let schema = (!config.variables.is_empty()).then_some(config.variables.as_slice());
    let marginals = load_marginals(file, schema).map_err(|e| CliError::Input(format!("{}: {e}", census.display())))?;

    // check every state before writing anything
    let mut per_state: Vec<(&String, Vec<MarginalDistribution>)> = Vec::new();
    for state in &config.states {
        let rows: Vec<MarginalDistribution> = marginals_for_state(&marginals, state).into_iter().cloned().collect();
        if rows.is_empty() {
            return Err(CliError::Input(format!("{}: no rows for state {state:?}", census.display())));
        }
        per_state.push((state, rows));
    }

    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let mut written = BTreeMap::new();
    let mut total = 0;
    println!("marginal fidelity (largest |count - n*p| per variable), n = {size}, seed = {seed}");
    for (state, rows) in per_state {
        let cohort = synthesize_cohort(&rows, size, seed).map_err(|e| CliError::Input(format!("{state}: {e}")))?;
        for marginal in &rows {
            let name = &marginal.variable.name;
            let counts = cohort.category_counts(name).expect("cohort holds its variables");
            let worst = counts
                .iter()
                .zip(&marginal.proportions)
                .map(|((_, count), p)| (*count as f64 - size as f64 * p).abs())
                .fold(0.0, f64::max);
            println!("  {state:<14} {name:<12} {worst:.3}");
        }
        let path = out.join(cohort_file_name(state));
        fs::write(&path, cohort.to_json()).map_err(io_err(&path))?;
        total += cohort.agents.len();
        written.insert(state.clone(), FileDigest::of(&path)?);
    }

    let manifest = CohortManifest {
        census: FileDigest::of(&census)?,
        seed,
        size,
        cohorts: written,
        tool_version: TOOL_VERSION.to_string(),
    };
    let manifest_path = out.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;
    println!("wrote {} cohorts ({total} agents) to {}", manifest.cohorts.len(), out.display());
    Ok(())
}
