use std::fs;
use std::path::PathBuf;

use icsm_core::backend::{Backend, ResponseCache};
use icsm_core::digest::sha256_hex;
use icsm_core::experiment::{
    cohort_file_name, load_cohorts, log_content_digest, read_log, run_experiment, ExperimentConfig, ExperimentError,
    ExperimentInputs, LogMode,
};
use icsm_core::prompting::PromptTemplate;
use log::info;

use crate::manifest::{FileDigest, RunManifest, TOOL_VERSION};
use crate::{io_err, CliError, Result, RunArgs};

pub fn cmd_run(args: &RunArgs) -> Result<()> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(rounds) = args.rounds {
        config.rounds = rounds;
    }
    if let Some(seed) = args.seed {
        match config.backend.parametric.as_mut() {
            Some(weights) => weights.seed = seed,
            None => return Err(CliError::Input("--seed only applies to the parametric mock backend".into())),
        }
    }
    config.validate()?;

    let config_bytes = fs::read(&args.config).map_err(io_err(&args.config))?;
    let seed = config.backend.parametric.as_ref().map(|w| w.seed);
    let config_digest = sha256_hex(format!("{}\0rounds={}\0seed={seed:?}", sha256_hex(config_bytes), config.rounds));

    let cohorts = load_cohorts(&config.cohorts, &config.states).map_err(|e| match e {
        ExperimentError::Io { path, source } => {
            CliError::Input(format!("{}: {source} (run `icsm synthesize` first)", path.display()))
        }
        other => other.into(),
    })?;
    let template_text = fs::read_to_string(&config.template).map_err(io_err(&config.template))?;
    let template = PromptTemplate::parse(&template_text)
        .map_err(|e| CliError::Input(format!("{}: {e}", config.template.display())))?;
    let backend = Backend::from_config(&config.backend, &config.scenario)?;
    if backend.is_offline() {
        info!("offline backend {}", backend.model_id());
    }
    let cache = config.backend.cache_dir.as_ref().map(ResponseCache::open).transpose()?;

    let log_path = args.out.clone().unwrap_or_else(|| PathBuf::from(format!("{}.jsonl", config.experiment_id)));
    let mode = if args.resume { LogMode::Resume } else { LogMode::Fresh };
    let inputs = ExperimentInputs { cohorts: &cohorts, template: &template, backend: &backend, cache: cache.as_ref() };
    let outcome = run_experiment(&config, &inputs, &log_path, mode);

    let summary = match &outcome {
        Ok(summary) => Some(*summary),
        Err(ExperimentError::Backend { summary, .. }) => Some(*summary),
        Err(_) => None,
    };
    if let Some(summary) = summary {
        println!("{summary}");
        if log_path.exists() {
            let records = read_log(&log_path)?;
            let mut cohort_files = std::collections::BTreeMap::new();
            for state in &config.states {
                cohort_files.insert(state.clone(), FileDigest::of(&config.cohorts.join(cohort_file_name(state)))?);
            }
            let manifest = RunManifest {
                experiment_id: config.experiment_id.clone(),
                config_digest,
                cohorts: cohort_files,
                run_log: log_path.clone(),
                log_digest: log_content_digest(&records),
                reports: Default::default(),
                tool_version: TOOL_VERSION.to_string(),
            };
            manifest.save(&RunManifest::path_for(&log_path))?;
            println!("run log {} holds {} records", log_path.display(), records.len());
        }
    }
    outcome?;
    Ok(())
}
