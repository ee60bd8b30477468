use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use icsm_core::analysis::{
    compare_configs, contingency_from_records, cramers_v, explanatory_weight, margin_of_error, per_round_dem_shares,
    reliability, shares_for_round, validity, winner_call, AnalysisError, BenchmarkSpec, InflationMode, StateShare,
    ValidityReport, DEFAULT_INFLATION,
};
use icsm_core::digest::sha256_hex;
use icsm_core::experiment::{read_log, RoundRecord};
use serde_json::json;

use crate::manifest::{log_provenance, register_reports, RunManifest};
use crate::report::{f3, f4, num, Report, Table};
use crate::{io_err, BenchmarkArgs, CliError, CompareArgs, ReportKind, Result};

struct LoadedLog {
    path: PathBuf,
    records: Vec<RoundRecord>,
    base: String,
    manifest: Option<RunManifest>,
}

fn load_log(path: &Path) -> Result<LoadedLog> {
    if !path.exists() {
        return Err(CliError::Input(format!("{}: run log not found", path.display())));
    }
    let records = read_log(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if records.is_empty() {
        return Err(CliError::Input(format!("{}: run log is empty", path.display())));
    }
    let (base, manifest) = log_provenance(path, &records)?;
    Ok(LoadedLog { path: path.to_path_buf(), records, base, manifest })
}

struct Benchmark {
    spec: BenchmarkSpec,
    digest: String,
}

fn load_benchmark(path: &Path, inflation: f64, mode: InflationMode) -> Result<Benchmark> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let spec = BenchmarkSpec::from_csv(bytes.as_slice(), inflation, mode)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(Benchmark { spec, digest: sha256_hex(&bytes) })
}

fn load_bench_args(args: &BenchmarkArgs) -> Result<Benchmark> {
    let mode = if args.per_state { InflationMode::PerState } else { InflationMode::Range };
    load_benchmark(&args.benchmark, args.inflation, mode)
}

fn provenance(bases: &[&str], report: &str, params: serde_json::Value) -> String {
    sha256_hex(json!({ "inputs": bases, "report": report, "params": params }).to_string())
}

fn rounds_of(records: &[RoundRecord]) -> Vec<u32> {
    records.iter().map(|r| r.round_index).collect::<BTreeSet<_>>().into_iter().collect()
}

fn pick_round(records: &[RoundRecord], round: Option<u32>) -> Result<u32> {
    let rounds = rounds_of(records);
    match round {
        Some(r) if rounds.contains(&r) => Ok(r),
        Some(r) => Err(CliError::Input(format!("round {r} is not in the log (rounds {rounds:?})"))),
        None => Ok(rounds[0]),
    }
}

fn in_round(records: &[RoundRecord], round: Option<u32>) -> impl Iterator<Item = &RoundRecord> {
    records.iter().filter(move |r| round.is_none_or(|want| r.round_index == want))
}

fn emit(report: &Report, out: &Path, log: &LoadedLog) -> Result<()> {
    let written = report.write(out)?;
    print!("{}", report.full_text());
    register_reports(&log.path, log.manifest.clone(), &written)
}

pub fn cmd_analyze(kind: ReportKind) -> Result<()> {
    match kind {
        ReportKind::Shares { common, round, benchmark } => {
            let log = load_log(&common.log)?;
            let bench =
                benchmark.as_deref().map(|p| load_benchmark(p, DEFAULT_INFLATION, InflationMode::Range)).transpose()?;
            let params = json!({ "round": round, "benchmark": bench.as_ref().map(|b| &b.digest) });
            let report = shares_report(&log, round, bench.as_ref(), provenance(&[&log.base], "shares", params))?;
            emit(&report, &common.out, &log)
        }
        ReportKind::Reliability { common } => {
            let log = load_log(&common.log)?;
            let report = reliability_report(&log, provenance(&[&log.base], "reliability", json!({})))?;
            emit(&report, &common.out, &log)
        }
        ReportKind::Validity { common, bench, round } => {
            let log = load_log(&common.log)?;
            let benchmark = load_bench_args(&bench)?;
            let round = pick_round(&log.records, round)?;
            let params = json!({
                "round": round,
                "benchmark": benchmark.digest,
                "inflation": bench.inflation,
                "per_state": bench.per_state,
            });
            let result = validity_of(&log.records, round, &benchmark.spec)?;
            let report = validity_report(&result, round, provenance(&[&log.base], "validity", params));
            emit(&report, &common.out, &log)
        }
        ReportKind::Weight { common, term, round } => {
            let log = load_log(&common.log)?;
            let params = json!({ "term": term, "round": round });
            let report = weight_report(&log, &term, round, provenance(&[&log.base], "weight", params))?;
            emit(&report, &common.out, &log)
        }
        ReportKind::Cramers { common, variable, round } => {
            let log = load_log(&common.log)?;
            let params = json!({ "variable": variable, "round": round });
            let report = cramers_report(&log, &variable, round, provenance(&[&log.base], "cramers", params))?;
            emit(&report, &common.out, &log)
        }
    }
}

fn validity_of(records: &[RoundRecord], round: u32, spec: &BenchmarkSpec) -> Result<ValidityReport> {
    let shares: Vec<StateShare> = shares_for_round(records, round)?.into_values().collect();
    Ok(validity(&shares, spec)?)
}

fn shares_report(log: &LoadedLog, round: Option<u32>, bench: Option<&Benchmark>, prov: String) -> Result<Report> {
    let rounds = match round {
        Some(r) => vec![pick_round(&log.records, Some(r))?],
        None => rounds_of(&log.records),
    };
    let mut headers = vec!["round", "state", "responses", "dem", "rep", "other", "dem_2p", "rep_2p"];
    if bench.is_some() {
        headers.extend(["actual_dem_2p", "margin", "winner_call"]);
    }
    let mut report = Report::new("shares", prov, &headers);
    let mut table = Table::new(&headers);
    for r in rounds {
        for (state, share) in shares_for_round(&log.records, r)? {
            let mut csv_row = vec![
                r.to_string(),
                state.clone(),
                share.responses.to_string(),
                num(share.raw_dem),
                num(share.raw_rep),
                num(share.raw_other),
                num(share.dem_norm),
                num(share.rep_norm),
            ];
            let mut text_row = vec![
                r.to_string(),
                state.clone(),
                share.responses.to_string(),
                f4(share.raw_dem),
                f4(share.raw_rep),
                f4(share.raw_other),
                f4(share.dem_norm),
                f4(share.rep_norm),
            ];
            if let Some(bench) = bench {
                let actual = bench.spec.actual_dem_norm(&state).ok_or(AnalysisError::MissingActual(state.clone()))?;
                let margin = margin_of_error(share.dem_norm, actual);
                let call = winner_call(share.dem_norm, actual).as_str();
                csv_row.extend([num(actual), num(margin), call.to_string()]);
                text_row.extend([f4(actual), f3(margin), call.to_string()]);
            }
            report.csv_rows.push(csv_row);
            table.push(text_row);
        }
    }
    report.text = table.render();
    Ok(report)
}

fn reliability_report(log: &LoadedLog, prov: String) -> Result<Report> {
    let headers = ["state", "rounds", "mean", "sd", "ci_low", "ci_high", "max_fluctuation"];
    let mut report = Report::new("reliability", prov, &headers);
    let mut table = Table::new(&headers);
    for (state, series) in per_round_dem_shares(&log.records)? {
        let r = reliability(&state, &series)?;
        report.csv_rows.push(vec![
            state.clone(),
            r.n_rounds.to_string(),
            num(r.mean),
            num(r.sd),
            num(r.ci_low),
            num(r.ci_high),
            num(r.max_fluctuation),
        ]);
        table.push(vec![
            state,
            r.n_rounds.to_string(),
            f4(r.mean),
            f4(r.sd),
            f4(r.ci_low),
            f4(r.ci_high),
            f4(r.max_fluctuation),
        ]);
    }
    report.text = format!("95% confidence intervals of the two-party Democratic share\n{}", table.render());
    Ok(report)
}

fn validity_report(result: &ValidityReport, round: u32, prov: String) -> Report {
    let headers = ["state", "simulated_dem_2p", "actual_dem_2p", "margin", "winner_call", "threshold"];
    let mut report = Report::new("validity", prov, &headers);
    let mut table = Table::new(&headers);
    for s in &result.states {
        report.csv_rows.push(vec![
            s.state.clone(),
            num(s.simulated_dem_norm),
            num(s.actual_dem_norm),
            num(s.margin),
            s.winner_call.as_str().to_string(),
            num(s.threshold),
        ]);
        table.push(vec![
            s.state.clone(),
            f4(s.simulated_dem_norm),
            f4(s.actual_dem_norm),
            f3(s.margin),
            s.winner_call.as_str().to_string(),
            f4(s.threshold),
        ]);
    }
    let (lo, hi) = result.margin_range();
    let mode = match result.mode {
        InflationMode::Range => "range",
        InflationMode::PerState => "per state",
    };
    let mut text = format!("round {round}\n{}", table.render());
    let _ = writeln!(
        text,
        "threshold range [{}, {}] (benchmark errors x {}, {mode})",
        f4(result.threshold_lo),
        f4(result.threshold_hi),
        1.0 + result.inflation_factor
    );
    let _ = writeln!(text, "margins {} to {}, mean {}", f3(lo), f3(hi), f3(result.mean_margin()));
    let _ = writeln!(text, "correct winner calls {}/{}", result.correct_calls(), result.states.len());
    let _ = writeln!(text, "verdict {}", if result.pass { "PASS" } else { "FAIL" });
    report.text = text;
    report
}

fn weight_report(log: &LoadedLog, term: &str, round: Option<u32>, prov: String) -> Result<Report> {
    if let Some(r) = round {
        pick_round(&log.records, Some(r))?;
    }
    let result = explanatory_weight(in_round(&log.records, round), term)?;
    let headers = ["state", "mentions", "responses", "proportion"];
    let mut report = Report::new("weight", prov, &headers);
    let mut table = Table::new(&headers);
    for s in &result.states {
        report.csv_rows.push(vec![s.state.clone(), s.mentions.to_string(), s.responses.to_string(), num(s.proportion)]);
        table.push(vec![
            s.state.clone(),
            s.mentions.to_string(),
            s.responses.to_string(),
            format!("{:.1}%", 100.0 * s.proportion),
        ]);
    }
    report.text = format!(
        "reasons citing {:?} after the first sentence\n{}overall mean {:.1}%\n",
        result.term,
        table.render(),
        100.0 * result.overall_mean
    );
    Ok(report)
}

fn cramers_report(log: &LoadedLog, variable: &str, round: Option<u32>, prov: String) -> Result<Report> {
    if let Some(r) = round {
        pick_round(&log.records, Some(r))?;
    }
    let (table, ties) = contingency_from_records(in_round(&log.records, round), variable, None)?;
    let v = cramers_v(&table)?;
    let headers = ["category", "democrat", "republican", "total"];
    let mut report = Report::new("cramers", prov, &headers);
    let mut text_table = Table::new(&headers);
    for (label, row) in table.row_labels.iter().zip(&table.counts) {
        let cells = vec![label.clone(), row[0].to_string(), row[1].to_string(), (row[0] + row[1]).to_string()];
        report.csv_rows.push(cells.clone());
        text_table.push(cells);
    }
    report.csv_rows.push(vec!["cramers_v".into(), num(v), String::new(), table.total().to_string()]);
    report.text = format!(
        "{variable} by binary party support\n{}Cramer's V {} over {} responses ({ties} ties counted as Republican)\n",
        text_table.render(),
        f4(v),
        table.total()
    );
    Ok(report)
}

pub fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let a = load_log(&args.log_a)?;
    let b = load_log(&args.log_b)?;
    let benchmark = load_bench_args(&args.bench)?;
    let round_a = pick_round(&a.records, args.round)?;
    let round_b = pick_round(&b.records, args.round)?;
    let states = |log: &LoadedLog, round| -> BTreeSet<String> {
        log.records.iter().filter(|r| r.round_index == round).map(|r| r.state.clone()).collect()
    };
    let (states_a, states_b) = (states(&a, round_a), states(&b, round_b));
    if states_a != states_b {
        return Err(CliError::Input(format!("logs cover different states: {:?} vs {:?}", states_a, states_b)));
    }
    let va = validity_of(&a.records, round_a, &benchmark.spec)?;
    let vb = validity_of(&b.records, round_b, &benchmark.spec)?;
    let result = compare_configs(&va, &vb)?;

    let params = json!({
        "round_a": round_a,
        "round_b": round_b,
        "benchmark": benchmark.digest,
        "inflation": args.bench.inflation,
        "per_state": args.bench.per_state,
    });
    let headers = ["state", "margin_a", "margin_b", "delta", "call_a", "call_b"];
    let mut report = Report::new("compare", provenance(&[&a.base, &b.base], "compare", params), &headers);
    let mut table = Table::new(&headers);
    for s in &result.states {
        report.csv_rows.push(vec![
            s.state.clone(),
            num(s.margin_a),
            num(s.margin_b),
            num(s.delta),
            s.call_a.as_str().into(),
            s.call_b.as_str().into(),
        ]);
        table.push(vec![
            s.state.clone(),
            f3(s.margin_a),
            f3(s.margin_b),
            format!("{:+.3}", s.delta),
            s.call_a.as_str().into(),
            s.call_b.as_str().into(),
        ]);
    }
    let n = result.states.len();
    let mut text = format!("A = {}, B = {}\n{}", a.path.display(), b.path.display(), table.render());
    let _ = writeln!(text, "correct winner calls {}/{n} -> {}/{n}", result.correct_a, result.correct_b);
    let _ = writeln!(text, "mean margin {} -> {}", f3(result.mean_error_a), f3(result.mean_error_b));
    let _ = writeln!(text, "validity A {}, B {}", verdict(&va), verdict(&vb));
    let _ = writeln!(text, "verdict {}", if result.validated { "validated" } else { "not validated" });
    report.text = text;

    let written = report.write(&args.out)?;
    print!("{}", report.full_text());
    register_reports(&a.path, a.manifest.clone(), &written)?;
    register_reports(&b.path, b.manifest.clone(), &written)
}

fn verdict(report: &ValidityReport) -> &'static str {
    if report.pass {
        "PASS"
    } else {
        "FAIL"
    }
}
