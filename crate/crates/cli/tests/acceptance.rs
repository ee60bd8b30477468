//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the verdict lines print in order and
//! unbuffered; the process fails if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use icsm_core::analysis::{
    compare_configs, cramers_v, explanatory_weight, margin_of_error, per_round_dem_shares, reliability,
    shares_for_round, validity, BenchmarkSpec, ContingencyTable, InflationMode, StateShare, ValidityReport, WinnerCall,
    DEFAULT_INFLATION,
};
use icsm_core::backend::{Backend, BackendConfig, BackendKind, ParametricWeights, ScriptedFixtures};
use icsm_core::experiment::{read_log, run_experiment, ExperimentConfig, ExperimentInputs, LogMode, RoundRecord};
use icsm_core::population::{apportion, load_marginals, marginals_for_state, synthesize_cohort, Cohort};
use icsm_core::prompting::{parse_response, PromptError, PromptTemplate, Scenario, VoteResponse};

const STATES: [&str; 6] = ["California", "Georgia", "Pennsylvania", "Wisconsin", "Michigan", "Texas"];

/// Published margins, rounds 1 and 2, in `STATES` order.
const MARGINS: [[f64; 6]; 2] = [[0.056, 0.045, 0.029, 0.006, 0.010, 0.036], [0.065, 0.079, 0.034, 0.014, 0.019, 0.009]];

/// Table precision is 3 dp; the extra slack absorbs binary rounding of
/// differences that land exactly on the half-unit (Wisconsin, round 2).
const MARGIN_TOLERANCE: f64 = 0.0005 + 1e-9;

fn data(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(rel)
}

fn icsm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icsm"))
        .args(args)
        .current_dir(cwd)
        .env_remove("ICSM_API_KEY")
        .env("RUST_LOG", "warn")
        .output()
        .expect("icsm binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// SplitMix64, enough for reproducible test inputs.
struct Rng(u64);

impl Rng {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    fn unit(&mut self) -> f64 {
        (self.next() >> 11) as f64 / (1u64 << 53) as f64
    }

    fn below(&mut self, n: u64) -> u64 {
        self.next() % n
    }
}

fn benchmark() -> BenchmarkSpec {
    let text = fs::read(data("benchmark/table2.csv")).unwrap();
    BenchmarkSpec::from_csv(text.as_slice(), DEFAULT_INFLATION, InflationMode::Range).unwrap()
}

fn fixture(round: u32) -> Vec<RoundRecord> {
    read_log(&data(&format!("fixtures/table2_round{round}.jsonl"))).unwrap()
}

fn fixture_validity(round: u32) -> ValidityReport {
    let shares: Vec<StateShare> = shares_for_round(&fixture(round), 0).unwrap().into_values().collect();
    validity(&shares, &benchmark()).unwrap()
}

fn c1_margin_replay() -> String {
    let bench = benchmark();
    let mut worst: f64 = 0.0;
    for (r, published) in MARGINS.iter().enumerate() {
        let shares = shares_for_round(&fixture(r as u32 + 1), 0).unwrap();
        for (state, expected) in STATES.iter().zip(published) {
            let margin = margin_of_error(shares[*state].dem_norm, bench.actual_dem_norm(state).unwrap());
            let off = (margin - expected).abs();
            assert!(off <= MARGIN_TOLERANCE, "round {} {state}: {margin} vs {expected}", r + 1);
            worst = worst.max(off);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let out = icsm(
        &[
            "analyze",
            "validity",
            data("fixtures/table2_round1.jsonl").to_str().unwrap(),
            "--benchmark",
            data("benchmark/table2.csv").to_str().unwrap(),
            "--out",
            "reports",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("margins 0.006 to 0.056"), "{}", stdout(&out));
    format!("12 margins match, largest deviation {worst:.5}")
}

fn c2_threshold() -> String {
    let (lo, hi) = benchmark().threshold_range();
    assert_eq!(format!("{lo:.4}"), "0.0249");
    assert_eq!(format!("{hi:.4}"), "0.1340");
    assert!(fixture_validity(1).pass && fixture_validity(2).pass);
    format!("range [{lo:.4}, {hi:.4}], both rounds PASS")
}

fn c3_winner_calls() -> String {
    let (r1, r2) = (fixture_validity(1), fixture_validity(2));
    assert_eq!(r1.correct_calls(), 5);
    let wrong: Vec<&str> =
        r1.states.iter().filter(|s| s.winner_call != WinnerCall::Correct).map(|s| s.state.as_str()).collect();
    assert_eq!(wrong, ["Wisconsin"]);
    assert_eq!(r2.correct_calls(), 6);
    assert!(compare_configs(&r1, &r2).unwrap().validated);
    assert!(!compare_configs(&r1, &r1).unwrap().validated);

    let dir = tempfile::tempdir().unwrap();
    let out = icsm(
        &[
            "compare",
            data("fixtures/table2_round1.jsonl").to_str().unwrap(),
            data("fixtures/table2_round2.jsonl").to_str().unwrap(),
            "--benchmark",
            data("benchmark/table2.csv").to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("5/6 -> 6/6") && text.contains("verdict validated"), "{text}");
    "round 1 5/6 (Wisconsin wrong), round 2 6/6, validated".into()
}

fn c4_cohort_fidelity() -> String {
    let marginals = load_marginals(fs::File::open(data("census/table1.csv")).unwrap(), None).unwrap();
    let mut worst: f64 = 0.0;
    for state in STATES {
        let rows: Vec<_> = marginals_for_state(&marginals, state).into_iter().cloned().collect();
        let cohort = synthesize_cohort(&rows, 1000, 2019).unwrap();
        for m in &rows {
            let counts = cohort.category_counts(&m.variable.name).unwrap();
            for ((_, count), p) in counts.iter().zip(&m.proportions) {
                let off = (*count as f64 - 1000.0 * p).abs();
                assert!(off < 1.0, "{state} {}: {count} vs {}", m.variable.name, 1000.0 * p);
                worst = worst.max(off);
            }
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 1000, 1, None);
    for out_dir in ["a", "b"] {
        let out = icsm(&["synthesize", "--config", config.to_str().unwrap(), "--out", out_dir], dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let mut agents = 0;
    for state in STATES {
        let name = icsm_core::experiment::cohort_file_name(state);
        let a = fs::read(dir.path().join("a").join(&name)).unwrap();
        assert_eq!(a, fs::read(dir.path().join("b").join(&name)).unwrap(), "{state}");
        agents += Cohort::from_json(std::str::from_utf8(&a).unwrap()).unwrap().agents.len();
    }
    assert_eq!(agents, 6000);
    format!("6000 agents, worst |count - n*p| {worst:.3}, reruns byte-identical")
}

/// Hands out the leftover seats one at a time to the largest remaining quota.
fn seat_by_seat(proportions: &[f64], n: usize) -> Vec<usize> {
    let quotas: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    while counts.iter().sum::<usize>() < n {
        let mut best = 0;
        for i in 1..counts.len() {
            if quotas[i] - counts[i] as f64 > quotas[best] - counts[best] as f64 {
                best = i;
            }
        }
        counts[best] += 1;
    }
    counts
}

fn c5_apportionment() -> String {
    let mut rng = Rng(5);
    for case in 0..1000 {
        let k = 1 + rng.below(10) as usize;
        let n = 1 + rng.below(10_000) as usize;
        let raw: Vec<f64> = (0..k).map(|_| rng.unit() + 1e-6).collect();
        let total: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let got = apportion(&p, n).unwrap();
        assert_eq!(got, seat_by_seat(&p, n), "case {case}: k={k} n={n}");
        assert_eq!(got.iter().sum::<usize>(), n);
    }
    "1000 random simplexes agree".into()
}

fn scenario() -> Scenario {
    Scenario::two_candidate("2024 presidential election", "Kamala Harris", "Donald Trump").unwrap()
}

fn c6_parser() -> String {
    let scenario = scenario();
    let mut rng = Rng(6);
    for _ in 0..1000 {
        let a = rng.below(1001);
        let b = rng.below(1001 - a);
        let response = VoteResponse {
            p_dem: a as f64 / 1000.0,
            p_rep: b as f64 / 1000.0,
            p_other: (1000 - a - b) as f64 / 1000.0,
            reason: format!("I live here. Reason {}.", rng.next()),
            renormalized: false,
        };
        let text = response.to_response_text(&scenario);
        let parsed = parse_response(&text, &scenario).unwrap();
        assert_eq!(parsed, response, "{text}");
    }
    let mut banded = 0;
    for _ in 0..1000 {
        let target = 0.95 + 0.1 * rng.unit();
        let split = [rng.unit() + 0.01, rng.unit() + 0.01, rng.unit() + 0.01];
        let total: f64 = split.iter().sum();
        let p: Vec<f64> = split.iter().map(|x| x / total * target).collect();
        let text = format!(
            r#"{{"Donald Trump": {}, "Kamala Harris": {}, "vote for another candidate or not vote at all": {}, "Reason": "x"}}"#,
            p[1], p[0], p[2]
        );
        let parsed = parse_response(&text, &scenario).unwrap();
        assert!((parsed.sum() - 1.0).abs() <= 1e-9);
        banded += usize::from(parsed.renormalized);
    }
    for bad in [0.9, 0.949, 1.051, 1.3] {
        let text = format!(
            r#"{{"Donald Trump": {}, "Kamala Harris": 0, "vote for another candidate or not vote at all": 0, "Reason": "x"}}"#,
            bad
        );
        assert!(matches!(parse_response(&text, &scenario), Err(PromptError::MalformedResponse(_))), "{bad}");
    }
    format!("1000 round trips exact, {banded} banded sums renormalized, out-of-band rejected")
}

/// Pearson chi-squared summed cell by cell against `r_i c_j / N`, then V.
fn oracle_v(counts: &[Vec<u64>]) -> f64 {
    let n: f64 = counts.iter().flatten().sum::<u64>() as f64;
    let r: Vec<f64> = counts.iter().map(|row| row.iter().sum::<u64>() as f64).collect();
    let c: Vec<f64> = (0..counts[0].len()).map(|j| counts.iter().map(|row| row[j]).sum::<u64>() as f64).collect();
    let mut chi = 0.0;
    for i in 0..r.len() {
        for j in 0..c.len() {
            let e = r[i] * c[j] / n;
            chi += (counts[i][j] as f64 - e).powi(2) / e;
        }
    }
    (chi / (n * (r.len().min(c.len()) - 1) as f64)).sqrt().min(1.0)
}

fn c7_cramers() -> String {
    let mut rng = Rng(7);
    let mut checked = 0;
    while checked < 500 {
        let rows = 2 + rng.below(3) as usize;
        let cols = 2 + rng.below(3) as usize;
        let counts: Vec<Vec<u64>> = (0..rows).map(|_| (0..cols).map(|_| rng.below(51)).collect()).collect();
        let zero_margin =
            counts.iter().any(|r| r.iter().all(|&x| x == 0)) || (0..cols).any(|j| counts.iter().all(|r| r[j] == 0));
        if zero_margin {
            continue;
        }
        let v = cramers_v(&ContingencyTable::from_counts(counts.clone()).unwrap()).unwrap();
        assert!((v - oracle_v(&counts)).abs() <= 1e-12, "{counts:?}");
        assert!((0.0..=1.0).contains(&v));
        checked += 1;
    }
    let perfect = cramers_v(&ContingencyTable::from_counts(vec![vec![10, 0], vec![0, 10]]).unwrap()).unwrap();
    let uniform = cramers_v(&ContingencyTable::from_counts(vec![vec![7; 3]; 3]).unwrap()).unwrap();
    assert_eq!((perfect, uniform), (1.0, 0.0));
    "500 random tables within 1e-12, V=1 and V=0 fixtures hold".into()
}

fn weight_record(state: &str, id: u64, reason: &str) -> RoundRecord {
    RoundRecord {
        experiment_id: "weights".into(),
        round_index: 0,
        agent_id: id,
        state: state.into(),
        attributes: BTreeMap::new(),
        raw_text: String::new(),
        parsed: Some(VoteResponse { p_dem: 0.5, p_rep: 0.4, p_other: 0.1, reason: reason.into(), renormalized: false }),
        parse_error: None,
        prompt_digest: String::new(),
        model_id: "fixture".into(),
        timestamp: String::new(),
    }
}

fn c8_weight() -> String {
    let mut rng = Rng(8);
    for _ in 0..200 {
        let mut records = Vec::new();
        let mut expected = BTreeMap::new();
        for state in STATES {
            let n = 1 + rng.below(300);
            let k = rng.below(n + 1);
            for id in 0..n {
                let reason = if id < k {
                    "I am a voter with a college degree. My Education shaped this."
                } else if id % 2 == 0 {
                    "My education is a Bachelor's degree. Prices decide it."
                } else {
                    "I am a voter. The economy decides it."
                };
                records.push(weight_record(state, id, reason));
            }
            expected.insert(state.to_string(), k as f64 / n as f64);
        }
        let report = explanatory_weight(&records, "education").unwrap();
        for s in &report.states {
            assert_eq!(s.proportion, expected[&s.state], "{}", s.state);
        }
    }
    let first_only = [weight_record("Ohio", 0, "My education is in art. I like lower taxes.")];
    assert_eq!(explanatory_weight(&first_only, "education").unwrap().overall_mean, 0.0);
    "planted k/N recovered exactly on 200 corpora, first-sentence mentions ignored".into()
}

fn reliability_cohort() -> Cohort {
    let marginals = load_marginals(fs::File::open(data("census/table1.csv")).unwrap(), None).unwrap();
    let rows: Vec<_> = marginals_for_state(&marginals, "Michigan").into_iter().cloned().collect();
    synthesize_cohort(&rows, 100, 11).unwrap()
}

fn ci_width(cohort: &Cohort, template: &PromptTemplate, backend: BackendConfig, rounds: u32, dir: &Path) -> (f64, f64) {
    let config = ExperimentConfig {
        experiment_id: "reliability".into(),
        states: vec!["Michigan".into()],
        cohorts: PathBuf::new(),
        census: None,
        cohort_size: None,
        variables: vec![],
        variables_enabled: ["race", "sex", "age", "occupation", "education"].map(String::from).to_vec(),
        scenario: scenario(),
        template: PathBuf::new(),
        rounds,
        root_seed: 0,
        backend,
    };
    let backend = Backend::from_config(&config.backend, &config.scenario).unwrap();
    let log = dir.join(format!("run{}.jsonl", fs::read_dir(dir).unwrap().count()));
    let inputs = ExperimentInputs { cohorts: std::slice::from_ref(cohort), template, backend: &backend, cache: None };
    run_experiment(&config, &inputs, &log, LogMode::Fresh).unwrap();
    let series = per_round_dem_shares(&read_log(&log).unwrap()).unwrap();
    let r = reliability("Michigan", &series["Michigan"]).unwrap();
    (r.ci_width(), r.max_fluctuation)
}

fn c9_reliability() -> String {
    let cohort = reliability_cohort();
    let template = PromptTemplate::parse(&fs::read_to_string(data("templates/fig2_fig4.txt")).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (mut w10, mut w40) = (0.0, 0.0);
    for rep in 0..20u64 {
        let weights = ParametricWeights {
            base: 0.4,
            state_base: BTreeMap::new(),
            offsets: BTreeMap::new(),
            jitter: 0.2,
            other_min: 0.0,
            other_max: 0.1,
            seed: 1000 + rep,
        };
        let mut config = BackendConfig::new(BackendKind::ParametricMock, "parametric");
        config.parametric = Some(weights);
        w10 += ci_width(&cohort, &template, config.clone(), 10, dir.path()).0 / 20.0;
        w40 += ci_width(&cohort, &template, config, 40, dir.path()).0 / 20.0;
    }
    let ratio = w40 / (w10 / 2.0);
    assert!((ratio - 1.0).abs() <= 0.25, "w10 {w10}, w40 {w40}, ratio {ratio}");

    let fixtures = ScriptedFixtures {
        responses: BTreeMap::new(),
        default: Some(
            VoteResponse { p_dem: 0.47, p_rep: 0.5, p_other: 0.03, reason: "Fixed.".into(), renormalized: false }
                .to_response_text(&scenario()),
        ),
    };
    let fixture_path = dir.path().join("fixtures.json");
    fs::write(&fixture_path, serde_json::to_string(&fixtures).unwrap()).unwrap();
    let mut config = BackendConfig::new(BackendKind::ScriptedMock, "scripted");
    config.fixtures = Some(fixture_path);
    let (width, fluctuation) = ci_width(&cohort, &template, config, 10, dir.path());
    assert_eq!((width, fluctuation), (0.0, 0.0));
    format!("mean width 10 rounds {w10:.5}, 40 rounds {w40:.5}, ratio to half {ratio:.3}; scripted sd 0")
}

/// Writes a six-state config with absolute paths into `dir`.
fn write_config(dir: &Path, size: usize, rounds: u32, seed: Option<u64>) -> PathBuf {
    let mut text = fs::read_to_string(data("configs/round2.toml")).unwrap();
    let abs = |rel: &str| data(rel).display().to_string();
    text = text
        .replace("\"../census/table1.csv\"", &format!("{:?}", abs("census/table1.csv")))
        .replace("\"../templates/fig2_fig4.txt\"", &format!("{:?}", abs("templates/fig2_fig4.txt")))
        .replace("cohort_size = 1000", &format!("cohort_size = {size}"))
        .replace("rounds = 1", &format!("rounds = {rounds}"));
    if let Some(seed) = seed {
        text = text.replace("seed = 7", &format!("seed = {seed}"));
    }
    let path = dir.join("experiment.toml");
    fs::write(&path, text).unwrap();
    path
}

fn c10_end_to_end() -> String {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 1000, 1, None);
    let config = config.to_str().unwrap();
    let bench = data("benchmark/table2.csv");
    let bench = bench.to_str().unwrap();
    let mut verdicts = Vec::new();
    for pass in ["a", "b"] {
        let log = format!("run_{pass}.jsonl");
        let reports = format!("reports_{pass}");
        let steps: [Vec<&str>; 3] = [
            vec!["synthesize", "--config", config],
            vec!["run", "--config", config, "--out", &log],
            vec!["analyze", "validity", &log, "--benchmark", bench, "--out", &reports],
        ];
        for step in &steps {
            let out = icsm(step, dir.path());
            assert!(out.status.success(), "{step:?}: {}", String::from_utf8_lossy(&out.stderr));
            if step[0] == "analyze" {
                let text = stdout(&out);
                let verdict = text.lines().find(|l| l.starts_with("verdict ")).expect("verdict line").to_string();
                verdicts.push(verdict);
            }
        }
        let cramers = icsm(&["analyze", "cramers", &log, "--variable", "education", "--out", &reports], dir.path());
        assert!(cramers.status.success());
        let weight = icsm(&["analyze", "weight", &log, "--term", "education", "--out", &reports], dir.path());
        assert!(weight.status.success());
    }
    assert_eq!(verdicts[0], verdicts[1]);
    let strip = |log: &str| -> Vec<String> {
        read_log(&dir.path().join(log)).unwrap().iter().map(|r| r.without_timestamp().to_line()).collect()
    };
    assert_eq!(strip("run_a.jsonl"), strip("run_b.jsonl"));
    let mut files = 0;
    for entry in fs::read_dir(dir.path().join("reports_a")).unwrap() {
        let name = entry.unwrap().file_name();
        let a = fs::read(dir.path().join("reports_a").join(&name)).unwrap();
        let b = fs::read(dir.path().join("reports_b").join(&name)).unwrap();
        assert_eq!(a, b, "{name:?} differs");
        files += 1;
    }
    assert_eq!(files, 6);
    format!("{} twice, {files} report files byte-identical, logs equal modulo timestamps", verdicts[0])
}

fn main() {
    let criteria: [(&str, fn() -> String); 10] = [
        ("published margin replay", c1_margin_replay),
        ("validity threshold", c2_threshold),
        ("winner-call replay", c3_winner_calls),
        ("cohort fidelity", c4_cohort_fidelity),
        ("apportionment oracle", c5_apportionment),
        ("parser properties", c6_parser),
        ("Cramer's V oracle", c7_cramers),
        ("explanatory weight", c8_weight),
        ("reliability scaling", c9_reliability),
        ("end-to-end offline", c10_end_to_end),
    ];
    // `cargo test` passes harness flags; honour a name filter, ignore the rest
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (index, (name, check)) in criteria.iter().enumerate() {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        match panic::catch_unwind(check) {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", index + 1),
            Err(payload) => {
                failed += 1;
                let message = payload
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("criterion {:>2} FAIL  {name}: {message}", index + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
