//! Command-line driver: `build`, `verify` and `report`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::constructor::{BuildError, Construction, EnumerationSummary, XDocument};
use crate::schedule::{
    grid_denominator_for, BlockMode, GridMode, Params, Schedule, ScheduleDocument, ScheduleError,
    TruncationMode,
};
use crate::verify::{
    check_reset, default_deltas, generate_corpus, lemma_suite, lower_experiment, plotdata,
    random_lower_vectors, threshold_scan, write_targets_csv, Check, CorpusSpec, Family,
};

/// Failure classes, each with its exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("assertion failure: {0}")]
    Failed(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("corrupt artifact: {0}")]
    Corrupt(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) | CliError::Corrupt(_) => 3,
        }
    }
}

/// Exit code for an error raised by [`run`].
pub fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<CliError>())
        .map_or(3, CliError::exit_code)
}

#[derive(Debug, Parser)]
#[command(name = "shift-threshold", version, about = "Build and verify the weighted-shift construction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the schedule and `x` from a JSON config.
    Build {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the artifacts in a build directory.
    Verify {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
        /// Worker threads for corpus experiments.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Print verification results.
    Report {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, value_enum)]
        format: Format,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Lemmas,
    Upper,
    Lower,
    Scan,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
    Plotdata,
}

/// The config file: `Params` field for field. Only `epsilon`, `k_max` and
/// `seed` are required; missing fields follow the default rules, derived
/// from whichever related fields are given.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub epsilon: f64,
    pub k_max: usize,
    pub seed: u64,
    pub residues: Option<Vec<usize>>,
    pub block_dims: Option<Vec<usize>>,
    pub gamma: Option<f64>,
    pub tau: Option<Vec<f64>>,
    pub eta: Option<Vec<f64>>,
    pub magnitude_range: Option<Vec<u32>>,
    pub grid_denominators: Option<Vec<u32>>,
    pub grid_mode: Option<GridMode>,
    pub block_mode: Option<BlockMode>,
    pub truncation_mode: Option<TruncationMode>,
    pub target_budget: Option<usize>,
    pub zero_padding: Option<bool>,
    pub net_dim_cap: Option<usize>,
    pub net_point_budget: Option<usize>,
    pub time_cap: Option<u64>,
}

impl Config {
    pub fn resolve(&self) -> Params {
        let mut p = Params::defaults(self.epsilon, self.k_max);
        p.seed = self.seed;
        if let Some(r) = &self.residues {
            p.block_dims = r.iter().enumerate().map(|(i, &rk)| rk * (i + 2)).collect();
            p.residues = r.clone();
        }
        if let Some(d) = &self.block_dims {
            p.block_dims = d.clone();
        }
        if let Some(g) = self.gamma {
            p.gamma = g;
        }
        if let Some(t) = &self.tau {
            p.eta = t.clone();
            p.tau = t.clone();
        }
        if let Some(e) = &self.eta {
            p.eta = e.clone();
        }
        if let Some(m) = self.grid_mode {
            p.grid_mode = m;
        }
        p.grid_denominators = match (&self.grid_denominators, p.grid_mode) {
            (Some(j), _) => j.clone(),
            (None, GridMode::Integer) => vec![1; p.tau.len()],
            (None, GridMode::Fractional) => p.tau.iter().map(|&t| grid_denominator_for(t)).collect(),
        };
        if let Some(m) = &self.magnitude_range {
            p.magnitude_range = m.clone();
        }
        if let Some(m) = self.block_mode {
            p.block_mode = m;
        }
        if let Some(m) = self.truncation_mode {
            p.truncation_mode = m;
        }
        if let Some(b) = self.target_budget {
            p.target_budget = b;
        }
        if let Some(z) = self.zero_padding {
            p.zero_padding = z;
        }
        if let Some(c) = self.net_dim_cap {
            p.net_dim_cap = c;
        }
        if let Some(b) = self.net_point_budget {
            p.net_point_budget = b;
        }
        if let Some(t) = self.time_cap {
            p.time_cap = t;
        }
        p
    }
}

pub const MANIFEST_VERSION: u32 = 1;
const ARTIFACTS: [&str; 2] = ["schedule.json", "x.json"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub params_sha256: String,
    pub seed: u64,
    /// File name to SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
    pub blocks: Vec<EnumerationSummary>,
    pub x_entries: usize,
    pub timeline_end: u64,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn io_err(what: &str, path: &Path, e: std::io::Error) -> anyhow::Error {
    anyhow!(CliError::Io(format!("cannot {what} {}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io_err("write", path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| io_err("read", path, e))
}

/// Parses and validates a config file.
pub fn load_config(path: &Path) -> Result<Params> {
    let bytes = read_file(path)?;
    let cfg: Config = serde_json::from_slice(&bytes)
        .map_err(|e| anyhow!(CliError::Config(format!("{}: {e}", path.display()))))?;
    let p = cfg.resolve();
    let v = p.violations();
    if !v.is_empty() {
        return Err(anyhow!(CliError::Config(v.join("; "))));
    }
    Ok(p)
}

fn build_error(e: BuildError) -> anyhow::Error {
    match e {
        BuildError::Net(_) | BuildError::LaneBudget { .. } | BuildError::Schedule(_) => {
            anyhow!(CliError::Config(format!("budget overflow: {e}")))
        }
        other => anyhow!(CliError::Failed(other.to_string())),
    }
}

/// Serialized artifacts of one construction: `(file name, bytes)`.
pub fn artifacts(c: &Construction) -> Result<Vec<(String, Vec<u8>)>> {
    let schedule = serde_json::to_vec(&c.schedule.to_document())?;
    let x = serde_json::to_vec(&c.to_x_document())?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        params_sha256: sha256_hex(&serde_json::to_vec(c.params())?),
        seed: c.params().seed,
        files: BTreeMap::from([
            ("schedule.json".to_string(), sha256_hex(&schedule)),
            ("x.json".to_string(), sha256_hex(&x)),
        ]),
        blocks: c.enumeration_summaries(),
        x_entries: c.x.z.len(),
        timeline_end: c.schedule.timeline.end,
    };
    let mut manifest_bytes = serde_json::to_vec_pretty(&manifest)?;
    manifest_bytes.push(b'\n');
    Ok(vec![
        ("schedule.json".into(), schedule),
        ("x.json".into(), x),
        ("manifest.json".into(), manifest_bytes),
    ])
}

pub fn cmd_build(config: &Path, out: &Path) -> Result<Manifest> {
    let params = load_config(config)?;
    let c = Construction::build(params).map_err(build_error)?;
    fs::create_dir_all(out).map_err(|e| io_err("create", out, e))?;
    let files = artifacts(&c)?;
    for (name, bytes) in &files {
        write_file(&out.join(name), bytes)?;
    }
    let manifest: Manifest = serde_json::from_slice(&files[2].1)?;
    Ok(manifest)
}

/// Loads a build directory, checking every hash in the manifest.
pub fn load_artifacts(dir: &Path) -> Result<Construction> {
    let manifest: Manifest = serde_json::from_slice(&read_file(&dir.join("manifest.json"))?)
        .map_err(|e| anyhow!(CliError::Corrupt(format!("manifest.json: {e}"))))?;
    let mut contents = BTreeMap::new();
    for name in ARTIFACTS {
        let want = manifest
            .files
            .get(name)
            .ok_or_else(|| anyhow!(CliError::Corrupt(format!("manifest does not list {name}"))))?;
        let bytes = read_file(&dir.join(name))?;
        let got = sha256_hex(&bytes);
        if &got != want {
            return Err(anyhow!(CliError::Corrupt(format!(
                "hash mismatch for {name}: manifest {want}, file {got}"
            ))));
        }
        contents.insert(name, bytes);
    }
    let corrupt = |name: &str, e: &dyn std::fmt::Display| anyhow!(CliError::Corrupt(format!("{name}: {e}")));
    let doc: ScheduleDocument =
        serde_json::from_slice(&contents["schedule.json"]).map_err(|e| corrupt("schedule.json", &e))?;
    let schedule = Schedule::from_document(doc).map_err(|e: ScheduleError| corrupt("schedule.json", &e))?;
    let x: XDocument = serde_json::from_slice(&contents["x.json"]).map_err(|e| corrupt("x.json", &e))?;
    Construction::from_artifacts(schedule, x).map_err(|e| corrupt("x.json", &e))
}

/// Checks run by one suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteOutcome {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl SuiteOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn check(name: &str, samples: usize, failures: Vec<String>) -> Check {
    let passed = failures.is_empty();
    let detail = if passed { "ok".to_string() } else { failures.join("; ") };
    Check { name: name.into(), passed, samples, detail }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

fn suite_lemmas(c: &Construction, reports: &Path) -> Result<SuiteOutcome> {
    let (checks, visits) = lemma_suite(c, c.params().seed);
    write_json(&reports.join("lemmas.json"), &checks)?;
    write_json(&reports.join("visits.json"), &visits)?;
    Ok(SuiteOutcome { suite: Suite::Lemmas, checks })
}

fn suite_upper(c: &Construction, reports: &Path) -> Result<SuiteOutcome> {
    let p = c.params();
    let mode = p.truncation_mode;
    let corpus = generate_corpus(c, &CorpusSpec::standard(p.seed));
    let table = threshold_scan(c, &corpus, &[p.epsilon], mode, false);
    let mut csv = Vec::new();
    write_targets_csv(&table.targets, &mut csv)?;
    write_file(&reports.join("upper.csv"), &csv)?;
    write_json(&reports.join("upper.json"), &table.targets)?;

    let covered: Vec<_> = table.targets.iter().filter(|t| t.in_coverage).collect();
    let mut bound_failures = Vec::new();
    let mut recon_failures = Vec::new();
    let mut outright = 0;
    for t in &covered {
        let b = t.budget.as_ref().expect("in-coverage targets have a budget");
        let allowed = match mode {
            TruncationMode::Strict => p.epsilon,
            TruncationMode::Full => p.epsilon + b.residual / b.target_norm,
        };
        if b.realized_relative <= p.epsilon {
            outright += 1;
        }
        if b.realized_relative > allowed {
            bound_failures.push(format!("target {}: {} > {allowed}", t.id, b.realized_relative));
        }
        if b.reconstruction_gap() > 1e-10 {
            recon_failures.push(format!("target {}: gap {}", t.id, b.reconstruction_gap()));
        }
    }
    let mut checks = vec![
        check(
            "corpus-size",
            covered.len(),
            if covered.len() >= 500 { vec![] } else { vec![format!("{} in-coverage targets < 500", covered.len())] },
        ),
        check("upper-bound", covered.len(), bound_failures),
        check("budget-reconstruction", covered.len(), recon_failures),
    ];
    if mode == TruncationMode::Full {
        let fraction = outright as f64 / covered.len().max(1) as f64;
        let failures = if fraction >= 0.99 {
            vec![]
        } else {
            vec![format!("{fraction:.4} of targets within epsilon without the residual term, need 0.99")]
        };
        checks.push(check("upper-bound-outright", covered.len(), failures));
    }
    Ok(SuiteOutcome { suite: Suite::Upper, checks })
}

fn suite_lower(c: &Construction, reports: &Path) -> Result<SuiteOutcome> {
    let s = &c.schedule;
    let mut vectors = vec![c.x.z.clone()];
    vectors.extend(random_lower_vectors(c, 50, c.params().seed ^ 0x10));
    let levels = [0.5, 1.0, 2.0];
    let mut samples = Vec::new();
    let mut failures = Vec::new();
    for (i, u) in vectors.iter().enumerate() {
        for &level in &levels {
            for x in lower_experiment(u, level, s, 1..=c.params().k_max) {
                if !x.holds {
                    failures.push(format!("vector {i}, K = {level}, n = {}", x.n));
                }
                samples.push((i, level, x));
            }
        }
    }
    write_json(&reports.join("lower.json"), &samples)?;
    let checks = vec![check("barrier-inequality", samples.len(), failures), check_reset(s, &vectors)];
    Ok(SuiteOutcome { suite: Suite::Lower, checks })
}

fn suite_scan(c: &Construction, reports: &Path) -> Result<SuiteOutcome> {
    let p = c.params();
    let corpus = generate_corpus(c, &CorpusSpec::standard(p.seed));
    let table = threshold_scan(c, &corpus, &default_deltas(p.epsilon), p.truncation_mode, true);
    write_json(&reports.join("scan.json"), &table)?;
    write_file(&reports.join("scan_plotdata.txt"), plotdata(&table).as_bytes())?;
    let mut csv = Vec::new();
    write_targets_csv(&table.targets, &mut csv)?;
    write_file(&reports.join("scan.csv"), &csv)?;

    let mut checks = vec![check(
        "scan-monotone",
        table.rows.len(),
        if table.is_monotone() { vec![] } else { vec!["achieved fraction decreases somewhere".into()] },
    )];
    if p.truncation_mode == TruncationMode::Strict {
        let at = table.fraction_at(p.epsilon).unwrap_or(0.0);
        checks.push(check(
            "scan-at-epsilon",
            table.in_coverage,
            if at == 1.0 { vec![] } else { vec![format!("fraction {at} at delta = epsilon")] },
        ));
    }
    let barrier_failures = table
        .barriers
        .iter()
        .flat_map(|b| b.samples.iter().filter(|x| !x.holds).map(move |x| format!("K = {}, n = {}", b.level, x.n)))
        .collect();
    checks.push(check("barrier-diagnostics", table.barriers.len(), barrier_failures));
    let trend: Vec<f64> = table.provenance_coefficients.iter().map(|c| c.2.abs()).collect();
    let trend_ok = trend.windows(2).all(|w| w[1] <= w[0]) && trend.last().is_none_or(|&a| a <= trend[0]);
    checks.push(check(
        "barrier-coefficients-decay",
        trend.len(),
        if trend_ok { vec![] } else { vec![format!("{trend:?} is not nonincreasing")] },
    ));
    let barrier_family = table.targets.iter().filter(|t| t.family == Family::Barrier).count();
    debug_assert_eq!(barrier_family, table.barriers.len());
    Ok(SuiteOutcome { suite: Suite::Scan, checks })
}

pub fn cmd_verify(dir: &Path, suite: Suite) -> Result<Vec<SuiteOutcome>> {
    let c = load_artifacts(dir)?;
    let reports = dir.join("reports");
    fs::create_dir_all(&reports).map_err(|e| io_err("create", &reports, e))?;
    let suites = match suite {
        Suite::All => vec![Suite::Lemmas, Suite::Upper, Suite::Lower, Suite::Scan],
        one => vec![one],
    };
    let mut outcomes = Vec::new();
    for s in suites {
        outcomes.push(match s {
            Suite::Lemmas => suite_lemmas(&c, &reports)?,
            Suite::Upper => suite_upper(&c, &reports)?,
            Suite::Lower => suite_lower(&c, &reports)?,
            Suite::Scan => suite_scan(&c, &reports)?,
            Suite::All => unreachable!(),
        });
    }
    let summary_path = reports.join("summary.json");
    let mut summary: Vec<SuiteOutcome> = fs::read(&summary_path)
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .unwrap_or_default();
    summary.retain(|o| outcomes.iter().all(|n| n.suite != o.suite));
    summary.extend(outcomes.iter().cloned());
    summary.sort_by_key(|o| o.suite as u8);
    write_json(&summary_path, &summary)?;
    Ok(outcomes)
}

pub fn cmd_report(dir: &Path, format: Format) -> Result<String> {
    let reports = dir.join("reports");
    let missing = |name: &str| anyhow!(CliError::Io(format!("{name} not found under {}; run verify first", reports.display())));
    match format {
        Format::Json => {
            let bytes = fs::read(reports.join("summary.json")).map_err(|_| missing("summary.json"))?;
            Ok(String::from_utf8(bytes)?)
        }
        Format::Plotdata => {
            let bytes = fs::read(reports.join("scan_plotdata.txt")).map_err(|_| missing("scan_plotdata.txt"))?;
            Ok(String::from_utf8(bytes)?)
        }
        Format::Csv => {
            let bytes = fs::read(reports.join("summary.json")).map_err(|_| missing("summary.json"))?;
            let summary: Vec<SuiteOutcome> =
                serde_json::from_slice(&bytes).map_err(|e| anyhow!(CliError::Corrupt(format!("summary.json: {e}"))))?;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["suite", "check", "passed", "samples", "detail"])?;
            for o in &summary {
                for c in &o.checks {
                    let suite = format!("{:?}", o.suite).to_lowercase();
                    w.write_record([suite, c.name.clone(), c.passed.to_string(), c.samples.to_string(), c.detail.clone()])?;
                }
            }
            Ok(String::from_utf8(w.into_inner()?)?)
        }
    }
}

/// Runs one command; `Ok` carries the text to print.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Build { config, out } => {
            let m = cmd_build(&config, &out).context("build failed")?;
            let counts: Vec<String> = m.blocks.iter().map(|b| format!("k = {}: {} tuples", b.k, b.count)).collect();
            Ok(format!("wrote {} ({}; {} entries in x)\n", out.display(), counts.join(", "), m.x_entries))
        }
        Command::Verify { dir, suite, jobs } => {
            let outcomes = match jobs {
                Some(n) => rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| anyhow!(CliError::Config(format!("--jobs {n}: {e}"))))?
                    .install(|| cmd_verify(&dir, suite))?,
                None => cmd_verify(&dir, suite)?,
            };
            let mut text = String::new();
            for o in &outcomes {
                for c in &o.checks {
                    let verdict = if c.passed { "PASS" } else { "FAIL" };
                    text.push_str(&format!("{verdict} {:?}/{} ({} samples): {}\n", o.suite, c.name, c.samples, c.detail));
                }
            }
            if outcomes.iter().all(SuiteOutcome::passed) {
                Ok(text)
            } else {
                print!("{text}");
                Err(anyhow!(CliError::Failed("some checks failed; see reports/summary.json".into())))
            }
        }
        Command::Report { dir, format } => cmd_report(&dir, format),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_requires_seed_and_rejects_unknown_keys() {
        assert!(serde_json::from_str::<Config>(r#"{"epsilon": 0.5, "k_max": 2}"#).is_err());
        assert!(serde_json::from_str::<Config>(r#"{"epsilon": 0.5, "k_max": 2, "seed": 0, "colour": 1}"#).is_err());
        let c: Config = serde_json::from_str(r#"{"epsilon": 0.5, "k_max": 2, "seed": 9}"#).unwrap();
        let mut want = Params::defaults(0.5, 2);
        want.seed = 9;
        assert_eq!(c.resolve(), want);
    }

    #[test]
    fn config_derives_dependent_fields() {
        let c: Config = serde_json::from_str(r#"{"epsilon": 0.5, "k_max": 2, "seed": 0, "residues": [1, 2], "tau": [0.2, 0.1]}"#).unwrap();
        let p = c.resolve();
        assert_eq!(p.block_dims, vec![2, 6]);
        assert_eq!(p.eta, vec![0.2, 0.1]);
        assert_eq!(p.grid_denominators, vec![grid_denominator_for(0.2), grid_denominator_for(0.1)]);
        let c: Config = serde_json::from_str(r#"{"epsilon": 0.9, "k_max": 1, "seed": 0, "grid_mode": "integer", "tau": [0.45], "eta": [0.01], "gamma": 0.4}"#).unwrap();
        let p = c.resolve();
        assert_eq!(p.grid_denominators, vec![1]);
        assert!(p.violations().is_empty(), "{:?}", p.violations());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&anyhow!(CliError::Failed("x".into()))), 1);
        assert_eq!(exit_code(&anyhow!(CliError::Config("x".into())).context("outer")), 2);
        assert_eq!(exit_code(&anyhow!(CliError::Corrupt("x".into()))), 3);
        assert_eq!(exit_code(&anyhow!("unclassified")), 3);
    }

    fn cli(args: &[&str]) -> Result<String> {
        run(Cli::try_parse_from(std::iter::once("shift-threshold").chain(args.iter().copied()))?)
    }

    fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
        let path = dir.join("config.json");
        fs::write(&path, body).unwrap();
        path
    }

    const SMALL: &str = r#"{"epsilon": 0.5, "k_max": 2, "seed": 7, "tau": [0.2, 0.2], "eta": [0.04, 0.04],
        "magnitude_range": [1, 1], "target_budget": 200}"#;

    #[test]
    fn build_is_deterministic_and_verifies() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = write_config(tmp.path(), SMALL);
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        for out in [&a, &b] {
            cli(&["build", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]).unwrap();
        }
        for name in ARTIFACTS.iter().copied().chain(["manifest.json"]) {
            assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
        }
        let err = cli(&["report", "--dir", a.to_str().unwrap(), "--format", "json"]).unwrap_err();
        assert_eq!(exit_code(&err), 3);
        assert!(format!("{err:#}").contains("run verify first"));
        let text = cli(&["verify", "--dir", a.to_str().unwrap(), "--suite", "lemmas"]).unwrap();
        assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
        let csv = cli(&["report", "--dir", a.to_str().unwrap(), "--format", "csv"]).unwrap();
        assert!(csv.starts_with("suite,check,passed,samples,detail"));
    }

    #[test]
    fn bad_configs_exit_with_2() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("out");
        let cases = [
            (r#"{"epsilon": 0.3, "k_max": 2, "seed": 0, "tau": [0.1, 0.1], "eta": [0.1, 0.1], "gamma": 0.25}"#, "epsilon"),
            (r#"{"epsilon": 0.5, "k_max": 2, "seed": 0, "residues": [2, 3], "block_dims": [4, 2]}"#, "empty lane"),
            (r#"{"epsilon": 0.5, "k_max": 2, "seed": 0, "colour": 1}"#, "colour"),
            (r#"{"epsilon": 0.5, "k_max": 2}"#, "seed"),
        ];
        for (body, needle) in cases {
            let cfg = write_config(tmp.path(), body);
            let err = cli(&["build", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]).unwrap_err();
            assert_eq!(exit_code(&err), 2, "{body}: {err:#}");
            assert!(format!("{err:#}").contains(needle), "{needle} missing from {err:#}");
        }
    }

    #[test]
    fn corrupted_or_missing_artifacts_exit_with_3() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = write_config(tmp.path(), SMALL);
        let out = tmp.path().join("out");
        cli(&["build", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]).unwrap();
        let mut x = fs::read(out.join("x.json")).unwrap();
        let last = x.len() - 2;
        x[last] = if x[last] == b'0' { b'1' } else { b'0' };
        fs::write(out.join("x.json"), x).unwrap();
        let err = cli(&["verify", "--dir", out.to_str().unwrap()]).unwrap_err();
        assert_eq!(exit_code(&err), 3);
        assert!(format!("{err:#}").contains("hash mismatch for x.json"), "{err:#}");

        let err = cli(&["verify", "--dir", tmp.path().join("nowhere").to_str().unwrap()]).unwrap_err();
        assert_eq!(exit_code(&err), 3);
    }
}
