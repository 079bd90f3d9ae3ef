//! Command-line front end: scenario-config ingestion with documented
//! precedence (flags > config file > built-in defaults), the four
//! experiment subcommands, CSV/JSON emission, and the self-check runner.
//!
//! Exit codes: 0 success, 1 runtime or battery failure, 2 usage or
//! configuration error. Configuration is rejected before any output file
//! is created, so a failed invocation leaves no partial artifacts.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::Error;
use crate::sim::{
    run_monte_carlo, runtime_comparison, AggregateMetrics, ScenarioConfig, SelectionMode,
};
use crate::verify::run_all_batteries;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Steady-state averages (sweep rows, ordering checks) use the time
/// instances strictly after this index; runs shorter than the threshold
/// average over every instance instead.
const STEADY_STATE_AFTER: usize = 100;

#[derive(Parser, Debug)]
#[command(
    name = "toa-rtls",
    version,
    about = "Joint clock-sync, NLoS identification and ToA localization experiments"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Monte-Carlo experiment; writes rmse_vs_t.csv and manifest.json
    Run {
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Sweep sigma or the anchor count across all three selection modes;
    /// writes sweep_<param>.csv and manifest.json
    Sweep {
        #[command(flatten)]
        opts: CommonOpts,
        /// Swept parameter
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated list of values for the swept parameter
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
    },
    /// Per-step runtime of the recursive update vs a direct re-solve;
    /// writes runtime_vs_t.csv and manifest.json
    Bench {
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Run the numerical self-check batteries; writes verify_report.txt
    Verify {
        /// Output directory (created if absent)
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Clone, Default)]
struct CommonOpts {
    /// TOML scenario file; omitted keys keep their built-in defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if absent)
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Base seed for trial derivation
    #[arg(long)]
    seed: Option<u64>,
    /// Monte-Carlo trial count
    #[arg(long)]
    trials: Option<usize>,
    /// Worker threads for independent trials (default: machine parallelism)
    #[arg(long, env = "TOA_RTLS_THREADS")]
    threads: Option<usize>,
    /// Measurement noise standard deviation, ns
    #[arg(long)]
    sigma: Option<f64>,
    /// Anchor count; must be a perfect square
    #[arg(long)]
    anchors: Option<usize>,
    /// Anchor selection mode
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Forgetting factor of the clock tracker, in (0, 1]
    #[arg(long)]
    lambda: Option<f64>,
    /// Anchor-keep proportion of the robust localizer, in (1/2, 1]
    #[arg(long)]
    alpha: Option<f64>,
    /// Number of time instances per trial
    #[arg(long)]
    tmax: Option<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum ModeArg {
    Rlsr,
    All,
    Oracle,
}

impl From<ModeArg> for SelectionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Rlsr => SelectionMode::Rlsr,
            ModeArg::All => SelectionMode::All,
            ModeArg::Oracle => SelectionMode::Oracle,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum SweepParam {
    Sigma,
    Anchors,
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            SweepParam::Sigma => "sigma",
            SweepParam::Anchors => "anchors",
        }
    }
}

/// Failure classified by the exit code it must produce.
enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidInput(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (including the program name) and executes the selected
/// subcommand, returning the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // --help / --version land here too and must exit 0
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.cmd {
        Cmd::Run { opts } => cmd_run(&opts),
        Cmd::Sweep { opts, param, values } => cmd_sweep(&opts, param, &values),
        Cmd::Bench { opts } => cmd_bench(&opts),
        Cmd::Verify { out } => return cmd_verify(&out),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            EXIT_RUNTIME
        }
    }
}

/// Applies the precedence chain: built-in defaults, then the config
/// file, then individual command-line overrides; validates the result.
fn resolve_config(opts: &CommonOpts) -> CliResult<ScenarioConfig> {
    let mut cfg = match &opts.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            toml::from_str::<ScenarioConfig>(&text).map_err(|e| {
                CliError::Usage(format!("config {}: {e}", path.display()))
            })?
        }
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(trials) = opts.trials {
        cfg.trials = trials;
    }
    if let Some(sigma) = opts.sigma {
        cfg.sigma = sigma;
    }
    if let Some(anchors) = opts.anchors {
        cfg.m = anchors;
    }
    if let Some(mode) = opts.mode {
        cfg.selection_mode = mode.into();
    }
    if let Some(lambda) = opts.lambda {
        cfg.lambda = lambda;
    }
    if let Some(alpha) = opts.alpha {
        cfg.alpha = alpha;
    }
    if let Some(tmax) = opts.tmax {
        cfg.t_max = tmax;
    }
    if let Some(threads) = opts.threads {
        if threads == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
    }
    cfg.validate().map_err(CliError::from)?;
    Ok(cfg)
}

/// Runs `f` on a dedicated worker pool when a thread count was requested,
/// otherwise on the default pool.
fn with_pool<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> CliResult<R> {
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

fn ensure_out_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

#[derive(Serialize)]
struct RunManifest<'a> {
    artifact: &'static str,
    version: &'static str,
    command: &'a str,
    unix_time_s: u64,
    outputs: Vec<String>,
    /// How each trial's RNG seed derives from the base seed.
    seed_provenance: &'static str,
    /// Which time instances steady-state averages cover.
    steady_state: String,
    scenario: &'a ScenarioConfig,
}

fn write_manifest(
    out_dir: &Path,
    command: &str,
    outputs: &[&str],
    cfg: &ScenarioConfig,
) -> CliResult<()> {
    let manifest = RunManifest {
        artifact: "toa-rtls",
        version: env!("CARGO_PKG_VERSION"),
        command,
        unix_time_s: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
        seed_provenance: "trial k is seeded with splitmix64(seed + k * 0x9E3779B97F4A7C15)",
        steady_state: format!("averages cover t > {STEADY_STATE_AFTER} when t_max exceeds it"),
        scenario: cfg,
    };
    let body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::Runtime(format!("manifest serialization: {e}")))?;
    write_file(&out_dir.join("manifest.json"), &(body + "\n"))
}

/// Mean of the steady-state tail of a per-t series.
fn steady_mean(series: &[f64]) -> f64 {
    let tail = if series.len() > STEADY_STATE_AFTER {
        &series[STEADY_STATE_AFTER..]
    } else {
        series
    };
    tail.iter().sum::<f64>() / tail.len() as f64
}

fn mode_name(mode: SelectionMode) -> &'static str {
    match mode {
        SelectionMode::Rlsr => "rlsr",
        SelectionMode::All => "all",
        SelectionMode::Oracle => "oracle",
    }
}

fn cmd_run(opts: &CommonOpts) -> CliResult<()> {
    let cfg = resolve_config(opts)?;
    ensure_out_dir(&opts.out)?;
    let agg = with_pool(opts.threads, || run_monte_carlo(&cfg))??;
    let mut csv = String::from("t,clock_rmse_ns,pos_rmse_m,full_branch_frac\n");
    for i in 0..cfg.t_max {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            i + 1,
            agg.clock_rmse[i],
            agg.pos_rmse[i],
            agg.full_branch_frac[i]
        );
    }
    write_file(&opts.out.join("rmse_vs_t.csv"), &csv)?;
    write_manifest(&opts.out, "run", &["rmse_vs_t.csv"], &cfg)
}

/// Parsed, validated sweep values (numeric for the CSV column, applied to
/// the scenario per variant).
enum SweepValues {
    Sigma(Vec<f64>),
    Anchors(Vec<usize>),
}

fn parse_sweep_values(param: SweepParam, raw: &[String]) -> CliResult<SweepValues> {
    let raw: Vec<&str> =
        raw.iter().map(|s| s.trim()).filter(|s| !s.is_empty()).collect();
    if raw.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value in --values".into()));
    }
    match param {
        SweepParam::Sigma => {
            let mut vals = Vec::with_capacity(raw.len());
            for s in raw {
                let v: f64 = s
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bad sigma value '{s}'")))?;
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(CliError::Usage(format!("sigma value {v} must be >= 0")));
                }
                vals.push(v);
            }
            Ok(SweepValues::Sigma(vals))
        }
        SweepParam::Anchors => {
            let mut vals = Vec::with_capacity(raw.len());
            for s in raw {
                let v: usize = s
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bad anchor count '{s}'")))?;
                let side = (v as f64).sqrt().round() as usize;
                if side * side != v || side < 2 {
                    return Err(CliError::Usage(format!(
                        "anchor count {v} must be a perfect square >= 4"
                    )));
                }
                vals.push(v);
            }
            Ok(SweepValues::Anchors(vals))
        }
    }
}

fn cmd_sweep(opts: &CommonOpts, param: SweepParam, values: &[String]) -> CliResult<()> {
    let base = resolve_config(opts)?;
    let values = parse_sweep_values(param, values)?;
    // validate every variant before producing any output
    let mut variants: Vec<(String, ScenarioConfig)> = Vec::new();
    let labeled: Vec<(String, ScenarioConfig)> = match &values {
        SweepValues::Sigma(vs) => vs
            .iter()
            .map(|&v| {
                let mut cfg = base.clone();
                cfg.sigma = v;
                (format!("{v}"), cfg)
            })
            .collect(),
        SweepValues::Anchors(vs) => vs
            .iter()
            .map(|&v| {
                let mut cfg = base.clone();
                cfg.m = v;
                (format!("{v}"), cfg)
            })
            .collect(),
    };
    for (label, cfg) in labeled {
        cfg.validate().map_err(CliError::from)?;
        variants.push((label, cfg));
    }
    ensure_out_dir(&opts.out)?;

    let mut csv = String::from("param_value,mode,avg_clock_rmse_ns,avg_pos_rmse_m,nlos_accuracy\n");
    for (label, cfg) in &variants {
        for mode in [SelectionMode::Rlsr, SelectionMode::Oracle, SelectionMode::All] {
            let mut cfg = cfg.clone();
            cfg.selection_mode = mode;
            let agg: AggregateMetrics = with_pool(opts.threads, || run_monte_carlo(&cfg))??;
            let accuracy = agg
                .nlos_accuracy
                .map(|a| format!("{a}"))
                .unwrap_or_else(|| "nan".into());
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                label,
                mode_name(mode),
                steady_mean(&agg.clock_rmse),
                steady_mean(&agg.pos_rmse),
                accuracy
            );
        }
    }
    let file_name = format!("sweep_{}.csv", param.name());
    write_file(&opts.out.join(&file_name), &csv)?;
    write_manifest(&opts.out, "sweep", &[&file_name], &base)
}

fn cmd_bench(opts: &CommonOpts) -> CliResult<()> {
    let cfg = resolve_config(opts)?;
    ensure_out_dir(&opts.out)?;
    let rc = runtime_comparison(&cfg).map_err(CliError::from)?;
    let mut csv = String::from("t,brmp_step_s,direct_step_s\n");
    for i in 0..rc.t.len() {
        let _ = writeln!(csv, "{},{},{}", rc.t[i], rc.brmp_step_s[i], rc.direct_step_s[i]);
    }
    write_file(&opts.out.join("runtime_vs_t.csv"), &csv)?;
    write_manifest(&opts.out, "bench", &["runtime_vs_t.csv"], &cfg)
}

fn cmd_verify(out_dir: &Path) -> i32 {
    if let Err(CliError::Usage(msg) | CliError::Runtime(msg)) = ensure_out_dir(out_dir) {
        eprintln!("error: {msg}");
        return EXIT_USAGE;
    }
    let reports = run_all_batteries();
    let mut body = String::new();
    for rep in &reports {
        let line = rep.summary_line();
        println!("{line}");
        body.push_str(&line);
        body.push('\n');
    }
    let all_pass = reports.iter().all(|r| r.pass);
    body.push_str(if all_pass { "overall: PASS\n" } else { "overall: FAIL\n" });
    println!("overall: {}", if all_pass { "PASS" } else { "FAIL" });
    if let Err(CliError::Usage(msg) | CliError::Runtime(msg)) =
        write_file(&out_dir.join("verify_report.txt"), &body)
    {
        eprintln!("error: {msg}");
        return EXIT_RUNTIME;
    }
    if all_pass {
        EXIT_OK
    } else {
        EXIT_RUNTIME
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn args(list: &[&str]) -> Vec<OsString> {
        std::iter::once("toa-rtls")
            .chain(list.iter().copied())
            .map(OsString::from)
            .collect()
    }

    #[test]
    fn missing_config_file_exits_usage_without_outputs() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("results");
        let code = run_cli(args(&[
            "run",
            "--config",
            dir.path().join("nope.toml").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]));
        assert_eq!(code, EXIT_USAGE);
        assert!(!out.exists(), "no partial outputs on config failure");
    }

    #[test]
    fn malformed_and_unknown_key_configs_exit_usage() {
        let dir = tempdir().unwrap();
        let bad = dir.path().join("bad.toml");
        fs::write(&bad, "sigma = \"loud\"\n").unwrap();
        let code =
            run_cli(args(&["run", "--config", bad.to_str().unwrap()]));
        assert_eq!(code, EXIT_USAGE);

        fs::write(&bad, "sigmah = 0.4\n").unwrap();
        let code =
            run_cli(args(&["run", "--config", bad.to_str().unwrap()]));
        assert_eq!(code, EXIT_USAGE);
    }

    #[test]
    fn config_precedence_flag_beats_file_beats_default() {
        let dir = tempdir().unwrap();
        let file = dir.path().join("cfg.toml");
        fs::write(&file, "sigma = 1.25\ntrials = 7\n").unwrap();
        let opts = CommonOpts {
            config: Some(file),
            sigma: Some(2.5),
            ..CommonOpts::default()
        };
        let cfg = match resolve_config(&opts) {
            Ok(cfg) => cfg,
            Err(_) => panic!("config should resolve"),
        };
        assert_eq!(cfg.sigma, 2.5, "flag wins over file");
        assert_eq!(cfg.trials, 7, "file wins over default");
        assert_eq!(cfg.m, 25, "untouched keys keep defaults");
    }

    #[test]
    fn invalid_override_values_exit_usage() {
        let code = run_cli(args(&["run", "--anchors", "24"]));
        assert_eq!(code, EXIT_USAGE);
        let code = run_cli(args(&["run", "--lambda", "1.5"]));
        assert_eq!(code, EXIT_USAGE);
        let code = run_cli(args(&["run", "--threads", "0"]));
        assert_eq!(code, EXIT_USAGE);
    }

    #[test]
    fn sweep_value_parsing_enforces_domain() {
        assert!(matches!(
            parse_sweep_values(SweepParam::Sigma, &[]),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(
            parse_sweep_values(SweepParam::Sigma, &["".into()]),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(
            parse_sweep_values(SweepParam::Anchors, &["24".into()]),
            Err(CliError::Usage(_))
        ));
        match parse_sweep_values(SweepParam::Anchors, &["16".into(), "25".into()]) {
            Ok(SweepValues::Anchors(v)) => assert_eq!(v, vec![16, 25]),
            _ => panic!("16 and 25 are valid anchor counts"),
        }
        match parse_sweep_values(SweepParam::Sigma, &["0.1".into(), " 0.5 ".into()]) {
            Ok(SweepValues::Sigma(v)) => assert_eq!(v, vec![0.1, 0.5]),
            _ => panic!("sigma list should parse with whitespace"),
        }
    }

    #[test]
    fn help_and_version_exit_zero() {
        assert_eq!(run_cli(args(&["--help"])), EXIT_OK);
        assert_eq!(run_cli(args(&["--version"])), EXIT_OK);
        assert_eq!(run_cli(args(&["frobnicate"])), EXIT_USAGE);
    }

    #[test]
    fn tiny_run_writes_csv_and_manifest() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("results");
        let code = run_cli(args(&[
            "run",
            "--trials",
            "1",
            "--tmax",
            "4",
            "--anchors",
            "9",
            "--out",
            out.to_str().unwrap(),
        ]));
        assert_eq!(code, EXIT_OK);
        let csv = fs::read_to_string(out.join("rmse_vs_t.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,clock_rmse_ns,pos_rmse_m,full_branch_frac");
        assert_eq!(lines.len(), 5, "header plus one row per time instance");
        assert!(lines[1].starts_with("1,"));
        let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&manifest).unwrap();
        assert_eq!(parsed["command"], "run");
        assert_eq!(parsed["scenario"]["m"], 9);
        assert_eq!(parsed["scenario"]["trials"], 1);
        assert_eq!(parsed["outputs"][0], "rmse_vs_t.csv");
    }

    #[test]
    fn steady_mean_uses_tail_only_when_long_enough() {
        let mut series = vec![10.0; 150];
        for x in series.iter_mut().skip(100) {
            *x = 2.0;
        }
        assert_eq!(steady_mean(&series), 2.0);
        assert_eq!(steady_mean(&[3.0, 5.0]), 4.0);
    }
}
