//! `specrouter` command-line runner.
//!
//! Exit codes: 0 success, 1 runtime or check failure, 2 usage or
//! configuration error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use specrouter::config::{parse_override, RunConfig};
use specrouter::engine::AcceptanceRule;
use specrouter::harness::{run_experiment, run_sweep, static_two_level_grid, RunReport, SweepCell, SweepGrid};
use specrouter::pool::ModelPool;
use specrouter::trace::{write_jsonl, TraceLevel, SCHEMA_VERSION};
use specrouter::validate::{self, CheckResult, ValidateOptions};

#[derive(Parser)]
#[command(name = "specrouter", version, about = "Adaptive multi-level speculative decoding simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its report and trace.
    Run(RunArgs),
    /// Run a parameter grid and summarize the cells.
    Sweep(SweepArgs),
    /// Check simulated behavior against the closed-form formulas.
    Validate(ValidateArgs),
    /// Print a complete configuration with every default filled in.
    Defaults,
}

#[derive(Clone, Copy, ValueEnum)]
enum TraceArg {
    Off,
    Cycles,
    Full,
}

impl From<TraceArg> for TraceLevel {
    fn from(t: TraceArg) -> Self {
        match t {
            TraceArg::Off => TraceLevel::Off,
            TraceArg::Cycles => TraceLevel::Cycles,
            TraceArg::Full => TraceLevel::Full,
        }
    }
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override one configuration key, e.g. `--set scheduler.window=6`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; defaults to the config's `out_dir` or `specrouter-out`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    trace: Option<TraceArg>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Grid file (TOML with `chains`, `window`, `arrival_rate`, `batch_size`).
    #[arg(long, value_name = "PATH")]
    grid: Option<PathBuf>,
    /// Pinned chain, models joined by `>`, e.g. `small>target`.
    #[arg(long = "chain", value_name = "CHAIN")]
    chains: Vec<String>,
    #[arg(long = "window", value_delimiter = ',')]
    windows: Vec<usize>,
    #[arg(long = "arrival-rate", value_delimiter = ',')]
    arrival_rates: Vec<f64>,
    #[arg(long = "batch-size", value_delimiter = ',')]
    batch_sizes: Vec<usize>,
    /// Add every two-level chain; windows default to 1..=8.
    #[arg(long)]
    static_two_level: bool,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long, default_value_t = ValidateOptions::default().seed)]
    seed: u64,
    /// Multiplies every tolerance; 0 demands exact agreement.
    #[arg(long, default_value_t = 1.0)]
    tol_scale: f64,
    /// Run only the named checks.
    #[arg(long = "check", value_enum)]
    checks: Vec<CheckName>,
    /// Writes `validation.json` here when given.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Test hook: accept every drafted token.
    #[arg(long, hide = true)]
    corrupt_acceptance: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CheckName {
    AcceptanceRate,
    ExpectedTokens,
    Speedup,
    Selection,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

fn load_config(c: &Common) -> Result<RunConfig, Failure> {
    let overrides = c
        .overrides
        .iter()
        .map(|o| parse_override(o))
        .collect::<Result<Vec<_>, _>>()
        .map_err(usage)?;
    let mut cfg = RunConfig::load(&c.config, &overrides).map_err(usage)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(t) = c.trace {
        cfg.trace = t.into();
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn out_dir(c: &Common, cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let dir = c
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("specrouter-out"));
    fs::create_dir_all(&dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .map_err(runtime)?;
    Ok(dir)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(runtime)
}

fn write_report(dir: &Path, report: &RunReport) -> Result<(), Failure> {
    write(&dir.join("report.json"), report.to_json())?;
    write(&dir.join("report.csv"), report.to_csv())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.6}"))
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.common)?;
    let dir = out_dir(&args.common, &cfg)?;
    write(&dir.join("effective_config.toml"), cfg.to_toml())?;
    let out = run_experiment(&cfg).map_err(runtime)?;
    write_report(&dir, &out.report)?;
    let mut trace = Vec::new();
    write_jsonl(&mut trace, &out.trace).map_err(runtime)?;
    write(&dir.join("trace.jsonl"), trace)?;

    let m = &out.report.metrics;
    println!(
        "{}: {} requests, {} completed, TPOT {} s, EAF {}, goodput {:.3} tok/s -> {}",
        out.report.mode,
        m.requests,
        m.completed,
        fmt_opt(m.tpot_mean),
        fmt_opt(m.eaf),
        m.goodput_tokens_per_s,
        dir.display()
    );
    if !out.report.valid {
        return Err(runtime(anyhow!(
            "run aborted: {}",
            out.report.error.as_deref().unwrap_or("unknown error")
        )));
    }
    Ok(())
}

fn build_grid(args: &SweepArgs, cfg: &RunConfig) -> Result<SweepGrid, Failure> {
    let mut grid = match &args.grid {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read {}", path.display()))
                .map_err(usage)?;
            toml::from_str(&text)
                .with_context(|| format!("invalid grid {}", path.display()))
                .map_err(usage)?
        }
        None => SweepGrid::default(),
    };
    grid.chains
        .extend(args.chains.iter().map(|c| c.split('>').map(|m| m.trim().to_string()).collect()));
    grid.window.extend(&args.windows);
    grid.arrival_rate.extend(&args.arrival_rates);
    grid.batch_size.extend(&args.batch_sizes);
    if args.static_two_level {
        let pool = ModelPool::new(&cfg.pool).map_err(usage)?;
        let all = static_two_level_grid(&pool, 1..=8);
        grid.chains.extend(all.chains);
        if grid.window.is_empty() {
            grid.window = all.window;
        }
    }
    if grid.is_empty() {
        return Err(usage(anyhow!("sweep grid is empty")));
    }
    Ok(grid)
}

/// Index of the valid cell with the lowest time-per-token.
fn best_cell(cells: &[SweepCell]) -> Option<usize> {
    cells
        .iter()
        .filter_map(|c| c.tpot().map(|t| (c.index, t)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
}

const SUMMARY_HEADER: &str =
    "schema_version,index,mode,chain,window,arrival_rate,batch_size,valid,tpot_mean,eaf,ttft_mean,goodput_tokens_per_s,slo_attainment,is_best,error";

fn summary_row(c: &SweepCell, best: Option<usize>) -> String {
    let r = c.report.as_ref();
    let m = r.map(|r| &r.metrics);
    let field = |x: Option<String>| x.unwrap_or_default();
    let quote = |s: &str| {
        if s.contains([',', '"']) {
            format!("\"{}\"", s.replace('"', "\"\""))
        } else {
            s.to_string()
        }
    };
    [
        SCHEMA_VERSION.to_string(),
        c.index.to_string(),
        quote(&c.mode),
        field(c.chain.as_ref().map(|ch| ch.join(">"))),
        field(c.window.map(|w| w.to_string())),
        field(c.arrival_rate.map(|x| x.to_string())),
        field(c.batch_size.map(|x| x.to_string())),
        r.is_some_and(|r| r.valid).to_string(),
        field(m.and_then(|m| m.tpot_mean).map(|x| x.to_string())),
        field(m.and_then(|m| m.eaf).map(|x| x.to_string())),
        field(m.and_then(|m| m.ttft).map(|t| t.mean.to_string())),
        field(m.map(|m| m.goodput_tokens_per_s.to_string())),
        field(m.map(|m| m.slo_attainment.to_string())),
        (best == Some(c.index)).to_string(),
        quote(c.error.as_deref().or(r.and_then(|r| r.error.as_deref())).unwrap_or("")),
    ]
    .join(",")
}

fn cmd_sweep(args: SweepArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.common)?;
    let grid = build_grid(&args, &cfg)?;
    let dir = out_dir(&args.common, &cfg)?;
    write(&dir.join("effective_config.toml"), cfg.to_toml())?;
    write(
        &dir.join("grid.toml"),
        toml::to_string_pretty(&grid).map_err(runtime)?,
    )?;
    let cells = run_sweep(&cfg, &grid).map_err(usage)?;
    let best = best_cell(&cells);
    let mut summary = format!("{SUMMARY_HEADER}\n");
    for c in &cells {
        let cell_dir = dir.join("cells").join(format!("{:03}", c.index));
        fs::create_dir_all(&cell_dir).map_err(runtime)?;
        match &c.report {
            Some(r) => write_report(&cell_dir, r)?,
            None => write(
                &cell_dir.join("error.txt"),
                format!("{}\n", c.error.as_deref().unwrap_or("unknown error")),
            )?,
        }
        summary.push_str(&summary_row(c, best));
        summary.push('\n');
    }
    write(&dir.join("summary.csv"), summary)?;
    let failed = cells.iter().filter(|c| c.tpot().is_none()).count();
    match best {
        Some(i) => {
            let c = &cells[i];
            println!(
                "{} cells ({failed} failed); best #{i} {} TPOT {} s -> {}",
                cells.len(),
                c.mode,
                fmt_opt(c.tpot()),
                dir.display()
            );
            Ok(())
        }
        None => Err(runtime(anyhow!("all {} sweep cells failed", cells.len()))),
    }
}

#[derive(Serialize)]
struct ValidationFile<'a> {
    schema_version: u32,
    options: ValidateOptions,
    results: &'a [CheckResult],
}

fn cmd_validate(args: ValidateArgs) -> Result<(), Failure> {
    if !(args.tol_scale >= 0.0) {
        return Err(usage(anyhow!("--tol-scale must be a non-negative number")));
    }
    let opts = ValidateOptions {
        seed: args.seed,
        tol_scale: args.tol_scale,
        acceptance_rule: if args.corrupt_acceptance {
            AcceptanceRule::AlwaysAccept
        } else {
            AcceptanceRule::Standard
        },
    };
    let wanted = |c: CheckName| args.checks.is_empty() || args.checks.contains(&c);
    let mut results = Vec::new();
    if wanted(CheckName::AcceptanceRate) {
        results.extend(validate::check_acceptance_rate(&opts));
    }
    if wanted(CheckName::ExpectedTokens) {
        results.extend(validate::check_expected_tokens(&opts));
    }
    if wanted(CheckName::Speedup) {
        results.extend(validate::check_speedup(&opts));
    }
    if wanted(CheckName::Selection) {
        results.extend(validate::check_chain_selection(&opts));
    }
    print!("{}", validate::format_table(&results));
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(runtime)?;
        let file = ValidationFile {
            schema_version: SCHEMA_VERSION,
            options: opts,
            results: &results,
        };
        write(
            &dir.join("validation.json"),
            serde_json::to_string_pretty(&file).map_err(runtime)?,
        )?;
    }
    let failed: Vec<&CheckResult> = results.iter().filter(|r| !r.passed).collect();
    if failed.is_empty() {
        return Ok(());
    }
    for r in &failed {
        eprintln!("FAIL {} [{}]: observed {} expected {}", r.check, r.case, r.observed, r.expected);
    }
    Err(runtime(anyhow!("{} of {} checks failed", failed.len(), results.len())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Defaults => {
            print!("{}", RunConfig::example().to_toml());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(e) | Failure::Runtime(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}
