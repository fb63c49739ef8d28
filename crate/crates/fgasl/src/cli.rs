//! `fgasl run | report | plot`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fgasl_core::config::Config;
use serde_json::Value;

use crate::exec::Parallel;
use crate::plot::plot_all;
use crate::report::{build_report, write_report};
use crate::results::{run_suite_to_dir, ResultsDir};

/// Environment variable naming the results root when `--out` is absent.
pub const RESULTS_ENV: &str = "FGASL_RESULTS";

pub const EXIT_OK: u8 = 0;
pub const EXIT_PARTIAL: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "fgasl", version, about = "Federated semi-supervised domain-generalized segmentation simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every experiment of a suite.
    Run(RunArgs),
    /// Summarize the records of a results directory.
    Report(DirArgs),
    /// Draw figures from the records of a results directory.
    Plot(DirArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Results directory.
    #[arg(long, env = RESULTS_ENV)]
    pub out: PathBuf,
    /// Overrides `suite.master_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `dotted.path=value` overrides applied before validation. Values are
    /// parsed as JSON, falling back to a plain string.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads; defaults to one per core.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DirArgs {
    /// Results directory.
    #[arg(long, env = RESULTS_ENV)]
    pub out: PathBuf,
}

/// Sets `path` (dot separated, numeric segments index arrays) in `root`.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), String> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| format!("override `{assignment}` is not of the form path=value"))?;
    if path.is_empty() {
        return Err(format!("override `{assignment}` has an empty path"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    for seg in path.split('.') {
        cur = match cur {
            Value::Array(items) => {
                let i: usize = seg
                    .parse()
                    .map_err(|_| format!("`{path}`: `{seg}` indexes an array but is not a number"))?;
                let len = items.len();
                items
                    .get_mut(i)
                    .ok_or_else(|| format!("`{path}`: index {i} out of range for {len} items"))?
            }
            v => {
                if v.is_null() {
                    *v = Value::Object(Default::default());
                }
                let Value::Object(map) = v else {
                    return Err(format!("`{path}`: `{seg}` is inside a non-object value"));
                };
                map.entry(seg.to_string()).or_insert(Value::Null)
            }
        };
    }
    *cur = value;
    Ok(())
}

/// Reads, overrides and validates a configuration. Errors name the file and,
/// for schema violations, the offending field path.
pub fn load_config(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<Config, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut value: Value = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    if let Some(s) = seed {
        apply_override(&mut value, &format!("suite.master_seed={s}"))?;
    }
    let config: Config = serde_path_to_error::deserialize(value)
        .map_err(|e| format!("{}: at `{}`: {}", path.display(), e.path(), e.inner()))?;
    config.validate().map_err(|e| format!("{}: {e}", path.display()))?;
    for s in &config.suite.strategies {
        fgasl_core::orchestrator::Strategy::by_name(s).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    Ok(config)
}

pub fn cmd_run(args: &RunArgs) -> u8 {
    let config = match load_config(&args.config, &args.overrides, args.seed) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let executor = match Parallel::new(args.jobs) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let dir = ResultsDir::new(&args.out);
    match run_suite_to_dir(&config, &dir, &executor) {
        Ok((s, _)) => {
            println!("{} completed, {} failed; results in {}", s.completed, s.failed, dir.root.display());
            if s.failed == 0 {
                EXIT_OK
            } else {
                EXIT_PARTIAL
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_PARTIAL
        }
    }
}

pub fn cmd_report(args: &DirArgs) -> u8 {
    let dir = ResultsDir::new(&args.out);
    let records = match dir.load_records() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_PARTIAL;
        }
    };
    if records.is_empty() {
        eprintln!("error: no records in {}", dir.records().display());
        return EXIT_PARTIAL;
    }
    match build_report(&records).and_then(|r| write_report(&r, &dir.root)) {
        Ok(paths) => {
            for p in paths {
                println!("wrote {}", p.display());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_PARTIAL
        }
    }
}

pub fn cmd_plot(args: &DirArgs) -> u8 {
    let dir = ResultsDir::new(&args.out);
    let records = match dir.load_records() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_PARTIAL;
        }
    };
    match plot_all(&records, &dir.root.join("plots")) {
        Ok(summary) => {
            for p in &summary.written {
                println!("wrote {}", p.display());
            }
            for s in &summary.skipped {
                eprintln!("warning: {s}");
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_PARTIAL
        }
    }
}

pub fn run(cli: &Cli) -> u8 {
    match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Report(a) => cmd_report(a),
        Command::Plot(a) => cmd_plot(a),
    }
}

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    ExitCode::from(run(&cli))
}
