//! `renewal` command-line pipeline.
//!
//! Every subcommand reads its inputs from the output directory (or the
//! configured input CSV), writes TSV tables and JSON models, and records a
//! manifest with the content hashes of what it read and wrote.

// `!(x > 0.0)` guards also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, ValueEnum};

pub mod config;
pub mod manifest;
pub mod stages;
pub mod tune;

pub use config::{RunConfig, TreatmentKind};
pub use stages::{Runner, Stage};

#[derive(Debug)]
pub enum CliError {
    /// Bad config, overrides, arguments or input data. Exit code 1.
    Validation(String),
    /// Failure while computing a stage. Exit code 2.
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<renewal_core::Error> for CliError {
    fn from(e: renewal_core::Error) -> Self {
        use renewal_core::Error as E;
        match e {
            E::InvalidInput(m) => CliError::Validation(m),
            E::Row { .. } | E::MissingColumn(_) | E::Csv(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Discrete,
    Continuous,
}

#[derive(Debug, Parser)]
#[command(
    name = "renewal",
    version,
    about = "Causal price sensitivity and renewal price optimization"
)]
struct Cli {
    #[command(subcommand)]
    command: Stage,
    /// TOML config, or a stage manifest (JSON) to replay its config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, repeatable; `--a.b=v` is shorthand for `--set a.b=v`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    kind: Option<KindArg>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Portfolio CSV to analyse instead of the simulated one.
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    /// Worker threads; falls back to RENEWAL_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Skip stages whose manifest still matches their inputs and config.
    #[arg(long, global = true)]
    check: bool,
    /// Use the published tuning grids and training budgets.
    #[arg(long, global = true)]
    paper_grids: bool,
}

const KNOWN_FLAGS: [&str; 9] = [
    "--config",
    "--set",
    "--seed",
    "--kind",
    "--out",
    "--input",
    "--threads",
    "--check",
    "--paper-grids",
];

/// Rewrites `--a.b=v` and `--a.b v` into `--set a.b=v`.
fn expand_dotted(args: Vec<OsString>) -> Vec<OsString> {
    let mut out = Vec::with_capacity(args.len());
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(s) = arg.to_str().map(str::to_owned) else {
            out.push(arg);
            continue;
        };
        let Some(body) = s.strip_prefix("--") else {
            out.push(arg);
            continue;
        };
        let key = body.split('=').next().unwrap_or("");
        if !key.contains('.') || KNOWN_FLAGS.contains(&format!("--{key}").as_str()) {
            out.push(arg);
            continue;
        }
        out.push("--set".into());
        if body.contains('=') {
            out.push(body.into());
        } else {
            let value = it.next().and_then(|v| v.into_string().ok()).unwrap_or_default();
            out.push(format!("{key}={value}").into());
        }
    }
    out
}

fn init_threads(flag: Option<usize>) -> Result<(), CliError> {
    let threads = match flag {
        Some(n) => Some(n),
        None => match std::env::var("RENEWAL_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| CliError::Validation(format!("RENEWAL_THREADS=`{v}` is not a count")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Validation("thread count must be positive".into()));
        }
        renewal_core::exec::init_threads(n);
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<(), CliError> {
    init_threads(cli.threads)?;
    let mut overrides = if cli.paper_grids {
        config::published_grid_overrides()
    } else {
        Vec::new()
    };
    for s in &cli.set {
        overrides.push(config::parse_override(s)?);
    }
    if let Some(seed) = cli.seed {
        let seed = i64::try_from(seed).map_err(|_| CliError::Validation("seed must fit in 63 bits".into()))?;
        overrides.push(("seed".into(), toml::Value::Integer(seed)));
    }
    if let Some(kind) = cli.kind {
        let k = match kind {
            KindArg::Discrete => "discrete",
            KindArg::Continuous => "continuous",
        };
        overrides.push(("kind".into(), toml::Value::String(k.into())));
    }
    for (key, path) in [("paths.out_dir", &cli.out), ("paths.input", &cli.input)] {
        if let Some(p) = path {
            overrides.push((key.into(), toml::Value::String(p.display().to_string())));
        }
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    Runner::new(cfg, cli.check)?.run(cli.command)
}

/// Parses arguments (program name first), runs the subcommand and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let args = expand_dotted(args.into_iter().map(Into::into).collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("renewal: {e}");
            e.exit_code()
        }
    }
}
