//! `botkit`: synthesize, preprocess, train, evaluate and verify slice-ensemble classifiers.

mod commands;
mod config;

use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use botkit_core::faults::{self, Fault};
use config::{Mode, Overrides, Profile};

/// Process exit statuses.
pub mod exit {
    pub const OK: u8 = 0;
    pub const CONFIG: u8 = 1;
    pub const DATA: u8 = 2;
    pub const MISSING: u8 = 3;
    pub const VERIFY: u8 = 4;
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError { code: exit::CONFIG, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError { code: exit::DATA, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<botkit_core::Error> for CliError {
    fn from(e: botkit_core::Error) -> Self {
        let code = match e {
            botkit_core::Error::MissingArtifact(_) => exit::MISSING,
            _ => exit::DATA,
        };
        CliError { code, message: e.to_string() }
    }
}

#[derive(Parser, Debug)]
#[command(name = "botkit", version, about)]
struct Cli {
    /// Configuration document (TOML, or `key = value` lines with dotted keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Work directory holding data/, store/, split.json, models/ and eval/.
    #[arg(long, global = true, env = "BOTKIT_WORKDIR")]
    work_dir: Option<PathBuf>,

    /// Default scale for every unset setting.
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,

    #[arg(long, global = true)]
    task: Option<String>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    /// Deliberately break one component (mutation testing of `verify`).
    #[arg(long, global = true, hide = true)]
    sabotage: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic volumes and a manifest.
    Synth {
        #[arg(long)]
        subjects_per_class: Option<usize>,
        #[arg(long)]
        scans_per_subject: Option<usize>,
        /// Cube edge length in voxels.
        #[arg(long)]
        extent: Option<usize>,
        #[arg(long, value_enum)]
        profile: Option<Profile>,
        /// Output directory (default: <work-dir>/data).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract normalized central slices and build the subject split.
    Preprocess {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Train one model per slice position with cross-validated selection.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Print the resolved configuration and training plan, then stop.
        #[arg(long)]
        dry_run: bool,
    },
    /// Ensemble the slice models on the held-out subjects and write metrics.
    Eval,
    /// Run the invariant battery and print a pass/fail table.
    Verify {
        /// Only run checks whose name contains this text.
        #[arg(long)]
        filter: Option<String>,
    },
    /// Print the summary table from the last evaluation.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Preprocess { .. } => "preprocess",
            Command::Train { .. } => "train",
            Command::Eval => "eval",
            Command::Verify { .. } => "verify",
            Command::Report => "report",
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    for name in &cli.sabotage {
        let fault: Fault = name.parse().map_err(CliError::config)?;
        faults::inject(fault);
    }
    if cli.sequential {
        botkit_core::parallel::set_enabled(false);
    }
    let mut o = Overrides {
        mode: cli.mode,
        task: cli.task,
        seed: cli.seed,
        work_dir: cli.work_dir,
        ..Overrides::default()
    };
    match &cli.command {
        Command::Synth { subjects_per_class, scans_per_subject, extent, profile, .. } => {
            o.subjects_per_class = *subjects_per_class;
            o.scans_per_subject = *scans_per_subject;
            o.extent = *extent;
            o.profile = *profile;
        }
        Command::Preprocess { manifest, folds } => {
            o.manifest = manifest.clone();
            o.folds = *folds;
        }
        Command::Train { epochs, folds, batch_size, .. } => {
            o.epochs = *epochs;
            o.folds = *folds;
            o.batch_size = *batch_size;
        }
        _ => {}
    }
    if let Command::Verify { filter } = &cli.command {
        return commands::verify(filter.as_deref());
    }
    let cfg = config::resolve(cli.config.as_deref(), o)?;
    let started = Instant::now();
    let result = match cli.command {
        Command::Synth { out, .. } => commands::synth(&cfg, out),
        Command::Preprocess { .. } => commands::preprocess(&cfg),
        Command::Train { dry_run, .. } => commands::train(&cfg, dry_run),
        Command::Eval => commands::eval(&cfg),
        Command::Report => commands::report(&cfg),
        Command::Verify { .. } => unreachable!("handled above"),
    };
    sidecar_log(&cfg.work_dir, &cli_name(), started, &result);
    result
}

fn cli_name() -> String {
    std::env::args().skip(1).collect::<Vec<_>>().join(" ")
}

/// Wall-clock times live only here so every other output stays reproducible.
fn sidecar_log(work_dir: &std::path::Path, args: &str, started: Instant, result: &Result<(), CliError>) {
    if !work_dir.is_dir() {
        return;
    }
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let status = result.as_ref().map_or_else(|e| e.code, |_| exit::OK);
    let line = format!("{now}\t{:.1}s\texit {status}\t{args}\n", started.elapsed().as_secs_f64());
    let path = work_dir.join("run.log");
    let written = std::fs::OpenOptions::new().create(true).append(true).open(&path).and_then(|mut f| f.write_all(line.as_bytes()));
    if let Err(e) = written {
        log::warn!("cannot append to {}: {e}", path.display());
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::CONFIG } else { exit::OK });
        }
    };
    let name = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("botkit {name}: {e}");
            ExitCode::from(e.code)
        }
    }
}
