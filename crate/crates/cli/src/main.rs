//! `gaze-attn`: batch driver for the attention/eye-movement analyses.
//!
//! Exit codes: 0 success, 1 data or validation error, 2 usage or config error.

mod commands;
mod config;
mod synth_cmd;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gaze_attn::corpus_io::ReportFormat;

#[derive(Parser, Debug)]
#[command(name = "gaze-attn", version, about = "Compare transformer attention with human eye movements")]
struct Cli {
    /// Analysis config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check every configured input and write validation findings.
    Validate,
    /// Divergence between model pairs, plus prefix sensitivity.
    Divergence {
        /// Compare this model's plain run (with --b) instead of the configured pairs.
        #[arg(long, requires = "b")]
        a: Option<String>,
        #[arg(long, requires = "a")]
        b: Option<String>,
    },
    /// Human resemblance per layer and the inter-subject ceiling.
    Resemblance,
    /// Reliance of model layers and subjects on trivial attention patterns.
    Trivial,
    /// Correlation, t-tests and scaling fit over the metrics sidecar.
    Stats,
    /// Generate a synthetic workspace from a spec file into --out.
    Synth {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Merge every report in the output directory into one summary table.
    Report,
    /// Build saccade bundles from a transition CSV
    /// (`subject_id,group,sentence_id,from_word,to_word`).
    Convert {
        #[arg(long)]
        transitions: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
}

/// Marks errors that should exit with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GAZE_ATTN_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --jobs: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<UsageError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

/// `Ok(false)` means the command ran but found errors in the data.
fn run(cli: Cli) -> anyhow::Result<bool> {
    let format = ReportFormat::from(cli.format);
    match cli.command {
        Command::Synth { spec } => {
            let out = cli.out.ok_or_else(|| usage("synth needs --out"))?;
            synth_cmd::cmd_synth(&spec, &out)?;
            Ok(true)
        }
        Command::Convert { transitions, corpus } => {
            let out = cli.out.ok_or_else(|| usage("convert needs --out"))?;
            commands::cmd_convert(&transitions, &corpus, &out)?;
            Ok(true)
        }
        Command::Report => {
            let out = match (cli.out, &cli.config) {
                (Some(o), _) => o,
                (None, Some(c)) => commands::Ctx::load(c, None, format)?.out,
                (None, None) => return Err(usage("report needs --out or --config")),
            };
            commands::cmd_report(&out, format)?;
            Ok(true)
        }
        cmd => {
            let path = cli.config.ok_or_else(|| usage("this command needs --config"))?;
            let ctx = commands::Ctx::load(&path, cli.out, format)?;
            match cmd {
                Command::Validate => commands::cmd_validate(&ctx),
                Command::Divergence { a, b } => {
                    let pair = a.zip(b).map(|(a, b)| config::Pair { a, b });
                    commands::cmd_divergence(&ctx, pair).map(|_| true)
                }
                Command::Resemblance => commands::cmd_resemblance(&ctx).map(|_| true),
                Command::Trivial => commands::cmd_trivial(&ctx).map(|_| true),
                Command::Stats => commands::cmd_stats(&ctx).map(|_| true),
                Command::Synth { .. } | Command::Convert { .. } | Command::Report => unreachable!("handled above"),
            }
        }
    }
}
