//! `gappy`: train, apply and evaluate the MWE tagger.
//!
//! JSON results go to stdout, logs to stderr. Exit status: 0 success,
//! 1 failed check, 2 configuration error, 3 checkpoint error, 4 data error.

mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gappy::training::{SyntheticOptions, SYNTH_MAX_GAP};
use gappy::Error;

use crate::commands::Outcome;

#[derive(Parser, Debug)]
#[command(name = "gappy", version, about = "Tagger for discontinuous verbal multiword expressions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write its best checkpoint.
    ///
    /// Any setting of the JSON config can be overridden with a trailing
    /// `--dotted.key value`, e.g. `--model.kind GcnBased --train.patience 5
    /// --paths.train train.cupt --seed 7`.
    Train {
        /// JSON run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Rewrite the MWE column of a cupt file with the model's predictions.
    Tag {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score a system cupt file against gold.
    Eval(EvalArgs),
    /// `eval` with the per-gap-size breakdown switched on.
    ReportGaps(EvalArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// One of gcn, attention, highway, lstm, cnn, full.
        #[arg(long, required_unless_present = "full", conflicts_with = "full")]
        layer: Option<String>,
        /// The whole HCombined model on a random 4-token sentence.
        #[arg(long)]
        full: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Scale the analytic gradients by 1.5 before comparing.
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Write a synthetic verb-particle corpus.
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 40)]
        sentences: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Gap sizes drawn with equal weight.
        #[arg(long, value_delimiter = ',', conflicts_with = "gap_weights")]
        gaps: Vec<usize>,
        /// Relative weights of gap sizes 0..=5.
        #[arg(long, value_delimiter = ',')]
        gap_weights: Vec<f64>,
        /// Share of sentences with an unannotated verb-particle pair.
        #[arg(long)]
        decoy_rate: Option<f64>,
    },
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    system: PathBuf,
    /// Break scores down by gap size, pooling gaps of N and more.
    #[arg(long, value_name = "N")]
    gap_report: Option<usize>,
    /// Also write the gap breakdown as CSV.
    #[arg(long)]
    gap_csv: Option<PathBuf>,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } => 2,
        Error::Checkpoint(_) => 3,
        Error::Dimension { .. } | Error::Parse { .. } | Error::Structure { .. } | Error::Data(_) | Error::Io(_) => 4,
    }
}

fn seed_or_env(seed: Option<u64>) -> Result<u64, Error> {
    if let Some(s) = seed {
        return Ok(s);
    }
    match std::env::var(config::SEED_ENV) {
        Ok(raw) => raw.trim().parse().map_err(|_| Error::Config {
            fields: vec![format!("{}=`{raw}` is not an unsigned integer", config::SEED_ENV)],
        }),
        Err(_) => Ok(0),
    }
}

fn synth_options(gaps: &[usize], gap_weights: &[f64], decoy_rate: Option<f64>) -> Result<SyntheticOptions, Error> {
    let mut opts = if !gap_weights.is_empty() {
        SyntheticOptions {
            gap_weights: gap_weights.to_vec(),
            ..Default::default()
        }
    } else if !gaps.is_empty() {
        if let Some(g) = gaps.iter().find(|&&g| g > SYNTH_MAX_GAP) {
            return Err(Error::Config {
                fields: vec![format!("gaps ({g} > {SYNTH_MAX_GAP})")],
            });
        }
        SyntheticOptions::uniform_gaps(gaps)
    } else {
        SyntheticOptions::default()
    };
    if let Some(r) = decoy_rate {
        opts.decoy_rate = r;
    }
    Ok(opts)
}

fn run(cli: Cli) -> Result<Outcome, Error> {
    match cli.command {
        Command::Train { config, overrides } => {
            let mut pairs = config::parse_overrides(&overrides)?;
            // `--config` after the first override lands among the overrides
            let mut config = config;
            if let Some(i) = pairs.iter().position(|(k, _)| k == "config") {
                config = Some(PathBuf::from(pairs.remove(i).1));
            }
            let env = std::env::var(config::SEED_ENV).ok();
            let cfg = config::load(config.as_deref(), &pairs, env.as_deref())?;
            commands::train_cmd(cfg)
        }
        Command::Tag { checkpoint, input, output } => commands::tag_cmd(&checkpoint, &input, &output),
        Command::Eval(a) => commands::eval_cmd(&a.gold, &a.system, a.gap_report, a.gap_csv.as_deref()),
        Command::ReportGaps(a) => commands::eval_cmd(&a.gold, &a.system, Some(a.gap_report.unwrap_or(3)), a.gap_csv.as_deref()),
        Command::Gradcheck {
            layer,
            full,
            seed,
            corrupt_backward,
        } => {
            let target = if full { "full".to_string() } else { layer.expect("clap enforces one") };
            commands::gradcheck_cmd(&target, seed_or_env(seed)?, corrupt_backward)
        }
        Command::Synth {
            output,
            sentences,
            seed,
            gaps,
            gap_weights,
            decoy_rate,
        } => {
            let opts = synth_options(&gaps, &gap_weights, decoy_rate)?;
            commands::synth_cmd(&output, sentences, seed_or_env(seed)?, &opts)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(out) => {
            let text = serde_json::to_string_pretty(&out.report).expect("json values serialize");
            // a closed stdout (e.g. piped into `head`) is not a failure
            let _ = writeln!(std::io::stdout(), "{text}");
            if out.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(err) => {
            log::error!("{err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
