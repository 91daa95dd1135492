//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use uanet_core::decode::DecoderKind;

use crate::config;
use crate::error::{AppError, Result};
use crate::pipeline::{self, DecodeOverrides, Run};

/// Log level comes from this variable (`error` … `trace`, default `info`).
pub const LOG_ENV: &str = "UANET_LOG";

#[derive(Debug, Parser)]
#[command(name = "uanet", version, about = "Uncertainty-aware two-stage sequence labeling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-key override such as `train.stage1_epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Output directory for every artifact.
    #[arg(long, default_value = "out", global = true)]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// softmax, crf or mix.
    #[arg(long, global = true)]
    pub decoder: Option<String>,
    /// Uncertainty threshold in nats.
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    /// Monte-Carlo samples per draft.
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    /// Worker threads for sampling and decoding.
    #[arg(long, default_value_t = 1, global = true)]
    pub workers: usize,
    /// Repair illegal BIOES output.
    #[arg(long, global = true)]
    pub legalize: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured corpus as train/dev/test column files.
    Synth,
    /// Train both stages and save a checkpoint.
    Train,
    /// Label a column file.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        /// The input carries gold labels in the configured column.
        #[arg(long)]
        labeled: bool,
    },
    /// Score the test split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Threshold sweep on dev and sample-count sweep on test.
    Sweep {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Decoder throughput and label-set scaling.
    Bench,
}

impl Common {
    fn overrides(&self) -> Vec<String> {
        let mut o = self.set.clone();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        if let Some(d) = &self.decoder {
            o.push(format!("decode.decoder=\"{d}\""));
        }
        if let Some(g) = self.gamma {
            o.push(format!("decode.gamma={g:?}"));
        }
        if let Some(m) = self.samples {
            o.push(format!("decode.samples={m}"));
        }
        if self.legalize {
            o.push("decode.legalize=true".into());
        }
        o
    }

    fn decode(&self) -> Result<DecodeOverrides> {
        let decoder = match &self.decoder {
            Some(d) => Some(
                DecoderKind::parse(d)
                    .ok_or_else(|| AppError::config("decode.decoder", format!("unknown decoder `{d}`")))?,
            ),
            None => None,
        };
        Ok(DecodeOverrides {
            decoder,
            gamma: self.gamma,
            samples: self.samples,
            legalize: self.legalize,
        })
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let c = &cli.common;
    let cfg = config::load(c.config.as_deref(), &c.overrides())?;
    if c.workers == 0 {
        return Err(AppError::config("workers", "must be at least 1"));
    }
    let run = Run {
        out: c.out.clone(),
        workers: c.workers,
    };
    match &cli.command {
        Command::Synth => pipeline::synth(&cfg, &run).map(drop),
        Command::Train => pipeline::train(&cfg, &run).map(drop),
        Command::Predict {
            checkpoint,
            input,
            labeled,
        } => pipeline::predict(&cfg, checkpoint.as_deref(), input, *labeled, &c.decode()?, &run).map(drop),
        Command::Eval { checkpoint } => {
            let e = pipeline::eval(&cfg, checkpoint.as_deref(), &c.decode()?, &run)?;
            print!("{}", pipeline::eval_summary(&e, cfg.decode.core()?.decoder));
            Ok(())
        }
        Command::Sweep { checkpoint } => {
            let s = pipeline::sweep(&cfg, checkpoint.as_deref(), &run)?;
            println!("best gamma {:.4} dev {:.4}", s.gamma.best_gamma, s.gamma.best_f1);
            Ok(())
        }
        Command::Bench => {
            let r = pipeline::bench(&cfg, &run)?;
            print!("{}", crate::report::bench_text(&r));
            Ok(())
        }
    }
}

/// Parses `argv`, runs the command and returns the process exit status:
/// 0 on success, 2 for usage and configuration errors, 1 otherwise.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
