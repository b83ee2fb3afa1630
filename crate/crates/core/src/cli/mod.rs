//! Command-line front end: flat run configs, the toy corpus generator and the
//! subcommands. `main` only forwards to [`run`].

pub mod commands;
pub mod config;
pub mod toy;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::Error;
use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "xslu", version, about = "Cross-lingual joint intent detection and slot filling")]
pub struct Cli {
    /// Flat key = value config file applied over the defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Extra `key=value` override, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Debug-level logging.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Code-switch a corpus once and write the switched utterances.
    Augment {
        #[arg(long)]
        data: PathBuf,
        /// `SRC-TGT:PATH` or a file named like `dict.en-xx.txt`; repeatable.
        #[arg(long = "dicts", num_args = 1.., required = true)]
        dicts: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build slot neighborhoods and negative value pools.
    Pools {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        /// Embed descriptors with this checkpoint's token table.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model into a run directory.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[arg(long = "dicts", num_args = 1..)]
        dicts: Vec<String>,
        /// Schema file; inferred from the training corpus when absent.
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Prebuilt pool file; built on the fly when slot-level CL is on.
        #[arg(long)]
        pools: Option<PathBuf>,
        #[arg(long)]
        outdir: PathBuf,
    },
    /// Score a checkpoint on a labelled corpus.
    Eval {
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the predictions as JSONL.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Count utterance-level error categories for a prediction file.
    ErrorStats {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write [CLS] representations as TSV.
    ExportRepr {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic two-language corpus.
    MakeToy {
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Numerical(_) => EXIT_NUMERICAL,
        Error::Io { .. } | Error::Parse { .. } | Error::Validation(_) | Error::Shape(_) | Error::Json(_) => EXIT_DATA,
    }
}

fn effective_config(cli: &Cli) -> crate::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.set("seed", &s.to_string())?;
    }
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> crate::Result<String> {
    let cfg = effective_config(cli)?;
    Ok(match &cli.command {
        Command::Augment { data, dicts, out } => {
            let n = commands::augment(&cfg, data, dicts, out)?;
            format!("wrote {n} switched utterances to {}", out.display())
        }
        Command::Pools {
            data,
            schema,
            checkpoint,
            out,
        } => {
            let pool = commands::pools(&cfg, data, schema, checkpoint.as_deref(), out)?;
            format!("wrote pools for {} slots to {}", pool.pools.len(), out.display())
        }
        Command::Train {
            train,
            valid,
            dicts,
            schema,
            pools,
            outdir,
        } => {
            let m = commands::train_cmd(
                &cfg,
                &commands::TrainArgs {
                    train,
                    valid,
                    dicts,
                    schema: schema.as_deref(),
                    pools: pools.as_deref(),
                    outdir,
                },
            )?;
            format!(
                "best validation: semantic EM {:.4}, intent acc {:.4}, slot F1 {:.4}; run in {}",
                m.semantic_em,
                m.intent_accuracy,
                m.slot_f1,
                outdir.display()
            )
        }
        Command::Eval {
            test,
            checkpoint,
            out,
            predictions,
        } => {
            let m = commands::eval(test, checkpoint, out, predictions.as_deref())?;
            format!(
                "semantic EM {:.4}, intent acc {:.4}, slot F1 {:.4} over {} utterances",
                m.semantic_em, m.intent_accuracy, m.slot_f1, m.n
            )
        }
        Command::ErrorStats { pred, gold, out } => {
            let s = commands::error_stats(pred, gold, out)?;
            format!("{} utterances with errors; written to {}", s.n_utterance_err, out.display())
        }
        Command::ExportRepr { data, checkpoint, out } => {
            let n = commands::export_repr(data, checkpoint, out)?;
            format!("wrote {n} representations to {}", out.display())
        }
        Command::MakeToy { out } => {
            let c = commands::make_toy(cfg.train.seed, out)?;
            format!(
                "wrote {} train / {} valid / {} test utterances, {} lexicon entries to {}",
                c.train.len(),
                c.valid.len(),
                c.target_test.len(),
                c.lexicon.len(),
                out.display()
            )
        }
    })
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.verbose { "debug" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(&cli) {
        Ok(msg) => {
            println!("{msg}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
