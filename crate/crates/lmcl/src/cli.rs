//! Command-line interface.
//!
//! Every invocation ends with one `key=value` summary line on stderr, e.g.
//! `status=ok command=train` or `status=error command=eval kind=io exit=2`.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use lmcl_core::probe::ProbeConfig;

use crate::checks::{self, Scale};
use crate::config;
use crate::dataset::load_pair;
use crate::error::{LmclError, Result};
use crate::run;

#[derive(Debug, Parser)]
#[command(
    name = "lmcl",
    version,
    about = "Layer-wise mutual contrastive learning for cohorts of networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a cohort and write metrics and a checkpoint.
    Train {
        /// JSON config; defaults are used for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory, relative to $LMCL_OUTPUT_ROOT (default `runs`) unless absolute.
        #[arg(long, default_value = "latest")]
        out: PathBuf,
        /// Print the resolved config and exit.
        #[arg(long)]
        print_config: bool,
        /// Overrides such as `epochs=5` or `mcl.alpha=0.5`.
        overrides: Vec<String>,
    },
    /// Test accuracy of every network in a checkpoint.
    Eval { checkpoint: PathBuf },
    /// Linear probe on frozen final-stage features.
    Probe {
        checkpoint: PathBuf,
        /// Network to probe; the best on the test split by default.
        #[arg(long)]
        net: Option<usize>,
        /// Probe on another dataset instead of the training one.
        #[arg(long, requires = "transfer_test")]
        transfer_train: Option<PathBuf>,
        #[arg(long, requires = "transfer_train")]
        transfer_test: Option<PathBuf>,
        #[arg(long, default_value_t = ProbeConfig::default().steps)]
        steps: usize,
        #[arg(long, default_value_t = ProbeConfig::default().lr)]
        lr: f64,
    },
    /// Run the oracle and property checks.
    Check {
        /// Full randomized counts instead of the quick ones.
        #[arg(long)]
        full: bool,
        /// Run only the named check.
        #[arg(long)]
        only: Option<String>,
    },
    /// Write final-stage test embeddings of a checkpoint to CSV.
    ExportEmbeddings {
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Probe { .. } => "probe",
            Command::Check { .. } => "check",
            Command::ExportEmbeddings { .. } => "export-embeddings",
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train {
            config: path,
            out,
            print_config,
            overrides,
        } => {
            let cfg = config::resolve(path.as_deref(), &overrides)?;
            if print_config {
                println!("{}", config::to_json(&cfg));
                return Ok(());
            }
            let dir = run::run_dir(&out);
            let output = run::train(&cfg, &dir)?;
            let s = &output.summary;
            println!(
                "run {}: best network {} test accuracy {:.4} ({:.1}s)",
                dir.display(),
                s.best_network,
                s.best_test_accuracy,
                s.wall_time_s
            );
            Ok(())
        }
        Command::Eval { checkpoint } => {
            for (m, acc) in run::evaluate(&checkpoint)?.iter().enumerate() {
                println!("net {m} test_accuracy {acc:.6}");
            }
            Ok(())
        }
        Command::Probe {
            checkpoint,
            net,
            transfer_train,
            transfer_test,
            steps,
            lr,
        } => {
            let transfer = match (transfer_train, transfer_test) {
                (Some(a), Some(b)) => Some(load_pair(&a, &b)?),
                _ => None,
            };
            let cfg = ProbeConfig {
                steps,
                lr,
                ..ProbeConfig::default()
            };
            let (m, r) = run::probe(&checkpoint, transfer.as_ref(), net, &cfg)?;
            println!(
                "net {m} probe train_accuracy {:.6} test_accuracy {:.6} loss {:.6}",
                r.train_accuracy, r.test_accuracy, r.final_loss
            );
            Ok(())
        }
        Command::Check { full, only } => {
            let scale = if full { Scale::Full } else { Scale::Quick };
            let selected: Vec<_> = checks::CHECKS
                .iter()
                .filter(|(name, _)| only.as_deref().is_none_or(|o| o == *name))
                .collect();
            if selected.is_empty() {
                return Err(LmclError::Config(format!(
                    "unknown check `{}`",
                    only.unwrap_or_default()
                )));
            }
            let mut failed = 0;
            for &&(name, check) in &selected {
                let r = checks::run(name, check, scale);
                failed += usize::from(!r.passed);
                println!("{r}");
            }
            if failed > 0 {
                return Err(LmclError::ChecksFailed {
                    failed,
                    total: selected.len(),
                });
            }
            Ok(())
        }
        Command::ExportEmbeddings { checkpoint, out } => {
            run::export_embeddings(&checkpoint, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn quote(s: &str) -> String {
    format!("{:?}", s.replace('\n', " "))
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            if code == 0 {
                return 0;
            }
            eprintln!("status=error command=none kind=usage exit=2");
            return 2;
        }
    };
    let name = cli.command.name();
    match execute(cli.command) {
        Ok(()) => {
            eprintln!("status=ok command={name} exit=0");
            0
        }
        Err(e) => {
            let code = e.exit_code();
            eprintln!("error: {e}");
            eprintln!(
                "status=error command={name} kind={} exit={code} message={}",
                e.kind(),
                quote(&e.to_string())
            );
            code
        }
    }
}
