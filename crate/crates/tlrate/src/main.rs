use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tlrate::commands::{
    cmd_finetune, cmd_gen_data, cmd_grad_check, cmd_report, cmd_sweep, cmd_train_source,
    REPORT_TEXT,
};
use tlrate::report::render_text;
use tlrate::{Error, RunConfig};
use tlrate_core::nn::GRAD_CHECK_MAX_PARAMS;

const EXIT_INVALID: u8 = 1;
const EXIT_PARTIAL: u8 = 2;
const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "tlrate",
    version,
    about = "Layer-wise learning-rate finetuning experiments"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding `paths.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic domains listed under `[[generate]]`.
    GenData,
    /// Train the source model and save its checkpoint.
    TrainSource,
    /// Finetune the source checkpoint on every target task.
    Finetune,
    /// Run a last-layer, grid or scale sweep and write its report.
    Sweep,
    /// Rebuild the report tables from a ledger.
    Report {
        /// Ledger file; defaults to the configured one.
        ledger: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of a small model.
    GradCheck {
        #[arg(long, default_value_t = 2)]
        width: usize,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config(vec!["--config: required for this command".into()]))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(out) = &cli.out {
        cfg.paths.out = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<u8, Error> {
    match &cli.command {
        Cmd::GenData => {
            for p in cmd_gen_data(&load_config(cli)?)? {
                println!("wrote {}", p.display());
            }
        }
        Cmd::TrainSource => {
            let cfg = load_config(cli)?;
            let path = cmd_train_source(&cfg)?;
            println!("seed {}: wrote {}", cfg.seed, path.display());
        }
        Cmd::Finetune => {
            let cfg = load_config(cli)?;
            for r in cmd_finetune(&cfg)? {
                println!("{} seed {}: accuracy {:.4}", r.task, r.seed, r.accuracy());
            }
        }
        Cmd::Sweep => {
            let cfg = load_config(cli)?;
            let out = cmd_sweep(&cfg)?;
            print!("{}", render_text(&out.report));
            println!(
                "seed {}: {} records, report in {}",
                cfg.seed,
                out.records.len(),
                cfg.paths.out.join(REPORT_TEXT).display()
            );
            if !out.failures.is_empty() {
                eprintln!("{} jobs failed", out.failures.len());
                return Ok(EXIT_PARTIAL);
            }
        }
        Cmd::Report { ledger } => {
            let (ledger, out) = match ledger {
                Some(l) => (l.clone(), cli.out.clone()),
                None => {
                    let cfg = load_config(cli)?;
                    (cfg.ledger_path(), cli.out.clone())
                }
            };
            let report = cmd_report(&ledger, out.as_deref())?;
            if report.skipped_lines > 0 {
                eprintln!(
                    "warning: skipped {} corrupt ledger lines",
                    report.skipped_lines
                );
            }
            print!("{}", render_text(&report));
        }
        Cmd::GradCheck { width } => {
            let seed = cli.seed.unwrap_or(0);
            let g = cmd_grad_check(*width, seed)?;
            println!(
                "{} parameters (limit {GRAD_CHECK_MAX_PARAMS}), max relative error {:.3e}",
                g.params, g.max_relative_error
            );
            if g.max_relative_error >= GRAD_CHECK_TOLERANCE {
                return Ok(EXIT_INVALID);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_INVALID)
        }
    }
}
