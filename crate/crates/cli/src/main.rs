use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cogen::config::RunConfig;
use cogen::harness;
use cogen::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "cogen", version, about = "Joint dialogue act and response generation")]
struct Cli {
    /// Flat `key = value` run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus and its ontology.
    Synth,
    /// Warm up the act branch, then train jointly; writes checkpoint and loss log.
    Train,
    /// Decode a corpus with a checkpoint and write a metrics report.
    Eval,
    /// Generate acts and a response for one JSON turn file.
    Generate { turn: PathBuf },
    /// Interactive generation from stdin.
    Chat,
    /// Finite-difference check of every op and the joint loss.
    Gradcheck,
    /// Loss-mode sweep over weighted α and the uncertainty loss.
    Sweep,
    /// Joint training against the two-stage pipeline.
    Ablation,
    /// Print the effective configuration.
    Config,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    cfg.apply_overrides(&cli.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let cfg = load_config(cli)?;
    let mut out = io::stdout().lock();
    match &cli.command {
        Command::Synth => {
            let d = harness::cmd_synth(&cfg)?;
            writeln!(out, "wrote {} dialogues to {}", d.len(), cfg.corpus.display())?;
        }
        Command::Train => {
            let o = harness::cmd_train(&cfg)?;
            if let Some(last) = o.log.iter().rev().find(|l| !l.starts_with("check")) {
                writeln!(out, "{last}")?;
            }
            writeln!(
                out,
                "checkpoint {} (warm-up {}, epochs {}{})",
                cfg.checkpoint.display(),
                o.progress.warmup_done,
                o.progress.epochs_done,
                if o.stopped_early { ", stopped early" } else { "" }
            )?;
        }
        Command::Eval => {
            let r = harness::cmd_eval(&cfg)?;
            write!(out, "{}", r.to_text(&cfg.fingerprint()))?;
        }
        Command::Generate { turn } => {
            let g = harness::cmd_generate(&cfg, turn)?;
            write!(out, "{}", g.to_text())?;
        }
        Command::Chat => {
            harness::cmd_chat(&cfg, io::stdin().lock(), &mut out)?;
        }
        Command::Gradcheck => {
            let rows = harness::cmd_gradcheck(&cfg)?;
            write!(out, "{}", harness::gradcheck_table(&rows))?;
            if rows.iter().any(|r| !r.passed()) {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Sweep => {
            let s = harness::cmd_sweep(&cfg)?;
            write!(out, "{}", s.comparison.text)?;
        }
        Command::Ablation => {
            let c = harness::cmd_ablation(&cfg)?;
            write!(out, "{}", c.text)?;
        }
        Command::Config => {
            write!(out, "{}", cfg.to_text())?;
            writeln!(out, "# fingerprint {}", cfg.fingerprint())?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
