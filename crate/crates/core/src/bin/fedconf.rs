use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use fedconf::experiment::{self, results, ExperimentConfig};

/// Federated regression simulator: averaging vs. distillation aggregation.
#[derive(Parser)]
#[command(name = "fedconf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override. For `compare` this replaces the seed list.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-trip dataset and its manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model per trip and write loss and entropy matrices.
    ValidateEntropy {
        #[command(flatten)]
        common: Common,
        /// Dataset file; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run every method x partition mode x seed and write metrics.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Turn a metrics CSV into per-method learning-curve files.
    Plotdata {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        metrics: PathBuf,
    },
}

fn load_config(common: &Common, seed_is_list: bool) -> fedconf::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = &common.out {
        cfg.out_dir = dir.clone();
    }
    if let Some(seed) = common.seed {
        if seed_is_list {
            cfg.seeds = vec![seed];
        } else {
            cfg.seed = seed;
        }
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = load_config(&common, false)?;
            let out = experiment::cmd_gen_data(&cfg).context("gen-data failed")?;
            println!("wrote {} samples to {}", out.samples, out.dataset.display());
            println!("manifest: {}", out.manifest.display());
        }
        Command::ValidateEntropy { common, data } => {
            let cfg = load_config(&common, false)?;
            let report = experiment::cmd_validate_entropy(&cfg, data.as_deref()).context("validate-entropy failed")?;
            print!("{}", report.summary_text());
            println!("results in {}", cfg.out_dir.display());
        }
        Command::Compare { common, data } => {
            let cfg = load_config(&common, true)?;
            let out = experiment::cmd_compare(&cfg, data.as_deref()).context("compare failed")?;
            print!("{}", results::summary_to_text(&out.summary));
            println!("results in {}", cfg.out_dir.display());
        }
        Command::Plotdata { common, metrics } => {
            let cfg = load_config(&common, false)?;
            let out = experiment::cmd_plotdata(&cfg, &metrics).context("plotdata failed")?;
            if let Some(w) = &out.warning {
                eprintln!("warning: {w}");
            }
            for f in &out.files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<fedconf::Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
