//! Thin command-line front end over the library: each subcommand parses a
//! config file and delegates to `flowtune::cli`.
//!
//! Exit status: 0 on success, 1 on validation failure, 2 on usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flowtune::cli::{
    cmd_eval, cmd_finetune, cmd_make_corpus, cmd_pretrain, cmd_sample, cmd_verify, RunConfig,
};

#[derive(Parser)]
#[command(name = "flowtune", version, about = "Discrete flow matching with policy-gradient fine-tuning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration file
    #[arg(long)]
    config: PathBuf,
    /// Global seed (overrides [run] seed)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a posterior model on the configured corpus
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Reward fine-tuning from a pretrained checkpoint
    Finetune {
        #[command(flatten)]
        common: Common,
    },
    /// Draw sequences from a checkpoint
    Sample {
        #[command(flatten)]
        common: Common,
        /// Number of sequences
        #[arg(long)]
        n: usize,
    },
    /// Score previously sampled sequences
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Run a named verification check and write its report files
    Verify {
        #[command(flatten)]
        common: Common,
        /// Check name (or `all`)
        #[arg(long)]
        check: String,
    },
    /// Generate a synthetic corpus file
    MakeCorpus {
        #[command(flatten)]
        common: Common,
        /// Number of sequences
        #[arg(long)]
        n: usize,
    },
}

fn run() -> flowtune::Result<bool> {
    let cli = Cli::parse();
    let common = match &cli.cmd {
        Cmd::Pretrain { common }
        | Cmd::Finetune { common }
        | Cmd::Sample { common, .. }
        | Cmd::Eval { common }
        | Cmd::Verify { common, .. }
        | Cmd::MakeCorpus { common, .. } => common,
    };
    let cfg = RunConfig::load(&common.config)?;
    let seed = match common.seed {
        Some(s) => s,
        None => cfg.seed()?,
    };
    match &cli.cmd {
        Cmd::Pretrain { common } => {
            let path = cmd_pretrain(&cfg, &common.out, seed)?;
            println!("wrote {}", path.display());
            Ok(true)
        }
        Cmd::Finetune { common } => {
            let path = cmd_finetune(&cfg, &common.out, seed)?;
            println!("wrote {}", path.display());
            Ok(true)
        }
        Cmd::Sample { common, n } => {
            let path = cmd_sample(&cfg, &common.out, *n, seed)?;
            println!("wrote {}", path.display());
            Ok(true)
        }
        Cmd::Eval { common } => {
            let line = cmd_eval(&cfg, &common.out)?;
            println!("{line}");
            Ok(true)
        }
        Cmd::Verify { common, check } => cmd_verify(&cfg, &common.out, check, seed),
        Cmd::MakeCorpus { common, n } => {
            let path = cmd_make_corpus(&cfg, &common.out, *n, seed)?;
            println!("wrote {}", path.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
