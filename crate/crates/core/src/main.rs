use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use unimoco::cli::{self, RunConfig};
use unimoco::Error;

#[derive(Parser)]
#[command(name = "unimoco", version, about = "Modality-completion embedding toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Fixed reduction order. Runs are single-threaded, so this always holds.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write train and eval manifests.
    GenData(Common),
    /// Train from the train manifest; writes a checkpoint and loss trace.
    Train(Common),
    /// Score a checkpoint on an eval manifest.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `model.ckpt` in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to `eval.jsonl` in the output directory.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train both architectures on skewed corpora and score every combination.
    Bias(Common),
    /// Finite-difference checks of every op and the full training loss.
    Gradcheck,
}

fn load(c: &Common) -> unimoco::Result<RunConfig> {
    RunConfig::load(&c.config, c.seed, c.out.as_deref())
}

fn run(command: Command) -> unimoco::Result<bool> {
    let mut stdout = std::io::stdout().lock();
    match command {
        Command::GenData(c) => cli::cmd_gen_data(&load(&c)?, &mut stdout)?,
        Command::Train(c) => cli::cmd_train(&load(&c)?, &mut stdout)?,
        Command::Eval { common, checkpoint, manifest } => {
            let cfg = load(&common)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.out_dir.join(cli::CHECKPOINT));
            let manifest = manifest.unwrap_or_else(|| cfg.out_dir.join(cli::EVAL_MANIFEST));
            cli::cmd_eval(&cfg, &ckpt, &manifest, &mut stdout)?
        }
        Command::Bias(c) => cli::cmd_bias(&load(&c)?, &mut stdout)?,
        Command::Gradcheck => return Ok(cli::cmd_gradcheck(&mut stdout)?.is_empty()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::MissingKey(_) | Error::Parse { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
