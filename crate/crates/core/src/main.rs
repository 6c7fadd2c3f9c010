use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mpclab::pipeline::{self, StageConfig};
use mpclab::Error;

#[derive(Parser)]
#[command(name = "mpclab", version, about = "Masked predictive coding pre-training and transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature corpus and its manifest.
    Synth(StageArgs),
    /// Self-supervised pre-training (MPC, APC or unified).
    Pretrain(StageArgs),
    /// Continue MPC pre-training on target-task features.
    Adapt(StageArgs),
    /// Supervised fine-tuning with the joint attention/CTC loss.
    Finetune(StageArgs),
    /// Per-layer probing of a frozen pre-trained encoder.
    Probe(StageArgs),
    /// Average the best checkpoints on the dev set.
    Average(StageArgs),
    /// Greedy CTC decoding and error rate on a labeled manifest.
    Eval(StageArgs),
}

#[derive(Args)]
struct StageArgs {
    /// TOML stage configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Initial checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
}

fn load(args: &StageArgs) -> Result<StageConfig, Error> {
    let mut cfg = StageConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(init) = &args.init {
        cfg.init = Some(init.clone());
    }
    Ok(cfg)
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Synth(a) => {
            let m = pipeline::cmd_synth(&load(&a)?)?;
            println!("manifest: {}", m.display());
        }
        Command::Pretrain(a) => {
            let o = pipeline::cmd_pretrain(&load(&a)?)?;
            println!("checkpoint: {}", o.final_checkpoint.display());
        }
        Command::Adapt(a) => {
            let o = pipeline::cmd_adapt(&load(&a)?)?;
            println!("checkpoint: {}", o.final_checkpoint.display());
        }
        Command::Finetune(a) => {
            let o = pipeline::cmd_finetune(&load(&a)?)?;
            println!("checkpoint: {}", o.final_checkpoint.display());
            if let Some(d) = o.final_dev {
                println!("dev loss {:.6}  dev cer {:.4}", d.loss, d.cer);
            }
        }
        Command::Probe(a) => {
            let o = pipeline::cmd_probe(&load(&a)?)?;
            println!("layer,dev_loss,dev_cer");
            for r in &o.rows {
                println!("{},{:.6},{:.4}", r.layer, r.dev_loss, r.dev_cer);
            }
        }
        Command::Average(a) => {
            let o = pipeline::cmd_average(&load(&a)?)?;
            println!("checkpoint: {}", o.checkpoint.display());
        }
        Command::Eval(a) => {
            let r = pipeline::cmd_eval(&load(&a)?)?;
            println!("cer {:.4} ({} edits / {} tokens)", r.cer, r.edits, r.ref_len);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
