use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use matr_core::error::MatrError;
use matr_core::metrics::PairId;
use matr_core::pipeline::{cmd_align, cmd_eval, cmd_gen_data, cmd_pretrain, cmd_train, RunConfig};

#[derive(Parser)]
#[command(name = "matr", version, about = "Video-to-video moment retrieval")]
struct Cli {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Checkpoint to resume, initialise from, or evaluate.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output location (data dir, checkpoint file, eval dir or dump file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and manifests.
    GenData,
    /// Self-supervised clip-localisation pre-training.
    Pretrain,
    /// Supervised training, optionally from a pre-training checkpoint.
    Train,
    /// Evaluate a checkpoint and write report, summary and predictions.
    Eval,
    /// Dump the alignment matrices for one pair.
    Align {
        #[arg(long)]
        target: String,
        #[arg(long)]
        query: String,
        /// Overrides the configured soft-DTW temperature.
        #[arg(long)]
        gamma: Option<f64>,
    },
}

fn run(cli: Cli) -> matr_core::Result<serde_json::Value> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = &cli.checkpoint {
        if !p.exists() {
            return Err(MatrError::InvalidArgument(format!("checkpoint {} does not exist", p.display())));
        }
    }
    let ck = cli.checkpoint.as_deref();
    let out = cli.out.as_deref();
    Ok(match cli.command {
        Command::GenData => serde_json::to_value(cmd_gen_data(&cfg, out)?)?,
        Command::Pretrain => serde_json::to_value(cmd_pretrain(&cfg, ck, out)?)?,
        Command::Train => serde_json::to_value(cmd_train(&cfg, ck, out)?)?,
        Command::Eval => {
            let r = cmd_eval(&cfg, ck, out)?;
            json!({ "mIoU": r.miou, "recall_at_1": r.recall_at_1, "pairs": r.pairs.len() })
        }
        Command::Align { target, query, gamma } => {
            if let Some(g) = gamma {
                cfg.model.gamma = g;
            }
            let dump = cmd_align(&cfg, ck, &PairId::new(target, query), out)?;
            if out.is_some() {
                json!({ "written": out.map(Path::display).map(|d| d.to_string()) })
            } else {
                serde_json::to_value(dump)?
            }
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": e.kind(), "message": e.to_string() } }));
            ExitCode::from(1)
        }
    }
}
