//! Command-line front end: data generation, training, streaming evaluation
//! and FLOP tables.

pub mod commands;
pub mod config;
pub mod policy_spec;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

pub use commands::{bench_flops, eval_stream, gen_data, train_arm_cmd, train_encoder, EvalArgs, FlopTable, GenDataArgs, Task};
pub use config::RunConfig;
pub use policy_spec::PolicySpec;

#[derive(Debug, Parser)]
#[command(name = "streamtag", version, about = "Streaming sequence labelling with learned restarts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Paths shared by the training commands; each overrides the config file.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct RunArgs {
    /// JSON run configuration (defaults apply to missing keys).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding train.conll, dev.conll and test.conll.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(d) = &self.data {
            cfg.set_data_dir(d);
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic tagging task split into train/dev/test.
    GenData(GenDataArgs),
    /// Train a hybrid encoder and keep the best dev checkpoint.
    TrainEncoder(RunArgs),
    /// Train a restart module on a frozen encoder.
    TrainArm {
        #[arg(long)]
        encoder: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Stream a CoNLL file under a restart policy.
    EvalStream(EvalArgs),
    /// Print per-example streaming FLOPs for every causal/bidirectional split.
    BenchFlops {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
        lengths: Vec<usize>,
        /// Directory for flops.json and the resolved config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => {
            let m = gen_data(&args)?;
            println!(
                "wrote {} ({} / {} / {} sentences)",
                args.out.display(),
                m.train.sentences,
                m.dev.sentences,
                m.test.sentences
            );
        }
        Command::TrainEncoder(run) => {
            let cfg = run.resolve()?;
            let summary = train_encoder(&cfg, |l| {
                eprintln!(
                    "epoch {:>3}  loss_bi {:.5}  loss_uni {:.5}  dev_f1 {:.4}",
                    l.epoch, l.loss_bi, l.loss_uni, l.dev_f1
                )
            })?;
            println!(
                "best epoch {} (dev F1 {:.4}); model in {}",
                summary.best_epoch,
                summary.best_dev_f1,
                cfg.out_dir.join(commands::ENCODER_FILE).display()
            );
        }
        Command::TrainArm { encoder, run } => {
            let cfg = run.resolve()?;
            let r = train_arm_cmd(&cfg, &encoder)?;
            println!(
                "dev restart F1 {:.4} (majority baseline {:.4}); alpha {} beta {} tau {} exclude_latest {}",
                r.training.dev_f1, r.training.dev_majority_f1, r.selected.alpha, r.selected.beta, r.selected.tau, r.selected.exclude_latest
            );
        }
        Command::EvalStream(args) => {
            let report = eval_stream(&args)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::BenchFlops { config, lengths, out } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let table = commands::bench_flops_cmd(&cfg, &lengths, out.as_deref())?;
            print!("{}", table.render());
        }
    }
    Ok(())
}
