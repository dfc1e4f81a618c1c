//! Command-line driver: dataset generation, pretraining, meta-training,
//! evaluation and plot-data reports.

pub mod commands;
pub mod config;
pub mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rana_core::eval::EvalMode;
use rana_core::kg::{Split, SyntheticSpec};

use commands::ConfigSource;
use report::ReportInput;

#[derive(Debug, Parser)]
#[command(name = "rana", version, about = "Few-shot knowledge graph completion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set gamma=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    fn source(&self) -> ConfigSource {
        ConfigSource {
            path: self.config.clone(),
            sets: self.sets.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub entities: Option<usize>,
    #[arg(long)]
    pub background_relations: Option<usize>,
    #[arg(long, alias = "tasks")]
    pub train_relations: Option<usize>,
    #[arg(long)]
    pub valid_relations: Option<usize>,
    #[arg(long)]
    pub test_relations: Option<usize>,
    #[arg(long)]
    pub support: Option<usize>,
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub candidates: Option<usize>,
    #[arg(long)]
    pub types: Option<usize>,
    #[arg(long)]
    pub grid_width: Option<usize>,
    #[arg(long)]
    pub max_offset: Option<usize>,
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

impl SynthArgs {
    pub fn spec(&self) -> SyntheticSpec {
        let d = SyntheticSpec::default();
        SyntheticSpec {
            entities: self.entities.unwrap_or(d.entities),
            background_relations: self.background_relations.unwrap_or(d.background_relations),
            train_relations: self.train_relations.unwrap_or(d.train_relations),
            valid_relations: self.valid_relations.unwrap_or(d.valid_relations),
            test_relations: self.test_relations.unwrap_or(d.test_relations),
            support: self.support.unwrap_or(d.support),
            queries: self.queries.unwrap_or(d.queries),
            candidates: self.candidates.unwrap_or(d.candidates),
            types: self.types.unwrap_or(d.types),
            grid_width: self.grid_width.unwrap_or(d.grid_width),
            max_offset: self.max_offset.unwrap_or(d.max_offset),
            density: self.density.unwrap_or(d.density),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Pretrain TransE embeddings on the background graph.
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Embedding file to write.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Meta-train the encoder and embeddings.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        embeddings: PathBuf,
        /// Output directory for the checkpoint, trace and validation metrics.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        mode: Option<EvalMode>,
        /// Metrics JSON to write.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-query ranks TSV to write.
        #[arg(long)]
        ranks: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Merge metrics files or traces into a long-format TSV.
    Report {
        /// Name of the swept parameter, e.g. `J` or `shots`.
        #[arg(long, default_value = "x")]
        param: String,
        /// Inputs as X=PATH.
        inputs: Vec<ReportInput>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Runs one command; returns the text to print on stdout.
pub fn run(cli: Cli) -> anyhow::Result<String> {
    match cli.command {
        Command::Synth(args) => commands::synth(&args.spec(), args.seed, &args.out),
        Command::Pretrain { data, out, config } => commands::pretrain(&commands::PretrainArgs {
            data,
            out,
            config: config.source(),
        }),
        Command::Train {
            data,
            embeddings,
            out,
            config,
        } => commands::train(&commands::TrainArgs {
            data,
            embeddings,
            out,
            config: config.source(),
        }),
        Command::Eval {
            data,
            checkpoint,
            split,
            mode,
            out,
            ranks,
            config,
        } => {
            let report = commands::eval(&commands::EvalArgs {
                data,
                checkpoint,
                split,
                mode,
                out,
                ranks,
                config: config.source(),
            })?;
            Ok(serde_json::to_string_pretty(&report)?)
        }
        Command::Report { param, inputs, out } => {
            let report = report::build_report(&param, &inputs)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            match out {
                Some(path) => {
                    std::fs::write(&path, &report.tsv).map_err(|e| anyhow::anyhow!("writing {}: {e}", path.display()))?;
                    Ok(format!("wrote {} rows to {}", report.rows, path.display()))
                }
                None => Ok(report.tsv.trim_end().to_string()),
            }
        }
    }
}
