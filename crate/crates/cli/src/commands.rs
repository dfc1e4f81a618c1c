//! Subcommand implementations.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rana_core::embedding::{load_embeddings, pretrain_transe_with_report, save_embeddings};
use rana_core::eval::{meta_test, EvalConfig, EvalMode, MetricsReport};
use rana_core::kg::{
    build_neighbor_index, generate_synthetic_kg, load_dataset, save_dataset, KnowledgeGraph, NeighborIndex, Split,
    SyntheticSpec, TaskSet,
};
use rana_core::trainer::{load_checkpoint, meta_train, save_checkpoint, ModelParams};

use crate::config::{threads_from_env, RunConfig, EFFECTIVE_CONFIG};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const VAL_METRICS_FILE: &str = "val_metrics.json";

/// Config file, `--set` overrides and an optional seed override.
#[derive(Clone, Debug, Default)]
pub struct ConfigSource {
    pub path: Option<PathBuf>,
    pub sets: Vec<String>,
    pub seed: Option<u64>,
}

impl ConfigSource {
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        self.resolve_with_fallback(None)
    }

    fn resolve_with_fallback(&self, fallback: Option<&Path>) -> anyhow::Result<RunConfig> {
        let path = self.path.as_deref().or(fallback.filter(|p| p.exists()));
        let mut cfg = RunConfig::load(path)?;
        cfg.apply_overrides(&self.sets)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn pick(flag: &Option<PathBuf>, from_config: &Option<PathBuf>, name: &str) -> anyhow::Result<PathBuf> {
    match flag.as_ref().or(from_config.as_ref()) {
        Some(p) => Ok(p.clone()),
        None => bail!("missing --{name} (not given on the command line or in the config)"),
    }
}

fn load_data(path: &Path) -> anyhow::Result<(KnowledgeGraph, TaskSet)> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn index_for(graph: &KnowledgeGraph, cfg: &RunConfig) -> anyhow::Result<NeighborIndex> {
    Ok(build_neighbor_index(graph, cfg.neighbor_cap, cfg.neighbor_seed())?)
}

pub fn synth(spec: &SyntheticSpec, seed: u64, out: &Path) -> anyhow::Result<String> {
    let (graph, tasks) = generate_synthetic_kg(spec, seed)?;
    save_dataset(out, &graph, &tasks).with_context(|| format!("writing dataset {}", out.display()))?;
    Ok(format!(
        "entities {}  relations {}  background triples {}  tasks train/valid/test {}/{}/{}",
        graph.entity_count,
        graph.relation_count,
        graph.background.len(),
        tasks.train.len(),
        tasks.valid.len(),
        tasks.test.len()
    ))
}

pub struct PretrainArgs {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub config: ConfigSource,
}

pub fn pretrain(args: &PretrainArgs) -> anyhow::Result<String> {
    let cfg = args.config.resolve()?;
    let data = pick(&args.data, &cfg.data, "data")?;
    let out = pick(&args.out, &cfg.out, "out")?;
    let (graph, _) = load_data(&data)?;
    let (table, report) = pretrain_transe_with_report(&graph, &cfg.transe())?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_embeddings(&table, &out)?;
    let echo = out.with_file_name(format!(
        "{}.config.json",
        out.file_name().and_then(|n| n.to_str()).unwrap_or("embeddings")
    ));
    cfg.write_to(&echo)?;
    Ok(format!(
        "pretrained {} epochs, dim {}: loss {:.4} -> {:.4}",
        cfg.transe_epochs, cfg.dim, report.initial_loss, report.final_loss
    ))
}

pub struct TrainArgs {
    pub data: Option<PathBuf>,
    pub embeddings: PathBuf,
    pub out: Option<PathBuf>,
    pub config: ConfigSource,
}

pub fn train(args: &TrainArgs) -> anyhow::Result<String> {
    let cfg = args.config.resolve()?;
    let threads = threads_from_env()?;
    let data = pick(&args.data, &cfg.data, "data")?;
    let out = pick(&args.out, &cfg.out, "out")?;
    let (graph, tasks) = load_data(&data)?;
    let pretrained = load_embeddings(&args.embeddings)
        .with_context(|| format!("loading embeddings {}", args.embeddings.display()))?;
    if pretrained.entity_count() != graph.entity_count || pretrained.relation_count() != graph.relation_count {
        bail!(
            "embeddings cover {} entities / {} relations, dataset has {} / {}",
            pretrained.entity_count(),
            pretrained.relation_count(),
            graph.entity_count,
            graph.relation_count
        );
    }
    let index = index_for(&graph, &cfg)?;
    let initial = ModelParams::from_pretrained(&pretrained, cfg.hyper(), cfg.encoder_seed())?;
    let schedule = cfg.schedule(threads);

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    cfg.write_to(&out.join(EFFECTIVE_CONFIG))?;
    let trace_path = out.join(TRACE_FILE);
    let mut trace =
        BufWriter::new(fs::File::create(&trace_path).with_context(|| format!("creating {}", trace_path.display()))?);
    let mut write_err = None;
    let outcome = meta_train(&tasks, initial, &index, &schedule, |rec| {
        if write_err.is_none() {
            let line = serde_json::to_string(rec).expect("trace records serialize");
            if let Err(e) = writeln!(trace, "{line}") {
                write_err = Some(e);
            }
        }
        if let Some(mrr) = rec.val_mrr {
            eprintln!("iter {:>5}  query loss {:.4}  val mrr {:.4}", rec.iter, rec.query_loss, mrr);
        }
    });
    trace.flush().with_context(|| format!("writing {}", trace_path.display()))?;
    if let Some(e) = write_err {
        return Err(e).with_context(|| format!("writing {}", trace_path.display()));
    }
    let outcome = outcome?;

    save_checkpoint(out.join(CHECKPOINT_FILE), &outcome.best.embeddings, &outcome.best.encoder)?;
    let mut summary = format!(
        "trained {} iterations; best iteration {}",
        outcome.trace.len(),
        outcome.best_iter.map_or("none".to_string(), |i| i.to_string())
    );
    if tasks.valid.is_empty() {
        eprintln!("warning: no validation tasks, {VAL_METRICS_FILE} not written");
    } else {
        let eval_cfg = EvalConfig {
            mode: EvalMode::Filtered,
            seed: schedule.seed,
            threads,
        };
        let val = meta_test(&tasks.valid, &outcome.best, &index, &tasks.known_facts(), &eval_cfg)?;
        let report = val.metrics.report(Split::Valid.name());
        write_json(&out.join(VAL_METRICS_FILE), &report)?;
        summary.push_str(&format!("; valid MRR {:.4} Hits@1 {:.4}", report.mrr, report.hits1));
    }
    Ok(summary)
}

pub struct EvalArgs {
    pub data: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub split: Split,
    pub mode: Option<EvalMode>,
    pub out: Option<PathBuf>,
    pub ranks: Option<PathBuf>,
    pub config: ConfigSource,
}

/// Evaluates a checkpoint. Without `--config`, the config echoed next to the
/// checkpoint is used when present.
pub fn eval(args: &EvalArgs) -> anyhow::Result<MetricsReport> {
    let fallback = args.checkpoint.with_file_name(EFFECTIVE_CONFIG);
    let cfg = args.config.resolve_with_fallback(Some(&fallback))?;
    let threads = threads_from_env()?;
    let data = pick(&args.data, &cfg.data, "data")?;
    let (graph, tasks) = load_data(&data)?;
    let (embeddings, encoder) = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    if embeddings.entity_count() != graph.entity_count || embeddings.relation_count() != 2 * graph.relation_count {
        bail!("checkpoint does not match the dataset's entity and relation counts");
    }
    let params = ModelParams::new(embeddings, encoder, cfg.hyper())?;
    let index = index_for(&graph, &cfg)?;
    let eval_cfg = EvalConfig {
        mode: args.mode.unwrap_or(cfg.eval_mode),
        seed: cfg.schedule(threads).seed,
        threads,
    };
    let split_tasks = tasks.split(args.split);
    if split_tasks.is_empty() {
        bail!("split {} has no tasks", args.split.name());
    }
    let outcome = meta_test(split_tasks, &params, &index, &tasks.known_facts(), &eval_cfg)?;
    let report = outcome.metrics.report(args.split.name());
    if let Some(path) = &args.out {
        write_json(path, &report)?;
    }
    if let Some(path) = &args.ranks {
        fs::write(path, outcome.ranks_tsv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(report)
}
