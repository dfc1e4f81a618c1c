//! Flat JSON run configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rana_core::embedding::{Norm, TransEConfig};
use rana_core::eval::EvalMode;
use rana_core::negsampling::{PruneConfig, SimilaritySpace, Tau};
use rana_core::seed::derive_seed;
use rana_core::trainer::{Hyperparams, LossMode, OptimizerKind, Schedule};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const EFFECTIVE_CONFIG: &str = "effective_config.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TauMode {
    Percentile,
    Fixed,
}

/// Every knob of a run. Unknown keys are rejected on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,

    pub dim: usize,
    pub transe_margin: f64,
    pub transe_learning_rate: f64,
    pub transe_epochs: usize,
    pub transe_batch_size: usize,
    pub transe_norm: Norm,

    pub gamma: f64,
    pub eta: f64,
    pub meta_lr: f64,
    pub num_negatives: usize,
    pub neighbor_cap: usize,
    pub loss_mode: LossMode,
    pub tau_mode: TauMode,
    /// Percentile in `[0, 100]` or a fixed similarity threshold, per `tau_mode`.
    pub tau_value: f64,
    pub similarity_space: SimilaritySpace,
    pub freeze_embeddings: bool,

    pub iterations: usize,
    pub tasks_per_batch: usize,
    pub eval_every: usize,
    pub queries_per_episode: Option<usize>,
    pub optimizer: OptimizerKind,
    pub eval_mode: EvalMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        let transe = TransEConfig::default();
        let hyper = Hyperparams::default();
        let schedule = Schedule::default();
        RunConfig {
            seed: 0,
            data: None,
            out: None,
            dim: transe.dim,
            transe_margin: transe.margin,
            transe_learning_rate: transe.learning_rate,
            transe_epochs: transe.epochs,
            transe_batch_size: transe.batch_size,
            transe_norm: transe.norm,
            gamma: hyper.gamma,
            eta: hyper.eta,
            meta_lr: hyper.meta_lr,
            num_negatives: hyper.num_negatives,
            neighbor_cap: hyper.neighbor_cap,
            loss_mode: hyper.loss_mode,
            tau_mode: TauMode::Percentile,
            tau_value: 50.0,
            similarity_space: SimilaritySpace::default(),
            freeze_embeddings: hyper.freeze_embeddings,
            iterations: schedule.iterations,
            tasks_per_batch: schedule.tasks_per_batch,
            eval_every: schedule.eval_every,
            queries_per_episode: schedule.queries_per_episode,
            optimizer: schedule.optimizer,
            eval_mode: EvalMode::default(),
        }
    }
}

impl RunConfig {
    /// Reads a config file; `None` yields the defaults.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Applies `key=value` overrides. Values parse as JSON, falling back to a
    /// bare string, so `loss_mode=single_negative` and `gamma=2` both work.
    pub fn apply_overrides(&mut self, sets: &[String]) -> anyhow::Result<()> {
        if sets.is_empty() {
            return Ok(());
        }
        let mut map = match serde_json::to_value(&*self)? {
            Value::Object(map) => map,
            _ => unreachable!("RunConfig serializes to an object"),
        };
        for set in sets {
            let Some((key, raw)) = set.split_once('=') else {
                bail!("override {set:?} is not key=value");
            };
            let key = key.trim();
            if !map.contains_key(key) {
                bail!("unknown config key {key:?}");
            }
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            map.insert(key.to_string(), value);
        }
        *self = serde_json::from_value(Value::Object(map)).context("applying overrides")?;
        Ok(())
    }

    /// All violated constraints, empty when valid.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = self.transe().validate() {
            out.push(e.to_string());
        }
        if self.transe_margin <= 0.0 {
            out.push(format!("transe_margin must be > 0, got {}", self.transe_margin));
        }
        out.extend(self.hyper().problems());
        out.extend(self.schedule(1).problems());
        if self.tau_mode == TauMode::Fixed && !self.tau_value.is_finite() {
            out.push(format!("fixed tau must be finite, got {}", self.tau_value));
        }
        out
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            bail!("invalid configuration:\n  {}", problems.join("\n  "))
        }
    }

    pub fn transe(&self) -> TransEConfig {
        TransEConfig {
            dim: self.dim,
            margin: self.transe_margin,
            learning_rate: self.transe_learning_rate,
            epochs: self.transe_epochs,
            batch_size: self.transe_batch_size,
            seed: derive_seed(self.seed, "transe", &[]),
            norm: self.transe_norm,
        }
    }

    pub fn hyper(&self) -> Hyperparams {
        let tau = match self.tau_mode {
            TauMode::Percentile => Tau::Percentile(self.tau_value),
            TauMode::Fixed => Tau::Fixed(self.tau_value),
        };
        Hyperparams {
            gamma: self.gamma,
            eta: self.eta,
            meta_lr: self.meta_lr,
            num_negatives: self.num_negatives,
            neighbor_cap: self.neighbor_cap,
            loss_mode: self.loss_mode,
            prune: PruneConfig {
                tau,
                similarity_space: self.similarity_space,
            },
            freeze_embeddings: self.freeze_embeddings,
        }
    }

    pub fn schedule(&self, threads: usize) -> Schedule {
        Schedule {
            iterations: self.iterations,
            tasks_per_batch: self.tasks_per_batch,
            eval_every: self.eval_every,
            queries_per_episode: self.queries_per_episode,
            optimizer: self.optimizer,
            seed: derive_seed(self.seed, "meta", &[]),
            threads,
        }
    }

    pub fn encoder_seed(&self) -> u64 {
        derive_seed(self.seed, "encoder-init", &[])
    }

    pub fn neighbor_seed(&self) -> u64 {
        derive_seed(self.seed, "neighbors", &[])
    }

    pub fn write_to(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

/// Worker count from `RANA_THREADS`, default 1.
pub fn threads_from_env() -> anyhow::Result<usize> {
    match std::env::var("RANA_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => bail!("RANA_THREADS must be a positive integer, got {v:?}"),
        },
    }
}
