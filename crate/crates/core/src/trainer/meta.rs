//! The outer meta-training loop.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::episode::{prepare_task, run_episode_with_gradients, EpisodeResult, PreparedTask};
use super::optim::{Adam, Optimizer, Sgd};
use super::{ModelParams, ParamGrads};
use crate::error::{Error, Result};
use crate::eval::{meta_test, EvalConfig, EvalMode};
use crate::kg::{NeighborIndex, TaskSet};
use crate::seed::rng_for;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?}; expected sgd or adam"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// Outer steps.
    pub iterations: usize,
    pub tasks_per_batch: usize,
    /// Validation cadence in outer steps; 0 validates only after the last.
    pub eval_every: usize,
    /// Random subset of queries per episode; all when `None`.
    pub queries_per_episode: Option<usize>,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub threads: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            iterations: 500,
            tasks_per_batch: 1,
            eval_every: 50,
            queries_per_episode: None,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
            threads: 1,
        }
    }
}

impl Schedule {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.tasks_per_batch == 0 {
            out.push("tasks_per_batch must be at least 1".into());
        }
        if self.queries_per_episode == Some(0) {
            out.push("queries_per_episode must be at least 1 when set".into());
        }
        if self.threads == 0 {
            out.push("threads must be at least 1".into());
        }
        out
    }
}

/// One line of the training trace. Losses are batch means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub support_loss: f64,
    pub query_loss: f64,
    pub unadapted_query_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_mrr: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Highest validation MRR snapshot, or the final parameters when no
    /// validation ran.
    pub best: ModelParams,
    pub best_iter: Option<usize>,
    pub best_val_mrr: Option<f64>,
    pub last: ModelParams,
    pub trace: Vec<TraceRecord>,
}

/// Minimizes the summed query loss over sampled training tasks, calling
/// `on_record` after every outer step.
pub fn meta_train(
    tasks: &TaskSet,
    initial: ModelParams,
    index: &NeighborIndex,
    schedule: &Schedule,
    mut on_record: impl FnMut(&TraceRecord),
) -> Result<TrainOutcome> {
    let problems = schedule.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    if schedule.iterations == 0 {
        return Ok(TrainOutcome {
            best: initial.clone(),
            best_iter: None,
            best_val_mrr: None,
            last: initial,
            trace: Vec::new(),
        });
    }
    if tasks.train.is_empty() {
        return Err(Error::Config("training split has no tasks".into()));
    }
    let known = tasks.known_facts();
    let prepared: Vec<PreparedTask> = tasks
        .train
        .iter()
        .map(|t| prepare_task(t, &initial.embeddings, &known, &initial.hyper))
        .collect::<Result<_>>()?;
    let pool = if schedule.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(schedule.threads)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };
    let eval_cfg = EvalConfig {
        mode: EvalMode::Filtered,
        seed: schedule.seed,
        threads: schedule.threads,
    };

    let mut params = initial;
    let mut optimizer: Box<dyn Optimizer> = match schedule.optimizer {
        OptimizerKind::Sgd => Box::new(Sgd),
        OptimizerKind::Adam => Box::new(Adam::default()),
    };
    let mut trace = Vec::with_capacity(schedule.iterations);
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let batch = schedule.tasks_per_batch.min(prepared.len());

    for iter in 0..schedule.iterations {
        let mut pick = rng_for(schedule.seed, "task-sample", &[iter as u64]);
        let mut chosen = index::sample(&mut pick, prepared.len(), batch).into_vec();
        chosen.sort_unstable();

        let snapshot = &params;
        let run = |slot: usize| -> Result<(EpisodeResult, ParamGrads)> {
            let ti = chosen[slot];
            let mut rng = rng_for(schedule.seed, "episode", &[iter as u64, ti as u64]);
            run_episode_with_gradients(&prepared[ti], snapshot, index, schedule.queries_per_episode, &mut rng)
        };
        let results: Vec<Result<(EpisodeResult, ParamGrads)>> = match &pool {
            Some(pool) => pool.install(|| (0..chosen.len()).into_par_iter().map(run).collect()),
            None => (0..chosen.len()).map(run).collect(),
        };

        let mut grads = ParamGrads::zeros_like(&params);
        let (mut ls, mut lq, mut lu) = (0.0, 0.0, 0.0);
        for r in results {
            let (ep, g) = r.map_err(|e| match e {
                Error::Episode(_) => Error::Diverged {
                    epoch: iter,
                    loss: f64::NAN,
                },
                other => other,
            })?;
            ls += ep.support_loss;
            lq += ep.query_loss;
            lu += ep.unadapted_query_loss;
            grads.add_assign(&g);
        }
        let n = chosen.len() as f64;
        grads.scale(1.0 / n);
        let mut record = TraceRecord {
            iter,
            support_loss: ls / n,
            query_loss: lq / n,
            unadapted_query_loss: lu / n,
            val_mrr: None,
        };
        if !grads.is_finite() {
            on_record(&record);
            trace.push(record);
            return Err(Error::Diverged {
                epoch: iter,
                loss: lq / n,
            });
        }
        let lr = params.hyper.meta_lr;
        optimizer.step(&mut params, &grads, lr);
        if !(params.embeddings.is_finite() && params.encoder.validate().is_ok()) {
            on_record(&record);
            trace.push(record);
            return Err(Error::Diverged {
                epoch: iter,
                loss: lq / n,
            });
        }

        let last = iter + 1 == schedule.iterations;
        let due = schedule.eval_every > 0 && (iter + 1) % schedule.eval_every == 0;
        if !tasks.valid.is_empty() && (due || last) {
            let mrr = meta_test(&tasks.valid, &params, index, &known, &eval_cfg)?.metrics.mrr;
            record.val_mrr = Some(mrr);
            if best.as_ref().is_none_or(|(_, b, _)| mrr > *b) {
                best = Some((iter, mrr, params.clone()));
            }
        }
        on_record(&record);
        trace.push(record);
    }

    let (best_params, best_iter, best_val_mrr) = match best {
        Some((i, m, p)) => (p, Some(i), Some(m)),
        None => (params.clone(), None, None),
    };
    Ok(TrainOutcome {
        best: best_params,
        best_iter,
        best_val_mrr,
        last: params,
        trace,
    })
}
