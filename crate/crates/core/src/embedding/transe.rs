//! Margin-ranking TransE over the background graph.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{init_embeddings, EmbeddingTable};
use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, Triple};
use crate::seed::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransEConfig {
    pub dim: usize,
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub norm: Norm,
}

impl Default for TransEConfig {
    fn default() -> Self {
        TransEConfig {
            dim: 50,
            margin: 1.0,
            learning_rate: 0.01,
            epochs: 100,
            batch_size: 128,
            seed: 0,
            norm: Norm::L2,
        }
    }
}

impl TransEConfig {
    pub fn validate(&self) -> Result<()> {
        let mut out = Vec::new();
        if self.dim == 0 {
            out.push("dim must be at least 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !self.margin.is_finite() {
            out.push("margin must be finite".to_string());
        }
        if self.batch_size == 0 {
            out.push("batch_size must be at least 1".to_string());
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(out.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// Mean loss over a fixed corruption of every background triple, at init.
    pub initial_loss: f64,
    /// The same quantity after training.
    pub final_loss: f64,
    /// Running average of the loss over each epoch.
    pub epoch_losses: Vec<f64>,
}

/// `h + r - t` in f64.
fn residual(table: &EmbeddingTable, h: usize, r: usize, t: usize, out: &mut [f64]) {
    let (hv, rv, tv) = (table.entity(h), table.relation(r), table.entity(t));
    for k in 0..out.len() {
        out[k] = f64::from(hv[k]) + f64::from(rv[k]) - f64::from(tv[k]);
    }
}

fn norm_of(v: &[f64], norm: Norm) -> f64 {
    match norm {
        Norm::L1 => v.iter().map(|x| x.abs()).sum(),
        Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
    }
}

/// d‖v‖/dv, zero at the origin.
fn norm_grad(v: &[f64], norm: Norm, out: &mut [f64]) {
    match norm {
        Norm::L1 => {
            for (o, x) in out.iter_mut().zip(v) {
                *o = if *x > 0.0 {
                    1.0
                } else if *x < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            }
        }
        Norm::L2 => {
            let n = norm_of(v, Norm::L2);
            for (o, x) in out.iter_mut().zip(v) {
                *o = if n > 0.0 { x / n } else { 0.0 };
            }
        }
    }
}

fn corrupt(t: &Triple, entity_count: usize, rng: &mut ChaCha8Rng) -> Triple {
    let corrupt_tail = rng.gen_bool(0.5);
    let original = if corrupt_tail { t.tail } else { t.head };
    let mut e = rng.gen_range(0..entity_count);
    if entity_count > 1 {
        while e == original {
            e = rng.gen_range(0..entity_count);
        }
    }
    if corrupt_tail {
        Triple::new(t.head, t.rel, e)
    } else {
        Triple::new(e, t.rel, t.tail)
    }
}

fn pair_loss(table: &EmbeddingTable, pos: &Triple, neg: &Triple, cfg: &TransEConfig, buf: &mut [f64]) -> f64 {
    residual(table, pos.head, pos.rel, pos.tail, buf);
    let dp = norm_of(buf, cfg.norm);
    residual(table, neg.head, neg.rel, neg.tail, buf);
    let dn = norm_of(buf, cfg.norm);
    (cfg.margin + dp - dn).max(0.0)
}

fn fixed_eval_loss(table: &EmbeddingTable, graph: &KnowledgeGraph, negatives: &[Triple], cfg: &TransEConfig) -> f64 {
    let mut buf = vec![0.0; table.dim()];
    let total: f64 = graph
        .background
        .iter()
        .zip(negatives)
        .map(|(p, n)| pair_loss(table, p, n, cfg, &mut buf))
        .sum();
    total / graph.background.len().max(1) as f64
}

pub fn pretrain_transe(graph: &KnowledgeGraph, cfg: &TransEConfig) -> Result<EmbeddingTable> {
    pretrain_transe_with_report(graph, cfg).map(|(t, _)| t)
}

/// Trains TransE on the background triples with minibatch SGD; entity rows
/// are renormalized after every epoch.
pub fn pretrain_transe_with_report(
    graph: &KnowledgeGraph,
    cfg: &TransEConfig,
) -> Result<(EmbeddingTable, PretrainReport)> {
    cfg.validate()?;
    if cfg.epochs > 0 && graph.is_empty() {
        return Err(Error::Contract(
            "TransE pretraining needs a non-empty background graph".into(),
        ));
    }
    let mut table = init_embeddings(
        graph.entity_count.max(1),
        graph.relation_count.max(1),
        cfg.dim,
        cfg.seed,
    );
    let dim = cfg.dim;

    let mut eval_rng = rng_for(cfg.seed, "transe-eval", &[]);
    let eval_negatives: Vec<Triple> = graph
        .background
        .iter()
        .map(|t| corrupt(t, graph.entity_count, &mut eval_rng))
        .collect();
    let initial_loss = fixed_eval_loss(&table, graph, &eval_negatives, cfg);

    let mut order: Vec<usize> = (0..graph.background.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut buf = vec![0.0; dim];
    let mut g = vec![0.0; dim];
    for epoch in 0..cfg.epochs {
        let mut rng = rng_for(cfg.seed, "transe-epoch", &[epoch as u64]);
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut ent_grad: HashMap<usize, Vec<f64>> = HashMap::new();
            let mut rel_grad: HashMap<usize, Vec<f64>> = HashMap::new();
            for &i in batch {
                let pos = graph.background[i];
                let neg = corrupt(&pos, graph.entity_count, &mut rng);
                let loss = pair_loss(&table, &pos, &neg, cfg, &mut buf);
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, loss });
                }
                epoch_total += loss;
                if loss <= 0.0 {
                    continue;
                }
                for (triple, sign) in [(pos, 1.0), (neg, -1.0)] {
                    residual(&table, triple.head, triple.rel, triple.tail, &mut buf);
                    norm_grad(&buf, cfg.norm, &mut g);
                    let zero = || vec![0.0; dim];
                    let gh = ent_grad.entry(triple.head).or_insert_with(zero);
                    for k in 0..dim {
                        gh[k] += sign * g[k];
                    }
                    let gt = ent_grad.entry(triple.tail).or_insert_with(zero);
                    for k in 0..dim {
                        gt[k] -= sign * g[k];
                    }
                    let gr = rel_grad.entry(triple.rel).or_insert_with(zero);
                    for k in 0..dim {
                        gr[k] += sign * g[k];
                    }
                }
            }
            let lr = cfg.learning_rate;
            for (e, grad) in ent_grad {
                for (v, d) in table.entities.row_mut(e).iter_mut().zip(grad) {
                    *v = (f64::from(*v) - lr * d) as f32;
                }
            }
            for (r, grad) in rel_grad {
                for (v, d) in table.relations.row_mut(r).iter_mut().zip(grad) {
                    *v = (f64::from(*v) - lr * d) as f32;
                }
            }
        }
        table.normalize_entities();
        let mean = epoch_total / graph.background.len() as f64;
        if !mean.is_finite() || !table.is_finite() {
            return Err(Error::Diverged { epoch, loss: mean });
        }
        epoch_losses.push(mean);
    }

    let final_loss = fixed_eval_loss(&table, graph, &eval_negatives, cfg);
    Ok((
        table,
        PretrainReport {
            initial_loss,
            final_loss,
            epoch_losses,
        },
    ))
}
