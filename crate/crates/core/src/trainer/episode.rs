//! One few-shot episode: support encoding, inner adaptation, query loss.

use std::collections::HashSet;

use rand::seq::index;
use rand::Rng;

use super::loss::{loss_var, score_var, Beta, NegativeTerms};
use super::{Hyperparams, ModelParams, ParamGrads};
use crate::autodiff::Var;
use crate::embedding::EmbeddingTable;
use crate::encoder::{EmbeddingSource, EncodingSession};
use crate::error::{Error, Result};
use crate::kg::{EntityId, FewShotTask, NeighborIndex, RelationId, Triple};
use crate::linalg::row_f64;
use crate::negsampling::{negative_similarities, prune_candidates, resolve_tau, sample_negatives, SimilaritySpace};

/// A task with its negative pools resolved.
///
/// `raw_*` pools hold every candidate except the positive's own tail and
/// tails known true for its head; `*_pools` are the pruned versions used
/// for sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedTask {
    pub rel: RelationId,
    pub support: Vec<(EntityId, EntityId)>,
    pub queries: Vec<(EntityId, EntityId)>,
    pub candidates: Vec<EntityId>,
    pub tau: f64,
    pub raw_support_pools: Vec<Vec<EntityId>>,
    pub raw_query_pools: Vec<Vec<EntityId>>,
    pub support_pools: Vec<Vec<EntityId>>,
    pub query_pools: Vec<Vec<EntityId>>,
}

/// Resolves pools for `task`, pruning against the rows of `table` unless
/// the loss mode skips pruning.
pub fn prepare_task(
    task: &FewShotTask,
    table: &EmbeddingTable,
    known: &HashSet<Triple>,
    hyper: &Hyperparams,
) -> Result<PreparedTask> {
    if task.support.is_empty() {
        return Err(Error::Episode(format!("task for relation {} has no support pairs", task.rel)));
    }
    if task.queries.is_empty() {
        return Err(Error::Episode(format!("task for relation {} has no queries", task.rel)));
    }
    let vec_of = |e: EntityId| row_f64(table.entity(e));
    let cand_vecs: Vec<Vec<f64>> = task.candidates.iter().map(|&c| vec_of(c)).collect();
    let dim = table.dim();
    let mut reference = vec![0.0; dim];
    for &(_, t) in &task.support {
        for (r, x) in reference.iter_mut().zip(table.entity(t)) {
            *r += *x as f64 / task.support.len() as f64;
        }
    }
    let refs: Vec<&[f64]> = cand_vecs.iter().map(|v| v.as_slice()).collect();
    let tau = resolve_tau(hyper.prune.tau, &reference, &refs);

    let raw_pool = |(h, t): (EntityId, EntityId)| -> Vec<usize> {
        (0..task.candidates.len())
            .filter(|&i| {
                let c = task.candidates[i];
                c != t && !known.contains(&Triple::new(h, task.rel, c))
            })
            .collect()
    };
    let j = hyper.effective_negatives();
    let prune_pool = |(_, t): (EntityId, EntityId), pool: &[usize]| -> Result<Vec<EntityId>> {
        if pool.is_empty() {
            return Ok(Vec::new());
        }
        let ids: Vec<EntityId> = pool.iter().map(|&i| task.candidates[i]).collect();
        if !hyper.loss_mode.prunes() || hyper.prune.similarity_space == SimilaritySpace::Encoded {
            return Ok(ids);
        }
        let with_vecs: Vec<(EntityId, &[f64])> = pool
            .iter()
            .map(|&i| (task.candidates[i], cand_vecs[i].as_slice()))
            .collect();
        prune_candidates(&vec_of(t), &with_vecs, tau, j)
    };

    let mut out = PreparedTask {
        rel: task.rel,
        support: task.support.clone(),
        queries: task.queries.clone(),
        candidates: task.candidates.clone(),
        tau,
        raw_support_pools: Vec::new(),
        raw_query_pools: Vec::new(),
        support_pools: Vec::new(),
        query_pools: Vec::new(),
    };
    for (pairs, raw, pruned) in [
        (&task.support, &mut out.raw_support_pools, &mut out.support_pools),
        (&task.queries, &mut out.raw_query_pools, &mut out.query_pools),
    ] {
        for &pair in pairs {
            let pool = raw_pool(pair);
            pruned.push(prune_pool(pair, &pool)?);
            raw.push(pool.iter().map(|&i| task.candidates[i]).collect());
        }
    }
    Ok(out)
}

/// `R^s - η g`; fails on a non-finite gradient.
pub fn adapt_relation(rs: &[f64], grad: &[f64], eta: f64) -> Result<Vec<f64>> {
    if rs.len() != grad.len() {
        return Err(Error::Contract(format!(
            "relation has {} entries but gradient has {}",
            rs.len(),
            grad.len()
        )));
    }
    if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
        return Err(Error::Episode(format!("non-finite support gradient entry {bad}")));
    }
    Ok(rs.iter().zip(grad).map(|(r, g)| r - eta * g).collect())
}

/// Outcome of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub support_loss: f64,
    /// Query loss under the adapted relation `R^q`.
    pub query_loss: f64,
    /// Query loss under the unadapted `R^s`, for diagnostics.
    pub unadapted_query_loss: f64,
    pub adapted_relation: Vec<f64>,
}

/// Support-side tape handles.
pub(crate) struct SupportSide {
    pub rs: Var,
    pub loss: Var,
    pub grad: Vec<f64>,
    /// Mean of the support seeds; encodes query-side entities.
    pub query_seed: Var,
    /// Negative weights used per support pair with negatives.
    pub weights: Vec<Vec<f64>>,
}

/// Draws negatives for one positive, re-pruning in encoded space when
/// configured.
fn draw_negatives<E: EmbeddingSource + ?Sized>(
    sess: &mut EncodingSession<'_, E>,
    hyper: &Hyperparams,
    pruned: &[EntityId],
    raw: &[EntityId],
    t_prime: Var,
    seed: Var,
    rng: &mut impl Rng,
) -> Result<Vec<EntityId>> {
    let j = hyper.effective_negatives();
    if hyper.prune.similarity_space == SimilaritySpace::Encoded && hyper.loss_mode.prunes() && !raw.is_empty() {
        let encoded: Vec<Vec<f64>> = raw
            .iter()
            .map(|&c| {
                let v = sess.encode(c, seed);
                sess.tape.value(v).to_vec()
            })
            .collect();
        let t = sess.tape.value(t_prime).to_vec();
        let refs: Vec<&[f64]> = encoded.iter().map(|v| v.as_slice()).collect();
        let tau = resolve_tau(hyper.prune.tau, &t, &refs);
        let with_vecs: Vec<(EntityId, &[f64])> = raw.iter().copied().zip(refs.iter().copied()).collect();
        let pool = prune_candidates(&t, &with_vecs, tau, j)?;
        return Ok(sample_negatives(&pool, j, rng));
    }
    Ok(sample_negatives(pruned, j, rng))
}

#[allow(clippy::too_many_arguments)]
fn negative_terms<E: EmbeddingSource + ?Sized>(
    sess: &mut EncodingSession<'_, E>,
    negatives: &[EntityId],
    h_prime: Var,
    t_prime: Var,
    seed: Var,
    rel: Var,
    gamma: f64,
) -> NegativeTerms {
    let tails: Vec<Var> = negatives.iter().map(|&n| sess.encode(n, seed)).collect();
    let scores = tails
        .iter()
        .map(|&tn| score_var(&mut sess.tape, h_prime, rel, tn, gamma))
        .collect();
    let similarities = if tails.is_empty() {
        Vec::new()
    } else {
        negative_similarities(&mut sess.tape, h_prime, t_prime, &tails)
    };
    NegativeTerms { scores, similarities }
}

/// Encodes the support set, builds `L_s` on the connected `R^s`, and takes
/// its gradient with respect to `R^s`.
pub(crate) fn build_support<E: EmbeddingSource + ?Sized>(
    sess: &mut EncodingSession<'_, E>,
    support: &[(EntityId, EntityId)],
    pruned: &[Vec<EntityId>],
    raw: &[Vec<EntityId>],
    hyper: &Hyperparams,
    beta: Beta<'_>,
    rng: &mut impl Rng,
) -> Result<SupportSide> {
    if support.is_empty() {
        return Err(Error::Contract("support set is empty".into()));
    }
    let pairs: Vec<_> = support.iter().map(|&(h, t)| sess.pair(h, t)).collect();
    let reps: Vec<Var> = pairs.iter().map(|p| p.rep).collect();
    let rs = sess.tape.mean(&reps);
    let seeds: Vec<Var> = pairs.iter().map(|p| p.seed).collect();
    let query_seed = sess.tape.mean(&seeds);

    let mut positives = Vec::with_capacity(pairs.len());
    let mut negatives = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        positives.push(score_var(&mut sess.tape, p.h_prime, rs, p.t_prime, hyper.gamma));
        let negs = draw_negatives(sess, hyper, &pruned[i], &raw[i], p.t_prime, p.seed, rng)?;
        negatives.push(negative_terms(sess, &negs, p.h_prime, p.t_prime, p.seed, rs, hyper.gamma));
    }
    let (loss, weights) = loss_var(&mut sess.tape, hyper.loss_mode, &positives, &negatives, beta);
    let dim = sess.tape.value(rs).len();
    let grad = sess.tape.backward_keeping(loss, &[rs]).get_or_zero(rs, dim);
    Ok(SupportSide {
        rs,
        loss,
        grad,
        query_seed,
        weights,
    })
}

/// Support side of a prepared task with attention weights differentiated.
pub(crate) fn episode_support<E: EmbeddingSource + ?Sized>(
    sess: &mut EncodingSession<'_, E>,
    task: &PreparedTask,
    hyper: &Hyperparams,
    rng: &mut impl Rng,
) -> Result<SupportSide> {
    build_support(sess, &task.support, &task.support_pools, &task.raw_support_pools, hyper, Beta::Differentiate, rng)
}

/// Runs one episode against `params` without touching them.
pub fn run_episode(
    task: &PreparedTask,
    params: &ModelParams,
    index: &NeighborIndex,
    rng: &mut impl Rng,
) -> Result<EpisodeResult> {
    episode(task, params, index, None, rng, false).map(|(r, _)| r)
}

/// [`run_episode`] that also returns the first-order gradient of the query
/// loss, optionally on a random subset of `queries_per_episode` queries.
pub fn run_episode_with_gradients(
    task: &PreparedTask,
    params: &ModelParams,
    index: &NeighborIndex,
    queries_per_episode: Option<usize>,
    rng: &mut impl Rng,
) -> Result<(EpisodeResult, ParamGrads)> {
    let (r, g) = episode(task, params, index, queries_per_episode, rng, true)?;
    Ok((r, g.expect("gradients requested")))
}

fn episode(
    task: &PreparedTask,
    params: &ModelParams,
    index: &NeighborIndex,
    queries_per_episode: Option<usize>,
    rng: &mut impl Rng,
    want_grads: bool,
) -> Result<(EpisodeResult, Option<ParamGrads>)> {
    let hyper = &params.hyper;
    let trainable = want_grads && !hyper.freeze_embeddings;
    let mut sess = EncodingSession::new(&params.embeddings, index, &params.encoder, trainable);
    let side = episode_support(&mut sess, task, hyper, rng)?;
    let rs_value = sess.tape.value(side.rs).to_vec();
    let rq_value = adapt_relation(&rs_value, &side.grad, hyper.eta)?;
    let step: Vec<f64> = rq_value.iter().zip(&rs_value).map(|(q, s)| q - s).collect();
    let step = sess.tape.constant(step);
    let rq = sess.tape.add(side.rs, step);

    let chosen: Vec<usize> = match queries_per_episode {
        Some(k) if k < task.queries.len() => {
            let mut idx = index::sample(rng, task.queries.len(), k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..task.queries.len()).collect(),
    };

    let seed = side.query_seed;
    let mut pos_q = Vec::with_capacity(chosen.len());
    let mut pos_u = Vec::with_capacity(chosen.len());
    let mut neg_q = Vec::with_capacity(chosen.len());
    let mut neg_u = Vec::with_capacity(chosen.len());
    for &qi in &chosen {
        let (h, t) = task.queries[qi];
        let hp = sess.encode(h, seed);
        let tp = sess.encode(t, seed);
        pos_q.push(score_var(&mut sess.tape, hp, rq, tp, hyper.gamma));
        pos_u.push(score_var(&mut sess.tape, hp, side.rs, tp, hyper.gamma));
        let negs = draw_negatives(
            &mut sess,
            hyper,
            &task.query_pools[qi],
            &task.raw_query_pools[qi],
            tp,
            seed,
            rng,
        )?;
        neg_q.push(negative_terms(&mut sess, &negs, hp, tp, seed, rq, hyper.gamma));
        neg_u.push(negative_terms(&mut sess, &negs, hp, tp, seed, side.rs, hyper.gamma));
    }
    let (lq, _) = loss_var(&mut sess.tape, hyper.loss_mode, &pos_q, &neg_q, Beta::Differentiate);
    let (lu, _) = loss_var(&mut sess.tape, hyper.loss_mode, &pos_u, &neg_u, Beta::Differentiate);

    let result = EpisodeResult {
        support_loss: sess.tape.scalar(side.loss),
        query_loss: sess.tape.scalar(lq),
        unadapted_query_loss: sess.tape.scalar(lu),
        adapted_relation: rq_value,
    };
    if !(result.support_loss.is_finite() && result.query_loss.is_finite()) {
        return Err(Error::Episode(format!(
            "non-finite loss for relation {} (support {}, query {})",
            task.rel, result.support_loss, result.query_loss
        )));
    }
    if !want_grads {
        return Ok((result, None));
    }

    let grads = sess.tape.backward(lq);
    let mut out = ParamGrads::zeros_like(params);
    for ((slot, var), m) in out.encoder.iter_mut().zip(sess.enc.all()).zip(params.encoder.matrices()) {
        *slot = grads.get_or_zero(var, m.data().len());
    }
    if trainable {
        let dim = params.dim();
        for (e, v) in sess.entity_leaves() {
            if let Some(g) = grads.get(v) {
                out.entities.insert(e, g.to_vec());
            }
        }
        for (r, v) in sess.relation_leaves() {
            if let Some(g) = grads.get(v) {
                debug_assert_eq!(g.len(), dim);
                out.relations.insert(r, g.to_vec());
            }
        }
    }
    Ok((result, Some(out)))
}
