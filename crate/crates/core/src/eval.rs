//! Ranking, MRR / Hits@K, and meta-testing on held-out relations.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::EncodingSession;
use crate::error::{Error, Result};
use crate::kg::{EntityId, FewShotTask, NeighborIndex, RelationId, Triple};
use crate::seed::rng_for;
use crate::trainer::loss::triple_distance;
use crate::trainer::{adapt_relation, prepare_task, ModelParams};

/// Cutoffs reported as Hits@K.
pub const HITS_AT: [usize; 3] = [1, 5, 10];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Raw,
    /// Other known-true tails for the query head are dropped before ranking.
    #[default]
    Filtered,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Raw => "raw",
            EvalMode::Filtered => "filtered",
        })
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(EvalMode::Raw),
            "filtered" => Ok(EvalMode::Filtered),
            other => Err(Error::Config(format!("unknown eval mode {other:?}; expected raw or filtered"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub mrr: f64,
    pub hits: BTreeMap<usize, f64>,
    pub n_queries: usize,
}

/// Serialized form of [`Metrics`] for one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub split: String,
    pub mrr: f64,
    pub hits1: f64,
    pub hits5: f64,
    pub hits10: f64,
    pub n_queries: usize,
}

impl Metrics {
    pub fn hits_at(&self, k: usize) -> f64 {
        self.hits.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn report(&self, split: &str) -> MetricsReport {
        MetricsReport {
            split: split.to_string(),
            mrr: self.mrr,
            hits1: self.hits_at(1),
            hits5: self.hits_at(5),
            hits10: self.hits_at(10),
            n_queries: self.n_queries,
        }
    }
}

/// MRR and Hits@{1,5,10} over `ranks`, all of which must be ≥ 1.
pub fn compute_metrics(ranks: &[usize]) -> Result<Metrics> {
    if ranks.is_empty() {
        return Err(Error::Contract("no ranks to summarize".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Contract("ranks start at 1".into()));
    }
    let n = ranks.len() as f64;
    let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
    let hits = HITS_AT
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
        .collect();
    Ok(Metrics {
        mrr,
        hits,
        n_queries: ranks.len(),
    })
}

/// Expected rank among tied scores: `better + (ties + 1) / 2` rounded half
/// up, where `ties` counts the true tail itself.
pub fn tie_rank(better: usize, ties: usize) -> usize {
    debug_assert!(ties >= 1);
    better + (ties + 2) / 2
}

/// Rank of `scores[target]` among `scores` (higher is better).
pub fn rank_scores(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    let better = scores.iter().filter(|&&x| x > s).count();
    let ties = scores.iter().filter(|&&x| x == s).count();
    tie_rank(better, ties)
}

/// Candidates ranked for `(head, true_tail)`: in filtered mode, tails known
/// true for the head other than `true_tail` are removed.
pub fn ranking_candidates(
    head: EntityId,
    rel: RelationId,
    true_tail: EntityId,
    candidates: &[EntityId],
    known: &HashSet<Triple>,
    mode: EvalMode,
) -> Result<Vec<EntityId>> {
    if !candidates.contains(&true_tail) {
        return Err(Error::Contract(format!(
            "true tail {true_tail} of ({head}, {rel}) is not among the candidates"
        )));
    }
    Ok(candidates
        .iter()
        .copied()
        .filter(|&c| c == true_tail || mode == EvalMode::Raw || !known.contains(&Triple::new(head, rel, c)))
        .collect())
}

/// Rank of the true tail given encoded vectors: scores are `γ - ‖h' + R - c'‖`.
pub fn rank_query(h_prime: &[f64], rel: &[f64], candidates: &[(EntityId, Vec<f64>)], true_tail: EntityId, gamma: f64) -> Result<usize> {
    let target = candidates
        .iter()
        .position(|(c, _)| *c == true_tail)
        .ok_or_else(|| Error::Contract(format!("true tail {true_tail} is not among the candidates")))?;
    let scores: Vec<f64> = candidates
        .iter()
        .map(|(_, v)| gamma - triple_distance(h_prime, rel, v))
        .collect();
    Ok(rank_scores(&scores, target))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalConfig {
    pub mode: EvalMode,
    /// Seeds the negatives of the support-side adaptation step.
    pub seed: u64,
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: EvalMode::Filtered,
            seed: 0,
            threads: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRank {
    pub rel: RelationId,
    pub head: EntityId,
    pub tail: EntityId,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub metrics: Metrics,
    pub ranks: Vec<QueryRank>,
}

impl EvalOutcome {
    /// Per-query ranks as TSV with a header row.
    pub fn ranks_tsv(&self) -> String {
        let mut out = String::from("rel\thead\ttail\trank\n");
        for q in &self.ranks {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", q.rel, q.head, q.tail, q.rank));
        }
        out
    }
}

/// Adapts to each task from its support set and ranks every query over the
/// task's candidates. Metrics are micro-averaged over all queries.
pub fn meta_test(
    tasks: &[FewShotTask],
    params: &ModelParams,
    index: &NeighborIndex,
    known: &HashSet<Triple>,
    cfg: &EvalConfig,
) -> Result<EvalOutcome> {
    let run = |i: usize| evaluate_task(i, &tasks[i], params, index, known, cfg);
    let per_task: Vec<Vec<QueryRank>> = if cfg.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| (0..tasks.len()).into_par_iter().map(run).collect::<Result<_>>())?
    } else {
        (0..tasks.len()).map(run).collect::<Result<_>>()?
    };
    let ranks: Vec<QueryRank> = per_task.into_iter().flatten().collect();
    let plain: Vec<usize> = ranks.iter().map(|q| q.rank).collect();
    Ok(EvalOutcome {
        metrics: compute_metrics(&plain)?,
        ranks,
    })
}

fn evaluate_task(
    task_index: usize,
    task: &FewShotTask,
    params: &ModelParams,
    index: &NeighborIndex,
    known: &HashSet<Triple>,
    cfg: &EvalConfig,
) -> Result<Vec<QueryRank>> {
    let hyper = &params.hyper;
    let prepared = prepare_task(task, &params.embeddings, known, hyper)?;
    let mut rng = rng_for(cfg.seed, "meta-test", &[task.rel as u64, task_index as u64]);
    let mut sess = EncodingSession::new(&params.embeddings, index, &params.encoder, false);
    let side = crate::trainer::episode_support(&mut sess, &prepared, hyper, &mut rng)?;
    let rs = sess.tape.value(side.rs).to_vec();
    let rq = adapt_relation(&rs, &side.grad, hyper.eta)?;

    let mut out = Vec::with_capacity(task.queries.len());
    let mut encoded: BTreeMap<EntityId, Vec<f64>> = BTreeMap::new();
    for &(h, t) in &task.queries {
        let cands = ranking_candidates(h, task.rel, t, &task.candidates, known, cfg.mode)?;
        let hv = sess.encode(h, side.query_seed);
        let h_prime = sess.tape.value(hv).to_vec();
        let vecs: Vec<(EntityId, Vec<f64>)> = cands
            .iter()
            .map(|&c| {
                let v = encoded.entry(c).or_insert_with(|| {
                    let var = sess.encode(c, side.query_seed);
                    sess.tape.value(var).to_vec()
                });
                (c, v.clone())
            })
            .collect();
        let rank = rank_query(&h_prime, &rq, &vecs, t, hyper.gamma)?;
        out.push(QueryRank {
            rel: task.rel,
            head: h,
            tail: t,
            rank,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn metrics_example() {
        let m = compute_metrics(&[1, 2, 4]).unwrap();
        assert!((m.mrr - 1.75 / 3.0).abs() < 1e-12);
        assert!((m.hits_at(1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.hits_at(5), 1.0);
        let all = compute_metrics(&[1; 7]).unwrap();
        assert_eq!((all.mrr, all.hits_at(1), all.hits_at(10)), (1.0, 1.0, 1.0));
        let eleven = compute_metrics(&[11]).unwrap();
        assert_eq!(eleven.hits_at(10), 0.0);
        assert!((eleven.mrr - 1.0 / 11.0).abs() < 1e-15);
        assert!(matches!(compute_metrics(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn tie_examples() {
        assert_eq!(rank_scores(&[3.0], 0), 1);
        assert_eq!(rank_scores(&[9.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 0.0], 0), 1);
        assert_eq!(rank_scores(&[2.0, 2.0, 1.0], 0), 2);
        assert_eq!(tie_rank(0, 1), 1);
        assert_eq!(tie_rank(0, 2), 2);
        assert_eq!(tie_rank(1, 3), 3);
        assert_eq!(tie_rank(4, 4), 7);
    }

    #[test]
    fn filtering_keeps_true_tail() {
        let known: HashSet<Triple> = [Triple::new(0, 5, 1), Triple::new(0, 5, 2)].into_iter().collect();
        let c = ranking_candidates(0, 5, 1, &[1, 2, 3], &known, EvalMode::Filtered).unwrap();
        assert_eq!(c, vec![1, 3]);
        let raw = ranking_candidates(0, 5, 1, &[1, 2, 3], &known, EvalMode::Raw).unwrap();
        assert_eq!(raw, vec![1, 2, 3]);
        assert!(ranking_candidates(0, 5, 9, &[1, 2, 3], &known, EvalMode::Raw).is_err());
    }

    #[test]
    fn micro_average_differs_from_macro() {
        let task_a = [1usize];
        let task_b = [2usize, 2, 2];
        let all: Vec<usize> = task_a.iter().chain(&task_b).copied().collect();
        let micro = compute_metrics(&all).unwrap().mrr;
        let macro_ = (compute_metrics(&task_a).unwrap().mrr + compute_metrics(&task_b).unwrap().mrr) / 2.0;
        assert!((micro - 0.625).abs() < 1e-15);
        assert!((macro_ - 0.75).abs() < 1e-15);
    }

    #[test]
    fn modes_parse() {
        assert_eq!("raw".parse::<EvalMode>().unwrap(), EvalMode::Raw);
        assert_eq!("filtered".parse::<EvalMode>().unwrap(), EvalMode::Filtered);
        assert!("strict".parse::<EvalMode>().is_err());
    }

    proptest! {
        #[test]
        fn hits_monotone_and_mrr_bounded(ranks in prop::collection::vec(1usize..40, 1..60)) {
            let m = compute_metrics(&ranks).unwrap();
            prop_assert!(m.hits_at(1) <= m.hits_at(5) && m.hits_at(5) <= m.hits_at(10));
            prop_assert!(m.mrr >= m.hits_at(1) - 1e-15 && m.mrr <= 1.0);
            let max = *ranks.iter().max().unwrap() as f64;
            prop_assert!(m.mrr >= 1.0 / max - 1e-15);
            let mut more = ranks.clone();
            more.push(1);
            prop_assert!(compute_metrics(&more).unwrap().mrr >= m.mrr - 1e-15);
        }

        #[test]
        fn ranks_ignore_score_shift(scores in prop::collection::vec(-5i32..5, 1..20), shift in -100.0f64..100.0) {
            let s: Vec<f64> = scores.iter().map(|&x| x as f64).collect();
            let shifted: Vec<f64> = s.iter().map(|x| x + shift.round()).collect();
            for i in 0..s.len() {
                prop_assert_eq!(rank_scores(&s, i), rank_scores(&shifted, i));
            }
        }
    }
}
