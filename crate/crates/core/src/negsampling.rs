//! Candidate pruning, multi-negative sampling and negative attention.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kg::EntityId;
use crate::linalg::dot;

/// Which vectors the pruning similarity `t⁻ᵀ t` is computed on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilaritySpace {
    /// Embedding rows as they were when the task was prepared.
    #[default]
    Pretrained,
    /// Encoder outputs under the current parameters.
    Encoded,
}

/// Pruning threshold rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tau {
    Fixed(f64),
    /// Per task: this percentile (0–100) of candidate similarities to the
    /// mean support-tail vector.
    Percentile(f64),
}

impl Default for Tau {
    fn default() -> Self {
        Tau::Percentile(50.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub tau: Tau,
    pub similarity_space: SimilaritySpace,
}

/// Negatives for one positive pair with their attention weights.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeBatch {
    pub positive: (EntityId, EntityId),
    pub negatives: Vec<EntityId>,
    pub weights: Vec<f64>,
}

/// Linear-interpolated percentile of `values` (0 ≤ `pct` ≤ 100).
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of nothing");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = (pct.clamp(0.0, 100.0) / 100.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Resolves τ for a task. `reference` is the mean support-tail vector.
pub fn resolve_tau(tau: Tau, reference: &[f64], candidates: &[&[f64]]) -> f64 {
    match tau {
        Tau::Fixed(v) => v,
        Tau::Percentile(p) => {
            if candidates.is_empty() {
                return f64::NEG_INFINITY;
            }
            let sims: Vec<f64> = candidates.iter().map(|c| dot(c, reference)).collect();
            percentile(&sims, p)
        }
    }
}

/// Keeps candidates with `t⁻ᵀ t ≥ τ`, in input order. When nothing survives,
/// returns the `fallback` most similar candidates instead.
pub fn prune_candidates(
    true_tail: &[f64],
    candidates: &[(EntityId, &[f64])],
    tau: f64,
    fallback: usize,
) -> Result<Vec<EntityId>> {
    if candidates.is_empty() {
        return Err(Error::Contract("no candidates to prune".into()));
    }
    let sims: Vec<f64> = candidates.iter().map(|(_, v)| dot(v, true_tail)).collect();
    let kept: Vec<EntityId> = candidates
        .iter()
        .zip(&sims)
        .filter(|(_, &s)| s >= tau)
        .map(|((id, _), _)| *id)
        .collect();
    if !kept.is_empty() {
        return Ok(kept);
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .take(fallback.max(1))
        .map(|i| candidates[i].0)
        .collect())
}

/// Draws `j` distinct ids uniformly without replacement, or the whole pool
/// if it is smaller.
pub fn sample_negatives(pool: &[EntityId], j: usize, rng: &mut impl Rng) -> Vec<EntityId> {
    if pool.len() <= j {
        return pool.to_vec();
    }
    index::sample(rng, pool.len(), j)
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

/// Scaled dot-product `nᵀp / sqrt(|p|)` of each negative against the
/// positive, as tape scalars.
pub fn negative_similarities(tape: &mut Tape, h: Var, t: Var, negative_tails: &[Var]) -> Vec<Var> {
    let p = tape.concat(h, t);
    let scale = 1.0 / (tape.value(p).len() as f64).sqrt();
    negative_tails
        .iter()
        .map(|&tn| {
            let n = tape.concat(h, tn);
            let d = tape.dot(n, p);
            tape.scale(d, scale)
        })
        .collect()
}

/// Softmax of [`negative_similarities`].
pub fn negative_attention_var(tape: &mut Tape, h: Var, t: Var, negative_tails: &[Var]) -> Var {
    assert!(!negative_tails.is_empty(), "negative attention needs a negative");
    let sims = negative_similarities(tape, h, t, negative_tails);
    let stacked = tape.stack(&sims);
    tape.softmax(stacked)
}

pub fn negative_attention(h: &[f64], t: &[f64], negative_tails: &[&[f64]]) -> Vec<f64> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.to_vec());
    let tv = tape.constant(t.to_vec());
    let negs: Vec<Var> = negative_tails
        .iter()
        .map(|n| tape.constant(n.to_vec()))
        .collect();
    let beta = negative_attention_var(&mut tape, hv, tv, &negs);
    tape.value(beta).to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    #[test]
    fn prune_by_dot_product() {
        let t = [1.0, 0.0];
        let (a, b, c) = ([2.0, 0.0], [-1.0, 0.0], [0.0, 1.0]);
        let cands: Vec<(usize, &[f64])> = vec![(0, &a), (1, &b), (2, &c)];
        assert_eq!(prune_candidates(&t, &cands, 0.0, 5).unwrap(), vec![0, 2]);
        assert_eq!(
            prune_candidates(&t, &cands, f64::NEG_INFINITY, 5).unwrap(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn prune_fallback_takes_most_similar() {
        let t = [1.0, 0.0];
        let vs = [[0.5, 0.0], [-1.0, 0.0], [0.9, 0.0], [0.1, 0.0]];
        let cands: Vec<(usize, &[f64])> = vs.iter().enumerate().map(|(i, v)| (i, &v[..])).collect();
        let got = prune_candidates(&t, &cands, 10.0, 2).unwrap();
        let mut by_sim: Vec<usize> = (0..4).collect();
        by_sim.sort_by(|&a, &b| vs[b][0].total_cmp(&vs[a][0]));
        assert_eq!(got, by_sim[..2].to_vec());
        assert!(prune_candidates(&t, &[], 0.0, 2).is_err());
    }

    #[test]
    fn undersized_pool_returned_whole() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_negatives(&[4, 5, 6], 5, &mut rng), vec![4, 5, 6]);
    }

    #[test]
    fn samples_are_distinct_and_seeded() {
        let pool: Vec<usize> = (100..200).collect();
        let draw = |seed| sample_negatives(&pool, 5, &mut ChaCha8Rng::seed_from_u64(seed));
        let a = draw(3);
        assert_eq!(a.len(), 5);
        assert_eq!(a.iter().collect::<HashSet<_>>().len(), 5);
        assert!(a.iter().all(|x| pool.contains(x)));
        assert_eq!(a, draw(3));
    }

    #[test]
    fn singleton_and_two_way_attention() {
        assert_eq!(negative_attention(&[0.3], &[0.1], &[&[0.7]]), vec![1.0]);
        // |p| = 2: with h = 0 and t = [sqrt 2], f = t⁻·sqrt2/sqrt2 = t⁻
        let t = [2f64.sqrt()];
        let beta = negative_attention(&[0.0], &t, &[&[1.0], &[0.0]]);
        let e = std::f64::consts::E;
        assert!((beta[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((beta[0] - 0.7311).abs() < 1e-4 && (beta[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn true_tail_maximizes_similarity_among_unit_vectors() {
        let h = [0.2, -0.1, 0.4];
        let t = [0.6, 0.0, 0.8];
        let set: Vec<[f64; 3]> = (1..12)
            .map(|k| {
                let a = k as f64 * 0.5;
                let v = [a.cos() * 0.6, a.sin(), a.cos() * 0.8];
                let n = dot(&v, &v).sqrt();
                [v[0] / n, v[1] / n, v[2] / n]
            })
            .chain(std::iter::once(t))
            .collect();
        let refs: Vec<&[f64]> = set.iter().map(|v| &v[..]).collect();
        let beta = negative_attention(&h, &t, &refs);
        let best = (0..beta.len()).max_by(|&a, &b| beta[a].total_cmp(&beta[b])).unwrap();
        assert_eq!(best, set.len() - 1);
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 50.0), 2.0);
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 50.0), 2.5);
        assert_eq!(percentile(&[5.0], 90.0), 5.0);
    }

    proptest! {
        #[test]
        fn attention_order_preserving(vals in proptest::collection::vec(-2.0f64..2.0, 2..8)) {
            let h = [0.0];
            let t = [2f64.sqrt()];
            let negs: Vec<[f64; 1]> = vals.iter().map(|&v| [v]).collect();
            let refs: Vec<&[f64]> = negs.iter().map(|v| &v[..]).collect();
            let beta = negative_attention(&h, &t, &refs);
            prop_assert!((beta.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for a in 0..vals.len() {
                for b in 0..vals.len() {
                    if vals[a] > vals[b] {
                        prop_assert!(beta[a] > beta[b]);
                    }
                }
            }
        }

        #[test]
        fn raising_tau_never_grows_kept_set(
            sims in proptest::collection::vec(-1.0f64..1.0, 1..20),
            t1 in -1.0f64..1.0,
            dt in 0.0f64..1.0,
        ) {
            let t = [1.0];
            let vs: Vec<[f64; 1]> = sims.iter().map(|&s| [s]).collect();
            let cands: Vec<(usize, &[f64])> = vs.iter().enumerate().map(|(i, v)| (i, &v[..])).collect();
            let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let t2 = t1 + dt;
            prop_assume!(t2 <= max);
            let a = prune_candidates(&t, &cands, t1, 1).unwrap();
            let b = prune_candidates(&t, &cands, t2, 1).unwrap();
            prop_assert!(b.len() <= a.len());
            prop_assert!(b.iter().all(|x| a.contains(x)));
        }
    }
}
