//! Translational distance, margin score and the weighted log-sigmoid loss.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, softplus, Tape, Var};
use crate::error::{Error, Result};

/// How negative triples are drawn and weighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Pruned pools, J negatives, scaled dot-product attention weights.
    #[default]
    Attention,
    /// One negative per positive with weight 1.
    SingleNegative,
    /// Pruned pools, J negatives, weights `1/J`.
    UniformMulti,
    /// Unpruned pools, attention weights.
    NoPrune,
    /// Weights are the softmax of the negative scores, held constant.
    SelfAdversarial,
}

impl LossMode {
    pub const ALL: [LossMode; 5] = [
        LossMode::Attention,
        LossMode::SingleNegative,
        LossMode::UniformMulti,
        LossMode::NoPrune,
        LossMode::SelfAdversarial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossMode::Attention => "attention",
            LossMode::SingleNegative => "single_negative",
            LossMode::UniformMulti => "uniform_multi",
            LossMode::NoPrune => "no_prune",
            LossMode::SelfAdversarial => "self_adversarial",
        }
    }

    pub fn prunes(self) -> bool {
        self != LossMode::NoPrune
    }

    /// Weights for one positive's negatives given their similarity terms
    /// `f` and scores `s⁻`.
    pub fn weights(self, similarities: &[f64], negative_scores: &[f64]) -> Vec<f64> {
        let j = negative_scores.len();
        match self {
            LossMode::Attention | LossMode::NoPrune => softmax(similarities),
            LossMode::SingleNegative | LossMode::UniformMulti => vec![1.0 / j as f64; j],
            LossMode::SelfAdversarial => softmax(negative_scores),
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = LossMode::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown loss mode {s:?}; expected one of {}", known.join(", ")))
            })
    }
}

/// `‖h' + R - t'‖₂`.
pub fn triple_distance(h_prime: &[f64], rel: &[f64], t_prime: &[f64]) -> f64 {
    assert!(h_prime.len() == rel.len() && rel.len() == t_prime.len(), "triple_distance dims");
    h_prime
        .iter()
        .zip(rel)
        .zip(t_prime)
        .map(|((h, r), t)| (h + r - t).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// `γ - d`.
pub fn triple_score(distance: f64, gamma: f64) -> f64 {
    gamma - distance
}

/// `Σ_i softplus(-s_i) + Σ_i Σ_j β_ij softplus(s⁻_ij)`.
///
/// `negative_scores[i]` and `weights[i]` belong to positive `i`.
pub fn attention_loss(positive_scores: &[f64], negative_scores: &[Vec<f64>], weights: &[Vec<f64>]) -> f64 {
    assert_eq!(negative_scores.len(), weights.len(), "one weight list per negative list");
    let pos: f64 = positive_scores.iter().map(|&s| softplus(-s)).sum();
    let neg: f64 = negative_scores
        .iter()
        .zip(weights)
        .map(|(ss, ws)| {
            assert_eq!(ss.len(), ws.len(), "one weight per negative");
            ss.iter().zip(ws).map(|(&s, &w)| w * softplus(s)).sum::<f64>()
        })
        .sum();
    pos + neg
}

/// Tape handles for the negatives of one positive.
#[derive(Clone, Debug)]
pub struct NegativeTerms {
    /// `s⁻_j`
    pub scores: Vec<Var>,
    /// Scaled dot products `f_j` feeding the attention softmax.
    pub similarities: Vec<Var>,
}

/// `γ - ‖h' + R - t'‖` on the tape.
pub(crate) fn score_var(tape: &mut Tape, h_prime: Var, rel: Var, t_prime: Var, gamma: f64) -> Var {
    let shifted = tape.add(h_prime, rel);
    let diff = tape.sub(shifted, t_prime);
    let d = tape.norm(diff);
    let neg = tape.scale(d, -1.0);
    tape.offset(neg, gamma)
}

/// Gradient treatment of attention weights.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Beta<'a> {
    Differentiate,
    Detach,
    /// Constant weights supplied per positive, in order.
    Fixed(&'a [Vec<f64>]),
}

/// β for one positive under `mode`.
fn weights_var(tape: &mut Tape, mode: LossMode, terms: &NegativeTerms, beta: Beta<'_>, slot: usize) -> Var {
    let j = terms.scores.len();
    match mode {
        LossMode::Attention | LossMode::NoPrune => match beta {
            Beta::Fixed(w) => tape.constant(w[slot].clone()),
            _ => {
                let stacked = tape.stack(&terms.similarities);
                let b = tape.softmax(stacked);
                if matches!(beta, Beta::Detach) {
                    tape.detach(b)
                } else {
                    b
                }
            }
        },
        LossMode::SingleNegative | LossMode::UniformMulti => tape.constant(vec![1.0 / j as f64; j]),
        LossMode::SelfAdversarial => {
            let s: Vec<f64> = terms.scores.iter().map(|&v| tape.scalar(v)).collect();
            tape.constant(softmax(&s))
        }
    }
}

/// The loss on the tape, together with the weight values used.
pub(crate) fn loss_var(
    tape: &mut Tape,
    mode: LossMode,
    positive_scores: &[Var],
    negatives: &[NegativeTerms],
    beta: Beta<'_>,
) -> (Var, Vec<Vec<f64>>) {
    let mut terms = Vec::with_capacity(positive_scores.len() + negatives.len());
    for &s in positive_scores {
        let neg = tape.scale(s, -1.0);
        terms.push(tape.softplus(neg));
    }
    let mut used = Vec::with_capacity(negatives.len());
    for (slot, n) in negatives.iter().filter(|n| !n.scores.is_empty()).enumerate() {
        let w = weights_var(tape, mode, n, beta, slot);
        used.push(tape.value(w).to_vec());
        let sp: Vec<Var> = n.scores.iter().map(|&s| tape.softplus(s)).collect();
        let stacked = tape.stack(&sp);
        terms.push(tape.dot(w, stacked));
    }
    (tape.add_all(&terms), used)
}
