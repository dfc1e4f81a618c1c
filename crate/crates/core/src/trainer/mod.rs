//! Loss kernels, relation adaptation and the meta-training loop.

mod checkpoint;
mod episode;
pub mod gradcheck;
pub mod loss;
mod meta;
mod optim;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingTable;
use crate::encoder::{EncoderParams, DEFAULT_LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::negsampling::PruneConfig;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub(crate) use episode::episode_support;
pub use episode::{adapt_relation, prepare_task, run_episode, run_episode_with_gradients, EpisodeResult, PreparedTask};
pub use loss::{attention_loss, triple_distance, triple_score, LossMode, NegativeTerms};
pub use meta::{meta_train, OptimizerKind, Schedule, TraceRecord, TrainOutcome};
pub use optim::{Adam, Optimizer, Sgd};

/// Scalar hyperparameters of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Margin γ in `s = γ - d`.
    pub gamma: f64,
    /// Inner step size η.
    pub eta: f64,
    /// Outer learning rate μ.
    pub meta_lr: f64,
    /// Negatives per positive, J.
    pub num_negatives: usize,
    pub neighbor_cap: usize,
    pub loss_mode: LossMode,
    pub prune: PruneConfig,
    pub freeze_embeddings: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            gamma: 12.0,
            eta: 1.0,
            meta_lr: 0.01,
            num_negatives: 5,
            neighbor_cap: 25,
            loss_mode: LossMode::Attention,
            prune: PruneConfig::default(),
            freeze_embeddings: false,
        }
    }
}

impl Hyperparams {
    /// All violated constraints, empty when valid.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let positive = |name: &str, v: f64, out: &mut Vec<String>| {
            if !(v > 0.0 && v.is_finite()) {
                out.push(format!("{name} must be > 0, got {v}"));
            }
        };
        positive("gamma", self.gamma, &mut out);
        positive("eta", self.eta, &mut out);
        positive("meta_lr", self.meta_lr, &mut out);
        if self.num_negatives == 0 {
            out.push("num_negatives must be at least 1".into());
        }
        if self.neighbor_cap == 0 {
            out.push("neighbor_cap must be at least 1".into());
        }
        match self.prune.tau {
            crate::negsampling::Tau::Fixed(v) if v.is_nan() => out.push("tau must not be NaN".into()),
            crate::negsampling::Tau::Percentile(p) if !(0.0..=100.0).contains(&p) => {
                out.push(format!("tau percentile {p} outside [0, 100]"))
            }
            _ => {}
        }
        out
    }

    /// Negatives drawn per positive under the configured loss mode.
    pub fn effective_negatives(&self) -> usize {
        match self.loss_mode {
            LossMode::SingleNegative => 1,
            _ => self.num_negatives,
        }
    }
}

/// Everything trainable plus the hyperparameters.
///
/// Relation rows cover the doubled id space of the neighbor index: row
/// `r + n` is the inverse of relation `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub embeddings: EmbeddingTable,
    pub encoder: EncoderParams,
    pub hyper: Hyperparams,
}

impl ModelParams {
    pub fn new(embeddings: EmbeddingTable, encoder: EncoderParams, hyper: Hyperparams) -> Result<Self> {
        let mut problems = hyper.problems();
        if embeddings.dim() != encoder.dim() {
            problems.push(format!(
                "embedding dim {} does not match encoder dim {}",
                embeddings.dim(),
                encoder.dim()
            ));
        }
        if !embeddings.is_finite() {
            problems.push("embeddings contain non-finite values".into());
        }
        if let Err(Error::Contract(msg)) = encoder.validate() {
            problems.push(msg);
        }
        if problems.is_empty() {
            Ok(ModelParams {
                embeddings,
                encoder,
                hyper,
            })
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Builds a model from a pretrained table with `relation_count` base
    /// relations, appending inverse rows and a seeded encoder with
    /// attention width equal to the embedding dim.
    pub fn from_pretrained(pretrained: &EmbeddingTable, hyper: Hyperparams, seed: u64) -> Result<Self> {
        let embeddings = pretrained.with_inverse_relations();
        let dim = embeddings.dim();
        let encoder = EncoderParams::init(dim, dim, DEFAULT_LEAKY_SLOPE, seed);
        ModelParams::new(embeddings, encoder, hyper)
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    /// Bit pattern of every parameter, for equality checks across runs.
    pub fn fingerprint(&self) -> Vec<u32> {
        let mut out: Vec<u32> = Vec::new();
        out.extend(self.embeddings.entities.data().iter().map(|v| v.to_bits()));
        out.extend(self.embeddings.relations.data().iter().map(|v| v.to_bits()));
        for m in self.encoder.matrices() {
            out.extend(m.data().iter().map(|v| v.to_bits()));
        }
        out
    }
}

/// Sparse gradient over [`ModelParams`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads {
    pub encoder: [Vec<f64>; 5],
    pub entities: BTreeMap<usize, Vec<f64>>,
    pub relations: BTreeMap<usize, Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let encoder = params.encoder.matrices().map(|m| vec![0.0; m.data().len()]);
        ParamGrads {
            encoder,
            entities: BTreeMap::new(),
            relations: BTreeMap::new(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.encoder.iter_mut().zip(&other.encoder) {
            if a.is_empty() {
                *a = b.clone();
            } else {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        }
        for (map, other_map) in [
            (&mut self.entities, &other.entities),
            (&mut self.relations, &other.relations),
        ] {
            for (k, g) in other_map {
                match map.get_mut(k) {
                    Some(acc) => {
                        for (x, y) in acc.iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                    None => {
                        map.insert(*k, g.clone());
                    }
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        let rows = self
            .entities
            .values_mut()
            .chain(self.relations.values_mut());
        for v in self.encoder.iter_mut().chain(rows) {
            for x in v.iter_mut() {
                *x *= c;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.encoder
            .iter()
            .chain(self.entities.values())
            .chain(self.relations.values())
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}
