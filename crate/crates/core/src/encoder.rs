//! Relation-aware entity encoding and few-shot relation representation.
//!
//! For a few-shot relation seed `r` and an entity `e` with neighbors
//! `(r_i, c_i)`:
//!
//! ```text
//! m(r, r_i) = W2ᵀ tanh(W1ᵀ [r ⊕ r_i])
//! α         = softmax_i m(r, r_i)
//! A         = Σ_i α_i W3ᵀ [r_i ⊕ c_i]        (zero without neighbors)
//! e'        = sigmoid(W4ᵀ (e + A))
//! R(h, t)   = leaky_relu(W5ᵀ [h' ⊕ t'])
//! ```
//!
//! Matrices are stored `in × out` and applied to row vectors. There are no
//! bias terms.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::kg::{EntityId, NeighborIndex, RelationId};
use crate::linalg::{row_f64, Matrix};
use crate::seed::derive_seed;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// `2·dim × dim_a`
    pub w1: Matrix,
    /// `dim_a × 1`
    pub w2: Matrix,
    /// `2·dim × dim`
    pub w3: Matrix,
    /// `dim × dim`
    pub w4: Matrix,
    /// `2·dim × dim`
    pub w5: Matrix,
    pub leaky_slope: f64,
}

impl EncoderParams {
    /// Xavier-uniform weights, seeded.
    pub fn init(dim: usize, dim_a: usize, leaky_slope: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "encoder-init", &[]));
        EncoderParams {
            w1: Matrix::xavier(2 * dim, dim_a, &mut rng),
            w2: Matrix::xavier(dim_a, 1, &mut rng),
            w3: Matrix::xavier(2 * dim, dim, &mut rng),
            w4: Matrix::xavier(dim, dim, &mut rng),
            w5: Matrix::xavier(2 * dim, dim, &mut rng),
            leaky_slope,
        }
    }

    pub fn zeros(dim: usize, dim_a: usize, leaky_slope: f64) -> Self {
        EncoderParams {
            w1: Matrix::zeros(2 * dim, dim_a),
            w2: Matrix::zeros(dim_a, 1),
            w3: Matrix::zeros(2 * dim, dim),
            w4: Matrix::zeros(dim, dim),
            w5: Matrix::zeros(2 * dim, dim),
            leaky_slope,
        }
    }

    pub fn dim(&self) -> usize {
        self.w4.rows()
    }

    pub fn dim_a(&self) -> usize {
        self.w1.cols()
    }

    pub fn matrices(&self) -> [&Matrix; 5] {
        [&self.w1, &self.w2, &self.w3, &self.w4, &self.w5]
    }

    pub fn matrices_mut(&mut self) -> [&mut Matrix; 5] {
        [
            &mut self.w1,
            &mut self.w2,
            &mut self.w3,
            &mut self.w4,
            &mut self.w5,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let da = self.dim_a();
        let expected = [(2 * d, da), (da, 1), (2 * d, d), (d, d), (2 * d, d)];
        let mut out = Vec::new();
        if d == 0 || da == 0 {
            out.push("encoder dims must be at least 1".to_string());
        }
        for (k, (m, shape)) in self.matrices().iter().zip(expected).enumerate() {
            if m.shape() != shape {
                out.push(format!("W{} has shape {:?}, expected {shape:?}", k + 1, m.shape()));
            }
            if !m.is_finite() {
                out.push(format!("W{} has non-finite entries", k + 1));
            }
        }
        if !self.leaky_slope.is_finite() {
            out.push("leaky slope must be finite".to_string());
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(Error::Contract(out.join("; ")))
        }
    }
}

/// Encoder weights bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub w1: Var,
    pub w2: Var,
    pub w3: Var,
    pub w4: Var,
    pub w5: Var,
    pub leaky_slope: f64,
}

impl EncoderVars {
    pub fn bind(tape: &mut Tape, params: &EncoderParams) -> Self {
        EncoderVars {
            w1: tape.matrix_leaf(&params.w1),
            w2: tape.matrix_leaf(&params.w2),
            w3: tape.matrix_leaf(&params.w3),
            w4: tape.matrix_leaf(&params.w4),
            w5: tape.matrix_leaf(&params.w5),
            leaky_slope: params.leaky_slope,
        }
    }

    pub fn all(&self) -> [Var; 5] {
        [self.w1, self.w2, self.w3, self.w4, self.w5]
    }

    /// `t - h`.
    pub fn relation_seed(&self, tape: &mut Tape, h: Var, t: Var) -> Var {
        tape.sub(t, h)
    }

    pub fn relevance(&self, tape: &mut Tape, r: Var, r_i: Var) -> Var {
        let x = tape.concat(r, r_i);
        let hidden = tape.vec_mat(x, self.w1);
        let act = tape.tanh(hidden);
        let s = tape.vec_mat(act, self.w2);
        tape.index(s, 0)
    }

    /// Softmax attention over neighbor relations; `None` for no neighbors.
    /// `score_offset` is added to every relevance score before the softmax.
    pub fn attention(&self, tape: &mut Tape, r: Var, neighbor_rels: &[Var], score_offset: f64) -> Option<Var> {
        if neighbor_rels.is_empty() {
            return None;
        }
        let scores: Vec<Var> = neighbor_rels
            .iter()
            .map(|&r_i| {
                let s = self.relevance(tape, r, r_i);
                if score_offset != 0.0 {
                    tape.offset(s, score_offset)
                } else {
                    s
                }
            })
            .collect();
        let stacked = tape.stack(&scores);
        Some(tape.softmax(stacked))
    }

    /// `W3ᵀ [r_i ⊕ c_i]`, independent of the few-shot relation.
    pub fn message(&self, tape: &mut Tape, r_i: Var, c_i: Var) -> Var {
        let x = tape.concat(r_i, c_i);
        tape.vec_mat(x, self.w3)
    }

    /// Encodes `e` under seed `r`, given neighbor relation vars and their
    /// precomputed messages.
    pub fn encode(&self, tape: &mut Tape, e: Var, r: Var, neighbor_rels: &[Var], messages: &[Var]) -> Var {
        debug_assert_eq!(neighbor_rels.len(), messages.len());
        let input = match self.attention(tape, r, neighbor_rels, 0.0) {
            Some(alpha) => {
                let a = tape.weighted_sum(alpha, messages);
                tape.add(e, a)
            }
            None => e,
        };
        let pre = tape.vec_mat(input, self.w4);
        tape.sigmoid(pre)
    }

    pub fn pair_rep(&self, tape: &mut Tape, h_prime: Var, t_prime: Var) -> Var {
        let x = tape.concat(h_prime, t_prime);
        let pre = tape.vec_mat(x, self.w5);
        tape.leaky_relu(pre, self.leaky_slope)
    }
}

/// Row access for the vectors an [`EncodingSession`] binds as leaves.
pub trait EmbeddingSource {
    fn dim(&self) -> usize;
    fn entity_row(&self, e: EntityId) -> Vec<f64>;
    fn relation_row(&self, r: RelationId) -> Vec<f64>;
}

impl EmbeddingSource for EmbeddingTable {
    fn dim(&self) -> usize {
        EmbeddingTable::dim(self)
    }

    fn entity_row(&self, e: EntityId) -> Vec<f64> {
        row_f64(self.entity(e))
    }

    fn relation_row(&self, r: RelationId) -> Vec<f64> {
        row_f64(self.relation(r))
    }
}

/// A tape plus lazily created leaves for embedding rows, with per-tape caches
/// of neighbor messages and encodings.
///
/// Relation rows are indexed in the neighbor index's doubled id space.
pub struct EncodingSession<'a, E: EmbeddingSource + ?Sized = EmbeddingTable> {
    pub tape: Tape,
    pub enc: EncoderVars,
    source: &'a E,
    index: &'a NeighborIndex,
    trainable_embeddings: bool,
    entity_vars: HashMap<EntityId, Var>,
    relation_vars: HashMap<RelationId, Var>,
    messages: HashMap<EntityId, (Vec<Var>, Vec<Var>)>,
    encoded: HashMap<(EntityId, Var), Var>,
}

impl<'a, E: EmbeddingSource + ?Sized> EncodingSession<'a, E> {
    pub fn new(source: &'a E, index: &'a NeighborIndex, params: &EncoderParams, trainable_embeddings: bool) -> Self {
        assert_eq!(source.dim(), params.dim(), "embedding and encoder dims differ");
        let mut tape = Tape::new();
        let enc = EncoderVars::bind(&mut tape, params);
        Self::with_encoder(tape, enc, source, index, trainable_embeddings)
    }

    /// Uses encoder weights already placed on `tape`.
    pub fn with_encoder(
        tape: Tape,
        enc: EncoderVars,
        source: &'a E,
        index: &'a NeighborIndex,
        trainable_embeddings: bool,
    ) -> Self {
        EncodingSession {
            tape,
            enc,
            source,
            index,
            trainable_embeddings,
            entity_vars: HashMap::new(),
            relation_vars: HashMap::new(),
            messages: HashMap::new(),
            encoded: HashMap::new(),
        }
    }

    fn row_var(&mut self, v: Vec<f64>) -> Var {
        if self.trainable_embeddings {
            self.tape.leaf(v)
        } else {
            self.tape.constant(v)
        }
    }

    pub fn entity(&mut self, e: EntityId) -> Var {
        if let Some(&v) = self.entity_vars.get(&e) {
            return v;
        }
        let v = self.row_var(self.source.entity_row(e));
        self.entity_vars.insert(e, v);
        v
    }

    pub fn relation(&mut self, r: RelationId) -> Var {
        if let Some(&v) = self.relation_vars.get(&r) {
            return v;
        }
        let v = self.row_var(self.source.relation_row(r));
        self.relation_vars.insert(r, v);
        v
    }

    pub fn entity_leaves(&self) -> impl Iterator<Item = (EntityId, Var)> + '_ {
        self.entity_vars.iter().map(|(&e, &v)| (e, v))
    }

    pub fn relation_leaves(&self) -> impl Iterator<Item = (RelationId, Var)> + '_ {
        self.relation_vars.iter().map(|(&r, &v)| (r, v))
    }

    pub fn trainable_embeddings(&self) -> bool {
        self.trainable_embeddings
    }

    pub fn seed(&mut self, h: EntityId, t: EntityId) -> Var {
        let (hv, tv) = (self.entity(h), self.entity(t));
        self.enc.relation_seed(&mut self.tape, hv, tv)
    }

    fn neighbor_terms(&mut self, e: EntityId) -> (Vec<Var>, Vec<Var>) {
        if let Some(terms) = self.messages.get(&e) {
            return terms.clone();
        }
        let index = self.index;
        let mut rels = Vec::new();
        let mut msgs = Vec::new();
        for &(r_i, c_i) in index.neighbors(e) {
            let rv = self.relation(r_i);
            let cv = self.entity(c_i);
            rels.push(rv);
            msgs.push(self.enc.message(&mut self.tape, rv, cv));
        }
        self.messages.insert(e, (rels.clone(), msgs.clone()));
        (rels, msgs)
    }

    /// `e'` under seed `r`; cached per `(entity, seed var)`.
    pub fn encode(&mut self, e: EntityId, r: Var) -> Var {
        if let Some(&v) = self.encoded.get(&(e, r)) {
            return v;
        }
        let ev = self.entity(e);
        let (rels, msgs) = self.neighbor_terms(e);
        let out = self.enc.encode(&mut self.tape, ev, r, &rels, &msgs);
        self.encoded.insert((e, r), out);
        out
    }

    /// One support pair encoded under its own seed.
    pub fn pair(&mut self, h: EntityId, t: EntityId) -> EncodedPair {
        let seed = self.seed(h, t);
        let h_prime = self.encode(h, seed);
        let t_prime = self.encode(t, seed);
        let rep = self.enc.pair_rep(&mut self.tape, h_prime, t_prime);
        EncodedPair {
            rep,
            seed,
            h_prime,
            t_prime,
        }
    }
}

/// Tape handles for one encoded support pair.
#[derive(Clone, Copy, Debug)]
pub struct EncodedPair {
    /// `R(h, t)`
    pub rep: Var,
    /// `t - h` on the raw embeddings
    pub seed: Var,
    pub h_prime: Var,
    pub t_prime: Var,
}

pub fn relation_seed(h: &[f64], t: &[f64]) -> Vec<f64> {
    assert_eq!(h.len(), t.len(), "relation_seed dims");
    t.iter().zip(h).map(|(t, h)| t - h).collect()
}

pub fn relevance_score(r: &[f64], r_i: &[f64], params: &EncoderParams) -> f64 {
    let mut tape = Tape::new();
    let enc = EncoderVars::bind(&mut tape, params);
    let (rv, riv) = (tape.constant(r.to_vec()), tape.constant(r_i.to_vec()));
    let s = enc.relevance(&mut tape, rv, riv);
    tape.scalar(s)
}

/// Attention weights over neighbors, or `None` when there are none.
/// Weights depend only on the neighbor relation vectors.
pub fn neighbor_attention(r: &[f64], neighbors: &[(Vec<f64>, Vec<f64>)], params: &EncoderParams) -> Option<Vec<f64>> {
    neighbor_attention_with_offset(r, neighbors, params, 0.0)
}

/// [`neighbor_attention`] with a constant added to every relevance score.
pub fn neighbor_attention_with_offset(
    r: &[f64],
    neighbors: &[(Vec<f64>, Vec<f64>)],
    params: &EncoderParams,
    offset: f64,
) -> Option<Vec<f64>> {
    let mut tape = Tape::new();
    let enc = EncoderVars::bind(&mut tape, params);
    let rv = tape.constant(r.to_vec());
    let rels: Vec<Var> = neighbors
        .iter()
        .map(|(ri, _)| tape.constant(ri.clone()))
        .collect();
    let alpha = enc.attention(&mut tape, rv, &rels, offset)?;
    Some(tape.value(alpha).to_vec())
}

/// `sigmoid(W4ᵀ (e + A))`, with `A = 0` for an empty neighborhood.
pub fn encode_entity(e: &[f64], r: &[f64], neighbors: &[(Vec<f64>, Vec<f64>)], params: &EncoderParams) -> Vec<f64> {
    let mut tape = Tape::new();
    let enc = EncoderVars::bind(&mut tape, params);
    let ev = tape.constant(e.to_vec());
    let rv = tape.constant(r.to_vec());
    let mut rels = Vec::with_capacity(neighbors.len());
    let mut msgs = Vec::with_capacity(neighbors.len());
    for (ri, ci) in neighbors {
        let riv = tape.constant(ri.clone());
        let civ = tape.constant(ci.clone());
        rels.push(riv);
        msgs.push(enc.message(&mut tape, riv, civ));
    }
    let out = enc.encode(&mut tape, ev, rv, &rels, &msgs);
    tape.value(out).to_vec()
}

pub fn pair_relation_rep(h_prime: &[f64], t_prime: &[f64], params: &EncoderParams) -> Vec<f64> {
    let mut tape = Tape::new();
    let enc = EncoderVars::bind(&mut tape, params);
    let (h, t) = (tape.constant(h_prime.to_vec()), tape.constant(t_prime.to_vec()));
    let out = enc.pair_rep(&mut tape, h, t);
    tape.value(out).to_vec()
}

/// Mean of per-pair representations over the support set.
///
/// `table` relation rows must cover the index's doubled relation space.
pub fn support_relation_rep(
    support: &[(EntityId, EntityId)],
    table: &EmbeddingTable,
    index: &NeighborIndex,
    params: &EncoderParams,
) -> Result<Vec<f64>> {
    if support.is_empty() {
        return Err(Error::Contract("support set is empty".into()));
    }
    let mut session = EncodingSession::new(table, index, params, false);
    let reps: Vec<Var> = support.iter().map(|&(h, t)| session.pair(h, t).rep).collect();
    let mean = session.tape.mean(&reps);
    Ok(session.tape.value(mean).to_vec())
}
