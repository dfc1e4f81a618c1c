//! Entity and relation embedding tables: initialization, persistence and a
//! TransE pretrainer over the background graph.

pub(crate) mod io;
mod transe;

use rand::Rng;

use crate::linalg::Matrix;
use crate::seed::rng_for;

pub use io::{load_embeddings, read_embeddings, save_embeddings, write_embeddings, EMBEDDING_MAGIC};
pub use transe::{pretrain_transe, pretrain_transe_with_report, Norm, PretrainReport, TransEConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub entities: Matrix,
    pub relations: Matrix,
}

impl EmbeddingTable {
    pub fn new(entities: Matrix, relations: Matrix) -> Self {
        assert_eq!(entities.cols(), relations.cols(), "embedding dims differ");
        EmbeddingTable {
            entities,
            relations,
        }
    }

    pub fn dim(&self) -> usize {
        self.entities.cols()
    }

    pub fn entity_count(&self) -> usize {
        self.entities.rows()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.rows()
    }

    pub fn entity(&self, e: usize) -> &[f32] {
        self.entities.row(e)
    }

    pub fn relation(&self, r: usize) -> &[f32] {
        self.relations.row(r)
    }

    pub fn is_finite(&self) -> bool {
        self.entities.is_finite() && self.relations.is_finite()
    }

    pub fn normalize_entities(&mut self) {
        for e in 0..self.entities.rows() {
            normalize(self.entities.row_mut(e));
        }
    }

    /// Appends inverse-relation rows `-r` so that relation `r + n` is the
    /// inverse of relation `r`, matching the neighbor index's doubled space.
    pub fn with_inverse_relations(&self) -> EmbeddingTable {
        let n = self.relation_count();
        let dim = self.dim();
        let relations = Matrix::from_fn(2 * n, dim, |i, j| {
            if i < n {
                self.relations.get(i, j)
            } else {
                -self.relations.get(i - n, j)
            }
        });
        EmbeddingTable {
            entities: self.entities.clone(),
            relations,
        }
    }
}

pub(crate) fn normalize(row: &mut [f32]) {
    let norm = row
        .iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt();
    if norm > 0.0 {
        for v in row {
            *v = (f64::from(*v) / norm) as f32;
        }
    }
}

/// Uniform init in `±6/sqrt(dim)` with unit-norm entity rows.
///
/// Panics if any count or `dim` is zero.
pub fn init_embeddings(entity_count: usize, relation_count: usize, dim: usize, seed: u64) -> EmbeddingTable {
    assert!(entity_count >= 1 && relation_count >= 1 && dim >= 1);
    let bound = 6.0 / (dim as f64).sqrt();
    let mut rng = rng_for(seed, "embedding-init", &[]);
    let mut sample = |_, _| rng.gen_range(-bound..=bound) as f32;
    let entities = Matrix::from_fn(entity_count, dim, &mut sample);
    let relations = Matrix::from_fn(relation_count, dim, &mut sample);
    let mut table = EmbeddingTable {
        entities,
        relations,
    };
    table.normalize_entities();
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_contract() {
        let t = init_embeddings(3, 2, 4, 1);
        assert_eq!(t.entities.shape(), (3, 4));
        assert_eq!(t.relations.shape(), (2, 4));
        assert!(t.is_finite());
        for e in 0..3 {
            let n: f64 = t.entity(e).iter().map(|&v| f64::from(v).powi(2)).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
        let bound = 6.0 / 2.0f32;
        assert!(t.relations.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(init_embeddings(3, 2, 4, 1), init_embeddings(3, 2, 4, 1));
        assert_ne!(init_embeddings(3, 2, 4, 1), init_embeddings(3, 2, 4, 2));
    }

    #[test]
    fn nell_dim() {
        let t = init_embeddings(10, 4, 50, 0);
        assert_eq!(t.dim(), 50);
    }

    #[test]
    fn inverse_rows_negate() {
        let t = init_embeddings(2, 3, 4, 0).with_inverse_relations();
        assert_eq!(t.relation_count(), 6);
        for j in 0..4 {
            assert_eq!(t.relation(4)[j], -t.relation(1)[j]);
        }
    }
}
