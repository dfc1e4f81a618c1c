use rand::seq::index;

use super::{EntityId, KnowledgeGraph, RelationId};
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// One-hop neighborhoods over the background graph.
///
/// Both edge directions are indexed. An outgoing triple `(e, r, c)` is stored
/// for `e` as `(r, c)`; an incoming triple `(c, r, e)` is stored for `e` as
/// `(r + relation_count, c)`, so neighbor relation ids live in a doubled space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    lists: Vec<Vec<(RelationId, EntityId)>>,
    cap: usize,
    relation_count: usize,
}

impl NeighborIndex {
    /// Wraps explicit neighbor lists; relation ids must be below
    /// `2 * relation_count`.
    pub fn from_lists(lists: Vec<Vec<(RelationId, EntityId)>>, relation_count: usize) -> Self {
        let cap = lists.iter().map(Vec::len).max().unwrap_or(0).max(1);
        NeighborIndex {
            lists,
            cap,
            relation_count,
        }
    }

    pub fn neighbors(&self, entity: EntityId) -> &[(RelationId, EntityId)] {
        &self.lists[entity]
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn entity_count(&self) -> usize {
        self.lists.len()
    }

    /// Size of the doubled relation id space used by neighbor entries.
    pub fn neighbor_relation_count(&self) -> usize {
        2 * self.relation_count
    }

    pub fn inverse(&self, rel: RelationId) -> RelationId {
        if rel < self.relation_count {
            rel + self.relation_count
        } else {
            rel - self.relation_count
        }
    }
}

/// Indexes neighbors in both directions, keeping a seeded uniform subset of
/// `cap` entries for entities with more.
pub fn build_neighbor_index(graph: &KnowledgeGraph, cap: usize, seed: u64) -> Result<NeighborIndex> {
    if cap == 0 {
        return Err(Error::Contract("neighbor cap must be at least 1".into()));
    }
    let r_count = graph.relation_count;
    let mut lists: Vec<Vec<(RelationId, EntityId)>> = vec![Vec::new(); graph.entity_count];
    for t in &graph.background {
        lists[t.head].push((t.rel, t.tail));
        lists[t.tail].push((t.rel + r_count, t.head));
    }
    for (entity, list) in lists.iter_mut().enumerate() {
        if list.len() > cap {
            let mut rng = rng_for(seed, "neighbors", &[entity as u64]);
            let mut keep = index::sample(&mut rng, list.len(), cap).into_vec();
            keep.sort_unstable();
            *list = keep.into_iter().map(|i| list[i]).collect();
        }
    }
    Ok(NeighborIndex {
        lists,
        cap,
        relation_count: r_count,
    })
}
