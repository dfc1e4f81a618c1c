//! Knowledge-graph data model: triples, the background graph, few-shot tasks
//! and their splits.

mod dataset;
mod neighbors;
mod synth;

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{load_dataset, save_dataset};
pub use neighbors::{build_neighbor_index, NeighborIndex};
pub use synth::{generate_synthetic_kg, SyntheticSpec};

pub type EntityId = usize;
pub type RelationId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub rel: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, rel: RelationId, tail: EntityId) -> Self {
        Triple { head, rel, tail }
    }
}

/// The background graph together with the entity and relation id spaces.
///
/// Relation ids cover both background and few-shot relations; only the
/// background relations have triples here.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeGraph {
    pub entity_count: usize,
    pub relation_count: usize,
    pub background: Vec<Triple>,
    pub entity_names: Option<Vec<String>>,
    pub relation_names: Option<Vec<String>>,
}

impl KnowledgeGraph {
    /// Builds a graph, checking id ranges and duplicate triples.
    pub fn new(entity_count: usize, relation_count: usize, background: Vec<Triple>) -> Result<Self> {
        let graph = KnowledgeGraph {
            entity_count,
            relation_count,
            background,
            entity_names: None,
            relation_names: None,
        };
        let problems = graph.problems();
        if problems.is_empty() {
            Ok(graph)
        } else {
            Err(Error::Validation(problems))
        }
    }

    fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut seen = HashSet::with_capacity(self.background.len());
        for (line, t) in self.background.iter().enumerate() {
            if t.head >= self.entity_count || t.tail >= self.entity_count {
                out.push(format!(
                    "background triple {line} ({}, {}, {}): entity id out of range (entity_count = {})",
                    t.head, t.rel, t.tail, self.entity_count
                ));
            }
            if t.rel >= self.relation_count {
                out.push(format!(
                    "background triple {line} ({}, {}, {}): relation id out of range (relation_count = {})",
                    t.head, t.rel, t.tail, self.relation_count
                ));
            }
            if !seen.insert(*t) {
                out.push(format!(
                    "background triple {line} ({}, {}, {}): duplicate",
                    t.head, t.rel, t.tail
                ));
            }
        }
        if let Some(names) = &self.entity_names {
            if names.len() != self.entity_count {
                out.push(format!(
                    "{} entity names for {} entities",
                    names.len(),
                    self.entity_count
                ));
            }
        }
        if let Some(names) = &self.relation_names {
            if names.len() != self.relation_count {
                out.push(format!(
                    "{} relation names for {} relations",
                    names.len(),
                    self.relation_count
                ));
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.background.is_empty()
    }
}

/// One few-shot relation with its support pairs, queries and candidate tails.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShotTask {
    pub rel: RelationId,
    pub support: Vec<(EntityId, EntityId)>,
    pub queries: Vec<(EntityId, EntityId)>,
    pub candidates: Vec<EntityId>,
}

impl FewShotTask {
    fn problems(&self, split: &str, idx: usize, graph: &KnowledgeGraph, out: &mut Vec<String>) {
        let label = format!("{split} task {idx} (rel {})", self.rel);
        if self.rel >= graph.relation_count {
            out.push(format!("{label}: relation id out of range"));
        }
        if self.support.is_empty() {
            out.push(format!("{label}: empty support set"));
        }
        let in_range = |e: EntityId| e < graph.entity_count;
        for &(h, t) in self.support.iter().chain(&self.queries) {
            if !in_range(h) || !in_range(t) {
                out.push(format!("{label}: pair ({h}, {t}) has an entity id out of range"));
            }
        }
        for &c in &self.candidates {
            if !in_range(c) {
                out.push(format!("{label}: candidate {c} out of range"));
            }
        }
        let support: HashSet<_> = self.support.iter().collect();
        for q in &self.queries {
            if support.contains(q) {
                out.push(format!("{label}: query ({}, {}) also in support", q.0, q.1));
            }
        }
        let candidates: HashSet<_> = self.candidates.iter().collect();
        for &(h, t) in &self.queries {
            if !candidates.contains(&t) {
                out.push(format!("{label}: query ({h}, {t}) true tail missing from candidates"));
            }
        }
    }
}

/// Meta-train / meta-validation / meta-test task splits.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TaskSet {
    pub train: Vec<FewShotTask>,
    pub valid: Vec<FewShotTask>,
    pub test: Vec<FewShotTask>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split {other:?} (expected train, valid or test)"
            ))),
        }
    }
}

impl TaskSet {
    pub fn split(&self, split: Split) -> &[FewShotTask] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &FewShotTask> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    pub fn few_shot_relations(&self) -> BTreeSet<RelationId> {
        self.iter().map(|t| t.rel).collect()
    }

    /// Every known `(head, rel, tail)` fact over all splits.
    pub fn known_facts(&self) -> HashSet<Triple> {
        self.iter()
            .flat_map(|task| {
                task.support
                    .iter()
                    .chain(&task.queries)
                    .map(move |&(h, t)| Triple::new(h, task.rel, t))
            })
            .collect()
    }
}

/// Checks the cross-structure invariants between a graph and its task splits.
pub fn validate(graph: &KnowledgeGraph, tasks: &TaskSet) -> Result<()> {
    let mut out = graph.problems();
    let splits = [
        ("train", &tasks.train),
        ("valid", &tasks.valid),
        ("test", &tasks.test),
    ];
    for (name, list) in splits {
        for (i, task) in list.iter().enumerate() {
            task.problems(name, i, graph, &mut out);
        }
    }

    let rels = |list: &[FewShotTask]| list.iter().map(|t| t.rel).collect::<BTreeSet<_>>();
    let (tr, va, te) = (rels(&tasks.train), rels(&tasks.valid), rels(&tasks.test));
    for (a_name, a, b_name, b) in [
        ("train", &tr, "valid", &va),
        ("train", &tr, "test", &te),
        ("valid", &va, "test", &te),
    ] {
        for r in a.intersection(b) {
            out.push(format!("relation {r} appears in both {a_name} and {b_name} splits"));
        }
    }

    let few_shot = tasks.few_shot_relations();
    for (line, t) in graph.background.iter().enumerate() {
        if few_shot.contains(&t.rel) {
            out.push(format!(
                "background triple {line} ({}, {}, {}) uses few-shot relation {}",
                t.head, t.rel, t.tail, t.rel
            ));
        }
    }

    if out.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(out))
    }
}
