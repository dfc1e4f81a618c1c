//! Synthetic few-shot knowledge graphs with latent entity types.
//!
//! Entities are split evenly into latent types, and the entities of each type
//! are spread over a `grid_width x (candidates / grid_width)` lattice of
//! clusters. Every relation, background or few-shot, links a source type to a
//! target type and carries a lattice offset: a head in cell `c` points to an
//! entity in cell `c + offset` of the target type. Background relations pick a
//! random member of that cell and fire with probability `density`. A few-shot
//! relation draws one representative per target cell as its candidate pool and
//! maps each head to the representative of its shifted cell, so candidates share
//! the true tail's type and the answer follows from the translation structure.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FewShotTask, KnowledgeGraph, TaskSet, Triple};
use crate::error::{Error, Result};
use crate::seed::rng_for;

const OFFSET_ATTEMPTS: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub entities: usize,
    pub background_relations: usize,
    pub train_relations: usize,
    pub valid_relations: usize,
    pub test_relations: usize,
    /// Support pairs per task.
    pub support: usize,
    pub queries: usize,
    /// Candidates per task; also the number of lattice cells per type.
    pub candidates: usize,
    pub types: usize,
    pub grid_width: usize,
    /// Largest absolute lattice step along either axis.
    pub max_offset: usize,
    /// Probability that an eligible head of a background relation gets an edge.
    pub density: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            entities: 200,
            background_relations: 40,
            train_relations: 20,
            valid_relations: 3,
            test_relations: 5,
            support: 5,
            queries: 40,
            candidates: 30,
            types: 1,
            grid_width: 6,
            max_offset: 2,
            density: 0.6,
        }
    }
}

impl SyntheticSpec {
    fn check(&self) -> Result<()> {
        let mut out = Vec::new();
        for (name, v) in [
            ("entities", self.entities),
            ("background_relations", self.background_relations),
            ("train_relations", self.train_relations),
            ("valid_relations", self.valid_relations),
            ("test_relations", self.test_relations),
            ("support", self.support),
            ("queries", self.queries),
            ("candidates", self.candidates),
            ("types", self.types),
            ("grid_width", self.grid_width),
            ("max_offset", self.max_offset),
        ] {
            if v == 0 {
                out.push(format!("{name} must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.density) {
            out.push(format!("density {} outside [0, 1]", self.density));
        }
        if out.is_empty() {
            if !self.candidates.is_multiple_of(self.grid_width) {
                out.push(format!(
                    "grid_width {} does not divide candidates {}",
                    self.grid_width, self.candidates
                ));
            }
            if self.candidates < 2 {
                out.push("a lattice needs at least 2 cells".into());
            }
            let smallest_type = self.entities / self.types;
            if smallest_type < self.candidates {
                out.push(format!(
                    "the smallest type has {} entities, fewer than the {} lattice cells",
                    smallest_type, self.candidates
                ));
            }
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(Error::Generation(out.join("; ")))
        }
    }

    pub fn few_shot_relations(&self) -> usize {
        self.train_relations + self.valid_relations + self.test_relations
    }

    fn height(&self) -> usize {
        self.candidates / self.grid_width
    }

    /// Cell reached from `cell` by `offset`, if it stays on the lattice.
    fn shift(&self, cell: usize, offset: (i64, i64)) -> Option<usize> {
        let (w, h) = (self.grid_width as i64, self.height() as i64);
        let x = (cell as i64 % w) + offset.0;
        let y = (cell as i64 / w) + offset.1;
        ((0..w).contains(&x) && (0..h).contains(&y)).then(|| (y * w + x) as usize)
    }
}

struct World {
    entity_type: Vec<usize>,
    cell: Vec<usize>,
    /// `members[type][cell]`
    members: Vec<Vec<Vec<usize>>>,
}

impl World {
    fn type_members(&self, ty: usize) -> impl Iterator<Item = usize> + '_ {
        self.members[ty].iter().flatten().copied()
    }
}

fn draw_types(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let source = rng.gen_range(0..spec.types);
    let target = if spec.types > 1 {
        let t = rng.gen_range(0..spec.types - 1);
        if t >= source {
            t + 1
        } else {
            t
        }
    } else {
        source
    };
    (source, target)
}

fn draw_offset(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> (i64, i64) {
    let m = spec.max_offset as i64;
    loop {
        let o = (rng.gen_range(-m..=m), rng.gen_range(-m..=m));
        if o != (0, 0) && reachable(spec, o) {
            return o;
        }
    }
}

fn reachable(spec: &SyntheticSpec, offset: (i64, i64)) -> bool {
    (0..spec.candidates).any(|c| spec.shift(c, offset).is_some())
}

/// Generates a synthetic graph and task splits. Deterministic in `(spec, seed)`.
pub fn generate_synthetic_kg(spec: &SyntheticSpec, seed: u64) -> Result<(KnowledgeGraph, TaskSet)> {
    spec.check()?;
    let mut rng = rng_for(seed, "synth", &[]);

    let mut order: Vec<usize> = (0..spec.entities).collect();
    order.shuffle(&mut rng);
    let mut world = World {
        entity_type: vec![0; spec.entities],
        cell: vec![0; spec.entities],
        members: vec![vec![Vec::new(); spec.candidates]; spec.types],
    };
    for (pos, &e) in order.iter().enumerate() {
        let ty = pos % spec.types;
        let cell = (pos / spec.types) % spec.candidates;
        world.entity_type[e] = ty;
        world.cell[e] = cell;
    }
    for e in 0..spec.entities {
        world.members[world.entity_type[e]][world.cell[e]].push(e);
    }

    let n_bg = spec.background_relations;
    let n_fs = spec.few_shot_relations();
    let mut background = Vec::new();
    for b in 0..n_bg {
        let (source, target) = draw_types(spec, &mut rng);
        let offset = draw_offset(spec, &mut rng);
        for h in world.type_members(source).collect::<Vec<_>>() {
            let Some(cell) = spec.shift(world.cell[h], offset) else {
                continue;
            };
            if rng.gen_bool(spec.density) {
                let t = *world.members[target][cell]
                    .choose(&mut rng)
                    .expect("every cell is populated");
                background.push(Triple::new(h, b, t));
            }
        }
    }

    let needed = spec.support + spec.queries;
    let mut tasks = Vec::with_capacity(n_fs);
    for k in 0..n_fs {
        let (source, target) = draw_types(spec, &mut rng);
        let pool: Vec<usize> = world.members[target]
            .iter()
            .map(|cell| *cell.choose(&mut rng).expect("every cell is populated"))
            .collect();
        let mut eligible = Vec::new();
        for _ in 0..OFFSET_ATTEMPTS {
            let offset = draw_offset(spec, &mut rng);
            eligible = world
                .type_members(source)
                .filter(|h| !pool.contains(h))
                .filter_map(|h| spec.shift(world.cell[h], offset).map(|c| (h, pool[c])))
                .collect();
            if eligible.len() >= needed {
                break;
            }
        }
        if eligible.len() < needed {
            return Err(Error::Generation(format!(
                "few-shot relation {k} has {} eligible heads, needs support + queries = {needed}",
                eligible.len()
            )));
        }
        let pairs: Vec<(usize, usize)> = eligible.choose_multiple(&mut rng, needed).copied().collect();
        let mut candidates = pool;
        candidates.sort_unstable();
        tasks.push(FewShotTask {
            rel: n_bg + k,
            support: pairs[..spec.support].to_vec(),
            queries: pairs[spec.support..].to_vec(),
            candidates,
        });
    }
    let test = tasks.split_off(spec.train_relations + spec.valid_relations);
    let valid = tasks.split_off(spec.train_relations);
    let task_set = TaskSet {
        train: tasks,
        valid,
        test,
    };

    let mut relation_names: Vec<String> = (0..n_bg).map(|b| format!("bg{b}")).collect();
    for (prefix, n) in [
        ("train", spec.train_relations),
        ("valid", spec.valid_relations),
        ("test", spec.test_relations),
    ] {
        relation_names.extend((0..n).map(|k| format!("{prefix}{k}")));
    }
    let entity_names = (0..spec.entities)
        .map(|e| format!("e{e}_t{}_c{}", world.entity_type[e], world.cell[e]))
        .collect();

    let mut graph = KnowledgeGraph::new(spec.entities, n_bg + n_fs, background)?;
    graph.entity_names = Some(entity_names);
    graph.relation_names = Some(relation_names);
    super::validate(&graph, &task_set)?;
    Ok((graph, task_set))
}
