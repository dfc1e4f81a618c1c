//! Dataset directory reader and writer.
//!
//! ```text
//! entities.tsv      <id>\t<name>
//! relations.tsv     <id>\t<name>
//! background.tsv    <head_id>\t<rel_id>\t<tail_id>
//! tasks_{train,valid,test}.json
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{validate, FewShotTask, KnowledgeGraph, TaskSet, Triple};
use crate::error::{Error, Result};

const ENTITIES: &str = "entities.tsv";
const RELATIONS: &str = "relations.tsv";
const BACKGROUND: &str = "background.tsv";
const TASK_FILES: [&str; 3] = ["tasks_train.json", "tasks_valid.json", "tasks_test.json"];

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl std::fmt::Display) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: format!("line {}: {message}", line + 1),
    }
}

fn read_names(path: &Path) -> Result<Vec<String>> {
    let text = read(path)?;
    let mut names = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, name) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(path, i, "expected <id>\\t<name>"))?;
        let id: usize = id
            .trim()
            .parse()
            .map_err(|e| parse_err(path, i, format!("bad id {id:?}: {e}")))?;
        if id != names.len() {
            return Err(parse_err(
                path,
                i,
                format!("ids must be dense from 0; expected {}, found {id}", names.len()),
            ));
        }
        names.push(name.to_string());
    }
    Ok(names)
}

fn read_triples(path: &Path) -> Result<Vec<Triple>> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(path, i, "expected <head>\\t<rel>\\t<tail>"));
        }
        let mut ids = [0usize; 3];
        for (slot, f) in ids.iter_mut().zip(&fields) {
            *slot = f
                .trim()
                .parse()
                .map_err(|e| parse_err(path, i, format!("bad id {f:?}: {e}")))?;
        }
        out.push(Triple::new(ids[0], ids[1], ids[2]));
    }
    Ok(out)
}

fn read_tasks(path: &Path) -> Result<Vec<FewShotTask>> {
    let text = read(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Loads and validates a dataset directory.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(KnowledgeGraph, TaskSet)> {
    let dir = dir.as_ref();
    let entity_names = read_names(&dir.join(ENTITIES))?;
    let relation_names = read_names(&dir.join(RELATIONS))?;
    let background = read_triples(&dir.join(BACKGROUND))?;
    let [train, valid, test] = TASK_FILES.map(|f| read_tasks(&dir.join(f)));
    let tasks = TaskSet {
        train: train?,
        valid: valid?,
        test: test?,
    };
    let graph = KnowledgeGraph {
        entity_count: entity_names.len(),
        relation_count: relation_names.len(),
        background,
        entity_names: Some(entity_names),
        relation_names: Some(relation_names),
    };
    validate(&graph, &tasks)?;
    Ok((graph, tasks))
}

fn write(path: PathBuf, contents: &str) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

fn names_tsv(names: Option<&Vec<String>>, count: usize, prefix: &str) -> String {
    let mut out = String::new();
    for id in 0..count {
        match names {
            Some(n) => writeln!(out, "{id}\t{}", n[id]),
            None => writeln!(out, "{id}\t{prefix}{id}"),
        }
        .unwrap();
    }
    out
}

fn tasks_json(tasks: &[FewShotTask]) -> String {
    if tasks.is_empty() {
        return "[]\n".to_string();
    }
    let rows: Vec<String> = tasks
        .iter()
        .map(|t| format!("  {}", serde_json::to_string(t).expect("task serializes")))
        .collect();
    format!("[\n{}\n]\n", rows.join(",\n"))
}

/// Writes a dataset directory, creating it if needed. Output depends only on
/// the inputs.
pub fn save_dataset(dir: impl AsRef<Path>, graph: &KnowledgeGraph, tasks: &TaskSet) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(
        dir.join(ENTITIES),
        &names_tsv(graph.entity_names.as_ref(), graph.entity_count, "e"),
    )?;
    write(
        dir.join(RELATIONS),
        &names_tsv(graph.relation_names.as_ref(), graph.relation_count, "r"),
    )?;
    let mut bg = String::new();
    for t in &graph.background {
        writeln!(bg, "{}\t{}\t{}", t.head, t.rel, t.tail).unwrap();
    }
    write(dir.join(BACKGROUND), &bg)?;
    for (file, list) in TASK_FILES.iter().zip([&tasks.train, &tasks.valid, &tasks.test]) {
        write(dir.join(file), &tasks_json(list))?;
    }
    Ok(())
}
