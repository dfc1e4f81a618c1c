//! Long-format plot data from metrics files and training traces.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rana_core::eval::MetricsReport;
use rana_core::trainer::TraceRecord;

pub const HEADER: &str = "param\tx\tsplit\tmrr\thits1\thits5\thits10\tsource";

/// One `X=PATH` input.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportInput {
    pub x: String,
    pub path: PathBuf,
}

impl std::str::FromStr for ReportInput {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once('=') {
            Some((x, path)) if !x.is_empty() && !path.is_empty() => Ok(ReportInput {
                x: x.to_string(),
                path: PathBuf::from(path),
            }),
            _ => Err(format!("expected X=PATH, got {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportOutput {
    pub tsv: String,
    pub rows: usize,
    pub warnings: Vec<String>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("NA".to_string(), |v| format!("{v}"))
}

/// A metrics JSON yields its own numbers; a JSONL trace yields its best
/// validation MRR with hits left as `NA`.
fn read_row(path: &Path) -> anyhow::Result<(String, f64, [Option<f64>; 3])> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(m) = serde_json::from_str::<MetricsReport>(&text) {
        return Ok((m.split, m.mrr, [Some(m.hits1), Some(m.hits5), Some(m.hits10)]));
    }
    let mut best: Option<f64> = None;
    let mut lines = 0;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: TraceRecord =
            serde_json::from_str(line).with_context(|| format!("neither metrics JSON nor trace (line {})", i + 1))?;
        lines += 1;
        if let Some(v) = rec.val_mrr {
            best = Some(best.map_or(v, |b: f64| b.max(v)));
        }
    }
    match best {
        Some(mrr) => Ok(("valid".to_string(), mrr, [None; 3])),
        None if lines == 0 => bail!("empty file"),
        None => bail!("trace has no validation records"),
    }
}

pub fn build_report(param: &str, inputs: &[ReportInput]) -> anyhow::Result<ReportOutput> {
    if inputs.is_empty() {
        bail!("report needs at least one X=PATH input");
    }
    let mut tsv = format!("{HEADER}\n");
    let mut warnings = Vec::new();
    let mut rows = 0;
    for input in inputs {
        match read_row(&input.path) {
            Ok((split, mrr, hits)) => {
                writeln!(
                    tsv,
                    "{param}\t{}\t{split}\t{mrr}\t{}\t{}\t{}\t{}",
                    input.x,
                    fmt_opt(hits[0]),
                    fmt_opt(hits[1]),
                    fmt_opt(hits[2]),
                    input.path.display()
                )
                .expect("writing to a String");
                rows += 1;
            }
            Err(e) => warnings.push(format!("skipping {}: {e:#}", input.path.display())),
        }
    }
    if rows == 0 {
        bail!("no usable inputs:\n  {}", warnings.join("\n  "));
    }
    Ok(ReportOutput { tsv, rows, warnings })
}
