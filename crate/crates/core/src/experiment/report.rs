use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use super::ExperimentError;

/// One row of a run's `results.tsv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub system: String,
    pub pair: String,
    pub bleu: f64,
    pub sentences: usize,
    pub best_epoch: usize,
}

/// Reads `results.tsv` from each run directory; directories without one
/// are skipped.
pub fn collect_results(run_dirs: &[PathBuf]) -> Result<Vec<ResultRow>, ExperimentError> {
    let mut rows = Vec::new();
    for dir in run_dirs {
        let path = dir.join("results.tsv");
        let Ok(text) = fs::read_to_string(&path) else { continue };
        for (i, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || ExperimentError::Config(format!("{}: malformed line {}", path.display(), i + 1));
            if f.len() != 5 {
                return Err(bad());
            }
            rows.push(ResultRow {
                system: f[0].to_string(),
                pair: f[1].to_string(),
                bleu: f[2].parse().map_err(|_| bad())?,
                sentences: f[3].parse().map_err(|_| bad())?,
                best_epoch: f[4].parse().map_err(|_| bad())?,
            });
        }
    }
    Ok(rows)
}

/// Systems as rows, language pairs as columns. Repeated cells keep the
/// last value seen.
fn matrix(rows: &[ResultRow]) -> (Vec<String>, Vec<String>, BTreeMap<(String, String), f64>) {
    let mut systems: Vec<String> = Vec::new();
    let mut pairs: Vec<String> = Vec::new();
    let mut cells = BTreeMap::new();
    for r in rows {
        if !systems.contains(&r.system) {
            systems.push(r.system.clone());
        }
        if !pairs.contains(&r.pair) {
            pairs.push(r.pair.clone());
        }
        cells.insert((r.system.clone(), r.pair.clone()), r.bleu);
    }
    pairs.sort();
    (systems, pairs, cells)
}

pub fn render_tsv(rows: &[ResultRow]) -> String {
    let (systems, pairs, cells) = matrix(rows);
    let mut out = format!("system\t{}\n", pairs.join("\t"));
    for s in &systems {
        out.push_str(s);
        for p in &pairs {
            match cells.get(&(s.clone(), p.clone())) {
                Some(b) => {
                    let _ = write!(out, "\t{b:.4}");
                }
                None => out.push_str("\t-"),
            }
        }
        out.push('\n');
    }
    out
}

pub fn render_markdown(rows: &[ResultRow]) -> String {
    let (systems, pairs, cells) = matrix(rows);
    let mut out = format!("| system | {} |\n|---|{}\n", pairs.join(" | "), "---|".repeat(pairs.len()));
    for s in &systems {
        let _ = write!(out, "| {s} |");
        for p in &pairs {
            match cells.get(&(s.clone(), p.clone())) {
                Some(b) => {
                    let _ = write!(out, " {b:.4} |");
                }
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}
