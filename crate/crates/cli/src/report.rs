//! Summaries of finished run directories, read back from the files that
//! `train` and `eval` write.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub mode: String,
    pub total_epochs: usize,
    pub best_loss: Option<f64>,
    pub final_loss: Option<f64>,
    /// `lambda,margin,k,p` chosen in each exploitation round.
    pub chosen: Vec<String>,
    pub rank1: Option<f64>,
    pub map: Option<f64>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

/// Rows of a comma-separated table keyed by its header, skipping `#` lines.
fn table(text: &str) -> Result<Vec<HashMap<String, String>>> {
    let mut lines = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| anyhow!("empty table"))?
        .split(',')
        .collect();
    lines
        .enumerate()
        .map(|(i, line)| {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != header.len() {
                bail!(
                    "row {} has {} cells, header has {}",
                    i + 1,
                    cells.len(),
                    header.len()
                );
            }
            Ok(header
                .iter()
                .map(|h| h.to_string())
                .zip(cells.iter().map(|c| c.to_string()))
                .collect())
        })
        .collect()
}

fn preamble(text: &str) -> HashMap<String, String> {
    text.lines()
        .filter_map(|l| l.strip_prefix("# "))
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn number(row: &HashMap<String, String>, key: &str) -> Result<f64> {
    row.get(key)
        .ok_or_else(|| anyhow!("missing column {key}"))?
        .parse()
        .with_context(|| format!("column {key}"))
}

pub fn summarize(dir: &Path) -> Result<RunSummary> {
    let epochs_path = dir.join("epochs.csv");
    let text = read(&epochs_path)?;
    let head = preamble(&text);
    let rows = table(&text).with_context(|| format!("in {}", epochs_path.display()))?;
    let final_loss = rows
        .iter()
        .rev()
        .find(|r| r.get("phase").is_some_and(|p| p != "explore"))
        .map(|r| number(r, "total"))
        .transpose()?;
    let best_loss = match head.get("best_loss").map(String::as_str) {
        None | Some("none") => None,
        Some(v) => Some(v.parse().context("best_loss")?),
    };

    let rounds_path = dir.join("rounds.csv");
    let chosen = if rounds_path.exists() {
        table(&read(&rounds_path)?)?
            .iter()
            .map(|r| {
                Ok(format!(
                    "{:.3},{:.3},{},{}",
                    number(r, "lambda")?,
                    number(r, "margin")?,
                    number(r, "k")?,
                    number(r, "p")?
                ))
            })
            .collect::<Result<_>>()
            .with_context(|| format!("in {}", rounds_path.display()))?
    } else {
        Vec::new()
    };

    let metrics_path = dir.join("metrics.csv");
    let (rank1, map) = if metrics_path.exists() {
        let rows = table(&read(&metrics_path)?)?;
        let row = rows
            .first()
            .ok_or_else(|| anyhow!("{} has no rows", metrics_path.display()))?;
        (Some(number(row, "rank1")?), Some(number(row, "map")?))
    } else {
        (None, None)
    };

    Ok(RunSummary {
        dir: dir.to_path_buf(),
        mode: head
            .get("mode")
            .cloned()
            .unwrap_or_else(|| "unknown".into()),
        total_epochs: head
            .get("total_epochs")
            .map(|v| v.parse())
            .transpose()
            .context("total_epochs")?
            .unwrap_or(rows.len()),
        best_loss,
        final_loss,
        chosen,
        rank1,
        map,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// `run,mode,total_epochs,best_loss,final_loss,rank1,map,chosen` rows; the
/// chosen column joins rounds with `;`.
pub fn summary_csv(runs: &[RunSummary]) -> String {
    let mut out = String::from("run,mode,total_epochs,best_loss,final_loss,rank1,map,chosen\n");
    for r in runs {
        writeln!(
            out,
            "{},{},{},{},{},{},{},\"{}\"",
            r.dir.display(),
            r.mode,
            r.total_epochs,
            cell(r.best_loss),
            cell(r.final_loss),
            cell(r.rank1),
            cell(r.map),
            r.chosen.join(";")
        )
        .unwrap();
    }
    out
}

pub fn print(runs: &[RunSummary]) {
    println!(
        "{:<16} {:>7} {:>12} {:>12} {:>8} {:>8}",
        "mode", "epochs", "best loss", "final loss", "rank-1", "mAP"
    );
    let opt = |v: Option<f64>, w: usize| {
        v.map(|x| format!("{x:>w$.4}"))
            .unwrap_or_else(|| format!("{:>w$}", "-"))
    };
    for r in runs {
        println!(
            "{:<16} {:>7} {} {} {} {}",
            r.mode,
            r.total_epochs,
            opt(r.best_loss, 12),
            opt(r.final_loss, 12),
            opt(r.rank1, 8),
            opt(r.map, 8)
        );
        for (i, w) in r.chosen.iter().enumerate() {
            println!("    round {i}: lambda,margin,k,p = {w}");
        }
    }
}
