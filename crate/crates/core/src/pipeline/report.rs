//! Per-scenario result rows, strategy averages and the summary table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::Strategy;
use crate::error::{Error, Result};
use crate::io::write_bytes;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub seed: u64,
    pub scenario_id: usize,
    pub strategy: Strategy,
    pub auc: f64,
    pub flops: u64,
    pub param_count: usize,
    pub latency_mean_ms: f64,
    pub latency_p95_ms: f64,
    /// Searched genotype, for `Ours` rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genotype: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyAverage {
    pub strategy: Strategy,
    pub rows: usize,
    pub auc: f64,
    pub flops: f64,
    pub param_count: f64,
    pub latency_mean_ms: f64,
    pub latency_p95_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub seed: u64,
    pub scenario_id: usize,
    pub strategy: Option<Strategy>,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub rows: Vec<ReportRow>,
    pub averages: Vec<StrategyAverage>,
    pub failures: Vec<Failure>,
    /// Whole-model FLOPs budget searched light models were held to.
    pub flops_budget: Option<u64>,
}

impl StrategyReport {
    pub fn new(rows: Vec<ReportRow>, failures: Vec<Failure>, flops_budget: Option<u64>) -> Self {
        let averages = averages(&rows);
        Self {
            rows,
            averages,
            failures,
            flops_budget,
        }
    }

    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty()
    }

    pub fn average(&self, s: Strategy) -> Option<&StrategyAverage> {
        self.averages.iter().find(|a| a.strategy == s)
    }

    /// Writes `rows.jsonl`, `failures.jsonl` (when any) and `summary.md`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_bytes(&dir.join("rows.jsonl"), jsonl(&self.rows, dir)?.as_bytes())?;
        let failures = dir.join("failures.jsonl");
        if self.failures.is_empty() {
            if failures.exists() {
                std::fs::remove_file(&failures).map_err(|e| Error::io(&failures, e))?;
            }
        } else {
            write_bytes(&failures, jsonl(&self.failures, dir)?.as_bytes())?;
        }
        write_bytes(&dir.join("summary.md"), self.render().as_bytes())
    }

    /// Reloads a report from the files written by [`StrategyReport::write`].
    pub fn read(dir: &Path) -> Result<Self> {
        let rows = read_jsonl(&dir.join("rows.jsonl"))?;
        let f = dir.join("failures.jsonl");
        let failures = if f.exists() {
            read_jsonl(&f)?
        } else {
            Vec::new()
        };
        Ok(Self::new(rows, failures, None))
    }

    /// Markdown tables: averages per strategy, then AUC per scenario.
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str("| strategy | rows | avg AUC | avg FLOPs | avg params | mean latency (ms) | p95 latency (ms) |\n");
        s.push_str("|---|---:|---:|---:|---:|---:|---:|\n");
        for a in &self.averages {
            let _ = writeln!(
                s,
                "| {} | {} | {:.4} | {:.0} | {:.0} | {:.3} | {:.3} |",
                a.strategy,
                a.rows,
                a.auc,
                a.flops,
                a.param_count,
                a.latency_mean_ms,
                a.latency_p95_ms
            );
        }
        let strategies: Vec<Strategy> = self.averages.iter().map(|a| a.strategy).collect();
        let mut by_key: BTreeMap<(u64, usize), BTreeMap<Strategy, f64>> = BTreeMap::new();
        for r in &self.rows {
            by_key
                .entry((r.seed, r.scenario_id))
                .or_default()
                .insert(r.strategy, r.auc);
        }
        s.push_str("\n| seed | scenario |");
        for st in &strategies {
            let _ = write!(s, " {st} |");
        }
        s.push_str("\n|---:|---:|");
        s.push_str(&"---:|".repeat(strategies.len()));
        s.push('\n');
        for ((seed, sc), m) in &by_key {
            let _ = write!(s, "| {seed} | {sc} |");
            for st in &strategies {
                match m.get(st) {
                    Some(v) => {
                        let _ = write!(s, " {v:.4} |");
                    }
                    None => s.push_str(" - |"),
                }
            }
            s.push('\n');
        }
        if let Some(b) = self.flops_budget {
            let _ = writeln!(s, "\nFLOPs budget for searched models: {b}");
        }
        if !self.failures.is_empty() {
            let _ = writeln!(s, "\nPARTIAL RUN: {} failure(s)", self.failures.len());
            for f in &self.failures {
                let st = f.strategy.map_or("-".to_string(), |s| s.to_string());
                let _ = writeln!(
                    s,
                    "- seed {} scenario {} {}: {}",
                    f.seed, f.scenario_id, st, f.error
                );
            }
        }
        s
    }
}

/// Mean of every numeric column per strategy, in canonical strategy order.
pub fn averages(rows: &[ReportRow]) -> Vec<StrategyAverage> {
    Strategy::ALL
        .iter()
        .filter_map(|&st| {
            let sel: Vec<&ReportRow> = rows.iter().filter(|r| r.strategy == st).collect();
            if sel.is_empty() {
                return None;
            }
            let n = sel.len() as f64;
            let mean = |f: &dyn Fn(&ReportRow) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / n;
            Some(StrategyAverage {
                strategy: st,
                rows: sel.len(),
                auc: mean(&|r| r.auc),
                flops: mean(&|r| r.flops as f64),
                param_count: mean(&|r| r.param_count as f64),
                latency_mean_ms: mean(&|r| r.latency_mean_ms),
                latency_p95_ms: mean(&|r| r.latency_p95_ms),
            })
        })
        .collect()
}

fn jsonl<T: Serialize>(items: &[T], dir: &Path) -> Result<String> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it).map_err(|e| Error::Json {
            path: dir.to_path_buf(),
            source: e,
        })?);
        out.push('\n');
    }
    Ok(out)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Json {
                path: path.to_path_buf(),
                source: e,
            })
        })
        .collect()
}
