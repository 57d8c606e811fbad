use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;

/// Non-empty presence masks over `n` modalities, ordered by size and then
/// lexicographically by the canonical indices they contain.
pub fn enumerate_subsets(n: usize) -> Vec<Vec<bool>> {
    let mut subsets: Vec<Vec<usize>> = (1u64..(1 << n))
        .map(|bits| (0..n).filter(|i| bits >> i & 1 == 1).collect())
        .collect();
    subsets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    subsets
        .into_iter()
        .map(|idx| (0..n).map(|i| idx.contains(&i)).collect())
        .collect()
}

/// `+`-joined ids of the present modalities, e.g. `I+L+R`.
pub fn subset_label(ids: &[String], present: &[bool]) -> String {
    ids.iter()
        .zip(present)
        .filter(|(_, &p)| p)
        .map(|(id, _)| id.as_str())
        .collect::<Vec<_>>()
        .join("+")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub task: String,
    pub subset: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportMetadata {
    pub command: String,
    pub preset: String,
    pub seed: u64,
    /// Model family evaluated: a fusion variant or a baseline name.
    pub model: String,
    pub task: String,
    pub config_digest: String,
    /// Existence probabilities used for training.
    pub probabilities: Vec<f64>,
}

/// Per-subset metric table plus run metadata.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub metadata: ReportMetadata,
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    /// Value of `metric` on `subset`, if present.
    pub fn value(&self, subset: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.subset == subset && r.metric == metric)
            .map(|r| r.value)
    }

    /// `task,subset,metric,value` with shortest round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,subset,metric,value\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{:?}", r.task, r.subset, r.metric, r.value);
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.csv"), self.to_csv())?;
        write_json(&dir.join("summary.json"), self)
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| crate::XfiError::Io(e.into()))?;
    text.push('\n');
    Ok(std::fs::write(path, text)?)
}
