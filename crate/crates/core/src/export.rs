//! Tidy CSV tables from metrics and search logs.
//!
//! Input is either a JSON-lines log or a table previously produced by this
//! module, so exporting an export gives the same bytes back.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::search::SearchRecord;
use crate::trainer::MetricRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableKind {
    /// `series,iteration,accuracy`; series is `train` or `validation`.
    Accuracy,
    /// `series,iteration,mean_length`.
    Length,
    /// `method,N,questions,accuracy`, one row per method and N.
    Search,
}

impl TableKind {
    pub const ALL: [TableKind; 3] = [TableKind::Accuracy, TableKind::Length, TableKind::Search];

    pub fn name(self) -> &'static str {
        match self {
            TableKind::Accuracy => "accuracy",
            TableKind::Length => "length",
            TableKind::Search => "search",
        }
    }

    pub fn header(self) -> &'static str {
        match self {
            TableKind::Accuracy => "series,iteration,accuracy",
            TableKind::Length => "series,iteration,mean_length",
            TableKind::Search => "method,N,questions,accuracy",
        }
    }

    fn columns(self) -> usize {
        self.header().split(',').count()
    }
}

impl std::str::FromStr for TableKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TableKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown export kind '{s}' (accuracy, length, search)")))
    }
}

fn malformed(line: usize, msg: impl Into<String>) -> Error {
    Error::MalformedRecord { line, msg: msg.into() }
}

fn series_rows(text: &str, kind: TableKind) -> Result<Vec<String>> {
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricRecord = serde_json::from_str(line).map_err(|e| malformed(i + 1, e.to_string()))?;
        match rec {
            MetricRecord::Train(m) => {
                let v = if kind == TableKind::Accuracy { m.train_accuracy } else { m.mean_length };
                train.push(format!("train,{},{}", m.iteration, v));
            }
            MetricRecord::Eval(m) => {
                let v = if kind == TableKind::Accuracy { m.accuracy } else { m.mean_length };
                validation.push(format!("validation,{},{}", m.iteration, v));
            }
        }
    }
    train.extend(validation);
    Ok(train)
}

fn search_rows(text: &str) -> Result<Vec<String>> {
    let mut groups: BTreeMap<(String, usize), (usize, usize)> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SearchRecord = serde_json::from_str(line).map_err(|e| malformed(i + 1, e.to_string()))?;
        let g = groups.entry((rec.method, rec.n)).or_default();
        g.0 += 1;
        g.1 += rec.correct as usize;
    }
    Ok(groups
        .into_iter()
        .map(|((method, n), (total, correct))| format!("{method},{n},{total},{}", correct as f64 / total as f64))
        .collect())
}

// Re-emits a table in canonical form after checking every row.
fn reexport(text: &str, kind: TableKind) -> Result<Vec<String>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != kind.columns() {
            return Err(malformed(i + 1, format!("expected {} columns, found {}", kind.columns(), cols.len())));
        }
        let bad = |c: &str| malformed(i + 1, format!("bad value '{c}'"));
        let row = match kind {
            TableKind::Accuracy | TableKind::Length => {
                if cols[0] != "train" && cols[0] != "validation" {
                    return Err(bad(cols[0]));
                }
                let it: usize = cols[1].parse().map_err(|_| bad(cols[1]))?;
                let v: f64 = cols[2].parse().map_err(|_| bad(cols[2]))?;
                format!("{},{it},{v}", cols[0])
            }
            TableKind::Search => {
                let n: usize = cols[1].parse().map_err(|_| bad(cols[1]))?;
                let q: usize = cols[2].parse().map_err(|_| bad(cols[2]))?;
                let v: f64 = cols[3].parse().map_err(|_| bad(cols[3]))?;
                format!("{},{n},{q},{v}", cols[0])
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

/// Builds the `kind` table from a log or an earlier export of the same kind.
pub fn export_table(text: &str, kind: TableKind) -> Result<String> {
    let first = text.lines().next().unwrap_or("").trim();
    let rows = if first == kind.header() {
        reexport(text, kind)?
    } else if let Some(other) = TableKind::ALL.into_iter().find(|k| k.header() == first) {
        return Err(malformed(1, format!("input is a {} table, not {}", other.name(), kind.name())));
    } else {
        match kind {
            TableKind::Accuracy | TableKind::Length => series_rows(text, kind)?,
            TableKind::Search => search_rows(text)?,
        }
    };
    let mut out = String::from(kind.header());
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    Ok(out)
}
