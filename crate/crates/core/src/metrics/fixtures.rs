//! Rate tables on disk: a header of policy names and one row per task,
//! each cell written as `k/n`.
//!
//! ```text
//! task,OpenVLA,Octo
//! open_drawer,40/50,1/50
//! ```

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MetricsError, Rate, SuccessRateVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    pub policies: Vec<String>,
    pub tasks: Vec<(String, SuccessRateVector)>,
}

impl RateTable {
    pub fn task(&self, name: &str) -> Option<&SuccessRateVector> {
        self.tasks.iter().find(|(t, _)| t == name).map(|(_, v)| v)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn parse_cell(cell: &str, line: usize) -> Result<Rate, FixtureError> {
    let bad = |message: String| FixtureError::Parse { line, message };
    let (k, n) = cell.trim().split_once('/').ok_or_else(|| bad(format!("cell {cell:?} is not k/n")))?;
    let k: u32 = k.trim().parse().map_err(|_| bad(format!("bad numerator in {cell:?}")))?;
    let n: u32 = n.trim().parse().map_err(|_| bad(format!("bad denominator in {cell:?}")))?;
    Rate::new(k, n).map_err(|e| bad(e.to_string()))
}

pub fn parse_rate_table<R: Read>(input: R) -> Result<RateTable, FixtureError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers().map_err(|e| FixtureError::Parse { line: 1, message: e.to_string() })?.clone();
    if headers.len() < 3 {
        return Err(FixtureError::Parse { line: 1, message: "need a task column and at least two policies".into() });
    }
    let policies: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut tasks = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| FixtureError::Parse { line, message: e.to_string() })?;
        let mut cells = row.iter();
        let task = cells.next().unwrap_or_default().to_string();
        let rates = cells.map(|c| parse_cell(c, line)).collect::<Result<Vec<_>, _>>()?;
        let entries = policies.iter().cloned().zip(rates).collect();
        tasks.push((task, SuccessRateVector::new(entries)?));
    }
    if tasks.is_empty() {
        return Err(FixtureError::Parse { line: 2, message: "no task rows".into() });
    }
    Ok(RateTable { policies, tasks })
}

pub fn read_rate_table(path: &Path) -> Result<RateTable, FixtureError> {
    let file = std::fs::File::open(path).map_err(|source| FixtureError::Io { path: path.display().to_string(), source })?;
    parse_rate_table(file)
}
