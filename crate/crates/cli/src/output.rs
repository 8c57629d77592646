//! Experiment output: CSV tables built in memory, the JSON report, and
//! atomic writes into the output directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentKind;
use crate::CliError;

/// A CSV file under construction. Numbers are written with the shortest
/// representation that round-trips.
#[derive(Debug, Clone)]
pub struct Table {
    name: String,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

/// One CSV cell.
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
    Empty,
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Empty, Cell::Num)
    }
}

impl Cell {
    fn render(self) -> String {
        match self {
            Cell::Num(v) => v.to_string(),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s,
            Cell::Empty => String::new(),
        }
    }
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: vec![],
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.header.len(), "row width for {}", self.name);
        self.rows.push(row.into_iter().map(Cell::render).collect());
    }

    pub fn into_file(self) -> OutputFile {
        let mut wr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(vec![]);
        wr.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            wr.write_record(r).expect("in-memory write");
        }
        OutputFile {
            name: self.name,
            bytes: wr.into_inner().expect("in-memory flush"),
        }
    }
}

/// A named file produced by an experiment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputFile {
    pub name: String,
    pub bytes: Vec<u8>,
}

impl OutputFile {
    /// Capture the output of a core CSV writer.
    pub fn from_writer(
        name: &str,
        write: impl FnOnce(&mut Vec<u8>) -> sfuq_core::Result<()>,
    ) -> Result<Self, CliError> {
        let mut bytes = vec![];
        write(&mut bytes)?;
        Ok(Self {
            name: name.to_string(),
            bytes,
        })
    }
}

/// A reported number and the CSV column it was read from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportEntry {
    pub name: String,
    pub value: f64,
    pub file: String,
    pub column: String,
}

impl ReportEntry {
    pub fn new(name: impl Into<String>, value: f64, file: &str, column: &str) -> Self {
        Self {
            name: name.into(),
            value,
            file: file.to_string(),
            column: column.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub seed: u64,
    /// The configuration as run, in TOML.
    pub config: String,
    pub headline: Vec<ReportEntry>,
    pub diagnostics: Vec<ReportEntry>,
    pub files: Vec<String>,
    pub wall_clock_seconds: f64,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Write `bytes` to `dir/name` through a temporary file and a rename.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
    let target = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, &target)?;
    Ok(target)
}

/// Write every file and then `report.json` into `dir`.
pub fn write_outputs(
    dir: &Path,
    files: &[OutputFile],
    report: &ExperimentReport,
) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::with_capacity(files.len() + 1);
    for f in files {
        written.push(write_atomic(dir, &f.name, &f.bytes)?);
    }
    written.push(write_atomic(
        dir,
        "report.json",
        report.to_json().as_bytes(),
    )?);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_layout() {
        let mut t = Table::new("a.csv", &["x", "y", "flag"]);
        t.push(vec![0.1.into(), Cell::Empty, true.into()]);
        t.push(vec![3usize.into(), (-2.5).into(), "a,b".into()]);
        let f = t.into_file();
        assert_eq!(
            String::from_utf8(f.bytes).unwrap(),
            "x,y,flag\n0.1,,true\n3,-2.5,\"a,b\"\n"
        );
    }

    #[test]
    fn atomic_write_leaves_no_temporary() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_atomic(dir.path(), "t.csv", b"a\n1\n").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"a\n1\n");
        let names: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names, vec![std::ffi::OsString::from("t.csv")]);
    }
}
