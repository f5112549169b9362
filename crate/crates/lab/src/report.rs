//! CSV, JSON and plain-text output for benchmark results.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::bench::BenchResult;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no benchmark results to write")]
    Empty,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

pub const CSV_HEADER: [&str; 17] = [
    "program",
    "mode",
    "optimize",
    "reps",
    "instr_raw",
    "instr_checked",
    "overhead_ratio",
    "checks",
    "backward_steps",
    "peak_raw",
    "peak_checked",
    "mem_ratio",
    "mean_rss_ratio",
    "stddev",
    "overhead_min",
    "overhead_max",
    "backward_share",
];

/// One flat row; the JSON output uses the same shape so the two agree.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Row {
    pub program: String,
    pub mode: String,
    pub optimize: bool,
    pub reps: usize,
    pub instr_raw: u64,
    pub instr_checked: u64,
    pub overhead_ratio: f64,
    pub checks: u64,
    pub backward_steps: u64,
    pub peak_raw: u64,
    pub peak_checked: u64,
    pub mem_ratio: f64,
    pub mean_rss_ratio: f64,
    pub stddev: f64,
    pub overhead_min: f64,
    pub overhead_max: f64,
    pub backward_share: f64,
}

impl From<&BenchResult> for Row {
    fn from(r: &BenchResult) -> Self {
        Row {
            program: r.program.clone(),
            mode: r.mode.name().to_string(),
            optimize: r.optimize,
            reps: r.reps,
            instr_raw: r.instr_raw,
            instr_checked: r.instr_checked,
            overhead_ratio: r.overhead_ratio,
            checks: r.checks,
            backward_steps: r.backward_steps,
            peak_raw: r.peak_raw,
            peak_checked: r.peak_checked,
            mem_ratio: r.mem_ratio,
            mean_rss_ratio: r.mean_rss_ratio,
            stddev: r.stddev,
            overhead_min: r.overhead_min,
            overhead_max: r.overhead_max,
            backward_share: r.backward_share,
        }
    }
}

pub fn rows(results: &[BenchResult]) -> Result<Vec<Row>, ReportError> {
    if results.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut rows: Vec<Row> = results.iter().map(Row::from).collect();
    rows.sort_by(|a, b| (&a.program, a.optimize, &a.mode).cmp(&(&b.program, b.optimize, &b.mode)));
    Ok(rows)
}

pub fn write_csv<W: Write>(results: &[BenchResult], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows(results).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))? {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<W: Write>(results: &[BenchResult], out: W) -> Result<(), serde_json::Error> {
    let rows = rows(results).map_err(|e| serde_json::Error::io(io::Error::new(io::ErrorKind::InvalidInput, e)))?;
    serde_json::to_writer_pretty(out, &rows)
}

pub fn text_table(results: &[BenchResult]) -> Result<String, ReportError> {
    let rows = rows(results)?;
    let mut s = format!(
        "{:<14} {:<9} {:<4} {:>10} {:>10} {:>8} {:>8} {:>9} {:>6}\n",
        "program", "mode", "opt", "raw", "checked", "ratio", "checks", "backward", "mem"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<14} {:<9} {:<4} {:>10} {:>10} {:>8.3} {:>8} {:>9} {:>6.3}\n",
            r.program,
            r.mode,
            if r.optimize { "on" } else { "off" },
            r.instr_raw,
            r.instr_checked,
            r.overhead_ratio,
            r.checks,
            r.backward_steps,
            r.mem_ratio
        ));
    }
    Ok(s)
}

fn create(path: &Path) -> Result<BufWriter<File>, ReportError> {
    File::create(path).map(BufWriter::new).map_err(|source| ReportError::Io { path: path.to_path_buf(), source })
}

/// Writes `bench.csv` and `bench.json` into `dir`, creating it if needed.
pub fn write_all(results: &[BenchResult], dir: &Path) -> Result<(PathBuf, PathBuf), ReportError> {
    if results.is_empty() {
        return Err(ReportError::Empty);
    }
    std::fs::create_dir_all(dir).map_err(|source| ReportError::Io { path: dir.to_path_buf(), source })?;
    let csv_path = dir.join("bench.csv");
    let json_path = dir.join("bench.json");
    write_csv(results, create(&csv_path)?).map_err(|source| ReportError::Csv { path: csv_path.clone(), source })?;
    write_json(results, create(&json_path)?).map_err(|source| ReportError::Json { path: json_path.clone(), source })?;
    Ok((csv_path, json_path))
}

/// Serialises any summary as pretty JSON to `path`.
pub fn write_summary<T: Serialize>(value: &T, path: &Path) -> Result<(), ReportError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| ReportError::Io { path: parent.to_path_buf(), source })?;
    }
    let w = create(path)?;
    serde_json::to_writer_pretty(w, value).map_err(|source| ReportError::Json { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{run_bench, suite};

    #[test]
    fn csv_and_json_agree() {
        let results = run_bench(&suite("small").unwrap()[..2], 2).unwrap();
        let mut csv_buf = Vec::new();
        write_csv(&results, &mut csv_buf).unwrap();
        let mut rdr = csv::Reader::from_reader(csv_buf.as_slice());
        let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
        assert_eq!(header, CSV_HEADER);
        let from_csv: Vec<Row> = rdr.deserialize().collect::<Result<_, _>>().unwrap();
        let mut json_buf = Vec::new();
        write_json(&results, &mut json_buf).unwrap();
        let from_json: Vec<Row> = serde_json::from_slice(&json_buf).unwrap();
        assert_eq!(from_csv, from_json);
        assert_eq!(from_csv.len(), 8);
    }

    #[test]
    fn empty_results_are_rejected() {
        assert!(matches!(text_table(&[]), Err(ReportError::Empty)));
        assert!(write_csv(&[], Vec::new()).is_err());
        assert!(write_json(&[], Vec::new()).is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(write_all(&[], dir.path()), Err(ReportError::Empty)));
        assert!(!dir.path().join("bench.csv").exists());
    }

    #[test]
    fn io_errors_name_the_path() {
        let results = run_bench(&suite("small").unwrap()[..1], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, "x").unwrap();
        let err = write_all(&results, &blocker.join("sub")).unwrap_err();
        assert!(err.to_string().contains("file"), "{err}");
    }
}
