//! Result files: a CSV table and a mirrored JSON-lines file per record stream.
//!
//! Both files are opened in append mode and flushed after every record, so
//! an interrupted sweep keeps the rows it finished.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::distill::DistillRecord;
use crate::error::{Error, Result};
use crate::gradcheck::CaseReport;
use crate::regression::{ResultRecord, SurfaceRow};
use crate::syngrad::SgRecord;

/// A row type with a fixed column order.
pub trait Record: Serialize {
    const HEADER: &'static [&'static str];
}

impl Record for ResultRecord {
    const HEADER: &'static [&'static str] = &ResultRecord::HEADER;
}

impl Record for DistillRecord {
    const HEADER: &'static [&'static str] = &DistillRecord::HEADER;
}

impl Record for SgRecord {
    const HEADER: &'static [&'static str] = &SgRecord::HEADER;
}

impl Record for SurfaceRow {
    const HEADER: &'static [&'static str] = &SurfaceRow::HEADER;
}

/// Flat summary of a gradient-check case; the worst input goes to the JSON mirror only.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckRow {
    pub target: String,
    pub case: String,
    pub evaluations: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl From<&CaseReport> for GradCheckRow {
    fn from(c: &CaseReport) -> Self {
        GradCheckRow {
            target: c.target.to_string(),
            case: c.case.clone(),
            evaluations: c.evaluations,
            max_rel_error: c.max_rel_error,
            tolerance: c.tolerance,
            passed: c.passed(),
        }
    }
}

impl Record for GradCheckRow {
    const HEADER: &'static [&'static str] = &["target", "case", "evaluations", "max_rel_error", "tolerance", "passed"];
}

/// Creates `dir` if needed and proves that files can be created inside it.
pub fn ensure_writable(dir: &Path) -> Result<()> {
    let fail = |e: std::io::Error| Error::Config(format!("output directory {} is not writable: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(fail)?;
    let probe = dir.join(format!(".write-probe-{}", std::process::id()));
    File::create(&probe).map_err(fail)?;
    fs::remove_file(&probe).map_err(fail)?;
    Ok(())
}

/// Appends records to `<stem>.csv` and `<stem>.jsonl`.
pub struct ResultSink {
    csv: csv::Writer<File>,
    jsonl: File,
    csv_path: PathBuf,
    jsonl_path: PathBuf,
    header: &'static [&'static str],
    rows: usize,
}

impl ResultSink {
    /// Opens (or continues) the pair of files for records of type `T`.
    ///
    /// A fresh CSV gets the header immediately. An existing one must start
    /// with the same header.
    pub fn open<T: Record>(dir: &Path, stem: &str) -> Result<Self> {
        ensure_writable(dir)?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let jsonl_path = dir.join(format!("{stem}.jsonl"));
        let existing = match File::open(&csv_path) {
            Ok(f) => {
                let mut first = String::new();
                BufReader::new(f).read_line(&mut first)?;
                Some(first)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        let expected = T::HEADER.join(",");
        if let Some(first) = &existing {
            if !first.is_empty() && first.trim_end() != expected {
                return Err(Error::Config(format!(
                    "{} has header `{}`, expected `{expected}`",
                    csv_path.display(),
                    first.trim_end()
                )));
            }
        }
        let append = |p: &Path| OpenOptions::new().create(true).append(true).open(p);
        let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(append(&csv_path)?);
        if existing.as_deref().is_none_or(str::is_empty) {
            csv.write_record(T::HEADER)?;
            csv.flush()?;
        }
        let jsonl = append(&jsonl_path)?;
        Ok(ResultSink { csv, jsonl, csv_path, jsonl_path, header: T::HEADER, rows: 0 })
    }

    pub fn append<T: Record>(&mut self, record: &T) -> Result<()> {
        if T::HEADER != self.header {
            return Err(Error::Config("record schema differs from the open result file".into()));
        }
        self.csv.serialize(record)?;
        self.csv.flush()?;
        serde_json::to_writer(&mut self.jsonl, record)?;
        self.jsonl.write_all(b"\n")?;
        self.jsonl.flush()?;
        self.rows += 1;
        Ok(())
    }

    /// Rows appended through this handle.
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn csv_path(&self) -> &Path {
        &self.csv_path
    }

    pub fn jsonl_path(&self) -> &Path {
        &self.jsonl_path
    }
}

/// Writes `records` under `dir` and returns the CSV and JSON-lines paths.
pub fn persist_results<T: Record>(records: &[T], dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    let mut sink = ResultSink::open::<T>(dir, stem)?;
    for r in records {
        sink.append(r)?;
    }
    Ok((sink.csv_path, sink.jsonl_path))
}
