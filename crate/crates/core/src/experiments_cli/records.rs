//! CSV rows, the progress log used for resuming, and the JSON summary.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 8] = ["experiment", "N", "t", "lambda", "seed", "observable", "log2_value", "discarded_weight"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub experiment: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub t: usize,
    pub lambda: f64,
    pub seed: u64,
    pub observable: String,
    pub log2_value: f64,
    pub discarded_weight: f64,
}

impl Row {
    /// Observable name with the p tag used by the purity experiments.
    pub fn base_observable(&self) -> (&str, Option<f64>) {
        match self.observable.split_once(":p=") {
            Some((name, p)) => (name, p.parse().ok()),
            None => (&self.observable, None),
        }
    }
}

pub fn tagged(name: &str, p: f64) -> String {
    format!("{name}:p={p:.3}")
}

/// Name and log2 magnitude of a possibly negative value; negative values
/// get a `_neg` suffix, zero maps to -inf.
pub fn signed_log2(name: &str, value: f64) -> (String, f64) {
    if value < 0.0 {
        (format!("{name}_neg"), (-value).log2())
    } else {
        (name.to_string(), value.log2())
    }
}

pub fn read_rows(path: &Path) -> Result<Vec<Row>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let missing: Vec<&str> = CSV_HEADER.iter().copied().filter(|h| !headers.iter().any(|x| x == *h)).collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!("{} lacks columns {}", path.display(), missing.join(", "))));
    }
    let mut rows = Vec::new();
    for r in rdr.deserialize() {
        rows.push(r?);
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ProgressEntry {
    config_hash: String,
    job: usize,
    /// Data rows in the CSV once this job's rows were flushed.
    rows: usize,
}

/// Append-only CSV writer. Each job's rows are written and flushed as a
/// block, then recorded in the progress log; on resume the CSV is cut back
/// to the last recorded row count and recorded jobs are skipped.
pub struct RecordWriter {
    csv: csv::Writer<BufWriter<File>>,
    progress: BufWriter<File>,
    hash: String,
    rows: usize,
    pub completed: Vec<usize>,
}

impl RecordWriter {
    pub fn open(csv_path: &Path, progress_path: &Path, hash: &str, fresh: bool) -> Result<Self> {
        let mut completed = Vec::new();
        let mut rows = 0;
        let resume = !fresh && progress_path.exists() && csv_path.exists();
        if resume {
            let f = BufReader::new(File::open(progress_path)?);
            for line in f.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                // A torn last line from a crash is ignored.
                let Ok(e) = serde_json::from_str::<ProgressEntry>(&line) else { break };
                if e.config_hash != hash {
                    return Err(Error::Config(format!(
                        "{} belongs to a different config (hash {}); rerun with --fresh",
                        progress_path.display(),
                        e.config_hash
                    )));
                }
                completed.push(e.job);
                rows = rows.max(e.rows);
            }
            truncate_lines(csv_path, rows + 1)?;
        }
        let resume = resume && csv_path.metadata()?.len() > 0;
        let file = OpenOptions::new().create(true).append(resume).write(true).truncate(!resume).open(csv_path)?;
        let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(file));
        if !resume {
            csv.write_record(CSV_HEADER)?;
            csv.flush()?;
            completed.clear();
            rows = 0;
        }
        let progress = OpenOptions::new().create(true).append(resume).write(true).truncate(!resume).open(progress_path)?;
        Ok(RecordWriter { csv, progress: BufWriter::new(progress), hash: hash.to_string(), rows, completed })
    }

    pub fn write_job(&mut self, job: usize, rows: &[Row]) -> Result<()> {
        for r in rows {
            self.csv.serialize(r)?;
        }
        self.csv.flush()?;
        self.rows += rows.len();
        let entry = ProgressEntry { config_hash: self.hash.clone(), job, rows: self.rows };
        writeln!(self.progress, "{}", serde_json::to_string(&entry)?)?;
        self.progress.flush()?;
        self.completed.push(job);
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

/// Keeps the first `keep` lines of a text file.
fn truncate_lines(path: &Path, keep: usize) -> Result<()> {
    let text = std::fs::read_to_string(path)?;
    let mut out = String::with_capacity(text.len());
    for line in text.lines().take(keep) {
        out.push_str(line);
        out.push('\n');
    }
    if out.len() != text.len() {
        std::fs::write(path, out)?;
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Failure {
    pub job: String,
    pub error: String,
}

/// JSON summary written next to the CSV.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub config_hash: String,
    pub engine_version: String,
    pub wall_time_s: f64,
    pub rows: usize,
    pub failures: Vec<Failure>,
    pub conventions: serde_json::Value,
    pub analysis: serde_json::Value,
}

impl RunRecord {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f)?;
        f.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: usize, v: f64) -> Row {
        Row {
            experiment: "x".into(),
            n: 4,
            t,
            lambda: 0.0,
            seed: 0,
            observable: "collision".into(),
            log2_value: v,
            discarded_weight: 0.0,
        }
    }

    #[test]
    fn infinities_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("a.csv");
        let prog = dir.path().join("a.progress");
        let mut w = RecordWriter::open(&csv, &prog, "h", true).unwrap();
        w.write_job(0, &[row(0, f64::NEG_INFINITY), row(1, -3.5)]).unwrap();
        drop(w);
        let rows = read_rows(&csv).unwrap();
        assert_eq!(rows[0].log2_value, f64::NEG_INFINITY);
        assert_eq!(rows[1].log2_value, -3.5);
    }

    #[test]
    fn resume_drops_partial_job() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("a.csv");
        let prog = dir.path().join("a.progress");
        let mut w = RecordWriter::open(&csv, &prog, "h", true).unwrap();
        w.write_job(0, &[row(0, 1.0), row(1, 2.0)]).unwrap();
        drop(w);
        // Rows of an unfinished job reach the CSV but not the progress log.
        let mut f = OpenOptions::new().append(true).open(&csv).unwrap();
        writeln!(f, "x,4,2,0.0,0,collision,3.0,0.0").unwrap();
        drop(f);
        let w = RecordWriter::open(&csv, &prog, "h", false).unwrap();
        assert_eq!(w.completed, vec![0]);
        assert_eq!(w.rows(), 2);
        drop(w);
        assert_eq!(read_rows(&csv).unwrap().len(), 2);
        assert!(RecordWriter::open(&csv, &prog, "other", false).is_err());
    }

    #[test]
    fn p_tag_parses() {
        let mut r = row(0, 0.0);
        r.observable = tagged("qec_bound_noisy_only", 0.15);
        assert_eq!(r.base_observable(), ("qec_bound_noisy_only", Some(0.15)));
    }
}
