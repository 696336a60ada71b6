//! CSV and text outputs.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use upit_core::eval::{AssignmentMode, EvalReport};
use upit_core::train::TrainLog;

use crate::error::{CliError, Result};

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::format("CSV", path, format!("{other:?}")),
    }
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = writer(path)?;
    // Written explicitly so that an empty table still has its header.
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

#[derive(Serialize)]
struct TrainRow {
    epoch: usize,
    train_mse: f64,
    valid_mse: Option<f64>,
    lr: f64,
    seconds: f64,
}

pub fn write_train_log(path: &Path, log: &TrainLog) -> Result<()> {
    let rows = log.rows.iter().map(|r| TrainRow {
        epoch: r.epoch,
        train_mse: r.train_mse,
        valid_mse: r.valid_mse,
        lr: r.lr,
        seconds: r.seconds,
    });
    write_rows(path, &["epoch", "train_mse", "valid_mse", "lr", "seconds"], rows)
}

#[derive(Serialize)]
struct EvalRow<'a> {
    split: &'a str,
    utterance: &'a str,
    speaker: &'a str,
    mode: &'a str,
    sdr_in: f64,
    sdr_out: f64,
    improvement: f64,
}

/// One row per utterance, reference and assignment mode.
pub fn write_eval_report(path: &Path, reports: &[(&str, &EvalReport)]) -> Result<()> {
    let rows: Vec<_> = reports.iter().flat_map(|(split, r)| r.rows().into_iter().map(move |row| (*split, row))).collect();
    let out = rows.iter().map(|(split, row)| EvalRow {
        split,
        utterance: &row.utterance,
        speaker: &row.speaker,
        mode: row.mode.name(),
        sdr_in: row.sdr_in,
        sdr_out: row.sdr_out,
        improvement: row.improvement,
    });
    write_rows(path, &["split", "utterance", "speaker", "mode", "sdr_in", "sdr_out", "improvement"], out)
}

/// Mean SDR improvement per split and assignment mode, plus switch counts
/// and a per-speaker breakdown.
pub fn summary_table(reports: &[(&str, &EvalReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "SDR improvement (dB)");
    let _ = writeln!(out, "{:<12} {:>12} {:>12} {:>8} {:>10}", "condition", "Opt. Assign.", "Def. Assign.", "gap", "switches");
    for (split, r) in reports {
        let label = match *split {
            "valid" => "CC (valid)",
            "test" => "OC (test)",
            other => other,
        };
        let _ = writeln!(
            out,
            "{:<12} {:>12.2} {:>12.2} {:>8.2} {:>10}",
            label,
            r.mean_improvement(AssignmentMode::Optimal),
            r.mean_improvement(AssignmentMode::Default),
            r.gap(),
            r.total_switches()
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<12} {:<16} {:>8} {:>8} {:>6}", "condition", "speaker", "def", "opt", "count");
    for (split, r) in reports {
        for (speaker, d, o, n) in r.per_speaker() {
            let _ = writeln!(out, "{split:<12} {speaker:<16} {d:>8.2} {o:>8.2} {n:>6}");
        }
    }
    out
}

#[derive(Serialize)]
pub struct OracleRow {
    pub utterance: String,
    pub mask: String,
    pub speaker: String,
    pub sdr_in: f64,
    pub sdr_out: f64,
    pub improvement: f64,
}

pub fn write_oracle(path: &Path, rows: &[OracleRow]) -> Result<()> {
    write_rows(path, &["utterance", "mask", "speaker", "sdr_in", "sdr_out", "improvement"], rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use upit_core::train::EpochLog;

    #[test]
    fn train_log_header_without_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        write_train_log(&p, &TrainLog::default()).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "epoch,train_mse,valid_mse,lr,seconds\n");
        let log = TrainLog {
            rows: vec![EpochLog { epoch: 1, train_mse: 0.5, valid_mse: None, lr: 0.1, seconds: 2.0 }],
        };
        write_train_log(&p, &log).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "epoch,train_mse,valid_mse,lr,seconds\n1,0.5,,0.1,2.0\n"
        );
    }

    #[test]
    fn oracle_header_without_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("o.csv");
        write_oracle(&p, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "utterance,mask,speaker,sdr_in,sdr_out,improvement\n");
    }
}
