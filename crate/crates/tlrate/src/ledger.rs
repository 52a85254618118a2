//! Append-only JSON-lines ledger of run records.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use tlrate_core::experiment::SweepRecord;

use crate::error::{io_at, Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ledger {
    pub records: Vec<SweepRecord>,
    /// Lines that did not parse as a record.
    pub skipped: usize,
}

pub fn encode_record(record: &SweepRecord) -> Result<String> {
    serde_json::to_string(record).map_err(|e| Error::Format {
        what: "ledger record",
        reason: e.to_string(),
    })
}

pub fn append_records(path: &Path, records: &[SweepRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&encode_record(r)?);
        text.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_at(dir))?;
    }
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(io_at(path))
}

pub fn parse_ledger(text: &str) -> Ledger {
    let mut out = Ledger::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match serde_json::from_str::<SweepRecord>(line) {
            Ok(r) => out.records.push(r),
            Err(_) => out.skipped += 1,
        }
    }
    out
}

pub fn read_ledger(path: &Path) -> Result<Ledger> {
    Ok(parse_ledger(
        &fs::read_to_string(path).map_err(io_at(path))?,
    ))
}
