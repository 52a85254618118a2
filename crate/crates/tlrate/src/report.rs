//! Tables recomputed from ledger records.
//!
//! When the ledger holds several records for the same cell the first one
//! wins, so appending a rerun never changes an existing report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use tlrate_core::experiment::{
    analyze_scale_sweep, percent_gain, summarize_grid, LlSummary, RecordKind, ScaleSweepReport,
    SweepRecord, ACCURACY_METRIC,
};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadOnlyRow {
    pub target: String,
    pub source: String,
    /// Aligned with [`HeadOnlyTable::ll_values`].
    pub accuracy: Vec<Option<f64>>,
    /// Gain of the best LL over the worst, in percent.
    pub gain: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadOnlyTable {
    pub ll_values: Vec<f64>,
    pub rows: Vec<HeadOnlyRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub target: String,
    pub source: String,
    pub per_ll: Vec<LlSummary>,
    pub max_difference: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GridTable {
    pub ll_values: Vec<f64>,
    pub rows: Vec<GridRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSection {
    pub source: String,
    pub summary: ScaleSweepReport,
    /// Tasks left out because some scale is missing.
    pub incomplete_tasks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub metric: String,
    pub partial: bool,
    pub failures: Vec<String>,
    pub skipped_lines: usize,
    pub head_only: HeadOnlyTable,
    pub grid: GridTable,
    pub scale: Vec<ScaleSection>,
}

type Key = (String, String);

fn key(r: &SweepRecord) -> Key {
    (r.task.clone(), r.source.clone())
}

fn sorted_unique(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

fn head_only(records: &[SweepRecord]) -> Result<HeadOnlyTable> {
    let mut cells: BTreeMap<Key, Vec<(f64, f64)>> = BTreeMap::new();
    for r in records {
        let head_only =
            r.kind == RecordKind::LastLayer || (r.kind == RecordKind::Grid && r.il == Some(0.0));
        let Some(ll) = r.ll.filter(|_| head_only) else {
            continue;
        };
        let row = cells.entry(key(r)).or_default();
        if !row.iter().any(|c| c.0 == ll) {
            row.push((ll, r.accuracy()));
        }
    }
    let ll_values = sorted_unique(cells.values().flatten().map(|c| c.0));
    let mut rows = Vec::new();
    for ((target, source), row) in cells {
        let accuracy: Vec<Option<f64>> = ll_values
            .iter()
            .map(|ll| row.iter().find(|c| c.0 == *ll).map(|c| c.1))
            .collect();
        let present: Vec<f64> = row.iter().map(|c| c.1).collect();
        let gain = if present.len() < 2 {
            None
        } else {
            let best = present.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let worst = present.iter().cloned().fold(f64::INFINITY, f64::min);
            (worst > 0.0)
                .then(|| percent_gain(best, worst))
                .transpose()?
        };
        rows.push(HeadOnlyRow {
            target,
            source,
            accuracy,
            gain,
        });
    }
    Ok(HeadOnlyTable { ll_values, rows })
}

fn grid(records: &[SweepRecord]) -> Result<GridTable> {
    let mut cells: BTreeMap<Key, Vec<&SweepRecord>> = BTreeMap::new();
    for r in records
        .iter()
        .filter(|r| r.kind == RecordKind::Grid && r.ll.is_some() && r.il.is_some())
    {
        let row = cells.entry(key(r)).or_default();
        if !row.iter().any(|c| c.ll == r.ll && c.il == r.il) {
            row.push(r);
        }
    }
    let mut rows = Vec::new();
    for ((target, source), row) in cells {
        let (per_ll, max_difference) = summarize_grid(&row)?;
        rows.push(GridRow {
            target,
            source,
            per_ll,
            max_difference,
        });
    }
    let ll_values = sorted_unique(rows.iter().flat_map(|r| r.per_ll.iter().map(|s| s.ll)));
    Ok(GridTable { ll_values, rows })
}

fn scale(records: &[SweepRecord]) -> Result<Vec<ScaleSection>> {
    let mut by_source: BTreeMap<&str, Vec<&SweepRecord>> = BTreeMap::new();
    for r in records {
        let cell_taken = |rs: &Vec<&SweepRecord>| {
            rs.iter()
                .any(|c| c.task == r.task && c.kind == r.kind && c.scale == r.scale)
        };
        if matches!(r.kind, RecordKind::Scale | RecordKind::Baseline)
            && (r.kind == RecordKind::Baseline || r.scale.is_some())
        {
            let rs = by_source.entry(&r.source).or_default();
            if !cell_taken(rs) {
                rs.push(r);
            }
        }
    }
    let mut out = Vec::new();
    for (source, rs) in by_source {
        let scales: BTreeSet<u64> = rs
            .iter()
            .filter_map(|r| r.scale)
            .map(f64::to_bits)
            .collect();
        let mut per_task: BTreeMap<&str, usize> = BTreeMap::new();
        for r in rs.iter().filter(|r| r.kind == RecordKind::Scale) {
            *per_task.entry(&r.task).or_default() += 1;
        }
        let incomplete: Vec<String> = rs
            .iter()
            .map(|r| r.task.as_str())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .filter(|t| per_task.get(t).copied().unwrap_or(0) != scales.len())
            .map(str::to_owned)
            .collect();
        let complete: Vec<&SweepRecord> = rs
            .into_iter()
            .filter(|r| !incomplete.contains(&r.task))
            .collect();
        if complete.iter().all(|r| r.kind != RecordKind::Scale) {
            continue;
        }
        out.push(ScaleSection {
            source: source.to_owned(),
            summary: analyze_scale_sweep(&complete)?,
            incomplete_tasks: incomplete,
        });
    }
    Ok(out)
}

/// Builds every table from `records`. `failures` lists jobs that did not
/// produce a record; any failure or incomplete sweep marks the report partial.
pub fn build_report(
    records: &[SweepRecord],
    failures: &[String],
    skipped_lines: usize,
) -> Result<Report> {
    let scale = scale(records)?;
    let partial = !failures.is_empty() || scale.iter().any(|s| !s.incomplete_tasks.is_empty());
    Ok(Report {
        metric: ACCURACY_METRIC.into(),
        partial,
        failures: failures.to_vec(),
        skipped_lines,
        head_only: head_only(records)?,
        grid: grid(records)?,
        scale,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |a| format!("{:.2}%", 100.0 * a))
}

fn render_table(out: &mut String, header: &[String], rows: &[Vec<String>]) {
    let mut width: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in width.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |out: &mut String, cells: &[String]| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&width).enumerate() {
            let pad = w - c.chars().count();
            if i > 0 {
                s.push_str("  ");
            }
            if i < 2 {
                s.push_str(c);
                s.extend(std::iter::repeat_n(' ', pad));
            } else {
                s.extend(std::iter::repeat_n(' ', pad));
                s.push_str(c);
            }
        }
        out.push_str(s.trim_end());
        out.push('\n');
    };
    line(out, header);
    let total = width.iter().sum::<usize>() + 2 * width.len().saturating_sub(1);
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for row in rows {
        line(out, row);
    }
}

pub fn render_text(report: &Report) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "accuracy: {}", report.metric);
    if report.partial {
        let _ = writeln!(out, "status: PARTIAL");
    }
    if report.skipped_lines > 0 {
        let _ = writeln!(out, "skipped ledger lines: {}", report.skipped_lines);
    }
    for f in &report.failures {
        let _ = writeln!(out, "failed: {f}");
    }

    out.push_str("\nHead-only finetuning\n");
    let t = &report.head_only;
    let mut header = vec!["Target".to_string(), "Source".to_string()];
    header.extend(t.ll_values.iter().map(|ll| format!("LL-{ll}")));
    header.push("%Gain".into());
    let rows: Vec<Vec<String>> = t
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![r.target.clone(), r.source.clone()];
            row.extend(r.accuracy.iter().map(|a| pct(*a)));
            row.push(r.gain.map_or_else(|| "-".into(), |g| format!("{g:.2}%")));
            row
        })
        .collect();
    render_table(&mut out, &header, &rows);

    out.push_str("\nInner-layer grid\n");
    let g = &report.grid;
    let mut header = vec!["Target".to_string(), "Source".to_string()];
    for ll in &g.ll_values {
        header.push(format!("α_{ll}"));
        header.push(format!("β_{ll}"));
    }
    if let (Some(lo), Some(hi)) = (g.ll_values.first(), g.ll_values.last()) {
        header.push(format!("max_{hi}-max_{lo}"));
    }
    let rows: Vec<Vec<String>> = g
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![r.target.clone(), r.source.clone()];
            for ll in &g.ll_values {
                match r.per_ll.iter().find(|s| s.ll == *ll) {
                    Some(s) => {
                        row.push(format!("{}", s.alpha));
                        row.push(format!("{:.2}", s.beta));
                    }
                    None => row.extend(["-".to_string(), "-".to_string()]),
                }
            }
            if !g.ll_values.is_empty() {
                row.push(
                    r.max_difference
                        .map_or_else(|| "-".into(), |d| format!("{:.2}%", 100.0 * d)),
                );
            }
            row
        })
        .collect();
    render_table(&mut out, &header, &rows);

    for s in &report.scale {
        let r = &s.summary;
        let _ = writeln!(
            out,
            "\nScale sweep from {} ({} tasks, {} jobs)",
            s.source, r.tasks, r.jobs
        );
        let rows: Vec<Vec<String>> = r
            .per_scale_mean
            .iter()
            .map(|(scale, mean)| vec![format!("{scale}"), String::new(), pct(Some(*mean))])
            .collect();
        render_table(
            &mut out,
            &["scale".into(), String::new(), "mean".into()],
            &rows,
        );
        let _ = writeln!(
            out,
            "best scale per task: {}",
            pct(Some(r.best_per_task_mean))
        );
        let _ = writeln!(
            out,
            "most frequent best scale {}: {}",
            r.most_frequent_best_scale,
            pct(Some(r.fixed_scale_mean))
        );
        let _ = writeln!(
            out,
            "worst fixed scale: {}",
            pct(Some(r.worst_fixed_scale_mean))
        );
        let _ = writeln!(out, "head-only baseline: {}", pct(r.baseline_mean));
        for (task, scale) in &r.best_scale_per_task {
            let _ = writeln!(out, "  {task}: {scale}");
        }
        if !s.incomplete_tasks.is_empty() {
            let _ = writeln!(out, "incomplete: {}", s.incomplete_tasks.join(", "));
        }
    }
    out
}

pub fn render_json(report: &Report) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report is plain data");
    s.push('\n');
    s
}
