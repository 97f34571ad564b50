//! Machine-readable records and human-readable tables for protocol runs,
//! sweeps and embedding dumps.
//!
//! Record files are JSON Lines whose lines carry a `"record"` tag. The first
//! line is always the `meta` record.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use gafl_core::eval::{KMetrics, ProtocolReport, SkippedTrial, SummaryRow, SweepPoint};
use gafl_core::{Dataset, Gaf, TrialResult, Variant};
use serde::{Deserialize, Serialize};

use crate::artifact::ArtifactMeta;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "kebab-case")]
pub enum RecordLine {
    Meta(ArtifactMeta),
    Trial(TrialResult),
    Skipped(SkippedTrial),
    SweepPoint(SweepPoint),
}

fn jsonl(lines: impl Iterator<Item = RecordLine>) -> String {
    let mut out = String::new();
    for line in lines {
        out.push_str(&serde_json::to_string(&line).expect("records serialize"));
        out.push('\n');
    }
    out
}

/// One line per trial and per skipped trial, in plan order.
pub fn protocol_records(meta: &ArtifactMeta, report: &ProtocolReport) -> String {
    let head = std::iter::once(RecordLine::Meta(meta.clone()));
    let trials = report.records.iter().cloned().map(RecordLine::Trial);
    let skipped = report.skipped.iter().cloned().map(RecordLine::Skipped);
    jsonl(head.chain(trials).chain(skipped))
}

pub fn sweep_records(meta: &ArtifactMeta, points: &[SweepPoint]) -> String {
    let head = std::iter::once(RecordLine::Meta(meta.clone()));
    jsonl(head.chain(points.iter().cloned().map(RecordLine::SweepPoint)))
}

pub fn parse_records(text: &str, origin: &Path) -> Result<Vec<RecordLine>> {
    let mut offset = 0;
    let mut out = Vec::new();
    for (k, line) in text.split_inclusive('\n').enumerate() {
        let start = offset;
        offset += line.len();
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: k + 1,
            offset: start,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<RecordLine>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(&text, path)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn metric_columns(ks: &[usize], others: bool) -> Vec<String> {
    let mut cols = Vec::new();
    for scope in if others { ["orig", "others"].as_slice() } else { ["orig"].as_slice() } {
        for k in ks {
            cols.push(format!("P@{k} {scope}"));
        }
        for k in ks {
            cols.push(format!("Hit@{k} {scope}"));
        }
    }
    cols
}

fn metric_cells(original: &[KMetrics], others: &[KMetrics], ks: &[usize], with_others: bool) -> Vec<String> {
    let find = |set: &[KMetrics], k: usize, pick: fn(&KMetrics) -> f64| {
        set.iter().find(|m| m.k == k).map_or_else(|| "-".to_string(), |m| format!("{:.3}", pick(m)))
    };
    let mut cells = Vec::new();
    let sets: &[&[KMetrics]] = if with_others { &[original, others] } else { &[original] };
    for set in sets {
        cells.extend(ks.iter().map(|&k| find(set, k, |m| m.precision)));
        cells.extend(ks.iter().map(|&k| find(set, k, |m| m.hit)));
    }
    cells
}

fn render(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| -> String {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        padded.join("  ").trim_end().to_string()
    };
    let mut out = String::new();
    writeln!(out, "{}", line(header)).unwrap();
    writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  ")).unwrap();
    for row in rows {
        writeln!(out, "{}", line(row)).unwrap();
    }
    out
}

fn ks_of(rows: &[SummaryRow]) -> Vec<usize> {
    rows.first().map_or_else(Vec::new, |r| r.metrics.original.iter().map(|m| m.k).collect())
}

/// Per-class and overall rows of every variant.
pub fn summary_table(summary: &[SummaryRow]) -> String {
    let ks = ks_of(summary);
    let with_others = summary.iter().any(|r| !r.metrics.others.is_empty());
    let mut header = vec!["variant".to_string(), "class".to_string(), "trials".to_string()];
    header.extend(metric_columns(&ks, with_others));
    let rows: Vec<Vec<String>> = summary
        .iter()
        .map(|r| {
            let mut row = vec![
                r.variant.to_string(),
                r.class.clone().unwrap_or_else(|| "(weighted)".into()),
                r.trials.to_string(),
            ];
            row.extend(metric_cells(&r.metrics.original, &r.metrics.others, &ks, with_others));
            row
        })
        .collect();
    render(&header, &rows)
}

/// Overall rows only, with the change of each metric against the
/// pre-trained baseline when it is present.
pub fn comparison_table(summary: &[SummaryRow]) -> String {
    let overall: Vec<&SummaryRow> = summary.iter().filter(|r| r.class.is_none()).collect();
    let ks = ks_of(summary);
    let with_others = overall.iter().any(|r| !r.metrics.others.is_empty());
    let baseline = overall.iter().find(|r| r.variant == Variant::Pretrained);
    let mut header = vec!["variant".to_string(), "trials".to_string()];
    header.extend(metric_columns(&ks, with_others));
    if baseline.is_some() {
        header.extend(ks.iter().map(|k| format!("ΔP@{k} orig")));
    }
    let rows: Vec<Vec<String>> = overall
        .iter()
        .map(|r| {
            let mut row = vec![r.variant.to_string(), r.trials.to_string()];
            row.extend(metric_cells(&r.metrics.original, &r.metrics.others, &ks, with_others));
            if let Some(b) = baseline {
                for &k in &ks {
                    let delta = r.metrics.original_precision(k).zip(b.metrics.original_precision(k)).map(|(x, y)| x - y);
                    row.push(delta.map_or_else(|| "-".into(), |d| format!("{d:+.3}")));
                }
            }
            row
        })
        .collect();
    render(&header, &rows)
}

pub fn sweep_table(points: &[SweepPoint]) -> String {
    let ks: Vec<usize> = points.first().map_or_else(Vec::new, |p| p.metrics.original.iter().map(|m| m.k).collect());
    let with_others = points.iter().any(|p| !p.metrics.others.is_empty());
    let mut header = vec!["param".to_string(), "value".to_string(), "trials".to_string()];
    header.extend(metric_columns(&ks, with_others));
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            let mut row = vec![p.parameter.name().to_string(), p.value.to_string(), p.trials.to_string()];
            row.extend(metric_cells(&p.metrics.original, &p.metrics.others, &ks, with_others));
            row
        })
        .collect();
    render(&header, &rows)
}

/// Full report as one JSON document: metadata, summary rows and skips.
pub fn summary_json(meta: &ArtifactMeta, report: &ProtocolReport) -> String {
    #[derive(Serialize)]
    struct Doc<'a> {
        meta: &'a ArtifactMeta,
        summary: &'a [SummaryRow],
        skipped: &'a [SkippedTrial],
    }
    let mut s = serde_json::to_string_pretty(&Doc { meta, summary: &report.summary, skipped: &report.skipped })
        .expect("summary serializes");
    s.push('\n');
    s
}

/// CSV of GAFs: a `#` comment with the metadata, a header
/// `id,split,class,g0,...`, then one row per video in dataset order.
pub fn embeddings_csv(meta: &ArtifactMeta, dataset: &Dataset, gafs: &[Gaf]) -> Result<String> {
    if gafs.len() != dataset.len() {
        return Err(Error::Invalid(format!("{} embeddings for {} videos", gafs.len(), dataset.len())));
    }
    let mut out = format!(
        "# {} {} seed={} config={}\n",
        meta.tool, meta.tool_version, meta.seed, meta.config_hash
    );
    let mut writer = csv::Writer::from_writer(Vec::new());
    let width = gafs.first().map_or(0, |g| g.len());
    let mut header = vec!["id".to_string(), "split".to_string(), "class".to_string()];
    header.extend((0..width).map(|d| format!("g{d}")));
    writer.write_record(&header).map_err(|e| Error::Invalid(e.to_string()))?;
    for (entry, g) in dataset.entries.iter().zip(gafs) {
        let mut row = vec![
            entry.video.id.clone(),
            entry.split.as_str().to_string(),
            entry.video.class_label.clone().unwrap_or_default(),
        ];
        row.extend(g.iter().map(|x| x.to_string()));
        writer.write_record(&row).map_err(|e| Error::Invalid(e.to_string()))?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    out.push_str(std::str::from_utf8(&bytes).expect("CSV of UTF-8 fields"));
    Ok(out)
}
