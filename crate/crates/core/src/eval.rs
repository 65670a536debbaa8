//! Top-K recall over distance matrices and recall report files.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::DistanceMatrix;

/// The fixed K values reported next to r@1%.
pub const STANDARD_KS: [usize; 3] = [1, 5, 10];

/// `max(1, floor(0.01 · N))`.
pub fn one_percent_k(gallery_size: usize) -> usize {
    (gallery_size / 100).max(1)
}

/// 1-based rank of every query's true match. Ties in distance go to the
/// smaller gallery index.
pub fn true_match_ranks(d: &DistanceMatrix) -> Result<Vec<usize>> {
    let truth = d.ground_truth()?;
    Ok(truth
        .iter()
        .enumerate()
        .map(|(q, &t)| {
            let row = d.row(q);
            let target = row[t];
            1 + row
                .iter()
                .enumerate()
                .filter(|&(g, &v)| v < target || (v == target && g < t))
                .count()
        })
        .collect())
}

/// Fraction of queries whose true match ranks within the top `k`.
pub fn recall_at_k(d: &DistanceMatrix, k: usize) -> Result<f64> {
    if k == 0 || k > d.cols() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside 1..={} (gallery size)",
            d.cols()
        )));
    }
    let ranks = true_match_ranks(d)?;
    Ok(recall_from_ranks(&ranks, k))
}

fn recall_from_ranks(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    pub label: String,
    pub k: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub config_hash: String,
    pub seed: u64,
    /// FoV the evaluated weights were trained with, when known.
    pub trained_fov_deg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    /// FoV of the ground queries.
    pub fov_deg: f64,
    pub gallery_size: usize,
    pub query_count: usize,
    pub entries: Vec<RecallEntry>,
    pub provenance: ReportProvenance,
}

impl RecallReport {
    pub fn recall(&self, label: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.label == label).map(|e| e.recall)
    }

    /// Recalls never decrease as K grows.
    pub fn is_monotone(&self) -> bool {
        let mut sorted: Vec<_> = self.entries.iter().collect();
        sorted.sort_by_key(|e| e.k);
        sorted.windows(2).all(|w| w[0].recall <= w[1].recall)
    }
}

/// r@1, r@5, r@10 and r@1% of `d`. K values above the gallery size are
/// clamped to it.
pub fn recall_report(d: &DistanceMatrix, fov_deg: f64, provenance: ReportProvenance) -> Result<RecallReport> {
    let n = d.cols();
    if n < 1 {
        return Err(Error::InvalidArgument("gallery must contain at least one item".into()));
    }
    let ranks = true_match_ranks(d)?;
    let mut entries = Vec::with_capacity(4);
    let labelled = STANDARD_KS
        .iter()
        .map(|&k| (format!("r@{k}"), k))
        .chain(std::iter::once(("r@1%".to_string(), one_percent_k(n))));
    for (label, k) in labelled {
        let used = if k > n {
            log::warn!("{label}: k = {k} exceeds gallery size {n}, clamping");
            n
        } else {
            k
        };
        entries.push(RecallEntry {
            label,
            k: used,
            recall: recall_from_ranks(&ranks, used),
        });
    }
    Ok(RecallReport {
        fov_deg,
        gallery_size: n,
        query_count: d.rows(),
        entries,
        provenance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::UnsupportedFormat(s.to_string())),
        }
    }
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

/// CSV layout: `#`-prefixed metadata lines followed by `fov,k,label,recall`.
pub fn report_to_csv(r: &RecallReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# gallery_size = {}", r.gallery_size);
    let _ = writeln!(out, "# query_count = {}", r.query_count);
    let _ = writeln!(out, "# config_hash = {}", r.provenance.config_hash);
    let _ = writeln!(out, "# seed = {}", r.provenance.seed);
    if let Some(t) = r.provenance.trained_fov_deg {
        let _ = writeln!(out, "# trained_fov = {t:?}");
    }
    out.push_str("fov,k,label,recall\n");
    for e in &r.entries {
        let _ = writeln!(out, "{:?},{},{},{:?}", r.fov_deg, e.k, e.label, e.recall);
    }
    out
}

pub fn report_from_csv(text: &str) -> Result<RecallReport> {
    let bad = |msg: String| Error::Format(format!("recall report: {msg}"));
    let mut meta = std::collections::HashMap::new();
    let mut body = String::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once('=') {
                meta.insert(k.trim().to_string(), v.trim().to_string());
            }
        } else {
            body.push_str(line);
            body.push('\n');
        }
    }
    let field = |k: &str| meta.get(k).cloned().ok_or_else(|| bad(format!("missing `{k}`")));
    let num = |k: &str| -> Result<usize> { field(k)?.parse().map_err(|e| bad(format!("`{k}`: {e}"))) };
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let mut fov = None;
    let mut entries = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 4 {
            return Err(bad(format!("expected 4 columns, got {}", rec.len())));
        }
        let f: f64 = rec[0].parse().map_err(|e| bad(format!("fov: {e}")))?;
        fov = Some(f);
        entries.push(RecallEntry {
            k: rec[1].parse().map_err(|e| bad(format!("k: {e}")))?,
            label: rec[2].to_string(),
            recall: rec[3].parse().map_err(|e| bad(format!("recall: {e}")))?,
        });
    }
    Ok(RecallReport {
        fov_deg: fov.ok_or_else(|| bad("no rows".into()))?,
        gallery_size: num("gallery_size")?,
        query_count: num("query_count")?,
        entries,
        provenance: ReportProvenance {
            config_hash: field("config_hash")?,
            seed: field("seed")?.parse().map_err(|e| bad(format!("seed: {e}")))?,
            trained_fov_deg: meta
                .get("trained_fov")
                .map(|v| v.parse().map_err(|e| bad(format!("trained_fov: {e}"))))
                .transpose()?,
        },
    })
}

pub fn report_to_string(r: &RecallReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Csv => Ok(report_to_csv(r)),
        ReportFormat::Json => serde_json::to_string_pretty(r).map_err(|e| Error::Format(e.to_string())),
    }
}

pub fn emit_report(r: &RecallReport, path: &Path, format: ReportFormat) -> Result<()> {
    std::fs::write(path, report_to_string(r, format)?).map_err(|e| Error::io(path, e))
}

/// Reads a report, choosing the parser from the file extension.
pub fn read_report(path: &Path) -> Result<RecallReport> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let format: ReportFormat = ext.parse()?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        ReportFormat::Csv => report_from_csv(&text),
        ReportFormat::Json => serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string())),
    }
}

/// One row per (trained, tested) FoV pair: `trained_fov,tested_fov,r@1,r@5,r@10,r@1%`.
pub fn fov_grid_csv(cells: &[(f64, RecallReport)]) -> String {
    let mut out = String::from("trained_fov,tested_fov,r@1,r@5,r@10,r@1%\n");
    for (trained, r) in cells {
        let _ = write!(out, "{trained:?},{:?}", r.fov_deg);
        for label in ["r@1", "r@5", "r@10", "r@1%"] {
            let _ = write!(out, ",{:?}", r.recall(label).unwrap_or(f64::NAN));
        }
        out.push('\n');
    }
    out
}
