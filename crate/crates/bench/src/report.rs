//! Result records and their CSV/JSON serializations.
//!
//! Records hold no timing data, so two runs of one configuration produce
//! byte-identical reports; wall times go to a separate sidecar.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use csi_core::metrics::mean_std;
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const STATUS_OK: &str = "ok";

/// Attack column of the per-model clean-accuracy row.
pub const CLEAN_ATTACK: &str = "clean";

/// One evaluation cell. Metrics that do not apply to a row are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub dataset: String,
    pub model: String,
    pub family: String,
    pub defense: String,
    pub attack: String,
    pub method: String,
    /// Surrogate model for transfer rows.
    pub source: String,
    pub mode: String,
    pub budget_db: Option<f64>,
    pub seed: u64,
    pub clean_acc: Option<f64>,
    pub clean_f1: Option<f64>,
    /// Over samples the attacked model classifies correctly.
    pub asr: Option<f64>,
    pub racc: Option<f64>,
    pub adv_f1: Option<f64>,
    pub mean_psr_db: Option<f64>,
    pub capacity: Option<usize>,
    /// Over every test sample.
    pub asr_all: Option<f64>,
    pub fooling_rate: Option<f64>,
    pub status: String,
}

pub const COLUMNS: [&str; 20] = [
    "dataset",
    "model",
    "family",
    "defense",
    "attack",
    "method",
    "source",
    "mode",
    "budget_db",
    "seed",
    "clean_acc",
    "clean_f1",
    "asr",
    "racc",
    "adv_f1",
    "mean_psr_db",
    "capacity",
    "asr_all",
    "fooling_rate",
    "status",
];

impl ReportRecord {
    pub fn is_ok(&self) -> bool {
        self.status == STATUS_OK
    }
}

/// `None` for NaN and infinities, which neither format can carry faithfully.
pub fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
    Both,
}

impl std::str::FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "both" => Ok(Self::Both),
            _ => Err(format!("unknown format `{s}` (csv|json|both)")),
        }
    }
}

pub fn to_csv(records: &[ReportRecord]) -> Result<String> {
    let mut buf = format!("# schema_version={SCHEMA_VERSION}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        if records.is_empty() {
            w.write_record(COLUMNS).map_err(csv_err)?;
        }
        for r in records {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush().map_err(|e| BenchError::Invalid(e.to_string()))?;
    }
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

fn csv_err(e: csv::Error) -> BenchError {
    BenchError::Invalid(format!("csv: {e}"))
}

pub fn from_csv(text: &str, origin: &Path) -> Result<Vec<ReportRecord>> {
    let bad = |detail: String| BenchError::Report {
        path: origin.to_path_buf(),
        detail,
    };
    let first = text.lines().next().unwrap_or("");
    if first != format!("# schema_version={SCHEMA_VERSION}") {
        return Err(bad(format!("unsupported schema line `{first}`")));
    }
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().ne(COLUMNS) {
        return Err(bad("column set or order differs from the schema".into()));
    }
    r.deserialize().map(|row| row.map_err(|e| bad(e.to_string()))).collect()
}

#[derive(Serialize, Deserialize)]
struct JsonReport {
    schema_version: u32,
    /// Canonical configuration text the records came from.
    config: String,
    records: Vec<ReportRecord>,
}

pub fn to_json(records: &[ReportRecord], config_echo: &str) -> Result<String> {
    let doc = JsonReport {
        schema_version: SCHEMA_VERSION,
        config: config_echo.to_string(),
        records: records.to_vec(),
    };
    let mut s = serde_json::to_string_pretty(&doc).map_err(|e| BenchError::Invalid(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Returns the records and the embedded configuration text.
pub fn from_json(text: &str, origin: &Path) -> Result<(Vec<ReportRecord>, String)> {
    let doc: JsonReport = serde_json::from_str(text).map_err(|e| BenchError::Report {
        path: origin.to_path_buf(),
        detail: e.to_string(),
    })?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(BenchError::Report {
            path: origin.to_path_buf(),
            detail: format!("schema_version {} unsupported", doc.schema_version),
        });
    }
    Ok((doc.records, doc.config))
}

/// Reads a CSV or JSON report, chosen by extension.
pub fn read_report(path: &Path) -> Result<Vec<ReportRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        Ok(from_json(&text, path)?.0)
    } else {
        from_csv(&text, path)
    }
}

/// Seed statistics of one (model, defense, attack, budget) cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub model: String,
    pub defense: String,
    pub attack: String,
    pub source: String,
    pub budget_db: Option<f64>,
    /// Seeds with a finite value of the metric below.
    pub n: usize,
    pub clean_acc_mean: Option<f64>,
    pub clean_acc_std: Option<f64>,
    pub clean_f1_mean: Option<f64>,
    pub clean_f1_std: Option<f64>,
    pub asr_mean: Option<f64>,
    pub asr_std: Option<f64>,
    pub racc_mean: Option<f64>,
    pub racc_std: Option<f64>,
    pub fooling_rate_mean: Option<f64>,
    pub failed: usize,
}

/// Mean and sample standard deviation across seeds, in first-seen order.
pub fn summarize(records: &[ReportRecord]) -> Vec<SummaryRow> {
    type Key = (String, String, String, String, Option<u64>);
    let mut order: Vec<Key> = Vec::new();
    let mut groups: BTreeMap<Key, Vec<&ReportRecord>> = BTreeMap::new();
    for r in records {
        let key = (
            r.model.clone(),
            r.defense.clone(),
            r.attack.clone(),
            r.source.clone(),
            r.budget_db.map(f64::to_bits),
        );
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let rows = &groups[&key];
            let ok: Vec<&&ReportRecord> = rows.iter().filter(|r| r.is_ok()).collect();
            let stat = |f: fn(&ReportRecord) -> Option<f64>| {
                let v: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
                let (m, s) = mean_std(&v);
                (finite(m), finite(s), v.len())
            };
            let (acc_m, acc_s, _) = stat(|r| r.clean_acc);
            let (f1_m, f1_s, _) = stat(|r| r.clean_f1);
            let (asr_m, asr_s, n_asr) = stat(|r| r.asr);
            let (racc_m, racc_s, _) = stat(|r| r.racc);
            let (fool_m, _, _) = stat(|r| r.fooling_rate);
            let (model, defense, attack, source, budget) = key;
            SummaryRow {
                model,
                defense,
                attack,
                source,
                budget_db: budget.map(f64::from_bits),
                n: if asr_m.is_some() { n_asr } else { ok.len() },
                clean_acc_mean: acc_m,
                clean_acc_std: acc_s,
                clean_f1_mean: f1_m,
                clean_f1_std: f1_s,
                asr_mean: asr_m,
                asr_std: asr_s,
                racc_mean: racc_m,
                racc_std: racc_s,
                fooling_rate_mean: fool_m,
                failed: rows.len() - ok.len(),
            }
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<String> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in rows {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush().map_err(|e| BenchError::Invalid(e.to_string()))?;
    }
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

/// Fixed-width text table for terminals.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let fmt = |m: Option<f64>, s: Option<f64>| match (m, s) {
        (Some(m), Some(s)) => format!("{m:.3}±{s:.3}"),
        (Some(m), None) => format!("{m:.3}"),
        _ => "-".into(),
    };
    let mut out = format!(
        "{:<14} {:<10} {:<14} {:>7} {:>13} {:>13} {:>13}\n",
        "model", "defense", "attack", "budget", "clean_acc", "asr", "racc"
    );
    for r in rows {
        let budget = r.budget_db.map_or("-".into(), |b| format!("{b}"));
        out += &format!(
            "{:<14} {:<10} {:<14} {:>7} {:>13} {:>13} {:>13}\n",
            r.model,
            r.defense,
            r.attack,
            budget,
            fmt(r.clean_acc_mean, r.clean_acc_std),
            fmt(r.asr_mean, r.asr_std),
            fmt(r.racc_mean, r.racc_std),
        );
    }
    out
}

/// Writes `text` via a temporary file and a rename.
pub fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| BenchError::io(&tmp, e))?;
    f.write_all(text.as_bytes()).map_err(|e| BenchError::io(&tmp, e))?;
    f.sync_all().map_err(|e| BenchError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| BenchError::io(path, e))
}
