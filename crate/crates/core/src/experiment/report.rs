use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::bench::{two_decimals, MetricsRecord};
use crate::error::{Error, Result};

/// One (config, seed) result. Accuracies are percentages; `%Acc`/`ΔGap`
/// columns without a prefix refer to the in-distribution test split.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub variant: String,
    pub knobs: String,
    pub seed: u64,
    pub id_acc: f64,
    pub ood_acc: f64,
    pub pct_acc: Option<f64>,
    pub delta_gap: Option<f64>,
    pub id_qtype_acc: f64,
    pub ood_qtype_acc: f64,
    pub ood_pct_acc: Option<f64>,
    pub ood_delta_gap: Option<f64>,
    pub seconds: f64,
    pub digest: String,
}

pub const COLUMNS: [&str; 13] = [
    "variant",
    "knobs",
    "seed",
    "id_acc",
    "ood_acc",
    "pct_acc",
    "delta_gap",
    "id_qtype_acc",
    "ood_qtype_acc",
    "ood_pct_acc",
    "ood_delta_gap",
    "seconds",
    "digest",
];

impl ReportRow {
    /// Builds a row from the four evaluated cells (full-q/qtype on id and ood).
    #[allow(clippy::too_many_arguments)]
    pub fn from_cells(
        variant: &str,
        knobs: &str,
        seed: u64,
        id_full: &MetricsRecord,
        id_qtype: &MetricsRecord,
        ood_full: &MetricsRecord,
        ood_qtype: &MetricsRecord,
        seconds: f64,
        digest: &str,
    ) -> Self {
        Self {
            variant: variant.into(),
            knobs: knobs.into(),
            seed,
            id_acc: id_full.accuracy,
            ood_acc: ood_full.accuracy,
            pct_acc: id_full.pct_acc,
            delta_gap: id_full.delta_gap,
            id_qtype_acc: id_qtype.accuracy,
            ood_qtype_acc: ood_qtype.accuracy,
            ood_pct_acc: ood_full.pct_acc,
            ood_delta_gap: ood_full.delta_gap,
            seconds,
            digest: digest.into(),
        }
    }

    /// Equality on everything except wall-clock time.
    pub fn same_result(&self, other: &Self) -> bool {
        Self {
            seconds: 0.0,
            ..self.clone()
        } == Self {
            seconds: 0.0,
            ..other.clone()
        }
    }

    fn fields(&self) -> Vec<String> {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        vec![
            self.variant.clone(),
            self.knobs.clone(),
            self.seed.to_string(),
            self.id_acc.to_string(),
            self.ood_acc.to_string(),
            opt(self.pct_acc),
            opt(self.delta_gap),
            self.id_qtype_acc.to_string(),
            self.ood_qtype_acc.to_string(),
            opt(self.ood_pct_acc),
            opt(self.ood_delta_gap),
            self.seconds.to_string(),
            self.digest.clone(),
        ]
    }

    fn from_fields(f: &[&str]) -> Result<Self> {
        if f.len() != COLUMNS.len() {
            return Err(Error::Parse(format!("expected {} columns, got {}", COLUMNS.len(), f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse()
                .map_err(|_| Error::Parse(format!("column {}: bad number '{}'", COLUMNS[i], f[i])))
        };
        let opt = |i: usize| -> Result<Option<f64>> {
            if f[i].is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        Ok(Self {
            variant: f[0].into(),
            knobs: f[1].into(),
            seed: f[2]
                .parse()
                .map_err(|_| Error::Parse(format!("column seed: bad value '{}'", f[2])))?,
            id_acc: num(3)?,
            ood_acc: num(4)?,
            pct_acc: opt(5)?,
            delta_gap: opt(6)?,
            id_qtype_acc: num(7)?,
            ood_qtype_acc: num(8)?,
            ood_pct_acc: opt(9)?,
            ood_delta_gap: opt(10)?,
            seconds: num(11)?,
            digest: f[12].into(),
        })
    }
}

/// Median over seeds of one (variant, knobs) group.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub variant: String,
    pub knobs: String,
    pub seeds: usize,
    pub id_acc: f64,
    pub ood_acc: f64,
    pub pct_acc: Option<f64>,
    pub delta_gap: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Table,
}

impl FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "table" => Ok(ReportFormat::Table),
            _ => Err(Error::Parse(format!("unknown report format '{s}' (expected csv or table)"))),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Table => "table",
        })
    }
}

/// Median of a non-empty slice (mean of the two middle values for even length).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Canonical ordering: by variant, then seed, then knobs.
pub fn sort_rows(rows: &mut [ReportRow]) {
    rows.sort_by(|a, b| {
        a.variant
            .cmp(&b.variant)
            .then(a.seed.cmp(&b.seed))
            .then(a.knobs.cmp(&b.knobs))
    });
}

pub fn aggregate(rows: &[ReportRow]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, String), Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.variant.clone(), r.knobs.clone())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((variant, knobs), g)| {
            let col = |f: &dyn Fn(&ReportRow) -> Option<f64>| {
                median(&g.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
            };
            AggregateRow {
                seeds: g.len(),
                id_acc: col(&|r| Some(r.id_acc)).unwrap_or(f64::NAN),
                ood_acc: col(&|r| Some(r.ood_acc)).unwrap_or(f64::NAN),
                pct_acc: col(&|r| r.pct_acc),
                delta_gap: col(&|r| r.delta_gap),
                variant,
                knobs,
            }
        })
        .collect()
}

fn csv_text(header: &[&str], records: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in records {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

fn fmt2(x: Option<f64>) -> String {
    match x {
        Some(v) if v.is_finite() => format!("{:.2}", two_decimals(v)),
        _ => "-".into(),
    }
}

fn table_text(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<String>| {
        cells
            .iter()
            .zip(&width)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header.iter().map(|s| s.to_string()).collect());
    out.push('\n');
    out.push_str(&line(width.iter().map(|w| "-".repeat(*w)).collect()));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.clone()));
        out.push('\n');
    }
    out
}

/// Renders rows (sorted canonically) or their per-config medians.
pub fn emit_report(rows: &[ReportRow], format: ReportFormat, aggregated: bool) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Usage("report needs at least one row".into()));
    }
    if aggregated {
        let agg = aggregate(rows);
        let header = ["variant", "knobs", "seeds", "id_acc", "ood_acc", "pct_acc", "delta_gap"];
        return match format {
            ReportFormat::Csv => csv_text(
                &header,
                agg.iter().map(|a| {
                    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
                    vec![
                        a.variant.clone(),
                        a.knobs.clone(),
                        a.seeds.to_string(),
                        a.id_acc.to_string(),
                        a.ood_acc.to_string(),
                        opt(a.pct_acc),
                        opt(a.delta_gap),
                    ]
                }),
            ),
            ReportFormat::Table => Ok(table_text(
                &header,
                &agg.iter()
                    .map(|a| {
                        vec![
                            a.variant.clone(),
                            a.knobs.clone(),
                            a.seeds.to_string(),
                            fmt2(Some(a.id_acc)),
                            fmt2(Some(a.ood_acc)),
                            fmt2(a.pct_acc),
                            fmt2(a.delta_gap),
                        ]
                    })
                    .collect::<Vec<_>>(),
            )),
        };
    }
    let mut sorted = rows.to_vec();
    sort_rows(&mut sorted);
    match format {
        ReportFormat::Csv => csv_text(&COLUMNS, sorted.iter().map(ReportRow::fields)),
        ReportFormat::Table => {
            let header = &COLUMNS[..11];
            let body: Vec<Vec<String>> = sorted
                .iter()
                .map(|r| {
                    vec![
                        r.variant.clone(),
                        r.knobs.clone(),
                        r.seed.to_string(),
                        fmt2(Some(r.id_acc)),
                        fmt2(Some(r.ood_acc)),
                        fmt2(r.pct_acc),
                        fmt2(r.delta_gap),
                        fmt2(Some(r.id_qtype_acc)),
                        fmt2(Some(r.ood_qtype_acc)),
                        fmt2(r.ood_pct_acc),
                        fmt2(r.ood_delta_gap),
                    ]
                })
                .collect();
            Ok(table_text(header, &body))
        }
    }
}

/// Parses CSV produced by [`emit_report`] (non-aggregated).
pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != COLUMNS {
        return Err(Error::Parse(format!("unexpected report header: {header:?}")));
    }
    r.records()
        .map(|rec| {
            let rec = rec?;
            ReportRow::from_fields(&rec.iter().collect::<Vec<_>>())
        })
        .collect()
}

/// Appends rows to a CSV file body, writing the header only when `existing` is empty.
pub fn append_rows(existing: &str, rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    if existing.trim().is_empty() {
        w.write_record(COLUMNS)?;
    }
    for r in rows {
        w.write_record(r.fields())?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(format!("{existing}{}", String::from_utf8_lossy(&bytes)))
}
