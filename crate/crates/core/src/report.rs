//! Summary tables (CSV and Markdown) and SVG box plots rendered from a
//! records CSV. Output is a pure function of the records.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::metrics::{mean_std, read_records, Metric, MetricError, MetricsRecord, IRV_CONFIG};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_MD: &str = "summary.md";

pub fn boxplot_file(m: Metric) -> String {
    format!("boxplot_{}.svg", m.name().to_lowercase())
}

/// Column order: 2-D before 3-D, single modalities before combinations,
/// unknown ids alphabetically, the inter-reader column last.
fn column_key(id: &str) -> (u8, u8, String) {
    if id == IRV_CONFIG {
        return (9, 0, String::new());
    }
    let (dim, mods) = id.split_once(' ').unwrap_or((id, ""));
    let d = match dim {
        "2D" => 0,
        "3D" => 1,
        _ => 5,
    };
    let m = match mods {
        "T1" => 0,
        "T2" => 1,
        "T1+T2" => 2,
        _ => 5,
    };
    (d, m, id.to_string())
}

/// Header label: combined modalities in brackets, e.g. `2D [T1+T2]`.
pub fn column_label(id: &str) -> String {
    match id.split_once(' ') {
        Some((d, m)) if m.contains('+') => format!("{d} [{m}]"),
        _ => id.to_string(),
    }
}

fn columns(records: &[MetricsRecord]) -> Vec<String> {
    let mut ids: Vec<String> = records.iter().map(|r| r.config_id.clone()).collect();
    ids.sort_by_key(|id| column_key(id));
    ids.dedup();
    ids
}

fn values(records: &[MetricsRecord], config: &str, m: Metric) -> Vec<f64> {
    records.iter().filter(|r| r.config_id == config).filter_map(|r| r.metric(m)).collect()
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

pub struct SummaryTables {
    pub csv: String,
    pub markdown: String,
}

/// Mean and population std per metric (rows) and configuration (columns), in percent.
pub fn render_summary(records: &[MetricsRecord]) -> Result<SummaryTables, MetricError> {
    if records.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let cols = columns(records);
    let mut cells: BTreeMap<(Metric, usize), Option<(f64, f64)>> = BTreeMap::new();
    for m in Metric::ALL {
        for (i, c) in cols.iter().enumerate() {
            let v = values(records, c, m);
            cells.insert((m, i), (!v.is_empty()).then(|| mean_std(&v)));
        }
    }
    let cell = |m: Metric, i: usize, std: bool| match cells[&(m, i)] {
        Some((mean, sd)) => pct(if std { sd } else { mean }),
        None => "n/a".to_string(),
    };
    let labels: Vec<String> = cols.iter().map(|c| column_label(c)).collect();

    let mut csv = String::new();
    writeln!(csv, "metric,statistic,{}", labels.join(",")).unwrap();
    for m in Metric::ALL {
        for (stat, std) in [("mean", false), ("std", true)] {
            let row: Vec<String> = (0..cols.len()).map(|i| cell(m, i, std)).collect();
            writeln!(csv, "{},{stat},{}", m.name(), row.join(",")).unwrap();
        }
    }

    let mut md = String::new();
    writeln!(md, "| Metric | | {} |", labels.join(" | ")).unwrap();
    writeln!(md, "|---|---|{}", "---:|".repeat(cols.len())).unwrap();
    for m in Metric::ALL {
        for (stat, std) in [("mean", false), ("std", true)] {
            let row: Vec<String> = (0..cols.len()).map(|i| cell(m, i, std)).collect();
            let name = if std { "" } else { m.name() };
            writeln!(md, "| {name} | {stat} | {} |", row.join(" | ")).unwrap();
        }
    }
    writeln!(md).unwrap();
    let counts: Vec<String> = cols
        .iter()
        .zip(&labels)
        .map(|(c, l)| format!("{l}: {}", records.iter().filter(|r| &r.config_id == c).count()))
        .collect();
    writeln!(md, "Values in percent. std is the population standard deviation. Patients per column: {}.", counts.join(", ")).unwrap();
    let skipped: usize = Metric::ALL
        .iter()
        .map(|&m| records.iter().filter(|r| r.metric(m).is_none()).count())
        .sum();
    if skipped > 0 {
        writeln!(md, "{skipped} undefined metric values (zero denominator) were left out.").unwrap();
    }
    Ok(SummaryTables { csv, markdown: md })
}

/// Quantile with linear interpolation between order statistics at `(n − 1)·p`.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * p;
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + f * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    /// Most extreme values within 1.5 IQR of the box.
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    pub outliers: Vec<f64>,
    pub n: usize,
}

pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = v.iter().copied().filter(|x| *x >= lo_fence && *x <= hi_fence).collect();
    let outliers = v.iter().copied().filter(|x| *x < lo_fence || *x > hi_fence).collect();
    Some(BoxStats {
        q1,
        median,
        q3,
        whisker_lo: inside.first().copied().unwrap_or(q1),
        whisker_hi: inside.last().copied().unwrap_or(q3),
        outliers,
        n: v.len(),
    })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One box per configuration for a single metric, y axis 0–100 %.
pub fn render_boxplot(records: &[MetricsRecord], metric: Metric) -> Result<String, MetricError> {
    if records.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let cols = columns(records);
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 90.0);
    let col_w = 110.0;
    let plot_h = 300.0;
    let width = left + right + col_w * cols.len() as f64;
    let height = top + plot_h + bottom;
    let y = |v: f64| top + plot_h * (1.0 - v.clamp(0.0, 1.0));
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect x="0" y="0" width="{width:.0}" height="{height:.0}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{}</text>"#, width / 2.0, metric.name()).unwrap();
    for t in 0..=10 {
        let v = t as f64 / 10.0;
        let yy = y(v);
        writeln!(s, r##"<line x1="{left:.1}" y1="{yy:.2}" x2="{:.1}" y2="{yy:.2}" stroke="#e0e0e0"/>"##, width - right).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.2}" text-anchor="end">{}</text>"#, left - 6.0, yy + 4.0, t * 10).unwrap();
    }
    writeln!(s, r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{} [%]</text>"#, top + plot_h / 2.0, top + plot_h / 2.0, metric.name()).unwrap();
    writeln!(s, r#"<line x1="{left:.1}" y1="{top:.1}" x2="{left:.1}" y2="{:.1}" stroke="black"/>"#, top + plot_h).unwrap();
    for (i, c) in cols.iter().enumerate() {
        let cx = left + col_w * (i as f64 + 0.5);
        let label = escape(&column_label(c));
        writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{label}</text>"#, top + plot_h + 20.0).unwrap();
        let Some(b) = box_stats(&values(records, c, metric)) else {
            writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle" fill="gray">n/a</text>"#, top + plot_h / 2.0).unwrap();
            continue;
        };
        let hw = 25.0;
        writeln!(s, r#"<line x1="{cx:.1}" y1="{:.2}" x2="{cx:.1}" y2="{:.2}" stroke="black"/>"#, y(b.whisker_hi), y(b.q3)).unwrap();
        writeln!(s, r#"<line x1="{cx:.1}" y1="{:.2}" x2="{cx:.1}" y2="{:.2}" stroke="black"/>"#, y(b.q1), y(b.whisker_lo)).unwrap();
        for w in [b.whisker_lo, b.whisker_hi] {
            writeln!(s, r#"<line x1="{:.1}" y1="{:.2}" x2="{:.1}" y2="{:.2}" stroke="black"/>"#, cx - hw / 2.0, y(w), cx + hw / 2.0, y(w)).unwrap();
        }
        let box_h = (y(b.q1) - y(b.q3)).max(0.5);
        writeln!(s, r##"<rect x="{:.1}" y="{:.2}" width="{:.1}" height="{box_h:.2}" fill="#9ecae1" stroke="black"/>"##, cx - hw, y(b.q3), 2.0 * hw).unwrap();
        writeln!(s, r##"<line x1="{:.1}" y1="{:.2}" x2="{:.1}" y2="{:.2}" stroke="#c00000" stroke-width="2"/>"##, cx - hw, y(b.median), cx + hw, y(b.median)).unwrap();
        for o in &b.outliers {
            writeln!(s, r#"<circle cx="{cx:.1}" cy="{:.2}" r="3" fill="none" stroke="black"/>"#, y(*o)).unwrap();
        }
        writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle" fill="gray">n={}</text>"#, top + plot_h + 36.0, b.n).unwrap();
    }
    writeln!(
        s,
        r#"<text x="{left:.1}" y="{:.1}" font-size="10" fill="gray">Box: 25th-75th percentile (linear interpolation), red line: median, whiskers: most extreme values within 1.5 IQR, circles: outliers.</text>"#,
        height - 12.0
    )
    .unwrap();
    s.push_str("</svg>\n");
    Ok(s)
}

/// Reads `<run_dir>/records.csv` and writes the summary tables and one box plot per metric.
pub fn write_report(records_csv: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ReportError::Io { path, source }
    };
    let file = std::fs::File::open(records_csv).map_err(io(records_csv))?;
    let records = read_records(file)?;
    let tables = render_summary(&records)?;
    std::fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut written = Vec::new();
    for (name, body) in [(SUMMARY_CSV, tables.csv), (SUMMARY_MD, tables.markdown)] {
        let p = out_dir.join(name);
        std::fs::write(&p, body).map_err(io(&p))?;
        written.push(p);
    }
    for m in Metric::ALL {
        let p = out_dir.join(boxplot_file(m));
        std::fs::write(&p, render_boxplot(&records, m)?).map_err(io(&p))?;
        written.push(p);
    }
    Ok(written)
}
