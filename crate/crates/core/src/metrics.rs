//! Accuracy, BMCTA, CSV export of metric rows and DR traces, and a small SVG
//! line-chart emitter.
//!
//! Reals are written with 17 significant digits so a write/parse cycle is
//! exact. Output files may start with `#`-prefixed provenance lines, which
//! the readers skip.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{argmax, logits, ModelSpec, ParamVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub round: usize,
    pub client: usize,
    pub algorithm: String,
    pub train_loss: f64,
    pub penalized_loss: f64,
    pub test_accuracy: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

/// DR vector of one client after one round.
#[derive(Debug, Clone, PartialEq)]
pub struct DrTrace {
    pub round: usize,
    pub client: usize,
    pub weights: Vec<f64>,
}

/// Fraction of argmax-correct predictions (ties to the lowest class index).
pub fn client_accuracy(model: &ModelSpec, params: &ParamVector, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::config("accuracy needs a non-empty test set"));
    }
    if test.feature_dim() != model.input_dim {
        return Err(Error::config(format!(
            "test data dim {} does not match model input dim {}",
            test.feature_dim(),
            model.input_dim
        )));
    }
    let out = logits(model, params, test.inputs());
    let correct = out
        .chunks_exact(model.num_classes)
        .zip(test.labels())
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Best-over-rounds of the unweighted mean-over-clients test accuracy.
pub fn bmcta(rows: &[MetricRow]) -> Result<f64> {
    bmcta_weighted(rows, None)
}

/// BMCTA with optional per-client weights (normalized internally).
pub fn bmcta_weighted(rows: &[MetricRow], client_weights: Option<&[f64]>) -> Result<f64> {
    let per_round = mean_accuracy_by_round(rows, client_weights)?;
    per_round
        .values()
        .copied()
        .fold(None, |best: Option<f64>, v| {
            Some(best.map_or(v, |b| b.max(v)))
        })
        .ok_or_else(|| Error::config("BMCTA of an empty run"))
}

/// Mean client test accuracy for every round, keyed by round.
pub fn mean_accuracy_by_round(
    rows: &[MetricRow],
    client_weights: Option<&[f64]>,
) -> Result<BTreeMap<usize, f64>> {
    let clients: std::collections::BTreeSet<usize> = rows.iter().map(|r| r.client).collect();
    let mut grid: BTreeMap<usize, BTreeMap<usize, f64>> = BTreeMap::new();
    for r in rows {
        grid.entry(r.round)
            .or_default()
            .insert(r.client, r.test_accuracy);
    }
    let weight = |c: usize| client_weights.map_or(1.0, |w| w.get(c).copied().unwrap_or(0.0));
    let total_weight: f64 = clients.iter().map(|&c| weight(c)).sum();
    if client_weights.is_some() && (total_weight.is_nan() || total_weight <= 0.0) {
        return Err(Error::config("client weights must have a positive sum"));
    }
    let mut out = BTreeMap::new();
    for (&round, cells) in &grid {
        let mut acc = 0.0;
        for &c in &clients {
            let v = cells.get(&c).ok_or_else(|| {
                Error::config(format!("missing metric cell: round {round}, client {c}"))
            })?;
            acc += weight(c) * v;
        }
        out.insert(round, acc / total_weight);
    }
    Ok(out)
}

/// 17 significant digits: exact round trip through text.
pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::data(path.display().to_string(), format!("{other:?}")),
    }
}

pub const METRIC_COLUMNS: [&str; 8] = [
    "round",
    "client",
    "algorithm",
    "train_loss",
    "penalized_loss",
    "test_accuracy",
    "bytes_up",
    "bytes_down",
];

/// Incremental CSV writer; every `push` is flushed so partial runs leave a
/// readable file.
pub struct CsvSink {
    path: std::path::PathBuf,
    writer: csv::Writer<BufWriter<File>>,
}

impl CsvSink {
    /// Creates `path`, writes `# key: value` provenance lines, then `header`.
    pub fn create(path: &Path, provenance: &[(&str, &str)], header: &[String]) -> Result<Self> {
        let mut file = create(path)?;
        for (k, v) in provenance {
            writeln!(file, "# {k}: {v}").map_err(|e| Error::io(path, e))?;
        }
        let mut writer = csv::WriterBuilder::new().from_writer(file);
        writer.write_record(header).map_err(|e| csv_err(path, e))?;
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(CsvSink {
            path: path.to_path_buf(),
            writer,
        })
    }

    /// Opens an existing file for appending (used when resuming).
    pub fn append(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(BufWriter::new(file));
        Ok(CsvSink {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn push(&mut self, record: &[String]) -> Result<()> {
        self.writer
            .write_record(record)
            .map_err(|e| csv_err(&self.path, e))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn metric_header() -> Vec<String> {
    METRIC_COLUMNS.iter().map(|s| s.to_string()).collect()
}

pub fn metric_record(row: &MetricRow) -> Vec<String> {
    vec![
        row.round.to_string(),
        row.client.to_string(),
        row.algorithm.clone(),
        format_real(row.train_loss),
        format_real(row.penalized_loss),
        format_real(row.test_accuracy),
        row.bytes_up.to_string(),
        row.bytes_down.to_string(),
    ]
}

pub fn dr_header(num_clients: usize) -> Vec<String> {
    let mut h = vec!["round".to_string(), "client".to_string()];
    h.extend((1..=num_clients).map(|j| format!("p_{j}")));
    h
}

pub fn dr_record(trace: &DrTrace) -> Vec<String> {
    let mut r = vec![trace.round.to_string(), trace.client.to_string()];
    r.extend(trace.weights.iter().map(|&w| format_real(w)));
    r
}

pub fn export_metrics_csv(
    rows: &[MetricRow],
    path: &Path,
    provenance: &[(&str, &str)],
) -> Result<()> {
    let mut sink = CsvSink::create(path, provenance, &metric_header())?;
    for r in rows {
        sink.push(&metric_record(r))?;
    }
    Ok(())
}

pub fn export_dr_csv(
    traces: &[DrTrace],
    num_clients: usize,
    path: &Path,
    provenance: &[(&str, &str)],
) -> Result<()> {
    let mut sink = CsvSink::create(path, provenance, &dr_header(num_clients))?;
    for t in traces {
        sink.push(&dr_record(t))?;
    }
    Ok(())
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| csv_err(path, e))
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: u64, col: &str, cell: &str) -> Result<T> {
    cell.parse().map_err(|_| {
        Error::data(
            path.display().to_string(),
            format!("line {line}: bad value \"{cell}\" in column {col}"),
        )
    })
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != METRIC_COLUMNS {
        return Err(Error::data(
            path.display().to_string(),
            format!(
                "unexpected metrics header {:?}",
                headers.iter().collect::<Vec<_>>()
            ),
        ));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let f = |k: usize| rec.get(k).unwrap_or("");
        rows.push(MetricRow {
            round: parse_field(path, line, "round", f(0))?,
            client: parse_field(path, line, "client", f(1))?,
            algorithm: f(2).to_string(),
            train_loss: parse_field(path, line, "train_loss", f(3))?,
            penalized_loss: parse_field(path, line, "penalized_loss", f(4))?,
            test_accuracy: parse_field(path, line, "test_accuracy", f(5))?,
            bytes_up: parse_field(path, line, "bytes_up", f(6))?,
            bytes_down: parse_field(path, line, "bytes_down", f(7))?,
        });
    }
    Ok(rows)
}

pub fn read_dr_csv(path: &Path) -> Result<Vec<DrTrace>> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.len() < 3 || &headers[0] != "round" || &headers[1] != "client" {
        return Err(Error::data(
            path.display().to_string(),
            "unexpected DR trace header",
        ));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let mut weights = Vec::with_capacity(rec.len() - 2);
        for (k, cell) in rec.iter().enumerate().skip(2) {
            weights.push(parse_field(path, line, &headers[k], cell)?);
        }
        out.push(DrTrace {
            round: parse_field(path, line, "round", &rec[0])?,
            client: parse_field(path, line, "client", &rec[1])?,
            weights,
        });
    }
    Ok(out)
}

/// One named polyline.
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf", "#393b79", "#637939",
];

/// Minimal SVG line chart with axes, min/max tick labels and a legend.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h, margin) = (640.0, 400.0, 60.0);
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| margin + (x - x0) / (x1 - x0) * (w - 2.0 * margin);
    let sy = |y: f64| h - margin - (y - y0) / (y1 - y0) * (h - 2.0 * margin);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<path d="M{m} {t} L{m} {b} L{r} {b}" stroke="black" fill="none"/>"#,
        m = margin,
        t = margin,
        b = h - margin,
        r = w - margin
    );
    for (v, y) in [(y0, h - margin), (y1, margin)] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">{}</text>"#,
            margin - 4.0,
            y + 4.0,
            short(v)
        );
    }
    for (v, x) in [(x0, margin), (x1, w - margin)] {
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{}</text>"#,
            h - margin + 16.0,
            short(v)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
        w / 2.0,
        h - 16.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(y_label)
    );
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        let ly = margin + 14.0 * k as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{ly}" font-family="sans-serif" font-size="11" fill="{color}">{}</text>"#,
            w - margin + 4.0,
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn short(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-3) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = create(path)?;
    f.write_all(text.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}
