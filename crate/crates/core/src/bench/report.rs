//! Report files. Accuracies are stored as fractions and rendered as percent
//! in the markdown tables.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{sort_records, ExperimentConfig, Method, ResultRecord, Tally};
use crate::error::{bail_arg, Error, Result};

/// Write `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Markdown,
}

const RESULT_HEADER: [&str; 9] = [
    "method",
    "ratio",
    "fold",
    "seed",
    "zeta",
    "accuracy",
    "correct",
    "total",
    "per_station",
];

fn fmt_zeta(z: Option<f64>) -> String {
    z.map(|z| z.to_string()).unwrap_or_default()
}

fn fmt_per_station(m: &BTreeMap<usize, Tally>) -> String {
    let parts: Vec<String> = m
        .iter()
        .map(|(s, t)| format!("{s}:{}/{}", t.correct, t.total))
        .collect();
    parts.join(";")
}

fn parse_per_station(text: &str) -> Result<BTreeMap<usize, Tally>> {
    let bad = || Error::Data(format!("bad per-station field `{text}`"));
    let mut out = BTreeMap::new();
    for part in text.split(';').filter(|p| !p.is_empty()) {
        let (s, rest) = part.split_once(':').ok_or_else(bad)?;
        let (c, t) = rest.split_once('/').ok_or_else(bad)?;
        out.insert(
            s.parse().map_err(|_| bad())?,
            Tally {
                correct: c.parse().map_err(|_| bad())?,
                total: t.parse().map_err(|_| bad())?,
            },
        );
    }
    Ok(out)
}

/// `results.csv` contents: one record per row, without wall-clock time so
/// that repeated runs produce identical bytes.
pub fn results_csv(records: &[ResultRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RESULT_HEADER)?;
    for r in records {
        w.write_record([
            r.method.name().to_string(),
            r.ratio.to_string(),
            r.fold.to_string(),
            r.seed.to_string(),
            fmt_zeta(r.zeta),
            r.accuracy.to_string(),
            r.correct.to_string(),
            r.total.to_string(),
            fmt_per_station(&r.per_station),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn timings_csv(records: &[ResultRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "ratio", "fold", "seed", "zeta", "wall_seconds"])?;
    for r in records {
        w.write_record([
            r.method.name().to_string(),
            r.ratio.to_string(),
            r.fold.to_string(),
            r.seed.to_string(),
            fmt_zeta(r.zeta),
            r.wall_seconds.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    rec.get(i)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Data(format!("bad `{name}` field in row {:?}", rec.position().map(|p| p.line()))))
}

/// Parses `results.csv`, and `timings.csv` when given, back into records.
pub fn parse_records(results: &[u8], timings: Option<&[u8]>) -> Result<Vec<ResultRecord>> {
    let mut rd = csv::Reader::from_reader(results);
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        let method: Method = row.get(0).unwrap_or("").parse()?;
        let zeta = match row.get(4) {
            Some("") | None => None,
            Some(_) => Some(field(&row, 4, "zeta")?),
        };
        out.push(ResultRecord {
            method,
            ratio: field(&row, 1, "ratio")?,
            fold: field(&row, 2, "fold")?,
            seed: field(&row, 3, "seed")?,
            zeta,
            accuracy: field(&row, 5, "accuracy")?,
            correct: field(&row, 6, "correct")?,
            total: field(&row, 7, "total")?,
            per_station: parse_per_station(row.get(8).unwrap_or(""))?,
            wall_seconds: 0.0,
        });
    }
    if let Some(t) = timings {
        let mut rd = csv::Reader::from_reader(t);
        let rows: Vec<csv::StringRecord> = rd.records().collect::<std::result::Result<_, _>>()?;
        if rows.len() != out.len() {
            return Err(Error::Data(format!(
                "{} timing rows for {} results",
                rows.len(),
                out.len()
            )));
        }
        for (r, row) in out.iter_mut().zip(&rows) {
            r.wall_seconds = field(row, 5, "wall_seconds")?;
        }
    }
    Ok(out)
}

/// Reads the records of a report directory.
pub fn read_records(dir: &Path) -> Result<Vec<ResultRecord>> {
    let results = std::fs::read(dir.join("results.csv"))?;
    let timings = std::fs::read(dir.join("timings.csv")).ok();
    parse_records(&results, timings.as_deref())
}

/// Aggregate of the records sharing (method, zeta, ratio).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub zeta: Option<f64>,
    pub ratio: f64,
    pub runs: usize,
    /// Mean of per-run accuracies.
    pub acc_macro: f64,
    /// Sample standard deviation of per-run accuracies (0 for one run).
    pub acc_std: f64,
    /// Pooled correct / pooled total.
    pub acc_micro: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

pub fn summarize(records: &[ResultRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(Method, u64, u64), Vec<&ResultRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.method, r.zeta.map_or(0, f64::to_bits), r.ratio.to_bits()))
            .or_default()
            .push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let accs: Vec<f64> = g.iter().map(|r| r.accuracy).collect();
            let (acc_macro, acc_std) = mean_std(&accs);
            let correct: usize = g.iter().map(|r| r.correct).sum();
            let total: usize = g.iter().map(|r| r.total).sum();
            SummaryRow {
                method: g[0].method,
                zeta: g[0].zeta,
                ratio: g[0].ratio,
                runs: g.len(),
                acc_macro,
                acc_std,
                acc_micro: correct as f64 / total as f64,
            }
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "zeta", "ratio", "runs", "acc_macro", "acc_std", "acc_micro"])?;
    for r in rows {
        w.write_record([
            r.method.name().to_string(),
            fmt_zeta(r.zeta),
            r.ratio.to_string(),
            r.runs.to_string(),
            r.acc_macro.to_string(),
            r.acc_std.to_string(),
            r.acc_micro.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// `MM.MM ± SS.SS`, in percent.
pub fn format_cell(mean: f64, std: f64) -> String {
    format!("{:.2} ± {:.2}", mean * 100.0, std * 100.0)
}

fn ratio_header(r: f64) -> String {
    let p = r * 100.0;
    if (p - p.round()).abs() < 1e-9 {
        format!("{}%", p.round())
    } else {
        format!("{p:.1}%")
    }
}

fn ratios_of(rows: &[SummaryRow]) -> Vec<f64> {
    let mut r: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
    r.sort_by(f64::total_cmp);
    r.dedup();
    r
}

fn markdown_table(
    rows: &[SummaryRow],
    order: &[Method],
    head: [&str; 3],
    cols: impl Fn(Method) -> [String; 3],
) -> String {
    let ratios = ratios_of(rows);
    let mut out = String::new();
    let mut header: Vec<String> = head.iter().map(|s| s.to_string()).collect();
    header.extend(ratios.iter().map(|&r| ratio_header(r)));
    out.push_str(&format!("| {} |\n", header.join(" | ")));
    let align: Vec<&str> = (0..header.len()).map(|i| if i < 3 { "---" } else { "---:" }).collect();
    out.push_str(&format!("| {} |\n", align.join(" | ")));
    for &m in order {
        let mut zetas: Vec<Option<f64>> = rows.iter().filter(|r| r.method == m).map(|r| r.zeta).collect();
        zetas.sort_by(|a, b| a.unwrap_or(0.0).total_cmp(&b.unwrap_or(0.0)));
        zetas.dedup();
        let several = zetas.len() > 1;
        for z in zetas {
            let mut line = cols(m).to_vec();
            if several {
                line[0] = format!("{} (ζ={})", line[0], z.unwrap_or(0.0));
            }
            for &ratio in &ratios {
                let cell = rows
                    .iter()
                    .find(|r| r.method == m && r.zeta == z && r.ratio == ratio)
                    .map(|r| format_cell(r.acc_macro, r.acc_std))
                    .unwrap_or_else(|| "-".into());
                line.push(cell);
            }
            out.push_str(&format!("| {} |\n", line.join(" | ")));
        }
    }
    out
}

/// Comparison table: one row per method, one column per label ratio.
pub fn table1(rows: &[SummaryRow]) -> String {
    markdown_table(rows, &Method::ALL, ["Model", "Protocol", "Graph"], |m| {
        let (a, b, c) = m.table_row();
        [a.into(), b.into(), c.into()]
    })
}

/// Ablation table: rail graph, natural graph, supervised only.
pub fn table2(rows: &[SummaryRow]) -> String {
    let order = [Method::Surconfort, Method::NgmNatural, Method::Snn];
    markdown_table(rows, &order, ["Model", "SSL", "railroad graph"], |m| {
        let (name, ssl, rail) = match m {
            Method::Surconfort => ("SURCONFORT", "yes", "yes"),
            Method::NgmNatural => ("NGM", "yes", "-"),
            _ => ("SNN", "-", "-"),
        };
        [name.into(), ssl.into(), rail.into()]
    })
}

/// `(zeta, mean, std, runs)` for the rail-graph method at one ratio,
/// ascending in zeta.
pub fn sensitivity_curve(records: &[ResultRecord], ratio: f64) -> Vec<(f64, f64, f64, usize)> {
    let mut out: Vec<(f64, f64, f64, usize)> = summarize(records)
        .into_iter()
        .filter(|r| r.method == Method::Surconfort && r.ratio == ratio)
        .map(|r| (r.zeta.unwrap_or(0.0), r.acc_macro, r.acc_std, r.runs))
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

fn sensitivity_csv(records: &[ResultRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["ratio", "zeta", "acc_mean", "acc_std", "runs"])?;
    let mut ratios: Vec<f64> = records.iter().map(|r| r.ratio).collect();
    ratios.sort_by(f64::total_cmp);
    ratios.dedup();
    for ratio in ratios {
        for (z, m, s, n) in sensitivity_curve(records, ratio) {
            w.write_record([ratio.to_string(), z.to_string(), m.to_string(), s.to_string(), n.to_string()])?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn per_station_csv(records: &[ResultRecord]) -> Result<Vec<u8>> {
    let mut pooled: BTreeMap<(Method, u64, u64, usize), Tally> = BTreeMap::new();
    for r in records {
        for (&s, t) in &r.per_station {
            let e = pooled
                .entry((r.method, r.zeta.map_or(0, f64::to_bits), r.ratio.to_bits(), s))
                .or_default();
            e.correct += t.correct;
            e.total += t.total;
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "zeta", "ratio", "station", "correct", "total", "accuracy"])?;
    for ((m, z, ratio, s), t) in pooled {
        let zeta = records
            .iter()
            .find(|r| r.method == m && r.zeta.map_or(0, f64::to_bits) == z)
            .and_then(|r| r.zeta);
        w.write_record([
            m.name().to_string(),
            fmt_zeta(zeta),
            f64::from_bits(ratio).to_string(),
            s.to_string(),
            t.correct.to_string(),
            t.total.to_string(),
            t.accuracy().to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Writes the report files for `records` into `dir` and returns their paths.
/// CSV output: `results.csv`, `timings.csv`, `summary.csv`,
/// `per_station.csv`, `sensitivity.csv` (when the rail-graph method is
/// present) and `run.json`. Markdown output adds `table1.md`, plus
/// `table2.md` when all three ablation methods are present.
pub fn emit_report(
    records: &[ResultRecord],
    dir: &Path,
    config: &ExperimentConfig,
    format: ReportFormat,
) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        bail_arg!("no records to report");
    }
    let mut records = records.to_vec();
    sort_records(&mut records);
    let summary = summarize(&records);
    let mut files: Vec<(&str, Vec<u8>)> = vec![
        ("results.csv", results_csv(&records)?),
        ("timings.csv", timings_csv(&records)?),
        ("summary.csv", summary_csv(&summary)?),
        ("per_station.csv", per_station_csv(&records)?),
    ];
    if records.iter().any(|r| r.method == Method::Surconfort) {
        files.push(("sensitivity.csv", sensitivity_csv(&records)?));
    }
    if format == ReportFormat::Markdown {
        files.push(("table1.md", table1(&summary).into_bytes()));
        let ablation = [Method::Surconfort, Method::NgmNatural, Method::Snn];
        if ablation.iter().all(|m| records.iter().any(|r| r.method == *m)) {
            files.push(("table2.md", table2(&summary).into_bytes()));
        }
    }
    let mut seeds: Vec<u64> = records.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let names: Vec<&str> = files.iter().map(|(n, _)| *n).chain(["run.json"]).collect();
    let meta = serde_json::json!({
        "package": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "seeds": seeds,
        "records": records.len(),
        "files": names,
    });
    files.push(("run.json", serde_json::to_vec_pretty(&meta)?));
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (name, bytes) in files {
        let path = dir.join(name);
        write_atomic(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_format() {
        assert_eq!(format_cell(0.5676, 0.0193), "56.76 ± 1.93");
        assert_eq!(format_cell(0.25, 0.0), "25.00 ± 0.00");
    }

    #[test]
    fn ratio_headers() {
        assert_eq!(ratio_header(0.1), "10%");
        assert_eq!(ratio_header(1.0), "100%");
        assert_eq!(ratio_header(0.125), "12.5%");
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[0.5, 0.7]);
        assert!((m - 0.6).abs() < 1e-15);
        assert!((s - 0.1414213562373095).abs() < 1e-12);
        assert_eq!(mean_std(&[0.3]), (0.3, 0.0));
    }
}
