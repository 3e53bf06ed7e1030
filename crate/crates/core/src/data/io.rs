use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};

use super::{HolidayCalendar, Report};
use crate::error::{Error, Result};

const TIMESTAMP_FMT: &str = "%Y-%m-%dT%H:%M";
const DATE_FMT: &str = "%Y-%m-%d";

/// Reads `station_id,timestamp,level` rows.
pub fn read_reports(path: &Path) -> Result<Vec<Report>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let cols: Vec<&str> = headers.iter().map(str::trim).collect();
    if cols != ["station_id", "timestamp", "level"] {
        return Err(Error::Data(format!(
            "{}: expected header station_id,timestamp,level",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = line + 2;
        let bad = |what: &str| Error::Data(format!("{}: row {row}: {what}", path.display()));
        let station_id = rec
            .get(0)
            .and_then(|s| s.trim().parse::<usize>().ok())
            .ok_or_else(|| bad("bad station_id"))?;
        let timestamp = rec
            .get(1)
            .and_then(|s| NaiveDateTime::parse_from_str(s.trim(), TIMESTAMP_FMT).ok())
            .ok_or_else(|| bad("bad timestamp, expected YYYY-MM-DDTHH:MM"))?;
        let level = rec
            .get(2)
            .and_then(|s| s.trim().parse::<u8>().ok())
            .ok_or_else(|| bad("bad level"))?;
        out.push(Report::new(station_id, timestamp, level).map_err(|e| bad(&e.to_string()))?);
    }
    Ok(out)
}

pub fn write_reports(path: &Path, reports: &[Report]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "station_id,timestamp,level")?;
    for r in reports {
        writeln!(
            w,
            "{},{},{}",
            r.station_id,
            r.timestamp.format(TIMESTAMP_FMT),
            r.level
        )?;
    }
    w.flush()?;
    Ok(())
}

/// One `YYYY-MM-DD` per line; blank lines and a `date` header are skipped.
pub fn read_holidays(path: &Path) -> Result<HolidayCalendar> {
    let f = std::fs::File::open(path)?;
    let mut dates = Vec::new();
    for (k, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.eq_ignore_ascii_case("date") {
            continue;
        }
        let d = NaiveDate::parse_from_str(t, DATE_FMT).map_err(|e| {
            Error::Data(format!("{}: line {}: {e}", path.display(), k + 1))
        })?;
        dates.push(d);
    }
    Ok(HolidayCalendar::with_dates(dates))
}

pub fn write_holidays(path: &Path, calendar: &HolidayCalendar) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for d in calendar.extra_dates() {
        writeln!(w, "{}", d.format(DATE_FMT))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TruthRow {
    pub station: usize,
    pub date: NaiveDate,
    pub slot: usize,
    pub class: u8,
}

pub fn write_truth(path: &Path, rows: impl IntoIterator<Item = TruthRow>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "station,date,slot,class")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.station, r.date.format(DATE_FMT), r.slot, r.class)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_truth(path: &Path) -> Result<Vec<TruthRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = || Error::Data(format!("{}: row {}", path.display(), line + 2));
        let get = |k: usize| rec.get(k).map(str::trim).ok_or_else(bad);
        out.push(TruthRow {
            station: get(0)?.parse().map_err(|_| bad())?,
            date: NaiveDate::parse_from_str(get(1)?, DATE_FMT).map_err(|_| bad())?,
            slot: get(2)?.parse().map_err(|_| bad())?,
            class: get(3)?.parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}
