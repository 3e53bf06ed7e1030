//! Synthetic rail worlds: a ring or line of stations, a spatially correlated
//! ground-truth congestion field and a sparse Poisson stream of noisy
//! passenger reports drawn from it.

use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate};
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::{
    self, HolidayCalendar, Report, ServiceWindow, SlotGrid, TruthRow, DEFAULT_SLOTS,
};
use crate::error::{bail_arg, Error, Result};
use crate::railgraph::{CoordinateMode, RailNetwork, Station};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Ring,
    Line,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthWorldConfig {
    pub n_stations: usize,
    pub topology: Topology,
    pub station_spacing_km: f64,
    pub n_days: usize,
    pub start_date: NaiveDate,
    pub slots_per_day: usize,
    /// Poisson mean of reports emitted by each in-service cell.
    pub report_rate: f64,
    /// Neighbour-mixing coefficient applied per smoothing round.
    pub spatial_smoothing: f64,
    pub smoothing_rounds: usize,
    /// Standard deviation of per-cell Gaussian noise on the intensity.
    pub noise_std: f64,
    /// Probability that a report is off by one level.
    pub subjectivity: f64,
    /// Weekdays promoted to public holidays.
    pub extra_holidays: usize,
    pub seed: u64,
}

impl Default for SynthWorldConfig {
    fn default() -> Self {
        Self {
            n_stations: 30,
            topology: Topology::Ring,
            station_spacing_km: 1.2,
            n_days: 60,
            start_date: NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date"),
            slots_per_day: DEFAULT_SLOTS,
            // 1 - exp(-0.0455) of 225k in-service cells is about 10k labels
            report_rate: 0.0455,
            spatial_smoothing: 0.5,
            smoothing_rounds: 3,
            noise_std: 0.3,
            subjectivity: 0.1,
            extra_holidays: 2,
            seed: 0,
        }
    }
}

impl SynthWorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_stations < 3 {
            bail_arg!("synthetic world needs at least 3 stations, got {}", self.n_stations);
        }
        if !(0.0..1.0).contains(&self.spatial_smoothing) {
            bail_arg!("spatial_smoothing {} outside [0, 1)", self.spatial_smoothing);
        }
        if !(self.station_spacing_km > 0.0) {
            bail_arg!("station spacing must be positive");
        }
        if self.n_days == 0 {
            bail_arg!("n_days must be positive");
        }
        if !(self.report_rate >= 0.0) || !(self.noise_std >= 0.0) {
            bail_arg!("report_rate and noise_std must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.subjectivity) {
            bail_arg!("subjectivity {} outside [0, 1]", self.subjectivity);
        }
        SlotGrid::new(self.slots_per_day)?;
        Ok(())
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        (0..self.n_days)
            .map(|k| self.start_date + Duration::days(k as i64))
            .collect()
    }
}

/// Ring stations sit on a circle of circumference `n * spacing`; line
/// stations on the x axis. Consecutive stations are connected, and the ring
/// closes the loop.
pub fn generate_network(cfg: &SynthWorldConfig) -> Result<RailNetwork> {
    cfg.validate()?;
    let n = cfg.n_stations;
    let stations = (0..n)
        .map(|i| {
            let position = match cfg.topology {
                Topology::Ring => {
                    let radius = n as f64 * cfg.station_spacing_km / std::f64::consts::TAU;
                    let angle = std::f64::consts::TAU * i as f64 / n as f64;
                    (radius * angle.cos(), radius * angle.sin())
                }
                Topology::Line => (i as f64 * cfg.station_spacing_km, 0.0),
            };
            Station {
                id: i,
                name: format!("S{i:02}"),
                position,
            }
        })
        .collect();
    let mut net = RailNetwork::new(stations, CoordinateMode::Planar)?;
    for i in 0..n - 1 {
        net.connect(i, i + 1)?;
    }
    if cfg.topology == Topology::Ring {
        net.connect(n - 1, 0)?;
    }
    Ok(net)
}

/// Weekends plus `extra_holidays` randomly chosen weekdays.
pub fn generate_calendar(cfg: &SynthWorldConfig) -> HolidayCalendar {
    let weekdays: Vec<NaiveDate> = cfg
        .dates()
        .into_iter()
        .filter(|d| d.weekday().num_days_from_monday() < 5)
        .collect();
    let mut rng = seed::rng(cfg.seed, Stream::Network);
    let k = cfg.extra_holidays.min(weekdays.len());
    let picks = rand::seq::index::sample(&mut rng, weekdays.len(), k);
    HolidayCalendar::with_dates(picks.into_iter().map(|i| weekdays[i]))
}

/// Dense `(date, slot, station)` intensity field with its class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CongestionField {
    pub n_stations: usize,
    pub n_slots: usize,
    pub dates: Vec<NaiveDate>,
    intensity: Vec<f64>,
    classes: Vec<u8>,
}

impl CongestionField {
    fn index(&self, station: usize, date_idx: usize, slot: usize) -> usize {
        (date_idx * self.n_slots + slot) * self.n_stations + station
    }

    pub fn intensity(&self, station: usize, date_idx: usize, slot: usize) -> f64 {
        self.intensity[self.index(station, date_idx, slot)]
    }

    pub fn class(&self, station: usize, date_idx: usize, slot: usize) -> u8 {
        self.classes[self.index(station, date_idx, slot)]
    }

    pub fn class_of(&self, station: usize, date: NaiveDate, slot: usize) -> Option<u8> {
        let d = self.dates.binary_search(&date).ok()?;
        (station < self.n_stations && slot < self.n_slots).then(|| self.class(station, d, slot))
    }

    pub fn values(&self) -> &[f64] {
        &self.intensity
    }
}

fn bump(h: f64, mu: f64, sigma: f64) -> f64 {
    (-(h - mu).powi(2) / (2.0 * sigma * sigma)).exp()
}

/// Weekday: sharp morning and evening commuter peaks. Holiday: a lower,
/// broad afternoon hump.
fn diurnal_profile(hour: f64, holiday: bool) -> f64 {
    if holiday {
        0.9 * bump(hour, 14.0, 3.0) + 0.3 * bump(hour, 19.0, 1.5)
    } else {
        2.2 * bump(hour, 8.0, 0.9) + 1.5 * bump(hour, 18.3, 1.3) + 0.4 * bump(hour, 12.5, 2.0)
    }
}

fn smooth_over_graph(values: &mut [f64], neighbors: &[Vec<usize>], alpha: f64, rounds: usize) {
    for _ in 0..rounds {
        let prev = values.to_vec();
        for (s, nbrs) in neighbors.iter().enumerate() {
            if nbrs.is_empty() {
                continue;
            }
            let mean = nbrs.iter().map(|&j| prev[j]).sum::<f64>() / nbrs.len() as f64;
            values[s] = (1.0 - alpha) * prev[s] + alpha * mean;
        }
    }
}

/// Intensity = baseline + amplitude x diurnal profile (shifted per station),
/// with station parameters mixed over the track graph, plus a per-day factor
/// and per-cell Gaussian noise, clamped to `[1, 4]`.
pub fn generate_ground_truth(
    network: &RailNetwork,
    calendar: &HolidayCalendar,
    cfg: &SynthWorldConfig,
) -> Result<CongestionField> {
    cfg.validate()?;
    let n = network.len();
    let grid = SlotGrid::new(cfg.slots_per_day)?;
    let dates = cfg.dates();
    let mut rng = seed::rng(cfg.seed, Stream::Field);

    let mut amplitude: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..1.5)).collect();
    let mut baseline: Vec<f64> = (0..n).map(|_| rng.random_range(0.7..1.9)).collect();
    let mut shift: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let day_factor: Vec<f64> = (0..dates.len()).map(|_| rng.random_range(0.85..1.15)).collect();

    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| network.is_connected(i, j)).collect())
        .collect();
    for v in [&mut amplitude, &mut baseline, &mut shift] {
        smooth_over_graph(v, &neighbors, cfg.spatial_smoothing, cfg.smoothing_rounds);
    }

    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("valid std");
    let t = grid.slots();
    let mut intensity = Vec::with_capacity(dates.len() * t * n);
    for (di, &date) in dates.iter().enumerate() {
        let holiday = calendar.is_holiday(date);
        for slot in 0..t {
            let hour = (grid.start_minute(slot) as f64 + grid.slot_minutes() as f64 / 2.0) / 60.0;
            for s in 0..n {
                let p = diurnal_profile(hour - shift[s], holiday);
                let mut v = baseline[s] + amplitude[s] * day_factor[di] * p;
                if cfg.noise_std > 0.0 {
                    v += noise.sample(&mut rng);
                }
                intensity.push(v.clamp(1.0, 4.0));
            }
        }
    }
    let classes = intensity
        .iter()
        .map(|&v| ((v + 0.5).floor() as i64).clamp(1, 4) as u8 - 1)
        .collect();
    Ok(CongestionField {
        n_stations: n,
        n_slots: t,
        dates,
        intensity,
        classes,
    })
}

fn perturb_level(level: u8, rng: &mut impl Rng) -> u8 {
    match level {
        1 => 2,
        4 => 3,
        l if rng.random_bool(0.5) => l - 1,
        l => l + 1,
    }
}

/// Each in-service cell emits `Poisson(report_rate)` reports of level
/// `class + 1`, each flipped to an adjacent level with probability
/// `subjectivity`.
pub fn sample_reports(field: &CongestionField, cfg: &SynthWorldConfig) -> Result<Vec<Report>> {
    cfg.validate()?;
    let grid = SlotGrid::new(field.n_slots)?;
    let window = ServiceWindow::default();
    let mut rng = seed::rng(cfg.seed, Stream::Reports);
    let mut out = Vec::new();
    if cfg.report_rate <= 0.0 {
        return Ok(out);
    }
    let poisson = Poisson::new(cfg.report_rate)
        .map_err(|e| Error::InvalidArgument(format!("report rate {}: {e}", cfg.report_rate)))?;
    for (di, &date) in field.dates.iter().enumerate() {
        for slot in 0..field.n_slots {
            if !window.slot_in_service(&grid, slot) {
                continue;
            }
            for s in 0..field.n_stations {
                let count = poisson.sample(&mut rng) as usize;
                for _ in 0..count {
                    let mut level = field.class(s, di, slot) + 1;
                    if cfg.subjectivity > 0.0 && rng.random_bool(cfg.subjectivity) {
                        level = perturb_level(level, &mut rng);
                    }
                    let minute = grid.start_minute(slot) + rng.random_range(0..grid.slot_minutes());
                    let ts = date
                        .and_hms_opt(minute / 60, minute % 60, 0)
                        .expect("minute within day");
                    out.push(Report::new(s, ts, level)?);
                }
            }
        }
    }
    Ok(out)
}

/// Everything the generator produces for one configuration.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub config: SynthWorldConfig,
    pub network: RailNetwork,
    pub calendar: HolidayCalendar,
    pub field: CongestionField,
    pub reports: Vec<Report>,
}

pub fn generate_world(cfg: &SynthWorldConfig) -> Result<SynthWorld> {
    let network = generate_network(cfg)?;
    let calendar = generate_calendar(cfg);
    let field = generate_ground_truth(&network, &calendar, cfg)?;
    let reports = sample_reports(&field, cfg)?;
    Ok(SynthWorld {
        config: cfg.clone(),
        network,
        calendar,
        field,
        reports,
    })
}

impl SynthWorld {
    /// Ground-truth rows for every in-service cell.
    pub fn truth_rows(&self) -> Vec<TruthRow> {
        let grid = SlotGrid::new(self.field.n_slots).expect("validated");
        let window = ServiceWindow::default();
        let mut rows = Vec::new();
        for (di, &date) in self.field.dates.iter().enumerate() {
            for slot in (0..self.field.n_slots).filter(|&t| window.slot_in_service(&grid, t)) {
                for s in 0..self.field.n_stations {
                    rows.push(TruthRow {
                        station: s,
                        date,
                        slot,
                        class: self.field.class(s, di, slot),
                    });
                }
            }
        }
        rows
    }

    /// Writes `stations.csv`, `edges.csv`, `reports.csv`, `holidays.csv`
    /// and `truth.csv` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.network
            .write_csv(&dir.join("stations.csv"), &dir.join("edges.csv"))?;
        data::write_reports(&dir.join("reports.csv"), &self.reports)?;
        data::write_holidays(&dir.join("holidays.csv"), &self.calendar)?;
        data::write_truth(&dir.join("truth.csv"), self.truth_rows())?;
        Ok(())
    }
}
