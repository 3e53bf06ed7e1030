//! Passenger reports, sample encoding, label aggregation and the dataset
//! splits used for training and cross-validation.

mod io;

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Datelike, NaiveDate, NaiveDateTime, NaiveTime, Timelike};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, Error, Result};
use crate::seed::{self, Stream};

pub use io::{read_holidays, read_reports, read_truth, write_holidays, write_reports, write_truth, TruthRow};

pub const NUM_CLASSES: usize = 4;
/// 7-way day of week plus 2-way holiday flag.
pub const CONTEXT_WIDTH: usize = 9;
pub const MINUTES_PER_DAY: u32 = 1440;
pub const DEFAULT_SLOTS: usize = 144;

/// One passenger report: station, local timestamp and congestion level 1..=4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub station_id: usize,
    pub timestamp: NaiveDateTime,
    pub level: u8,
}

impl Report {
    pub fn new(station_id: usize, timestamp: NaiveDateTime, level: u8) -> Result<Self> {
        if !(1..=4).contains(&level) {
            return Err(Error::Data(format!("congestion level {level} outside 1..=4")));
        }
        Ok(Self {
            station_id,
            timestamp,
            level,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DateContext {
    /// Monday = 0.
    pub day_of_week: u8,
    pub is_holiday: bool,
}

/// Weekends are always holidays; extra dates come from `holidays.csv`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HolidayCalendar {
    extra: BTreeSet<NaiveDate>,
}

impl HolidayCalendar {
    pub fn weekends_only() -> Self {
        Self::default()
    }

    pub fn with_dates(dates: impl IntoIterator<Item = NaiveDate>) -> Self {
        Self {
            extra: dates.into_iter().collect(),
        }
    }

    pub fn extra_dates(&self) -> impl Iterator<Item = NaiveDate> + '_ {
        self.extra.iter().copied()
    }

    pub fn is_holiday(&self, date: NaiveDate) -> bool {
        date.weekday().num_days_from_monday() >= 5 || self.extra.contains(&date)
    }

    pub fn context(&self, date: NaiveDate) -> DateContext {
        DateContext {
            day_of_week: date.weekday().num_days_from_monday() as u8,
            is_holiday: self.is_holiday(date),
        }
    }
}

/// Division of a day into `T` equal slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotGrid {
    slots: usize,
}

impl SlotGrid {
    pub fn new(slots: usize) -> Result<Self> {
        if slots == 0 || MINUTES_PER_DAY as usize % slots != 0 {
            bail_arg!("slot count {slots} must divide 1440");
        }
        Ok(Self { slots })
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn slot_minutes(&self) -> u32 {
        MINUTES_PER_DAY / self.slots as u32
    }

    /// A time exactly on a boundary belongs to the later slot.
    pub fn slot_of(&self, time: NaiveTime) -> usize {
        let minutes = time.hour() * 60 + time.minute();
        (minutes / self.slot_minutes()) as usize
    }

    pub fn start_minute(&self, slot: usize) -> u32 {
        slot as u32 * self.slot_minutes()
    }
}

/// Out-of-service window `[start, end)` in minutes since midnight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceWindow {
    pub start_minute: u32,
    pub end_minute: u32,
}

impl Default for ServiceWindow {
    fn default() -> Self {
        // 01:20 to 04:30
        Self {
            start_minute: 80,
            end_minute: 270,
        }
    }
}

impl ServiceWindow {
    pub fn new(start: NaiveTime, end: NaiveTime) -> Result<Self> {
        let s = start.hour() * 60 + start.minute();
        let e = end.hour() * 60 + end.minute();
        if s > e {
            bail_arg!("service window start {start} is after end {end}");
        }
        Ok(Self {
            start_minute: s,
            end_minute: e,
        })
    }

    pub fn is_out_of_service(&self, minute: u32) -> bool {
        minute >= self.start_minute && minute < self.end_minute
    }

    pub fn slot_in_service(&self, grid: &SlotGrid, slot: usize) -> bool {
        !self.is_out_of_service(grid.start_minute(slot))
    }

    pub fn describe(&self) -> String {
        format!(
            "{:02}:{:02}-{:02}:{:02}",
            self.start_minute / 60,
            self.start_minute % 60,
            self.end_minute / 60,
            self.end_minute % 60
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellKey {
    pub station: usize,
    pub date: NaiveDate,
    pub slot: usize,
}

/// Drops cells whose slot starts inside the out-of-service window.
pub fn filter_service_hours(
    cells: impl IntoIterator<Item = CellKey>,
    grid: &SlotGrid,
    window: &ServiceWindow,
) -> Vec<CellKey> {
    cells
        .into_iter()
        .filter(|c| window.slot_in_service(grid, c.slot))
        .collect()
}

/// One-hot layout: `[station (S) | day of week (7) | holiday (2) | slot (T)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureEncoder {
    pub n_stations: usize,
    pub n_slots: usize,
}

impl FeatureEncoder {
    pub fn new(n_stations: usize, n_slots: usize) -> Self {
        Self { n_stations, n_slots }
    }

    pub fn width(&self) -> usize {
        self.n_stations + CONTEXT_WIDTH + self.n_slots
    }

    pub fn active(&self, station: usize, ctx: DateContext, slot: usize) -> Result<[usize; 4]> {
        if station >= self.n_stations {
            bail_arg!("station {station} out of range (S = {})", self.n_stations);
        }
        if slot >= self.n_slots {
            bail_arg!("time slot {slot} out of range (T = {})", self.n_slots);
        }
        if ctx.day_of_week > 6 {
            bail_arg!("day of week {} out of range", ctx.day_of_week);
        }
        let s = self.n_stations;
        Ok([
            station,
            s + ctx.day_of_week as usize,
            s + 7 + usize::from(ctx.is_holiday),
            s + CONTEXT_WIDTH + slot,
        ])
    }

    pub fn encode(&self, station: usize, ctx: DateContext, slot: usize) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.width()];
        for k in self.active(station, ctx, slot)? {
            v[k] = 1.0;
        }
        Ok(v)
    }

    /// Inverse of [`encode`](Self::encode).
    pub fn decode(&self, features: &[f64]) -> Result<(usize, DateContext, usize)> {
        if features.len() != self.width() {
            return Err(Error::Shape(format!(
                "feature width {} != {}",
                features.len(),
                self.width()
            )));
        }
        let s = self.n_stations;
        let hot = |range: std::ops::Range<usize>| -> Result<usize> {
            let ones: Vec<usize> = range.clone().filter(|&k| features[k] == 1.0).collect();
            match ones.as_slice() {
                [k] => Ok(k - range.start),
                _ => Err(Error::Data(format!(
                    "block {range:?} is not one-hot"
                ))),
            }
        };
        let station = hot(0..s)?;
        let dow = hot(s..s + 7)?;
        let hol = hot(s + 7..s + 9)?;
        let slot = hot(s + 9..s + 9 + self.n_slots)?;
        Ok((
            station,
            DateContext {
                day_of_week: dow as u8,
                is_holiday: hol == 1,
            },
            slot,
        ))
    }
}

/// Encodes a single `(station, date context, slot)` cell.
pub fn encode_sample(
    station: usize,
    ctx: DateContext,
    slot: usize,
    n_stations: usize,
    n_slots: usize,
) -> Result<Vec<f64>> {
    FeatureEncoder::new(n_stations, n_slots).encode(station, ctx, slot)
}

/// Maps a mean congestion level in `[1, 4]` to a class in `0..4` by
/// rounding half up. Computed on integer sums so the rule is exact.
pub fn discretize(sum: u64, count: u64) -> u8 {
    // floor(sum / count + 1/2)
    let rounded = (2 * sum + count) / (2 * count);
    rounded.clamp(1, 4) as u8 - 1
}

/// Aggregates reports per `(station, date, slot)` cell into a class label.
pub fn aggregate_reports(reports: &[Report], grid: &SlotGrid) -> BTreeMap<CellKey, u8> {
    let mut acc: BTreeMap<CellKey, (u64, u64)> = BTreeMap::new();
    for r in reports {
        let key = CellKey {
            station: r.station_id,
            date: r.timestamp.date(),
            slot: grid.slot_of(r.timestamp.time()),
        };
        let e = acc.entry(key).or_default();
        e.0 += u64::from(r.level);
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(k, (sum, count))| (k, discretize(sum, count)))
        .collect()
}

/// Position of a cell inside a [`Universe`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub station: usize,
    pub date_idx: usize,
    pub slot_pos: usize,
}

/// The full Cartesian product of stations, dates and in-service slots.
///
/// Cell ids are laid out as `(date_idx * kept_slots + slot_pos) * S + station`,
/// so all stations of one `(date, slot)` group are contiguous.
#[derive(Debug, Clone)]
pub struct Universe {
    n_stations: usize,
    grid: SlotGrid,
    window: ServiceWindow,
    dates: Vec<NaiveDate>,
    contexts: Vec<DateContext>,
    slots: Vec<usize>,
    slot_pos: Vec<Option<usize>>,
}

impl Universe {
    pub fn new(
        n_stations: usize,
        dates: Vec<NaiveDate>,
        calendar: &HolidayCalendar,
        grid: SlotGrid,
        window: ServiceWindow,
    ) -> Result<Self> {
        if n_stations == 0 {
            bail_arg!("universe needs at least one station");
        }
        let mut dates = dates;
        dates.sort();
        dates.dedup();
        let contexts = dates.iter().map(|&d| calendar.context(d)).collect();
        let slots: Vec<usize> = (0..grid.slots())
            .filter(|&t| window.slot_in_service(&grid, t))
            .collect();
        let mut slot_pos = vec![None; grid.slots()];
        for (p, &t) in slots.iter().enumerate() {
            slot_pos[t] = Some(p);
        }
        Ok(Self {
            n_stations,
            grid,
            window,
            dates,
            contexts,
            slots,
            slot_pos,
        })
    }

    /// Every date from `first` to `last` inclusive.
    pub fn date_range(first: NaiveDate, last: NaiveDate) -> Vec<NaiveDate> {
        first.iter_days().take_while(|d| *d <= last).collect()
    }

    pub fn n_stations(&self) -> usize {
        self.n_stations
    }

    pub fn grid(&self) -> &SlotGrid {
        &self.grid
    }

    pub fn window(&self) -> &ServiceWindow {
        &self.window
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn context(&self, date_idx: usize) -> DateContext {
        self.contexts[date_idx]
    }

    /// In-service slot numbers, ascending.
    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    pub fn encoder(&self) -> FeatureEncoder {
        FeatureEncoder::new(self.n_stations, self.grid.slots())
    }

    pub fn n_groups(&self) -> usize {
        self.dates.len() * self.slots.len()
    }

    pub fn n_cells(&self) -> usize {
        self.n_groups() * self.n_stations
    }

    pub fn cell_id(&self, c: Cell) -> usize {
        (c.date_idx * self.slots.len() + c.slot_pos) * self.n_stations + c.station
    }

    pub fn cell(&self, id: usize) -> Cell {
        let station = id % self.n_stations;
        let group = id / self.n_stations;
        Cell {
            station,
            date_idx: group / self.slots.len(),
            slot_pos: group % self.slots.len(),
        }
    }

    pub fn key(&self, id: usize) -> CellKey {
        let c = self.cell(id);
        CellKey {
            station: c.station,
            date: self.dates[c.date_idx],
            slot: self.slots[c.slot_pos],
        }
    }

    pub fn id_of(&self, key: &CellKey) -> Option<usize> {
        if key.station >= self.n_stations || key.slot >= self.grid.slots() {
            return None;
        }
        let date_idx = self.dates.binary_search(&key.date).ok()?;
        let slot_pos = self.slot_pos[key.slot]?;
        Some(self.cell_id(Cell {
            station: key.station,
            date_idx,
            slot_pos,
        }))
    }

    pub fn sample(&self, id: usize, label: Option<u8>) -> Sample {
        let c = self.cell(id);
        Sample {
            cell_id: id,
            station: c.station,
            date: self.dates[c.date_idx],
            context: self.contexts[c.date_idx],
            slot: self.slots[c.slot_pos],
            label,
        }
    }
}

/// One `(station, date, slot)` tuple with its optional class label.
/// Features are produced on demand by a [`FeatureEncoder`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub cell_id: usize,
    pub station: usize,
    pub date: NaiveDate,
    pub context: DateContext,
    pub slot: usize,
    pub label: Option<u8>,
}

impl Sample {
    pub fn features(&self, enc: &FeatureEncoder) -> Result<Vec<f64>> {
        enc.encode(self.station, self.context, self.slot)
    }

    pub fn active(&self, enc: &FeatureEncoder) -> Result<[usize; 4]> {
        enc.active(self.station, self.context, self.slot)
    }

    pub fn key(&self) -> CellKey {
        CellKey {
            station: self.station,
            date: self.date,
            slot: self.slot,
        }
    }
}

/// Labeled samples `X_L, Y_L` and unlabeled samples `X_U`.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub encoder: FeatureEncoder,
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
}

impl SplitDataset {
    pub fn l(&self) -> usize {
        self.labeled.len()
    }

    pub fn u(&self) -> usize {
        self.unlabeled.len()
    }

    pub fn n(&self) -> usize {
        self.l() + self.u()
    }

    /// Sample by global index: labeled first, then unlabeled.
    pub fn get(&self, idx: usize) -> &Sample {
        if idx < self.labeled.len() {
            &self.labeled[idx]
        } else {
            &self.unlabeled[idx - self.labeled.len()]
        }
    }
}

/// Partitions the universe into labeled and unlabeled samples. Labels for
/// cells outside the universe (filtered hours, unknown stations or dates) are
/// dropped with a warning; the count of dropped labels is returned.
pub fn build_split(universe: &Universe, labels: &BTreeMap<CellKey, u8>) -> (SplitDataset, usize) {
    let mut by_id: BTreeMap<usize, u8> = BTreeMap::new();
    let mut dropped = 0usize;
    for (key, &class) in labels {
        match universe.id_of(key) {
            Some(id) => {
                by_id.insert(id, class);
            }
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} labels outside the service-hour universe");
    }
    let mut labeled = Vec::with_capacity(by_id.len());
    let mut unlabeled = Vec::with_capacity(universe.n_cells() - by_id.len());
    for id in 0..universe.n_cells() {
        match by_id.get(&id) {
            Some(&c) => labeled.push(universe.sample(id, Some(c))),
            None => unlabeled.push(universe.sample(id, None)),
        }
    }
    (
        SplitDataset {
            encoder: universe.encoder(),
            labeled,
            unlabeled,
        },
        dropped,
    )
}

/// Number of labels kept at a given ratio: `floor(ratio * l)`. A tiny slack
/// absorbs binary round-off such as `0.29 * 100 = 28.999...`.
pub fn masked_count(ratio: f64, l: usize) -> usize {
    ((ratio * l as f64) + 1e-9).floor() as usize
}

/// Keeps `floor(ratio * l)` labels chosen uniformly without replacement;
/// the rest lose their label and join the unlabeled pool.
pub fn mask_labels(split: &SplitDataset, ratio: f64, seed: u64) -> Result<SplitDataset> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        bail_arg!("label ratio {ratio} outside (0, 1]");
    }
    let l = split.l();
    let keep = masked_count(ratio, l);
    let mut rng = seed::rng(seed, Stream::Mask);
    let mut chosen = rand::seq::index::sample(&mut rng, l, keep).into_vec();
    chosen.sort_unstable();
    let mut is_kept = vec![false; l];
    for &i in &chosen {
        is_kept[i] = true;
    }
    let mut labeled = Vec::with_capacity(keep);
    let mut unlabeled = split.unlabeled.clone();
    for (i, s) in split.labeled.iter().enumerate() {
        if is_kept[i] {
            labeled.push(*s);
        } else {
            unlabeled.push(Sample { label: None, ..*s });
        }
    }
    Ok(SplitDataset {
        encoder: split.encoder,
        labeled,
        unlabeled,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..l` cut into `k` contiguous folds whose sizes differ
/// by at most one (the first `l % k` folds are one larger).
pub fn kfold_split(l: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        bail_arg!("need at least 2 folds, got {k}");
    }
    if l < k {
        bail_arg!("cannot split {l} labeled samples into {k} folds");
    }
    let mut order: Vec<usize> = (0..l).collect();
    order.shuffle(&mut seed::rng(seed, Stream::Folds));
    let base = l / k;
    let extra = l % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let test: Vec<usize> = order[start..start + size].to_vec();
        let train: Vec<usize> = order[..start]
            .iter()
            .chain(&order[start + size..])
            .copied()
            .collect();
        folds.push(Fold { train, test });
        start += size;
    }
    Ok(folds)
}

/// Training side of a fold: the fold's training labels plus every unlabeled
/// cell. Test samples are removed from the dataset entirely.
pub fn fold_datasets(full: &SplitDataset, fold: &Fold) -> (SplitDataset, Vec<Sample>) {
    let train = SplitDataset {
        encoder: full.encoder,
        labeled: fold.train.iter().map(|&i| full.labeled[i]).collect(),
        unlabeled: full.unlabeled.clone(),
    };
    let test = fold.test.iter().map(|&i| full.labeled[i]).collect();
    (train, test)
}
