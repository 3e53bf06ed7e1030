use std::collections::HashMap;

use chrono::NaiveDate;

use super::{DataSource, ExperimentConfig};
use crate::data::{
    aggregate_reports, build_split, read_holidays, read_reports, read_truth, HolidayCalendar, ServiceWindow, SlotGrid,
    SplitDataset, Universe,
};
use crate::error::{Error, Result};
use crate::railgraph::RailNetwork;
use crate::synthgen::generate_world;

/// Everything a sweep needs about one dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub network: RailNetwork,
    pub calendar: HolidayCalendar,
    pub universe: Universe,
    /// Every labeled cell, before folds or masking.
    pub full: SplitDataset,
    /// Ground-truth class by cell id, when known.
    pub truth: Option<HashMap<usize, u8>>,
}

impl Dataset {
    pub fn truth_of(&self, cell_id: usize) -> Option<u8> {
        self.truth.as_ref().and_then(|t| t.get(&cell_id).copied())
    }
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Synthetic(sc) => {
            let world = generate_world(sc)?;
            let grid = SlotGrid::new(sc.slots_per_day)?;
            let labels = aggregate_reports(&world.reports, &grid);
            let universe = Universe::new(
                sc.n_stations,
                sc.dates(),
                &world.calendar,
                grid,
                ServiceWindow::default(),
            )?;
            let (full, _) = build_split(&universe, &labels);
            let truth = (0..universe.n_cells())
                .map(|id| {
                    let c = universe.cell(id);
                    let slot = universe.slots()[c.slot_pos];
                    (id, world.field.class(c.station, c.date_idx, slot))
                })
                .collect();
            Ok(Dataset {
                network: world.network,
                calendar: world.calendar,
                universe,
                full,
                truth: Some(truth),
            })
        }
        DataSource::Csv(src) => {
            let network = RailNetwork::load_csv(&src.stations, &src.edges)?;
            let reports = read_reports(&src.reports)?;
            if reports.is_empty() {
                return Err(Error::Data(format!("no reports in {}", src.reports.display())));
            }
            if let Some(r) = reports.iter().find(|r| r.station_id >= network.len()) {
                return Err(Error::Data(format!(
                    "report names station {} but the network has {} stations",
                    r.station_id,
                    network.len()
                )));
            }
            let calendar = match &src.holidays {
                Some(p) => read_holidays(p)?,
                None => HolidayCalendar::weekends_only(),
            };
            let grid = SlotGrid::new(cfg.slots)?;
            let first: NaiveDate = reports.iter().map(|r| r.timestamp.date()).min().expect("nonempty");
            let last: NaiveDate = reports.iter().map(|r| r.timestamp.date()).max().expect("nonempty");
            let universe = Universe::new(
                network.len(),
                Universe::date_range(first, last),
                &calendar,
                grid,
                ServiceWindow::default(),
            )?;
            let labels = aggregate_reports(&reports, &grid);
            let (full, _) = build_split(&universe, &labels);
            let truth = match &src.truth {
                Some(p) => {
                    let mut map = HashMap::new();
                    for row in read_truth(p)? {
                        let key = crate::data::CellKey {
                            station: row.station,
                            date: row.date,
                            slot: row.slot,
                        };
                        if let Some(id) = universe.id_of(&key) {
                            map.insert(id, row.class);
                        }
                    }
                    Some(map)
                }
                None => None,
            };
            Ok(Dataset {
                network,
                calendar,
                universe,
                full,
                truth,
            })
        }
    }
}
