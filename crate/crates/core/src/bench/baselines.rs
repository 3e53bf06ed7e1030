use std::collections::BTreeMap;

use rand::Rng;

use crate::data::{Sample, NUM_CLASSES};
use crate::seed::{self, Stream};

/// Uniform class draws.
#[derive(Debug, Clone, Copy)]
pub struct RandomBaseline {
    pub seed: u64,
}

impl RandomBaseline {
    pub fn predict(&self, samples: &[Sample]) -> Vec<u8> {
        let mut rng = seed::rng(self.seed, Stream::Baseline);
        samples
            .iter()
            .map(|_| rng.random_range(0..NUM_CLASSES) as u8)
            .collect()
    }
}

/// Most frequent training label for each (day of week, slot), ties to the
/// lower class; unseen keys get a uniform random label.
#[derive(Debug, Clone)]
pub struct ModeBaseline {
    table: BTreeMap<(u8, usize), u8>,
    seed: u64,
}

impl ModeBaseline {
    pub fn fit(labeled: &[Sample], seed: u64) -> Self {
        let mut counts: BTreeMap<(u8, usize), [usize; NUM_CLASSES]> = BTreeMap::new();
        for s in labeled {
            if let Some(c) = s.label {
                counts.entry((s.context.day_of_week, s.slot)).or_default()[c as usize] += 1;
            }
        }
        let table = counts
            .into_iter()
            .map(|(k, c)| {
                let mut best = 0;
                for i in 1..NUM_CLASSES {
                    if c[i] > c[best] {
                        best = i;
                    }
                }
                (k, best as u8)
            })
            .collect();
        Self { table, seed }
    }

    pub fn lookup(&self, day_of_week: u8, slot: usize) -> Option<u8> {
        self.table.get(&(day_of_week, slot)).copied()
    }

    pub fn predict(&self, samples: &[Sample]) -> Vec<u8> {
        let mut rng = seed::rng(self.seed, Stream::Baseline);
        samples
            .iter()
            .map(|s| {
                self.lookup(s.context.day_of_week, s.slot)
                    .unwrap_or_else(|| rng.random_range(0..NUM_CLASSES) as u8)
            })
            .collect()
    }
}
