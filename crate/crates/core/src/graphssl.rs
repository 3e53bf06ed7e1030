//! Graph-regularized semi-supervised training over labeled/unlabeled sample
//! pairs.
//!
//! Two samples share an edge only when they describe the same `(date, slot)`
//! at stations joined in the rail adjacency; the edge weight is the station
//! weight.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SplitDataset, NUM_CLASSES};
use crate::diffusion::natural_affinity;
use crate::error::{bail_arg, Error, Result};
use crate::nn::{
    backward_checked, cross_entropy_term, fit, gather, holdout_validation, targets_for, Gradients, MlpModel,
    SampleSource, StepOutcome, TrainConfig, TrainLog,
};
use crate::railgraph::RailAdjacency;
use crate::seed::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Partition {
    LL,
    LU,
    UU,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::LL, Partition::LU, Partition::UU];

    pub fn of(i_labeled: bool, j_labeled: bool) -> Self {
        match (i_labeled, j_labeled) {
            (true, true) => Partition::LL,
            (false, false) => Partition::UU,
            _ => Partition::LU,
        }
    }
}

/// Edge between two samples, by global index of a [`SplitDataset`] (or of
/// whatever [`SampleSource`] the graph was built for).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
    pub partition: Partition,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleGraph {
    pub edges: Vec<Edge>,
}

impl SampleGraph {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn count(&self, p: Partition) -> usize {
        self.edges.iter().filter(|e| e.partition == p).count()
    }

    pub fn partition(&self, p: Partition) -> Vec<Edge> {
        self.edges.iter().filter(|e| e.partition == p).copied().collect()
    }
}

/// `0.5 * |vi - vj|^2 * w`
pub fn pair_penalty(vi: &[f64], vj: &[f64], w: f64) -> Result<f64> {
    if vi.len() != vj.len() {
        return Err(Error::Shape(format!(
            "descriptor lengths differ: {} vs {}",
            vi.len(),
            vj.len()
        )));
    }
    let sq: f64 = vi.iter().zip(vj).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(0.5 * sq * w)
}

/// Materializes every contemporaneous edge of the split. Meant for small
/// worlds and tests; training uses [`RailEdgeSampler`].
pub fn build_sample_graph(split: &SplitDataset, adjacency: &RailAdjacency) -> Result<SampleGraph> {
    check_adjacency(split, adjacency)?;
    let mut groups: BTreeMap<(chrono::NaiveDate, usize), Vec<usize>> = BTreeMap::new();
    for idx in 0..split.n() {
        let s = split.get(idx);
        groups.entry((s.date, s.slot)).or_default().push(idx);
    }
    let l = split.l();
    let mut edges = Vec::new();
    for members in groups.values() {
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                let w = adjacency.weight(split.get(i).station, split.get(j).station);
                if w > 0.0 {
                    let (i, j) = (i.min(j), i.max(j));
                    edges.push(Edge {
                        i,
                        j,
                        weight: w,
                        partition: Partition::of(i < l, j < l),
                    });
                }
            }
        }
    }
    edges.sort_by(|a, b| (a.i, a.j).cmp(&(b.i, b.j)));
    Ok(SampleGraph { edges })
}

fn check_adjacency(split: &SplitDataset, adjacency: &RailAdjacency) -> Result<()> {
    if adjacency.size() != split.encoder.n_stations {
        return Err(Error::Shape(format!(
            "adjacency covers {} stations, data has {}",
            adjacency.size(),
            split.encoder.n_stations
        )));
    }
    Ok(())
}

/// Uniform edge sampling with replacement, one partition at a time.
pub trait EdgeSampler {
    /// Number of edges in the partition.
    fn size(&self, p: Partition) -> usize;
    fn sample(&self, p: Partition, m: usize, rng: &mut ChaCha8Rng, out: &mut Vec<Edge>);
}

/// Sampler over an explicit edge list.
#[derive(Debug, Clone)]
pub struct GraphSampler {
    parts: [Vec<Edge>; 3],
}

impl GraphSampler {
    pub fn new(graph: &SampleGraph) -> Self {
        Self {
            parts: Partition::ALL.map(|p| graph.partition(p)),
        }
    }
}

impl EdgeSampler for GraphSampler {
    fn size(&self, p: Partition) -> usize {
        self.parts[p as usize].len()
    }

    fn sample(&self, p: Partition, m: usize, rng: &mut ChaCha8Rng, out: &mut Vec<Edge>) {
        let edges = &self.parts[p as usize];
        if edges.is_empty() {
            return;
        }
        out.extend((0..m).map(|_| edges[rng.random_range(0..edges.len())]));
    }
}

const ABSENT: u32 = u32::MAX;

/// Rail-graph sampler that never lists unlabeled-unlabeled edges.
///
/// Edges touching a labeled sample are enumerated up front. UU edges are drawn
/// by picking a `(date, slot)` group and a station pair uniformly, rejecting
/// draws with a labeled or missing endpoint; every UU edge is equally likely.
#[derive(Debug, Clone)]
pub struct RailEdgeSampler {
    ll: Vec<Edge>,
    lu: Vec<Edge>,
    n_stations: usize,
    n_groups: usize,
    pairs: Vec<(usize, usize, f64)>,
    /// cell id -> global sample index
    index: Vec<u32>,
    l: usize,
    uu: usize,
}

impl RailEdgeSampler {
    pub fn new(split: &SplitDataset, adjacency: &RailAdjacency) -> Result<Self> {
        check_adjacency(split, adjacency)?;
        let s = split.encoder.n_stations;
        let n = split.n();
        if n >= ABSENT as usize {
            bail_arg!("too many samples for the edge sampler: {n}");
        }
        let max_cell = (0..n).map(|i| split.get(i).cell_id).max().unwrap_or(0);
        let n_groups = max_cell / s + 1;
        let mut index = vec![ABSENT; n_groups * s];
        for i in 0..n {
            index[split.get(i).cell_id] = i as u32;
        }
        let l = split.l();
        let mut ll = Vec::new();
        let mut lu = Vec::new();
        for i in 0..l {
            let cell = split.labeled[i].cell_id;
            let base = cell - cell % s;
            for &(nb, w) in adjacency.neighbors(cell % s) {
                let j = index[base + nb];
                if j == ABSENT {
                    continue;
                }
                let j = j as usize;
                if j < l {
                    if i < j {
                        ll.push(Edge {
                            i,
                            j,
                            weight: w,
                            partition: Partition::LL,
                        });
                    }
                } else {
                    lu.push(Edge {
                        i,
                        j,
                        weight: w,
                        partition: Partition::LU,
                    });
                }
            }
        }
        let pairs = adjacency.pairs();
        let mut uu = 0usize;
        for g in 0..n_groups {
            let base = g * s;
            for &(a, b, _) in &pairs {
                let (ia, ib) = (index[base + a], index[base + b]);
                if ia != ABSENT && ib != ABSENT && ia as usize >= l && ib as usize >= l {
                    uu += 1;
                }
            }
        }
        Ok(Self {
            ll,
            lu,
            n_stations: s,
            n_groups,
            pairs,
            index,
            l,
            uu,
        })
    }
}

impl EdgeSampler for RailEdgeSampler {
    fn size(&self, p: Partition) -> usize {
        match p {
            Partition::LL => self.ll.len(),
            Partition::LU => self.lu.len(),
            Partition::UU => self.uu,
        }
    }

    fn sample(&self, p: Partition, m: usize, rng: &mut ChaCha8Rng, out: &mut Vec<Edge>) {
        let listed = match p {
            Partition::LL => &self.ll,
            Partition::LU => &self.lu,
            Partition::UU => {
                if self.uu == 0 {
                    return;
                }
                let mut drawn = 0;
                while drawn < m {
                    let g = rng.random_range(0..self.n_groups);
                    let (a, b, w) = self.pairs[rng.random_range(0..self.pairs.len())];
                    let base = g * self.n_stations;
                    let (ia, ib) = (self.index[base + a], self.index[base + b]);
                    if ia == ABSENT || ib == ABSENT || (ia as usize) < self.l || (ib as usize) < self.l {
                        continue;
                    }
                    let (i, j) = (ia.min(ib) as usize, ia.max(ib) as usize);
                    out.push(Edge {
                        i,
                        j,
                        weight: w,
                        partition: Partition::UU,
                    });
                    drawn += 1;
                }
                return;
            }
        };
        if listed.is_empty() {
            return;
        }
        out.extend((0..m).map(|_| listed[rng.random_range(0..listed.len())]));
    }
}

/// Sampled edges of one partition with the factor that turns their penalty
/// sum into an estimate of the partition's term.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeBatch {
    pub partition: Partition,
    pub edges: Vec<Edge>,
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub struct NgmStep {
    pub supervised: f64,
    /// Scaled penalty sum, before multiplying by zeta.
    pub regularizer: f64,
    pub loss: f64,
    pub grads: Gradients,
}

/// `sup_scale * sum(CE over labeled) + zeta * sum_b scale_b * sum_e pair_penalty(e)`
///
/// One train-mode forward pass runs over the labeled batch followed by every
/// other edge endpoint, so batch-norm statistics are shared by both terms.
pub fn ngm_loss<S: SampleSource + ?Sized>(
    model: &mut MlpModel,
    source: &S,
    labeled: &[usize],
    batches: &[EdgeBatch],
    zeta: f64,
    sup_scale: f64,
) -> Result<NgmStep> {
    if labeled.is_empty() {
        bail_arg!("empty labeled batch");
    }
    if !(zeta >= 0.0) {
        bail_arg!("zeta must be non-negative, got {zeta}");
    }
    let mut rows: Vec<usize> = labeled.to_vec();
    let mut row_of: HashMap<usize, usize> = labeled.iter().enumerate().map(|(r, &id)| (id, r)).collect();
    for e in batches.iter().flat_map(|b| &b.edges) {
        for id in [e.i, e.j] {
            row_of.entry(id).or_insert_with(|| {
                rows.push(id);
                rows.len() - 1
            });
        }
    }
    let x = gather(source, &rows)?;
    let (out, cache) = model.forward_train(&x)?;
    let targets = targets_for(source, labeled)?;
    let (supervised, grad_logits) = cross_entropy_term(&out, &targets, sup_scale)?;

    let v = &out.descriptors;
    let mut grad_desc = Array2::zeros(v.dim());
    let mut regularizer = 0.0;
    for b in batches {
        for e in &b.edges {
            let (ri, rj) = (row_of[&e.i], row_of[&e.j]);
            let c = b.scale * e.weight;
            let vi = v.row(ri);
            let vj = v.row(rj);
            let diff = &vi - &vj;
            regularizer += 0.5 * c * diff.dot(&diff);
            let g = &diff * (zeta * c);
            {
                let mut gi = grad_desc.row_mut(ri);
                gi += &g;
            }
            let mut gj = grad_desc.row_mut(rj);
            gj -= &g;
        }
    }
    let has_edges = batches.iter().any(|b| !b.edges.is_empty());
    let grads = backward_checked(model, &cache, &grad_logits, has_edges.then_some(&grad_desc))?;
    Ok(NgmStep {
        supervised,
        regularizer,
        loss: supervised + zeta * regularizer,
        grads,
    })
}

/// The whole objective on a materialized graph: summed cross-entropy over
/// `labeled` plus zeta times the penalty summed over every edge.
pub fn ngm_loss_full<S: SampleSource + ?Sized>(
    model: &mut MlpModel,
    source: &S,
    labeled: &[usize],
    graph: &SampleGraph,
    zeta: f64,
) -> Result<NgmStep> {
    let batches: Vec<EdgeBatch> = Partition::ALL
        .iter()
        .map(|&p| EdgeBatch {
            partition: p,
            edges: graph.partition(p),
            scale: 1.0,
        })
        .collect();
    ngm_loss(model, source, labeled, &batches, zeta, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphSource {
    Rail,
    Natural,
    Cosine,
}

/// How the sampled edge sums of one mini-batch are weighted against the
/// batch-mean cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeScaling {
    /// `|P| / m`: unbiased for each full partition sum.
    FullSum,
    /// `|P| / (m * l)`: unbiased for the full objective divided by the label
    /// count, so zeta keeps the balance it has in the summed objective.
    PerLabel,
    /// `1 / m`: mean penalty per partition.
    PartitionMean,
}

impl EdgeScaling {
    pub fn scale(self, partition_size: usize, sampled: usize, labels: usize) -> f64 {
        if sampled == 0 {
            return 0.0;
        }
        let m = sampled as f64;
        match self {
            EdgeScaling::FullSum => partition_size as f64 / m,
            EdgeScaling::PerLabel => partition_size as f64 / (m * labels.max(1) as f64),
            EdgeScaling::PartitionMean => 1.0 / m,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NgmConfig {
    pub zeta: f64,
    pub edges_per_batch: usize,
    pub graph: GraphSource,
    pub scaling: EdgeScaling,
    /// Neighbours per sample for the natural graph.
    pub natural_k: usize,
    /// Unlabeled samples drawn into the natural graph.
    pub natural_pool: usize,
}

impl Default for NgmConfig {
    fn default() -> Self {
        Self {
            zeta: 0.7,
            edges_per_batch: 32,
            graph: GraphSource::Rail,
            scaling: EdgeScaling::PartitionMean,
            natural_k: 10,
            natural_pool: 2000,
        }
    }
}

impl NgmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.zeta >= 0.0) || !self.zeta.is_finite() {
            bail_arg!("zeta must be a non-negative number, got {}", self.zeta);
        }
        if self.edges_per_batch == 0 && self.zeta > 0.0 {
            bail_arg!("edges_per_batch must be positive");
        }
        if self.natural_k == 0 {
            bail_arg!("natural_k must be positive");
        }
        Ok(())
    }
}

/// k-NN graph over input features of the labeled samples plus a seeded
/// subsample of the unlabeled ones; edge endpoints are global indices.
pub fn natural_sample_graph(split: &SplitDataset, k: usize, pool: usize, seed: u64) -> Result<SampleGraph> {
    let l = split.l();
    let take = pool.min(split.u());
    let mut rng = seed::rng(seed, Stream::Pool);
    let mut extra: Vec<usize> = rand::seq::index::sample(&mut rng, split.u(), take)
        .into_iter()
        .map(|i| l + i)
        .collect();
    extra.sort_unstable();
    let ids: Vec<usize> = (0..l).chain(extra).collect();
    if ids.len() <= k {
        return Ok(SampleGraph::default());
    }
    let x = gather(split, &ids)?;
    let aff = natural_affinity(&x, k)?;
    let mut edges = Vec::new();
    for (a, b, w) in aff.matrix.upper_entries() {
        let (i, j) = (ids[a], ids[b]);
        edges.push(Edge {
            i,
            j,
            weight: w,
            partition: Partition::of(i < l, j < l),
        });
    }
    Ok(SampleGraph { edges })
}

fn train_with_sampler(
    split: &SplitDataset,
    sampler: Option<&dyn EdgeSampler>,
    ngm: &NgmConfig,
    cfg: &TrainConfig,
) -> Result<(MlpModel, TrainLog)> {
    ngm.validate()?;
    if split.l() == 0 {
        return Err(Error::Data("no labeled samples to train on".into()));
    }
    let ids: Vec<usize> = (0..split.l()).collect();
    let (train, val) = holdout_validation(&ids, cfg.validation_fraction, cfg.seed);
    let model = MlpModel::new(split.encoder.width(), cfg.hidden, NUM_CLASSES, cfg.seed)?;
    let sampler = sampler.filter(|_| ngm.zeta > 0.0);
    if let Some(s) = sampler {
        let sizes = Partition::ALL.map(|p| s.size(p));
        if sizes.iter().all(|&n| n == 0) {
            log::warn!("sample graph has no edges; training reduces to the supervised baseline");
        }
        log::debug!("edge partitions LL/LU/UU: {sizes:?}");
    }
    let mut rng = seed::rng(cfg.seed, Stream::Edges);
    let l = split.l();
    fit(model, split, &train, &val, cfg, |m, batch| {
        let mut batches = Vec::new();
        if let Some(s) = sampler {
            for p in Partition::ALL {
                let size = s.size(p);
                if size == 0 {
                    continue;
                }
                let mut edges = Vec::with_capacity(ngm.edges_per_batch);
                s.sample(p, ngm.edges_per_batch, &mut rng, &mut edges);
                let scale = ngm.scaling.scale(size, edges.len(), l);
                batches.push(EdgeBatch {
                    partition: p,
                    edges,
                    scale,
                });
            }
        }
        let step = ngm_loss(m, split, batch, &batches, ngm.zeta, 1.0 / batch.len() as f64)?;
        Ok(StepOutcome {
            loss: step.loss,
            grads: step.grads,
        })
    })
}

/// Mini-batch training of the graph-regularized objective. `adjacency` is the
/// station graph for the rail and cosine sources and is ignored for the
/// natural source.
pub fn train_surconfort(
    split: &SplitDataset,
    adjacency: &RailAdjacency,
    ngm: &NgmConfig,
    cfg: &TrainConfig,
) -> Result<(MlpModel, TrainLog)> {
    ngm.validate()?;
    if ngm.zeta == 0.0 {
        return train_with_sampler(split, None, ngm, cfg);
    }
    match ngm.graph {
        GraphSource::Rail | GraphSource::Cosine => {
            let sampler = RailEdgeSampler::new(split, adjacency)?;
            train_with_sampler(split, Some(&sampler), ngm, cfg)
        }
        GraphSource::Natural => {
            let graph = natural_sample_graph(split, ngm.natural_k, ngm.natural_pool, cfg.seed)?;
            let sampler = GraphSampler::new(&graph);
            train_with_sampler(split, Some(&sampler), ngm, cfg)
        }
    }
}
