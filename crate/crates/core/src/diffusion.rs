//! Graph diffusion baselines: harmonic label propagation, label spreading,
//! and iterative pseudo-labeling with a descriptor graph.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{SplitDataset, NUM_CLASSES};
use crate::error::{bail_arg, Error, Result};
use crate::nn::{
    argmax, descriptors, fit, gather, holdout_validation, supervised_step, train_supervised, MlpModel, SampleSource,
    TrainConfig, TrainLog,
};
use crate::seed::{self, Stream};

/// Compressed sparse rows, columns sorted within each row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Square matrix from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n: usize, triplets: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (i, j, v) in triplets {
            if i >= n || j >= n {
                bail_arg!("entry ({i}, {j}) outside a {n}x{n} matrix");
            }
            rows[i].push((j, v));
        }
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(j, _)| j);
            for (j, v) in row {
                if indices.len() > *indptr.last().expect("nonempty") && *indices.last().expect("nonempty") == j {
                    *values.last_mut().expect("nonempty") += v;
                } else {
                    indices.push(j);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Ok(Self {
            n,
            indptr,
            indices,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.indptr[i]..self.indptr[i + 1];
        self.indices[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.indptr[i]..self.indptr[i + 1];
        match self.indices[r.clone()].binary_search(&j) {
            Ok(p) => self.values[r.start + p],
            Err(_) => 0.0,
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    /// Entries with `i < j`.
    pub fn upper_entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.entries().filter(|&(i, j, _)| i < j)
    }

    pub fn transpose(&self) -> Self {
        Self::from_triplets(self.n, self.entries().map(|(i, j, v)| (j, i, v))).expect("same shape")
    }

    pub fn row_sums(&self) -> Array1<f64> {
        (0..self.n).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    pub fn mul_vec(&self, x: ArrayView1<f64>) -> Array1<f64> {
        (0..self.n).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum()).collect()
    }

    pub fn mul_mat(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.n, x.ncols()));
        for i in 0..self.n {
            let mut o = out.row_mut(i);
            for (j, v) in self.row(i) {
                o.scaled_add(v, &x.row(j));
            }
        }
        out
    }

    /// `diag(left) * self * diag(right)`
    pub fn scale(&self, left: &Array1<f64>, right: &Array1<f64>) -> Self {
        let mut out = self.clone();
        for i in 0..self.n {
            for p in self.indptr[i]..self.indptr[i + 1] {
                out.values[p] *= left[i] * right[self.indices[p]];
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut d = Array2::zeros((self.n, self.n));
        for (i, j, v) in self.entries() {
            d[[i, j]] = v;
        }
        d
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.entries().all(|(i, j, v)| (self.get(j, i) - v).abs() <= tol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AffinityKind {
    /// Gaussian kernel on input-space L2 distance with width `sigma`.
    Natural { sigma: f64 },
    /// Clipped inner product raised to `gamma`.
    Descriptor { gamma: f64 },
    Given,
}

/// Symmetric, non-negative sample affinities with an empty diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub matrix: CsrMatrix,
    pub k: usize,
    pub kind: AffinityKind,
}

impl AffinityMatrix {
    /// Wraps a hand-built graph; checks the invariants.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut trip = Vec::new();
        for (i, j, w) in edges {
            if i == j {
                bail_arg!("self loop at node {i}");
            }
            if !(w >= 0.0) || !w.is_finite() {
                bail_arg!("edge ({i}, {j}) has weight {w}");
            }
            trip.push((i, j, w));
            trip.push((j, i, w));
        }
        Ok(Self {
            matrix: CsrMatrix::from_triplets(n, trip)?,
            k: 0,
            kind: AffinityKind::Given,
        })
    }

    pub fn len(&self) -> usize {
        self.matrix.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `k` best columns of each row by `key` (smaller first), ties to the lower
/// column index, never the row itself.
fn knn_rows(n: usize, k: usize, mut key: impl FnMut(usize, &mut Vec<f64>)) -> Vec<Vec<(usize, f64)>> {
    let mut out = Vec::with_capacity(n);
    let mut buf = Vec::with_capacity(n);
    for i in 0..n {
        buf.clear();
        key(i, &mut buf);
        let mut cand: Vec<(f64, usize)> = buf.iter().enumerate().filter(|&(j, _)| j != i).map(|(j, &v)| (v, j)).collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if cand.len() > k {
            cand.select_nth_unstable_by(k - 1, cmp);
            cand.truncate(k);
        }
        cand.sort_by(cmp);
        out.push(cand.into_iter().map(|(v, j)| (j, v)).collect());
    }
    out
}

const GRAM_BLOCK: usize = 256;

/// Rows of `a * b^T`, computed a block at a time and handed to `each` with the
/// global row index.
fn gram_rows(a: &Array2<f64>, b: &Array2<f64>, mut each: impl FnMut(usize, ArrayView1<f64>)) {
    let bt = b.t();
    for start in (0..a.nrows()).step_by(GRAM_BLOCK) {
        let end = (start + GRAM_BLOCK).min(a.nrows());
        let g = a.slice(ndarray::s![start..end, ..]).dot(&bt);
        for (r, row) in g.rows().into_iter().enumerate() {
            each(start + r, row);
        }
    }
}

fn sq_norms(x: &Array2<f64>) -> Array1<f64> {
    x.rows().into_iter().map(|r| r.dot(&r)).collect()
}

/// Directed k-NN lists by Euclidean distance, with distances.
fn l2_knn(x: &Array2<f64>, k: usize) -> Vec<Vec<(usize, f64)>> {
    let n = x.nrows();
    let norms = sq_norms(x);
    let mut dist = vec![Vec::new(); n];
    gram_rows(x, x, |i, g| {
        dist[i] = g
            .iter()
            .enumerate()
            .map(|(j, &gij)| (norms[i] + norms[j] - 2.0 * gij).max(0.0))
            .collect();
    });
    knn_rows(n, k, |i, buf| buf.extend_from_slice(&dist[i]))
        .into_iter()
        .map(|row| row.into_iter().map(|(j, d2)| (j, d2.sqrt())).collect())
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn kernel_width(dists: impl Iterator<Item = f64>) -> f64 {
    let d: Vec<f64> = dists.collect();
    let sigma = median(d.clone());
    if sigma > 0.0 {
        return sigma;
    }
    // more than half the neighbours coincide; fall back to the positive ones
    let pos: Vec<f64> = d.into_iter().filter(|&v| v > 0.0).collect();
    if pos.is_empty() {
        1.0
    } else {
        median(pos)
    }
}

/// Gaussian weight `exp(-d^2 / (2 sigma^2))`.
pub fn gaussian_weight(d: f64, sigma: f64) -> f64 {
    (-(d * d) / (2.0 * sigma * sigma)).exp()
}

/// Directed k-NN graph by input-space L2 distance with Gaussian weights,
/// symmetrized by taking the larger of the two directions. The kernel width
/// is the median neighbour distance.
pub fn natural_affinity(features: &Array2<f64>, k: usize) -> Result<AffinityMatrix> {
    let n = features.nrows();
    if k == 0 {
        bail_arg!("k must be positive");
    }
    if n <= k {
        bail_arg!("natural graph needs more than k = {k} samples, got {n}");
    }
    let knn = l2_knn(features, k);
    let sigma = kernel_width(knn.iter().flatten().map(|&(_, d)| d));
    let mut best: std::collections::HashMap<(usize, usize), f64> = std::collections::HashMap::new();
    for (i, row) in knn.iter().enumerate() {
        for &(j, d) in row {
            let w = gaussian_weight(d, sigma);
            let key = (i.min(j), i.max(j));
            let e = best.entry(key).or_insert(0.0);
            *e = e.max(w);
        }
    }
    let trip = best.into_iter().flat_map(|((i, j), w)| [(i, j, w), (j, i, w)]);
    Ok(AffinityMatrix {
        matrix: CsrMatrix::from_triplets(n, trip)?,
        k,
        kind: AffinityKind::Natural { sigma },
    })
}

/// `a_ij = max(v_i . v_j, 0)^gamma` for the `k` neighbours of `i` by inner
/// product, then `A + A^T`.
pub fn descriptor_affinity(desc: &Array2<f64>, k: usize, gamma: f64) -> Result<AffinityMatrix> {
    let n = desc.nrows();
    if k == 0 {
        bail_arg!("k must be positive");
    }
    if n <= k {
        bail_arg!("descriptor graph needs more than k = {k} samples, got {n}");
    }
    if !(gamma >= 1.0) {
        bail_arg!("gamma must be at least 1, got {gamma}");
    }
    let mut sims = vec![Vec::new(); n];
    gram_rows(desc, desc, |i, g| sims[i] = g.to_vec());
    let knn = knn_rows(n, k, |i, buf| buf.extend(sims[i].iter().map(|&s| -s)));
    let mut trip = Vec::new();
    for (i, row) in knn.into_iter().enumerate() {
        for (j, neg) in row {
            let s = -neg;
            if s > 0.0 {
                let a = s.powf(gamma);
                trip.push((i, j, a));
                trip.push((j, i, a));
            }
        }
    }
    Ok(AffinityMatrix {
        matrix: CsrMatrix::from_triplets(n, trip)?,
        k,
        kind: AffinityKind::Descriptor { gamma },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_iterations: 1000,
        }
    }
}

/// Conjugate gradient for a symmetric positive definite operator. Stops when
/// the residual norm drops to `tol`.
pub fn conjugate_gradient(
    apply: impl Fn(ArrayView1<f64>) -> Array1<f64>,
    b: ArrayView1<f64>,
    tol: f64,
    max_iterations: usize,
) -> Result<(Array1<f64>, usize)> {
    let mut x = Array1::zeros(b.len());
    let mut r = b.to_owned();
    let mut rr = r.dot(&r);
    if rr.sqrt() <= tol {
        return Ok((x, 0));
    }
    let mut p = r.clone();
    for it in 1..=max_iterations {
        let ap = apply(p.view());
        let pap = p.dot(&ap);
        if !(pap > 0.0) {
            return Err(Error::Numeric(format!("operator is not positive definite (p'Ap = {pap})")));
        }
        let alpha = rr / pap;
        x.scaled_add(alpha, &p);
        r.scaled_add(-alpha, &ap);
        let rr_new = r.dot(&r);
        if rr_new.sqrt() <= tol {
            return Ok((x, it));
        }
        p = &r + &(&p * (rr_new / rr));
        rr = rr_new;
    }
    Err(Error::Numeric(format!(
        "conjugate gradient did not reach {tol:e} in {max_iterations} iterations"
    )))
}

fn one_hot_labels(n: usize, labels: &[Option<u8>]) -> Result<Array2<f64>> {
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} nodes", labels.len())));
    }
    let mut y = Array2::zeros((n, NUM_CLASSES));
    let mut any = false;
    for (i, l) in labels.iter().enumerate() {
        if let Some(c) = *l {
            if c as usize >= NUM_CLASSES {
                bail_arg!("label {c} outside {NUM_CLASSES} classes");
            }
            y[[i, c as usize]] = 1.0;
            any = true;
        }
    }
    if !any {
        bail_arg!("diffusion needs at least one label");
    }
    Ok(y)
}

/// `D^{-1/2} A D^{-1/2}`, isolated nodes left as zero rows.
pub fn normalized(aff: &AffinityMatrix) -> CsrMatrix {
    let d = aff.matrix.row_sums();
    let inv: Array1<f64> = d.iter().map(|&v| if v > 0.0 { 1.0 / v.sqrt() } else { 0.0 }).collect();
    aff.matrix.scale(&inv, &inv)
}

/// Most frequent given label, ties to the lower class.
pub fn majority_class(labels: &[Option<u8>]) -> u8 {
    let mut counts = [0usize; NUM_CLASSES];
    for c in labels.iter().flatten() {
        counts[*c as usize] += 1;
    }
    let mut best = 0;
    for c in 1..NUM_CLASSES {
        if counts[c] > counts[best] {
            best = c;
        }
    }
    best as u8
}

/// Class scores and row-argmax predictions of a diffusion.
#[derive(Debug, Clone, PartialEq)]
pub struct Diffusion {
    pub scores: Array2<f64>,
    pub predictions: Vec<u8>,
    /// Rows no label reached; their prediction is the majority class.
    pub unreached: Vec<bool>,
    pub iterations: usize,
}

fn finish(scores: Array2<f64>, labels: &[Option<u8>], iterations: usize) -> Diffusion {
    let fallback = majority_class(labels);
    let mut unreached = Vec::with_capacity(scores.nrows());
    let predictions = scores
        .rows()
        .into_iter()
        .map(|r| {
            let zero = r.iter().all(|&v| v == 0.0);
            unreached.push(zero);
            if zero {
                fallback
            } else {
                argmax(r.as_slice().expect("row-major")) as u8
            }
        })
        .collect();
    let n_unreached = unreached.iter().filter(|&&u| u).count();
    if n_unreached > 0 {
        log::debug!("{n_unreached} nodes unreachable from any label; using class {fallback}");
    }
    Diffusion {
        scores,
        predictions,
        unreached,
        iterations,
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        bail_arg!("delta must lie in (0, 1), got {delta}");
    }
    Ok(())
}

/// Solves `(I - delta S) Z = Y` by conjugate gradient, one class column at a
/// time. Each column's residual is driven below `tol * (1 - delta)`, which
/// bounds its error by `tol` since the operator's smallest eigenvalue is at
/// least `1 - delta`.
pub fn diffuse(aff: &AffinityMatrix, labels: &[Option<u8>], delta: f64, solver: &SolverConfig) -> Result<Diffusion> {
    check_delta(delta)?;
    let n = aff.len();
    let y = one_hot_labels(n, labels)?;
    let s = normalized(aff);
    let mut z = Array2::zeros((n, NUM_CLASSES));
    let mut iterations = 0;
    for c in 0..NUM_CLASSES {
        let apply = |v: ArrayView1<f64>| {
            let sv = s.mul_vec(v);
            &v - &(sv * delta)
        };
        let (col, it) = conjugate_gradient(apply, y.column(c), solver.tolerance * (1.0 - delta), solver.max_iterations)?;
        z.column_mut(c).assign(&col);
        iterations = iterations.max(it);
    }
    Ok(finish(z, labels, iterations))
}

/// Iterates `Z <- delta S Z + (1 - delta) Y` from `Z = Y`. The map contracts
/// by `delta`, so stopping when a step moves less than
/// `tol (1 - delta) / delta` leaves the iterate within `tol` of the fixed
/// point `(1 - delta) (I - delta S)^{-1} Y`.
pub fn label_spreading(
    aff: &AffinityMatrix,
    labels: &[Option<u8>],
    delta: f64,
    solver: &SolverConfig,
) -> Result<Diffusion> {
    check_delta(delta)?;
    let n = aff.len();
    let y = one_hot_labels(n, labels)?;
    let s = normalized(aff);
    let base = &y * (1.0 - delta);
    let stop = solver.tolerance * (1.0 - delta) / delta;
    let mut z = y.clone();
    for it in 1..=solver.max_iterations {
        let next = &s.mul_mat(&z) * delta + &base;
        let step = frobenius(&(&next - &z));
        z = next;
        if step <= stop {
            return Ok(finish(z, labels, it));
        }
    }
    Err(Error::Numeric(format!(
        "label spreading did not converge in {} iterations",
        solver.max_iterations
    )))
}

fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Hard-clamped propagation: `Z <- D^{-1} A Z`, labeled rows reset to their
/// one-hot labels after every step. Convergence is declared when the step
/// size times `rho / (1 - rho)` falls below the tolerance, `rho` being the
/// observed ratio of successive step sizes.
pub fn label_propagation(aff: &AffinityMatrix, labels: &[Option<u8>], solver: &SolverConfig) -> Result<Diffusion> {
    let n = aff.len();
    let y = one_hot_labels(n, labels)?;
    let d = aff.matrix.row_sums();
    let inv: Array1<f64> = d.iter().map(|&v| if v > 0.0 { 1.0 / v } else { 0.0 }).collect();
    let p = aff.matrix.scale(&inv, &Array1::ones(n));
    let clamp = |z: &mut Array2<f64>| {
        for (i, l) in labels.iter().enumerate() {
            if l.is_some() {
                z.row_mut(i).assign(&y.row(i));
            }
        }
    };
    let mut z = y.clone();
    let mut prev_step = f64::INFINITY;
    for it in 1..=solver.max_iterations {
        let mut next = p.mul_mat(&z);
        clamp(&mut next);
        let step = frobenius(&(&next - &z));
        z = next;
        if step == 0.0 {
            return Ok(finish(z, labels, it));
        }
        let rho = step / prev_step;
        if prev_step.is_finite() && rho < 1.0 && step * rho / (1.0 - rho) <= solver.tolerance {
            return Ok(finish(z, labels, it));
        }
        prev_step = step;
    }
    Err(Error::Numeric(format!(
        "label propagation did not converge in {} iterations",
        solver.max_iterations
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiffusionMethod {
    Lp,
    Ls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub delta: f64,
    pub k: usize,
    pub gamma: f64,
    pub rounds: usize,
    pub solver: SolverConfig,
    /// Loss weight of pseudo-labeled samples during retraining.
    pub pseudo_weight: f64,
    /// Supervised pre-training budget before the first diffusion.
    pub pretrain_epochs: usize,
    /// Unlabeled samples drawn into each graph.
    pub pool: usize,
    /// Neighbours per node for the natural graph of the LP and LS baselines.
    pub natural_k: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            delta: 0.9,
            k: 50,
            gamma: 3.0,
            rounds: 3,
            solver: SolverConfig::default(),
            pseudo_weight: 0.5,
            pretrain_epochs: 100,
            pool: 2000,
            natural_k: 50,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        check_delta(self.delta)?;
        if self.k == 0 || self.natural_k == 0 {
            bail_arg!("k must be positive");
        }
        if !(self.gamma >= 1.0) {
            bail_arg!("gamma must be at least 1, got {}", self.gamma);
        }
        if !(self.solver.tolerance > 0.0) || self.solver.max_iterations == 0 {
            bail_arg!("solver needs a positive tolerance and iteration cap");
        }
        if !(self.pseudo_weight >= 0.0) {
            bail_arg!("pseudo-label weight must be non-negative");
        }
        if self.pretrain_epochs == 0 {
            bail_arg!("pretrain_epochs must be positive");
        }
        Ok(())
    }
}

/// Labeled ids plus a seeded draw of `pool` unlabeled ids, ascending.
pub fn sample_pool(split: &SplitDataset, pool: usize, seed: u64) -> Vec<usize> {
    let l = split.l();
    let take = pool.min(split.u());
    let mut rng = seed::rng(seed, Stream::Pool);
    let mut extra: Vec<usize> = rand::seq::index::sample(&mut rng, split.u(), take)
        .into_iter()
        .map(|i| l + i)
        .collect();
    extra.sort_unstable();
    (0..l).chain(extra).collect()
}

/// LP or LS fitted on a natural graph over a sample pool. New samples are
/// scored by a kernel-weighted vote of their nearest pool members' diffused
/// scores, using the same `k` and kernel width as the graph.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    pub pool_features: Array2<f64>,
    pub scores: Array2<f64>,
    pub k: usize,
    pub sigma: f64,
    pub fallback: u8,
}

impl DiffusionModel {
    pub fn fit(split: &SplitDataset, method: DiffusionMethod, cfg: &DiffusionConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if split.l() == 0 {
            return Err(Error::Data("no labeled samples to diffuse from".into()));
        }
        let ids = sample_pool(split, cfg.pool, seed);
        let x = gather(split, &ids)?;
        let k = cfg.natural_k.min(ids.len().saturating_sub(1)).max(1);
        let aff = natural_affinity(&x, k)?;
        let sigma = match aff.kind {
            AffinityKind::Natural { sigma } => sigma,
            _ => unreachable!("natural affinity"),
        };
        let labels: Vec<Option<u8>> = ids.iter().map(|&i| split.label(i)).collect();
        let out = match method {
            DiffusionMethod::Lp => label_propagation(&aff, &labels, &cfg.solver)?,
            DiffusionMethod::Ls => label_spreading(&aff, &labels, cfg.delta, &cfg.solver)?,
        };
        Ok(Self {
            pool_features: x,
            scores: out.scores,
            k,
            sigma,
            fallback: majority_class(&labels),
        })
    }

    pub fn predict(&self, features: &Array2<f64>) -> Result<Vec<u8>> {
        if features.ncols() != self.pool_features.ncols() {
            return Err(Error::Shape(format!(
                "query width {} != pool width {}",
                features.ncols(),
                self.pool_features.ncols()
            )));
        }
        let pool_norms = sq_norms(&self.pool_features);
        let q_norms = sq_norms(features);
        let mut out = vec![0u8; features.nrows()];
        gram_rows(features, &self.pool_features, |i, g| {
            let mut cand: Vec<(f64, usize)> = g
                .iter()
                .enumerate()
                .map(|(j, &gij)| ((q_norms[i] + pool_norms[j] - 2.0 * gij).max(0.0), j))
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            let k = self.k.min(cand.len());
            if cand.len() > k {
                cand.select_nth_unstable_by(k - 1, cmp);
                cand.truncate(k);
            }
            let mut score = [0.0; NUM_CLASSES];
            for (d2, j) in cand {
                let w = gaussian_weight(d2.sqrt(), self.sigma);
                for (c, s) in score.iter_mut().enumerate() {
                    *s += w * self.scores[[j, c]];
                }
            }
            out[i] = if score.iter().all(|&v| v == 0.0) {
                self.fallback
            } else {
                argmax(&score) as u8
            };
        });
        Ok(out)
    }
}

fn l2_normalize_rows(mut x: Array2<f64>) -> Array2<f64> {
    for mut r in x.axis_iter_mut(Axis(0)) {
        let norm = r.dot(&r).sqrt();
        if norm > 0.0 {
            r /= norm;
        }
    }
    x
}

/// Labeled and pseudo-labeled samples of a split, addressed by position.
struct PseudoSource<'a> {
    split: &'a SplitDataset,
    ids: Vec<usize>,
    labels: Vec<u8>,
    weights: Vec<f64>,
}

impl SampleSource for PseudoSource<'_> {
    fn width(&self) -> usize {
        self.split.width()
    }

    fn len(&self) -> usize {
        self.ids.len()
    }

    fn fill_row(&self, idx: usize, row: &mut [f64]) -> Result<()> {
        self.split.fill_row(self.ids[idx], row)
    }

    fn label(&self, idx: usize) -> Option<u8> {
        Some(self.labels[idx])
    }

    fn weight(&self, idx: usize) -> f64 {
        self.weights[idx]
    }
}

/// Pre-trains the supervised network, then for each round: embeds the pool,
/// builds the descriptor graph on unit-normalized descriptors, diffuses the
/// training labels, and retrains from scratch on true labels (weight 1) plus
/// pseudo-labels. Returns the model with the best validation accuracy across
/// pre-training and all rounds.
pub fn lp_dssl_train(split: &SplitDataset, cfg: &DiffusionConfig, train: &TrainConfig) -> Result<(MlpModel, TrainLog)> {
    cfg.validate()?;
    let pre_cfg = TrainConfig {
        max_epochs: cfg.pretrain_epochs,
        ..train.clone()
    };
    let (mut model, mut log) = train_supervised(split, &pre_cfg)?;
    if cfg.rounds == 0 {
        return Ok((model, log));
    }
    let ids: Vec<usize> = (0..split.l()).collect();
    let (train_ids, val_ids) = holdout_validation(&ids, train.validation_fraction, train.seed);
    let mut pool = train_ids.clone();
    pool.extend(sample_pool(split, cfg.pool, train.seed).into_iter().filter(|&i| i >= split.l()));
    let n_true = train_ids.len();
    let mut best = (model.clone(), log.clone());
    for round in 0..cfg.rounds {
        let desc = l2_normalize_rows(descriptors(&model, split, &pool)?);
        let k = cfg.k.min(pool.len().saturating_sub(1)).max(1);
        let aff = descriptor_affinity(&desc, k, cfg.gamma)?;
        let seeds: Vec<Option<u8>> = pool
            .iter()
            .enumerate()
            .map(|(p, &i)| if p < n_true { split.label(i) } else { None })
            .collect();
        let z = diffuse(&aff, &seeds, cfg.delta, &cfg.solver)?;

        let mut src = PseudoSource {
            split,
            ids: Vec::new(),
            labels: Vec::new(),
            weights: Vec::new(),
        };
        for (p, &i) in pool.iter().enumerate() {
            src.ids.push(i);
            if p < n_true {
                src.labels.push(split.label(i).expect("labeled"));
                src.weights.push(1.0);
            } else {
                src.labels.push(z.predictions[p]);
                src.weights.push(cfg.pseudo_weight);
            }
        }
        let fit_ids: Vec<usize> = (0..src.ids.len()).collect();
        let val_start = src.ids.len();
        for &i in &val_ids {
            src.ids.push(i);
            src.labels.push(split.label(i).expect("labeled"));
            src.weights.push(1.0);
        }
        let val_pos: Vec<usize> = (val_start..src.ids.len()).collect();
        let fresh = MlpModel::new(split.encoder.width(), train.hidden, NUM_CLASSES, train.seed)?;
        let (m, l) = fit(fresh, &src, &fit_ids, &val_pos, train, |m, batch| supervised_step(m, &src, batch))?;
        log::debug!(
            "lp-dssl round {round}: val accuracy {:.4} (best so far {:.4})",
            l.best_val_accuracy(),
            best.1.best_val_accuracy()
        );
        if l.best_val_accuracy() > best.1.best_val_accuracy() {
            best = (m.clone(), l.clone());
        }
        model = m;
        log = l;
    }
    let _ = log;
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csr_sums_duplicates_and_transposes() {
        let m = CsrMatrix::from_triplets(3, [(0, 1, 1.0), (0, 1, 2.0), (2, 0, 4.0)]).unwrap();
        assert_eq!(m.get(0, 1), 3.0);
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.transpose().get(0, 2), 4.0);
        assert!(CsrMatrix::from_triplets(2, [(0, 2, 1.0)]).is_err());
    }

    #[test]
    fn descriptor_affinity_examples() {
        let v = ndarray::array![[1.0, 0.0], [0.5, 0.0], [-1.0, 0.0]];
        let a = descriptor_affinity(&v, 1, 3.0).unwrap();
        // 0 -> 1 (0.5), 1 -> 0 (0.5), 2 -> 1 (-0.5 clipped)
        assert_eq!(a.matrix.get(0, 1), 2.0 * 0.125);
        assert_eq!(a.matrix.get(2, 1), 0.0);
        assert_eq!(a.matrix.get(0, 0), 0.0);
    }

    #[test]
    fn gaussian_weight_decreases() {
        assert_eq!(gaussian_weight(0.0, 0.7), 1.0);
        assert!(gaussian_weight(0.5, 1.0) > gaussian_weight(0.6, 1.0));
    }

    #[test]
    fn isolated_nodes_fall_back_to_majority() {
        let aff = AffinityMatrix::from_edges(4, [(0, 1, 1.0)]).unwrap();
        let labels = [Some(2), None, Some(1), None];
        let z = diffuse(&aff, &labels, 0.9, &SolverConfig::default()).unwrap();
        assert_eq!(z.predictions[1], 2);
        assert!(z.unreached[3]);
        assert_eq!(z.predictions[3], 1);
    }
}
