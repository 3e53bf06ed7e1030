//! Four-layer fully connected classifier with batch normalization in front of
//! layers 2-4.
//!
//! ```text
//! x -> fc1 -> relu -> bn1 -> fc2 -> relu -> bn2 -> fc3 -> relu (= descriptor)
//!   -> bn3 -> fc4 -> softmax
//! ```
//!
//! Everything is `f64`. The first layer skips zero inputs, which makes the
//! one-hot encoded samples cheap regardless of the station and slot counts.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{bail_arg, Error, Result};
use crate::seed::{self, Stream};

pub const DEFAULT_HIDDEN: [usize; 3] = [128, 256, 128];
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
/// Floor applied to the true-class probability inside the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `in x out`, row-major.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        Self {
            scale: Array1::ones(width),
            shift: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<Dense>,
    /// `norms[k]` sits in front of `layers[k + 1]`.
    pub norms: Vec<BatchNorm>,
}

/// Per-batch outputs of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub probs: Array2<f64>,
    /// Post-activation output of the third layer.
    pub descriptors: Array2<f64>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

/// Intermediate values of a train-mode forward pass needed by `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array2<f64>,
    pre: Vec<Array2<f64>>,
    normed: Vec<Array2<f64>>,
    bn: Vec<BnCache>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }
}

/// Gradients laid out like the trainable part of [`MlpModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub scales: Vec<Array1<f64>>,
    pub shifts: Vec<Array1<f64>>,
    /// d(loss)/d(input), when requested.
    pub input: Option<Array2<f64>>,
}

impl Gradients {
    /// Same order as [`MlpModel::trainable_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(10);
        for k in 0..self.weights.len() {
            if k > 0 {
                out.push(self.scales[k - 1].as_slice().expect("contiguous"));
                out.push(self.shifts[k - 1].as_slice().expect("contiguous"));
            }
            out.push(self.weights[k].as_slice().expect("contiguous"));
            out.push(self.biases[k].as_slice().expect("contiguous"));
        }
        out
    }
}

impl MlpModel {
    /// He-style uniform fan-in initialization, zero biases, identity batch
    /// norm. Bit-reproducible for a given seed.
    pub fn new(input_width: usize, hidden: [usize; 3], classes: usize, seed: u64) -> Result<Self> {
        if input_width == 0 || classes < 2 || hidden.contains(&0) {
            bail_arg!("invalid network shape {input_width} -> {hidden:?} -> {classes}");
        }
        let widths = [input_width, hidden[0], hidden[1], hidden[2], classes];
        let mut rng = seed::rng(seed, Stream::Init);
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                let weight = Array2::from_shape_simple_fn((w[0], w[1]), || rng.random_range(-bound..bound));
                Dense {
                    weight,
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        let norms = hidden.iter().map(|&h| BatchNorm::new(h)).collect();
        Ok(Self { layers, norms })
    }

    /// All parameters zero, batch norm at identity running statistics.
    pub fn zeros(input_width: usize, hidden: [usize; 3], classes: usize) -> Self {
        let widths = [input_width, hidden[0], hidden[1], hidden[2], classes];
        let layers = widths
            .windows(2)
            .map(|w| Dense {
                weight: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        let mut norms: Vec<BatchNorm> = hidden.iter().map(|&h| BatchNorm::new(h)).collect();
        for n in &mut norms {
            n.scale.fill(0.0);
        }
        Self { layers, norms }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.weight.ncols()).collect()
    }

    pub fn descriptor_width(&self) -> usize {
        self.layers[2].weight.ncols()
    }

    pub fn classes(&self) -> usize {
        self.layers[3].weight.ncols()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum::<usize>()
            + self.norms.iter().map(|n| 2 * n.scale.len()).sum::<usize>()
    }

    /// Trainable tensors: for each layer `k`, `[bn(k-1).scale, bn(k-1).shift]`
    /// (k > 0), then `fc(k).weight, fc(k).bias`.
    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(10);
        let (layers, norms) = (&mut self.layers, &mut self.norms);
        let mut norm_iter = norms.iter_mut();
        for (k, layer) in layers.iter_mut().enumerate() {
            if k > 0 {
                let n = norm_iter.next().expect("three norms");
                out.push(n.scale.as_slice_mut().expect("contiguous"));
                out.push(n.shift.as_slice_mut().expect("contiguous"));
            }
            out.push(layer.weight.as_slice_mut().expect("contiguous"));
            out.push(layer.bias.as_slice_mut().expect("contiguous"));
        }
        out
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_width() {
            return Err(Error::Shape(format!(
                "input width {} does not match model input width {}",
                x.ncols(),
                self.input_width()
            )));
        }
        if x.nrows() == 0 {
            bail_arg!("forward pass on an empty batch");
        }
        Ok(())
    }

    /// Inference with running batch-norm statistics. Rows are independent.
    pub fn forward_infer(&self, x: &Array2<f64>) -> Result<ForwardOutput> {
        self.check_input(&x.view())?;
        let mut h = relu(first_layer(x, &self.layers[0]));
        let mut descriptors = None;
        for k in 1..4 {
            let n = &self.norms[k - 1];
            let inv_std = n.running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
            let normed = (&h - &n.running_mean) * &inv_std * &n.scale + &n.shift;
            let z = normed.dot(&self.layers[k].weight) + &self.layers[k].bias;
            if k < 3 {
                h = relu(z);
            } else {
                descriptors = Some(h);
                h = softmax(z);
            }
        }
        Ok(ForwardOutput {
            probs: h,
            descriptors: descriptors.expect("set at k = 3"),
        })
    }

    /// Training-mode pass: batch statistics, running statistics updated.
    /// Needs at least two rows.
    pub fn forward_train(&mut self, x: &Array2<f64>) -> Result<(ForwardOutput, ForwardCache)> {
        self.check_input(&x.view())?;
        if x.nrows() < 2 {
            bail_arg!("train-mode batch normalization needs a batch of at least 2, got {}", x.nrows());
        }
        let mut pre = Vec::with_capacity(3);
        let mut normed_all = Vec::with_capacity(3);
        let mut bn_all = Vec::with_capacity(3);
        let z1 = first_layer(x, &self.layers[0]);
        let mut h = relu(z1.clone());
        pre.push(z1);
        let mut descriptors = None;
        for k in 1..4 {
            let (normed, cache) = bn_train(&mut self.norms[k - 1], &h);
            let z = normed.dot(&self.layers[k].weight) + &self.layers[k].bias;
            normed_all.push(normed);
            bn_all.push(cache);
            if k < 3 {
                h = relu(z.clone());
                pre.push(z);
            } else {
                descriptors = Some(h);
                h = softmax(z);
            }
        }
        Ok((
            ForwardOutput {
                probs: h,
                descriptors: descriptors.expect("set at k = 3"),
            },
            ForwardCache {
                input: x.clone(),
                pre,
                normed: normed_all,
                bn: bn_all,
            },
        ))
    }

    pub fn forward(&mut self, x: &Array2<f64>, mode: Mode) -> Result<ForwardOutput> {
        match mode {
            Mode::Train => self.forward_train(x).map(|(o, _)| o),
            Mode::Infer => self.forward_infer(x),
        }
    }

    /// Reverse pass. `grad_logits` is d(loss)/d(pre-softmax logits) and
    /// `grad_descriptors` an optional extra gradient entering at the
    /// descriptor (third activation).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_logits: &Array2<f64>,
        grad_descriptors: Option<&Array2<f64>>,
        want_input_grad: bool,
    ) -> Result<Gradients> {
        let n = cache.batch_size();
        if grad_logits.dim() != (n, self.classes()) {
            return Err(Error::Shape(format!(
                "logit gradient {:?} does not match batch {n} x {}",
                grad_logits.dim(),
                self.classes()
            )));
        }
        if let Some(g) = grad_descriptors {
            if g.dim() != (n, self.descriptor_width()) {
                return Err(Error::Shape(format!(
                    "descriptor gradient {:?} does not match batch {n} x {}",
                    g.dim(),
                    self.descriptor_width()
                )));
            }
        }
        let mut weights = vec![Array2::zeros((0, 0)); 4];
        let mut biases = vec![Array1::zeros(0); 4];
        let mut scales = vec![Array1::zeros(0); 3];
        let mut shifts = vec![Array1::zeros(0); 3];

        let mut dz = grad_logits.clone();
        for k in (1..4).rev() {
            weights[k] = cache.normed[k - 1].t().dot(&dz);
            biases[k] = dz.sum_axis(Axis(0));
            let dnormed = dz.dot(&self.layers[k].weight.t());
            let (mut dh, dscale, dshift) = bn_backward(&self.norms[k - 1], &cache.bn[k - 1], &dnormed);
            scales[k - 1] = dscale;
            shifts[k - 1] = dshift;
            if k == 3 {
                if let Some(g) = grad_descriptors {
                    dh += g;
                }
            }
            // dh is w.r.t. relu(pre[k-1])
            Zip::from(&mut dh).and(&cache.pre[k - 1]).for_each(|d, &z| {
                if z <= 0.0 {
                    *d = 0.0;
                }
            });
            dz = dh;
        }
        weights[0] = sparse_t_dot(&cache.input, &dz);
        biases[0] = dz.sum_axis(Axis(0));
        let input = want_input_grad.then(|| dz.dot(&self.layers[0].weight.t()));
        Ok(Gradients {
            weights,
            biases,
            scales,
            shifts,
            input,
        })
    }
}

/// `x W + b`, skipping zero entries of `x`.
fn first_layer(x: &Array2<f64>, layer: &Dense) -> Array2<f64> {
    let out_w = layer.weight.ncols();
    let mut z = Array2::zeros((x.nrows(), out_w));
    let w = layer.weight.as_standard_layout();
    let w = w.as_slice().expect("standard layout");
    let b = layer.bias.as_slice().expect("contiguous");
    for (xr, mut zr) in x.rows().into_iter().zip(z.rows_mut()) {
        let zs = zr.as_slice_mut().expect("row-major output");
        zs.copy_from_slice(b);
        for (c, &v) in xr.iter().enumerate() {
            if v != 0.0 {
                let wr = &w[c * out_w..(c + 1) * out_w];
                for (zo, &wo) in zs.iter_mut().zip(wr) {
                    *zo += v * wo;
                }
            }
        }
    }
    z
}

/// `xᵀ dz`, skipping zero entries of `x`.
fn sparse_t_dot(x: &Array2<f64>, dz: &Array2<f64>) -> Array2<f64> {
    let out_w = dz.ncols();
    let mut g = Array2::<f64>::zeros((x.ncols(), out_w));
    let gs = g.as_slice_mut().expect("fresh array");
    for (xr, dr) in x.rows().into_iter().zip(dz.rows()) {
        let dr = dr.to_slice().expect("row-major gradient");
        for (c, &v) in xr.iter().enumerate() {
            if v != 0.0 {
                for (go, &d) in gs[c * out_w..(c + 1) * out_w].iter_mut().zip(dr) {
                    *go += v * d;
                }
            }
        }
    }
    g
}

fn relu(mut z: Array2<f64>) -> Array2<f64> {
    z.mapv_inplace(|v| v.max(0.0));
    z
}

/// Row-wise softmax with max subtraction.
pub fn softmax(mut z: Array2<f64>) -> Array2<f64> {
    for mut row in z.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    z
}

fn bn_train(bn: &mut BatchNorm, x: &Array2<f64>) -> (Array2<f64>, BnCache) {
    let n = x.nrows() as f64;
    let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
    let centered = x - &mean;
    let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty batch");
    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    let xhat = &centered * &inv_std;
    let y = &xhat * &bn.scale + &bn.shift;
    let unbiased = &var * (n / (n - 1.0));
    bn.running_mean = &bn.running_mean * BN_MOMENTUM + &mean * (1.0 - BN_MOMENTUM);
    bn.running_var = &bn.running_var * BN_MOMENTUM + &unbiased * (1.0 - BN_MOMENTUM);
    (y, BnCache { xhat, inv_std })
}

fn bn_backward(bn: &BatchNorm, cache: &BnCache, dy: &Array2<f64>) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let n = dy.nrows() as f64;
    let dshift = dy.sum_axis(Axis(0));
    let dscale = (dy * &cache.xhat).sum_axis(Axis(0));
    let dxhat = dy * &bn.scale;
    let sum_dxhat = dxhat.sum_axis(Axis(0));
    let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
    let dx = ((&dxhat * n - &sum_dxhat) - &cache.xhat * &sum_dxhat_xhat) * &(&cache.inv_std / n);
    (dx, dscale, dshift)
}

/// `-ln(max(p_y, 1e-12))`.
pub fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(PROB_FLOOR).ln()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_input(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn probabilities_are_a_distribution() {
        let mut m = MlpModel::new(8, [16, 16, 8], 4, 3).unwrap();
        let x = random_input(5, 8, 1);
        for mode in [Mode::Train, Mode::Infer] {
            let out = m.forward(&x, mode).unwrap();
            for row in out.probs.rows() {
                assert!((row.sum() - 1.0).abs() <= 1e-12);
                assert!(row.iter().all(|&p| p >= 0.0));
            }
            assert_eq!(out.descriptors.dim(), (5, 8));
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = MlpModel::zeros(8, [16, 16, 8], 4);
        let out = m.forward_infer(&random_input(3, 8, 2)).unwrap();
        for p in out.probs.iter() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn duplicate_rows_match() {
        let mut m = MlpModel::new(8, [16, 16, 8], 4, 5).unwrap();
        let mut x = random_input(4, 8, 3);
        let r0 = x.row(0).to_owned();
        x.row_mut(2).assign(&r0);
        let (out, _) = m.forward_train(&x).unwrap();
        assert_eq!(out.probs.row(0), out.probs.row(2));
        assert_eq!(out.descriptors.row(0), out.descriptors.row(2));
    }

    #[test]
    fn infer_rows_are_batch_independent() {
        let mut m = MlpModel::new(8, [16, 16, 8], 4, 5).unwrap();
        m.forward_train(&random_input(10, 8, 9)).unwrap();
        let x = random_input(6, 8, 4);
        let all = m.forward_infer(&x).unwrap();
        let single = m.forward_infer(&x.slice(ndarray::s![3..4, ..]).to_owned()).unwrap();
        assert_eq!(all.probs.row(3), single.probs.row(0));
    }

    #[test]
    fn train_batch_of_one_is_rejected() {
        let mut m = MlpModel::new(8, [16, 16, 8], 4, 5).unwrap();
        assert!(matches!(m.forward_train(&random_input(1, 8, 4)), Err(Error::InvalidArgument(_))));
        assert!(matches!(m.forward_infer(&random_input(2, 7, 4)), Err(Error::Shape(_))));
    }

    #[test]
    fn initialization_is_reproducible() {
        assert_eq!(MlpModel::new(20, [8, 8, 8], 4, 11).unwrap(), MlpModel::new(20, [8, 8, 8], 4, 11).unwrap());
        assert_ne!(MlpModel::new(20, [8, 8, 8], 4, 11).unwrap(), MlpModel::new(20, [8, 8, 8], 4, 12).unwrap());
    }

    #[test]
    fn cross_entropy_values() {
        assert!((cross_entropy(&[0.25; 4], 2) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0, 0.0], 1), 0.0);
        assert!((cross_entropy(&[1.0, 0.0, 0.0, 0.0], 1) - 27.631021115928547).abs() < 1e-9);
    }

    #[test]
    fn argmax_ties_low() {
        assert_eq!(argmax(&[0.1, 0.6, 0.2, 0.1]), 1);
        assert_eq!(argmax(&[0.25; 4]), 0);
        assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
    }

    #[test]
    fn sparse_first_layer_matches_dense_product() {
        let m = MlpModel::new(8, [16, 16, 8], 4, 5).unwrap();
        let mut x = random_input(4, 8, 6);
        x[[1, 3]] = 0.0;
        let sparse = first_layer(&x, &m.layers[0]);
        let dense = x.dot(&m.layers[0].weight) + &m.layers[0].bias;
        for (a, b) in sparse.iter().zip(dense.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
