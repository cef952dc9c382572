//! A small fully connected network trained with Adam and validation-loss
//! early stopping. Used for the speaker-identification probes (softmax head)
//! and the pair discrimination decoder (sigmoid head).

use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Identity => {}
        }
    }

    /// Multiplies `grad` by the derivative, expressed through the activation output.
    fn backprop(self, out: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Activation::Relu => grad.zip_mut_with(out, |g, &a| {
                if a <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Tanh => grad.zip_mut_with(out, |g, &a| *g *= 1.0 - a * a),
            Activation::Identity => {}
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::invalid(format!("unknown activation {other:?}"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    /// Multinomial cross-entropy over `n_out` classes.
    Softmax,
    /// Binary cross-entropy on a single logit.
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Dense {
    weights: Array2<f64>,
    bias: Array1<f64>,
}

/// Training targets for one batch or evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Binary(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Binary(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Binary(b) => Targets::Binary(idx.iter().map(|&i| b[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
    activation: Activation,
    head: Head,
}

struct Gradients {
    layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Mlp {
    /// Glorot-uniform initialised network `input -> hidden... -> n_out`.
    pub fn new(
        input: usize,
        hidden: &[usize],
        n_out: usize,
        activation: Activation,
        head: Head,
        rng: &mut impl Rng,
    ) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(if head == Head::Sigmoid { 1 } else { n_out });
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Dense {
                    weights: Array2::from_shape_fn((fan_in, fan_out), |_| {
                        rng.random_range(-bound..bound)
                    }),
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Mlp {
            layers,
            activation,
            head,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    pub fn head(&self) -> Head {
        self.head
    }

    /// Output logits for each row of `x`.
    pub fn logits(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.forward(x).pop().unwrap()
    }

    /// Class probabilities (softmax head) or P(label = 1) as a single column (sigmoid head).
    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = self.logits(x);
        match self.head {
            Head::Softmax => softmax_rows(&mut z),
            Head::Sigmoid => z.mapv_inplace(sigmoid),
        }
        z
    }

    /// Argmax class per row (softmax head) or 0/1 decision at 0.5 (sigmoid head).
    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        let z = self.logits(x);
        match self.head {
            Head::Softmax => z.rows().into_iter().map(argmax).collect(),
            Head::Sigmoid => z.column(0).iter().map(|&v| usize::from(v > 0.0)).collect(),
        }
    }

    pub fn loss(&self, x: ArrayView2<f64>, y: &Targets) -> f64 {
        let z = self.logits(x);
        mean_loss(&z, y, self.head)
    }

    /// Activations per layer; element 0 is the input, the last is the logits.
    fn forward(&self, x: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_owned());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = acts[i].dot(&layer.weights) + &layer.bias;
            if i + 1 < self.layers.len() {
                self.activation.apply(&mut z);
            }
            acts.push(z);
        }
        acts
    }

    fn gradients(&self, x: ArrayView2<f64>, y: &Targets) -> (f64, Gradients) {
        let acts = self.forward(x);
        let logits = acts.last().unwrap();
        let loss = mean_loss(logits, y, self.head);
        let n = x.nrows() as f64;

        let mut delta = logits.clone();
        match (self.head, y) {
            (Head::Softmax, Targets::Classes(c)) => {
                softmax_rows(&mut delta);
                for (i, &k) in c.iter().enumerate() {
                    delta[[i, k]] -= 1.0;
                }
            }
            (Head::Sigmoid, Targets::Binary(b)) => {
                for (i, &t) in b.iter().enumerate() {
                    delta[[i, 0]] = sigmoid(delta[[i, 0]]) - t;
                }
            }
            _ => unreachable!("targets checked against head before training"),
        }
        delta /= n;

        let mut grads = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let gw = acts[i].t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut next = delta.dot(&self.layers[i].weights.t());
                self.activation.backprop(&acts[i], &mut next);
                delta = next;
            }
            grads.push((gw, gb));
        }
        grads.reverse();
        (loss, Gradients { layers: grads })
    }
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

fn mean_loss(logits: &Array2<f64>, y: &Targets, head: Head) -> f64 {
    let n = logits.nrows() as f64;
    match (head, y) {
        (Head::Softmax, Targets::Classes(c)) => {
            let mut total = 0.0;
            for (row, &k) in logits.rows().into_iter().zip(c) {
                let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                total += lse - row[k];
            }
            total / n
        }
        (Head::Sigmoid, Targets::Binary(b)) => {
            // log(1 + e^z) - t z, written to stay finite for large |z|
            let total: f64 = logits
                .column(0)
                .iter()
                .zip(b)
                .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
                .sum();
            total / n
        }
        _ => panic!("target kind does not match the network head"),
    }
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<(Array2<f64>, Array1<f64>)>,
    v: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Adam {
    fn new(mlp: &Mlp, lr: f64) -> Self {
        let zeros: Vec<_> = mlp
            .layers
            .iter()
            .map(|l| (Array2::zeros(l.weights.dim()), Array1::zeros(l.bias.len())))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn step(&mut self, mlp: &mut Mlp, grads: &Gradients) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let step = self.lr * (1.0 - b2.powi(self.t)).sqrt() / (1.0 - b1.powi(self.t));
        for (i, (gw, gb)) in grads.layers.iter().enumerate() {
            let layer = &mut mlp.layers[i];
            let (mw, mb) = &mut self.m[i];
            let (vw, vb) = &mut self.v[i];
            ndarray::Zip::from(&mut layer.weights)
                .and(mw)
                .and(vw)
                .and(gw)
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= step * *m / (v.sqrt() + eps);
                });
            ndarray::Zip::from(&mut layer.bias)
                .and(mb)
                .and(vb)
                .and(gb)
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= step * *m / (v.sqrt() + eps);
                });
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// A source of minibatches, indexed by `(epoch, batch)`.
pub trait Batches: Sync {
    fn batches_per_epoch(&self) -> usize;
    fn batch(&self, epoch: usize, index: usize) -> (Array2<f64>, Targets);
}

/// Minibatches over an in-memory set, reshuffled every epoch from `(seed, epoch)`.
pub struct InMemory<'a> {
    pub x: ArrayView2<'a, f64>,
    pub y: &'a Targets,
    pub batch_size: usize,
    pub seed: u64,
}

impl InMemory<'_> {
    fn order(&self, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.x.nrows()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64 + 1);
        idx.shuffle(&mut rng);
        idx
    }
}

impl Batches for InMemory<'_> {
    fn batches_per_epoch(&self) -> usize {
        self.x.nrows().div_ceil(self.batch_size.max(1))
    }

    fn batch(&self, epoch: usize, index: usize) -> (Array2<f64>, Targets) {
        let order = self.order(epoch);
        let bs = self.batch_size.max(1);
        let idx = &order[index * bs..((index + 1) * bs).min(order.len())];
        (self.x.select(Axis(0), idx), self.y.select(idx))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Validation loss per checkpoint; index 0 is the untrained network.
    pub val_losses: Vec<f64>,
    pub train_losses: Vec<f64>,
    /// Checkpoint index of the returned network.
    pub best_checkpoint: usize,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn best_val_loss(&self) -> f64 {
        self.val_losses[self.best_checkpoint]
    }
}

fn check_targets(head: Head, n_out: usize, y: &Targets) -> Result<()> {
    match (head, y) {
        (Head::Softmax, Targets::Classes(c)) => {
            if let Some(&bad) = c.iter().find(|&&k| k >= n_out) {
                return Err(Error::invalid(format!("class index {bad} out of range")));
            }
            Ok(())
        }
        (Head::Sigmoid, Targets::Binary(_)) => Ok(()),
        _ => Err(Error::invalid("target kind does not match network head")),
    }
}

/// Trains `mlp` in place with Adam, evaluating `val` after every epoch. The
/// network left in `mlp` is the checkpoint with the lowest validation loss
/// (the untrained network counts as a checkpoint). Training stops after
/// `patience` epochs without strict improvement.
pub fn fit(
    mlp: &mut Mlp,
    train: &dyn Batches,
    val_x: ArrayView2<f64>,
    val_y: &Targets,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    let n_out = mlp.layers.last().unwrap().bias.len();
    check_targets(mlp.head, n_out, val_y)?;
    if val_x.nrows() == 0 || val_x.nrows() != val_y.len() {
        return Err(Error::invalid("validation set is empty or misaligned"));
    }
    let mut adam = Adam::new(mlp, opts.learning_rate);
    let mut best = mlp.clone();
    let initial = mlp.loss(val_x, val_y);
    let mut report = TrainReport {
        val_losses: vec![initial],
        train_losses: Vec::new(),
        best_checkpoint: 0,
        stopped_early: false,
    };
    let mut best_loss = initial;
    let mut since_best = 0;

    for epoch in 0..opts.max_epochs {
        let mut total = 0.0;
        let mut count = 0usize;
        for b in 0..train.batches_per_epoch() {
            let (x, y) = train.batch(epoch, b);
            if b == 0 && epoch == 0 {
                check_targets(mlp.head, n_out, &y)?;
            }
            let (loss, grads) = mlp.gradients(x.view(), &y);
            adam.step(mlp, &grads);
            total += loss * x.nrows() as f64;
            count += x.nrows();
        }
        report.train_losses.push(total / count.max(1) as f64);
        let val_loss = mlp.loss(val_x, val_y);
        if !val_loss.is_finite() {
            return Err(Error::Degenerate("non-finite validation loss".into()));
        }
        report.val_losses.push(val_loss);
        if val_loss < best_loss {
            best_loss = val_loss;
            best = mlp.clone();
            report.best_checkpoint = epoch + 1;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= opts.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    *mlp = best;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn finite_difference_check(head: Head, y: Targets, n_out: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mlp = Mlp::new(3, &[4], n_out, Activation::Tanh, head, &mut rng);
        let x = array![[0.3, -1.2, 0.5], [1.0, 0.2, -0.7], [-0.4, 0.9, 0.1]];
        let (_, grads) = mlp.gradients(x.view(), &y);
        let h = 1e-6;
        for l in 0..mlp.layers.len() {
            for ((i, j), &g) in grads.layers[l].0.indexed_iter() {
                let mut plus = mlp.clone();
                plus.layers[l].weights[[i, j]] += h;
                let mut minus = mlp.clone();
                minus.layers[l].weights[[i, j]] -= h;
                let numeric = (plus.loss(x.view(), &y) - minus.loss(x.view(), &y)) / (2.0 * h);
                assert!((numeric - g).abs() < 1e-7, "layer {l} ({i},{j}): {numeric} vs {g}");
            }
            for (j, &g) in grads.layers[l].1.indexed_iter() {
                let mut plus = mlp.clone();
                plus.layers[l].bias[j] += h;
                let mut minus = mlp.clone();
                minus.layers[l].bias[j] -= h;
                let numeric = (plus.loss(x.view(), &y) - minus.loss(x.view(), &y)) / (2.0 * h);
                assert!((numeric - g).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn softmax_gradients_match_finite_differences() {
        finite_difference_check(Head::Softmax, Targets::Classes(vec![0, 2, 1]), 3);
    }

    #[test]
    fn sigmoid_gradients_match_finite_differences() {
        finite_difference_check(Head::Sigmoid, Targets::Binary(vec![1.0, 0.0, 1.0]), 1);
    }

    #[test]
    fn relu_backprop_masks_inactive_units() {
        let out = array![[0.0, 2.0]];
        let mut g = array![[5.0, 5.0]];
        Activation::Relu.backprop(&out, &mut g);
        assert_eq!(g, array![[0.0, 5.0]]);
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        let z = array![[800.0], [-800.0]];
        let loss = mean_loss(&z, &Targets::Binary(vec![1.0, 0.0]), Head::Sigmoid);
        assert!(loss.is_finite() && loss < 1e-12);
    }

    #[test]
    fn early_stopping_returns_best_checkpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((40, 2), |_| rng.random_range(-1.0..1.0));
        let y = Targets::Classes((0..40).map(|i| i % 2).collect());
        let mut mlp = Mlp::new(2, &[8], 2, Activation::Relu, Head::Softmax, &mut rng);
        let batches = InMemory { x: x.view(), y: &y, batch_size: 8, seed: 2 };
        let opts = TrainOptions { learning_rate: 1e-2, max_epochs: 60, patience: 5, batch_size: 8, seed: 2 };
        let report = fit(&mut mlp, &batches, x.view(), &y, &opts).unwrap();
        let final_loss = mlp.loss(x.view(), &y);
        assert_eq!(final_loss, report.best_val_loss());
        assert!(report.val_losses.iter().all(|&l| final_loss <= l));
    }

    #[test]
    fn mismatched_targets_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = Mlp::new(2, &[3], 2, Activation::Relu, Head::Softmax, &mut rng);
        let x = Array2::zeros((2, 2));
        let y = Targets::Binary(vec![0.0, 1.0]);
        let batches = InMemory { x: x.view(), y: &y, batch_size: 2, seed: 0 };
        let opts = TrainOptions { learning_rate: 1e-3, max_epochs: 1, patience: 1, batch_size: 2, seed: 0 };
        assert!(fit(&mut mlp, &batches, x.view(), &y, &opts).is_err());
    }
}
