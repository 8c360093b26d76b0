//! Loss, optimizer, and the training and evaluation loops.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::noise::{apply_noise, NoiseSpec};
use crate::ops::OpCounter;
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "epoch,split,loss,accuracy,mults,adds,comparisons,wall_ms";

/// Stream ids carved out of the run seed.
const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;

/// Cross-entropy of `softmax(logits)` against `label`, and its
/// gradient `softmax - onehot`.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    logits.check_finite("logits")?;
    let z = logits.data();
    if label >= z.len() {
        return Err(Error::invalid(format!("label {label} out of range for {} classes", z.len())));
    }
    let top = argmax(z);
    let max = z[top];
    let exp: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    // the max term is exactly 1; ln_1p keeps tiny losses accurate
    let rest: f64 = exp.iter().enumerate().filter(|&(i, _)| i != top).map(|(_, e)| e).sum();
    let sum = 1.0 + rest;
    let loss = rest.ln_1p() - (z[label] - max);
    let mut grad: Vec<f64> = exp.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    Ok((loss, Tensor::from_vec(logits.dims().to_vec(), grad)?))
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// SGD with heavy-ball momentum: `v <- mu * v + g; theta <- theta - lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// One update. Velocity slots are created lazily on the first call.
    /// A non-finite gradient leaves the parameters untouched and is reported
    /// with the tensor and element index.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient {i} has shape {}, parameter has {}",
                    g.shape(),
                    p.shape()
                )));
            }
            if let Some((j, v)) = g.data().iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(Error::invalid(format!("non-finite gradient {v} in tensor {i} at element {j}")));
            }
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        } else if self.velocity.len() != grads.len() || self.velocity.iter().zip(grads).any(|(v, g)| v.len() != g.len()) {
            return Err(Error::shape("gradient layout changed between steps"));
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((theta, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *v = self.momentum * *v + g;
                *theta -= self.lr * *v;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// When false, `wall_ms` is written as 0 so that metrics files from
    /// repeated runs compare byte for byte.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            lr: 0.01,
            momentum: 0.9,
            seed: 1,
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "need lr > 0 and 0 <= momentum < 1, got lr {} momentum {}",
                self.lr, self.momentum
            )));
        }
        Ok(())
    }

    /// Generator used for weight initialization.
    pub fn init_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(INIT_STREAM);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub ops: OpCounter,
    pub wall_ms: u64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.9},{:.6},{},{},{},{}",
            self.epoch,
            self.split,
            self.loss,
            self.accuracy,
            self.ops.mults,
            self.ops.adds,
            self.ops.comparisons,
            self.wall_ms
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    pub rows: Vec<EpochMetrics>,
    /// Forward-pass operations per layer, summed over every sample seen in
    /// training and evaluation.
    pub layer_ops: Vec<OpCounter>,
}

impl Metrics {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for row in &self.rows {
            let _ = writeln!(out, "{}", row.csv_row());
        }
        out
    }

    fn add_layer_ops(&mut self, ops: &[OpCounter]) {
        if self.layer_ops.len() < ops.len() {
            self.layer_ops.resize(ops.len(), OpCounter::ZERO);
        }
        for (acc, &o) in self.layer_ops.iter_mut().zip(ops) {
            *acc += o;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub correct: usize,
    pub total: usize,
    pub loss: f64,
    pub layer_ops: Vec<OpCounter>,
}

impl EvalResult {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }

    pub fn ops(&self) -> OpCounter {
        self.layer_ops.iter().fold(OpCounter::ZERO, |a, &b| a + b)
    }
}

/// Top-1 accuracy and mean loss over all of `ds`. With `noise`, image `i` is
/// perturbed with stream `i` before inference.
pub fn evaluate(net: &Network, ds: &Dataset, noise: Option<&NoiseSpec>) -> Result<EvalResult> {
    if ds.image_dims() != net.input_dims() {
        return Err(Error::shape(format!(
            "{} was built for {:?} inputs, dataset has {:?}",
            net.arch(),
            net.input_dims(),
            ds.image_dims()
        )));
    }
    if ds.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let mut correct = 0;
    let mut loss = 0.0;
    let mut layer_ops = vec![OpCounter::ZERO; net.layers().len()];
    for i in 0..ds.len() {
        let mut x = ds.image(i);
        if let Some(spec) = noise {
            x = apply_noise(&x, spec, i as u64)?;
        }
        let (logits, cache) = net.forward(&x)?;
        let label = ds.label(i);
        loss += softmax_cross_entropy(&logits, label)?.0;
        if argmax(logits.data()) == label {
            correct += 1;
        }
        for (acc, &o) in layer_ops.iter_mut().zip(cache.layer_ops()) {
            *acc += o;
        }
    }
    Ok(EvalResult {
        correct,
        total: ds.len(),
        loss: loss / ds.len() as f64,
        layer_ops,
    })
}

/// Mean loss and parameter gradients over `indices`, accumulated in order.
pub fn batch_gradients(net: &Network, ds: &Dataset, indices: &[usize]) -> Result<BatchResult> {
    let mut grads: Vec<Tensor> = net.params().iter().map(|p| Tensor::zeros(p.dims().to_vec())).collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut correct = 0;
    let mut layer_ops = vec![OpCounter::ZERO; net.layers().len()];
    for &i in indices {
        let (logits, cache) = net.forward(&ds.image(i))?;
        let label = ds.label(i);
        let (l, dlogits) = softmax_cross_entropy(&logits, label)?;
        loss += l;
        if argmax(logits.data()) == label {
            correct += 1;
        }
        for (acc, &o) in layer_ops.iter_mut().zip(cache.layer_ops()) {
            *acc += o;
        }
        for (acc, g) in grads.iter_mut().zip(net.backward(&cache, &dlogits)?) {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
    }
    let scale = 1.0 / indices.len() as f64;
    for g in &mut grads {
        for v in g.data_mut() {
            *v *= scale;
        }
    }
    Ok(BatchResult {
        loss: loss * scale,
        correct,
        grads,
        layer_ops,
    })
}

#[derive(Debug, Clone)]
pub struct BatchResult {
    pub loss: f64,
    pub correct: usize,
    pub grads: Vec<Tensor>,
    pub layer_ops: Vec<OpCounter>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Metrics,
    pub final_network: Network,
    /// Parameters from the epoch with the highest test accuracy (earliest on
    /// ties).
    pub best_network: Network,
    pub best_epoch: usize,
    pub best_accuracy: f64,
}

/// Trains `net` and evaluates it on `test_set` after every
/// epoch. `on_epoch` sees each metrics row as soon as it exists.
pub fn train(
    mut net: Network,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if train_set.image_dims() != net.input_dims() {
        return Err(Error::shape(format!(
            "{} was built for {:?} inputs, dataset has {:?}",
            net.arch(),
            net.input_dims(),
            train_set.image_dims()
        )));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum);
    let mut metrics = Metrics::default();
    let mut best: Option<(usize, f64, Network)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut epoch_ops = vec![OpCounter::ZERO; net.layers().len()];
        for batch in order.chunks(cfg.batch_size) {
            let r = batch_gradients(&net, train_set, batch)?;
            if !r.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    reason: format!("batch loss {}", r.loss),
                });
            }
            sgd.step(net.params_mut(), &r.grads).map_err(|e| Error::Diverged {
                epoch,
                reason: e.to_string(),
            })?;
            if let Some(p) = net.params().iter().find_map(|p| p.data().iter().find(|v| !v.is_finite())) {
                return Err(Error::Diverged {
                    epoch,
                    reason: format!("parameter became {p}"),
                });
            }
            loss_sum += r.loss * batch.len() as f64;
            correct += r.correct;
            for (acc, &o) in epoch_ops.iter_mut().zip(&r.layer_ops) {
                *acc += o;
            }
        }
        metrics.add_layer_ops(&epoch_ops);
        let train_ms = elapsed_ms(started, cfg);
        let row = EpochMetrics {
            epoch,
            split: Split::Train,
            loss: loss_sum / train_set.len() as f64,
            accuracy: correct as f64 / train_set.len() as f64,
            ops: epoch_ops.iter().fold(OpCounter::ZERO, |a, &b| a + b),
            wall_ms: train_ms,
        };
        on_epoch(&row);
        metrics.rows.push(row);

        let started = Instant::now();
        let eval = evaluate(&net, test_set, None)?;
        metrics.add_layer_ops(&eval.layer_ops);
        let row = EpochMetrics {
            epoch,
            split: Split::Test,
            loss: eval.loss,
            accuracy: eval.accuracy(),
            ops: eval.ops(),
            wall_ms: elapsed_ms(started, cfg),
        };
        on_epoch(&row);
        metrics.rows.push(row);

        if best.as_ref().is_none_or(|(_, acc, _)| eval.accuracy() > *acc) {
            best = Some((epoch, eval.accuracy(), net.clone()));
        }
    }
    let (best_epoch, best_accuracy, best_network) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        metrics,
        final_network: net,
        best_network,
        best_epoch,
        best_accuracy,
    })
}

fn elapsed_ms(started: Instant, cfg: &TrainConfig) -> u64 {
    if cfg.record_wall_time {
        started.elapsed().as_millis() as u64
    } else {
        0
    }
}
