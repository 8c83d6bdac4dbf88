//! Mini-batch SGD with momentum and a step learning-rate schedule.

use std::fmt;

use crate::error::{Error, Result};
use crate::linear::{softmax_cross_entropy, Matrix};
use crate::network::{frozen_under_bn_freeze, NetGrads, NetworkGraph};
use crate::params::{ParamKind, Params};
use crate::pipeline::motion::LabeledClips;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Iterations between divisions of the learning rate by ten.
    pub lr_step: usize,
    pub momentum: f64,
    /// L2 penalty on convolution and classifier weights.
    pub weight_decay: f64,
    pub batch: usize,
    pub iters: usize,
    pub dropout_rate: f64,
    pub seed: u64,
    /// Keep every BN but the stem's in inference mode with fixed scale and
    /// shift.
    pub freeze_bn: bool,
    /// End early once a training batch reaches this accuracy.
    pub stop_at_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_step: 3000,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch: 16,
            iters: 1000,
            dropout_rate: 0.5,
            seed: 0,
            freeze_bn: false,
            stop_at_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.lr_step == 0 || self.batch == 0 {
            return Err(Error::Invalid("lr_step and batch must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Invalid(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Invalid("weight decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Invalid(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    /// `lr / 10^⌊iter / lr_step⌋`
    pub fn lr_at(&self, iter: usize) -> f64 {
        self.lr / 10f64.powi((iter / self.lr_step) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    /// Fraction of the batch classified correctly by the training pass.
    pub accuracy: f64,
}

impl fmt::Display for TrainRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter {:>6}  lr {:.3e}  loss {:.6}  acc {:.4}",
            self.iter, self.lr, self.loss, self.accuracy
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn first_perfect(&self) -> Option<usize> {
        self.records.iter().find(|r| r.accuracy == 1.0).map(|r| r.iter)
    }
}

pub fn accuracy(logits: &Matrix<f32>, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &l)| {
            let row = logits.row(r);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == l
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Momentum SGD state: `v ← μ·v − lr·(g + λ·w)`, `w ← w + v`, with the
/// decay term only on convolution and classifier weights.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    velocity: Vec<Vec<f32>>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub freeze_bn: bool,
}

impl Sgd {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            velocity: Vec::new(),
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            freeze_bn: cfg.freeze_bn,
        }
    }

    pub fn step(&mut self, net: &mut NetworkGraph<f32>, grads: &NetGrads<f32>, lr: f64) -> Result<()> {
        let mut gs: Vec<(String, &[f32])> = Vec::new();
        grads.visit(&net.block_names(), &mut |n, g| gs.push((n, g)));
        let params: Vec<_> = net.param_views_mut("").into_iter().filter(|v| v.kind.trainable()).collect();
        if params.len() != gs.len() {
            return Err(Error::Invalid(format!(
                "{} gradients for {} trainable tensors",
                gs.len(),
                params.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        }
        let (mu, lr) = (self.momentum as f32, lr as f32);
        for ((p, (name, g)), v) in params.into_iter().zip(gs).zip(&mut self.velocity) {
            if p.name != name || p.data.len() != g.len() || v.len() != g.len() {
                return Err(Error::TensorMismatch {
                    name: p.name,
                    detail: format!("gradient `{name}` does not line up"),
                });
            }
            if self.freeze_bn && frozen_under_bn_freeze(&p.name, p.kind) {
                continue;
            }
            let decay = if matches!(p.kind, ParamKind::ConvWeight | ParamKind::FcWeight) {
                self.weight_decay as f32
            } else {
                0.0
            };
            for ((w, &gi), vi) in p.data.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = mu * *vi - lr * (gi + decay * *w);
                *w += *vi;
            }
        }
        Ok(())
    }
}

/// Batches of `batch` clips: the whole set in order when it fits, else
/// consecutive slices of a reshuffled permutation.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: SplitMix64,
}

impl BatchSampler {
    fn next(&mut self, batch: usize) -> Vec<usize> {
        if batch >= self.order.len() {
            return (0..self.order.len()).collect();
        }
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.cursor == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Trains `net` in place, reporting every iteration to `on_record`.
/// Stops with a numerical error as soon as the loss is not finite.
pub fn train(
    net: &mut NetworkGraph<f32>,
    data: &LabeledClips,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&TrainRecord),
) -> Result<TrainLog> {
    cfg.validate()?;
    if net.head.classes() != data.num_classes {
        return Err(Error::Invalid(format!(
            "network head has {} classes, dataset has {}",
            net.head.classes(),
            data.num_classes
        )));
    }
    if data.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    net.arch.dropout_rate = cfg.dropout_rate;
    let mut rng = SplitMix64::new(cfg.seed);
    let mut sampler = BatchSampler {
        order: (0..data.len()).collect(),
        cursor: data.len(),
        rng: rng.fork(1),
    };
    let mut sgd = Sgd::new(cfg);
    let mut log = TrainLog::default();
    for iter in 0..cfg.iters {
        let lr = cfg.lr_at(iter);
        let (x, labels) = data.gather(&sampler.next(cfg.batch))?;
        let (out, cache) = net.forward_train(&x, &mut rng, cfg.freeze_bn)?;
        let (loss, dlogits) = softmax_cross_entropy(&out.logits, &labels)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("loss became {loss} at iteration {iter}")));
        }
        let record = TrainRecord {
            iter,
            lr,
            loss,
            accuracy: accuracy(&out.logits, &labels),
        };
        let grads = net.backward(&cache, &dlogits)?;
        net.commit_stats(&cache, cfg.freeze_bn);
        sgd.step(net, &grads, lr)?;
        on_record(&record);
        log.records.push(record);
        if cfg.stop_at_accuracy.is_some_and(|a| record.accuracy >= a) {
            break;
        }
    }
    Ok(log)
}

/// Accuracy of the inference pass over the whole set.
pub fn evaluate(net: &NetworkGraph<f32>, data: &LabeledClips, batch: usize) -> Result<f64> {
    let mut hits = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, labels) = data.gather(chunk)?;
        hits += accuracy(&net.forward(&x)?.logits, &labels) * chunk.len() as f64;
    }
    Ok(hits / data.len().max(1) as f64)
}
