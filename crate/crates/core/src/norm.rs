//! Per-channel batch normalization over (N, T, H, W).

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::ClipTensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics; the caller folds them into the
    /// running state with [`BatchNorm::update_running`].
    Train,
    /// Normalize with the running statistics.
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    /// Weight kept on the old running value: `r ← m·r + (1 − m)·batch`.
    pub momentum: f64,
}

/// State saved by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T = f32> {
    pub mode: BnMode,
    xhat: Option<ClipTensor<T>>,
    inv_std: Vec<f64>,
    /// Batch mean and unbiased variance (train mode only).
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BnGrads<T = f32> {
    pub dx: ClipTensor<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

impl<T: Real> BatchNorm<T> {
    /// Unit scale, zero shift, running mean 0 and variance 1.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Forward pass. With `record = false` the cache keeps no activations and
    /// cannot be used for a backward pass.
    pub fn forward(&self, x: &ClipTensor<T>, mode: BnMode, record: bool) -> Result<(ClipTensor<T>, BnCache<T>)> {
        batch_norm(x, self, mode, record)
    }

    /// Train-mode forward that also updates the running statistics.
    pub fn forward_train(&mut self, x: &ClipTensor<T>) -> Result<(ClipTensor<T>, BnCache<T>)> {
        let (y, cache) = batch_norm(x, self, BnMode::Train, true)?;
        self.update_running(&cache);
        Ok((y, cache))
    }

    pub fn update_running(&mut self, cache: &BnCache<T>) {
        if cache.mode != BnMode::Train {
            return;
        }
        let m = self.momentum;
        for c in 0..self.channels() {
            let mean = m * self.running_mean[c].as_f64() + (1.0 - m) * cache.batch_mean[c];
            let var = m * self.running_var[c].as_f64() + (1.0 - m) * cache.batch_var[c];
            self.running_mean[c] = T::from_f64(mean);
            self.running_var[c] = T::from_f64(var);
        }
    }

    pub fn cast<U: Real>(&self) -> BatchNorm<U> {
        let cv = |v: &[T]| v.iter().map(|x| U::from_f64(x.as_f64())).collect();
        BatchNorm {
            gamma: cv(&self.gamma),
            beta: cv(&self.beta),
            running_mean: cv(&self.running_mean),
            running_var: cv(&self.running_var),
            eps: self.eps,
            momentum: self.momentum,
        }
    }
}

pub fn batch_norm<T: Real>(
    x: &ClipTensor<T>,
    bn: &BatchNorm<T>,
    mode: BnMode,
    record: bool,
) -> Result<(ClipTensor<T>, BnCache<T>)> {
    if !(bn.eps > 0.0) {
        return Err(Error::Invalid(format!("batch norm eps must be positive, got {}", bn.eps)));
    }
    let [n, c, t, h, w] = x.shape();
    if bn.channels() != c
        || bn.beta.len() != c
        || bn.running_mean.len() != c
        || bn.running_var.len() != c
    {
        return Err(Error::Shape(format!(
            "batch norm has {} channels, input has {c}",
            bn.channels()
        )));
    }
    let plane = t * h * w;
    let count = n * plane;
    let data = x.data();

    let (mean, var_biased, batch_var) = match mode {
        BnMode::Train => {
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    s += data[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mu = s / count as f64;
                let mut ss = 0.0;
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    ss += data[off..off + plane]
                        .iter()
                        .map(|v| (v.as_f64() - mu).powi(2))
                        .sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = ss / count as f64;
            }
            let unbiased = if count > 1 {
                var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect()
            } else {
                var.clone()
            };
            (mean, var, unbiased)
        }
        BnMode::Inference => (
            bn.running_mean.iter().map(|v| v.as_f64()).collect(),
            bn.running_var.iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
            Vec::new(),
        ),
    };
    let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();

    let mut y = ClipTensor::zeros(x.shape())?;
    let mut xhat = if record { Some(ClipTensor::zeros(x.shape())?) } else { None };
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let (mu, is) = (mean[ch], inv_std[ch]);
            let (g, be) = (bn.gamma[ch].as_f64(), bn.beta[ch].as_f64());
            let src = &data[off..off + plane];
            let dst = &mut y.data_mut()[off..off + plane];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = T::from_f64(g * (v.as_f64() - mu) * is + be);
            }
            if let Some(xh) = xhat.as_mut() {
                for (o, &v) in xh.data_mut()[off..off + plane].iter_mut().zip(src) {
                    *o = T::from_f64((v.as_f64() - mu) * is);
                }
            }
        }
    }
    let cache = BnCache {
        mode,
        xhat,
        inv_std,
        batch_mean: if mode == BnMode::Train { mean } else { Vec::new() },
        batch_var,
    };
    Ok((y, cache))
}

/// Gradients through either mode. In train mode the batch statistics are
/// differentiated too:
/// `dx = γ·σ⁻¹/M · (M·dy − Σdy − x̂·Σ(dy·x̂))`.
pub fn batch_norm_backward<T: Real>(
    cache: &BnCache<T>,
    gamma: &[T],
    dy: &ClipTensor<T>,
) -> Result<BnGrads<T>> {
    let xhat = cache
        .xhat
        .as_ref()
        .ok_or_else(|| Error::Invalid("batch norm cache was recorded without activations".into()))?;
    if xhat.shape() != dy.shape() {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} does not match {:?}",
            dy.shape(),
            xhat.shape()
        )));
    }
    let [n, c, t, h, w] = dy.shape();
    let plane = t * h * w;
    let count = (n * plane) as f64;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = ClipTensor::zeros(dy.shape())?;
    for ch in 0..c {
        let (mut sdy, mut sdyx) = (0.0f64, 0.0f64);
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for (&g, &xh) in dy.data()[off..off + plane].iter().zip(&xhat.data()[off..off + plane]) {
                sdy += g.as_f64();
                sdyx += g.as_f64() * xh.as_f64();
            }
        }
        dgamma[ch] = T::from_f64(sdyx);
        dbeta[ch] = T::from_f64(sdy);
        let scale = gamma[ch].as_f64() * cache.inv_std[ch];
        for b in 0..n {
            let off = (b * c + ch) * plane;
            let g = &dy.data()[off..off + plane];
            let xh = &xhat.data()[off..off + plane];
            let out = &mut dx.data_mut()[off..off + plane];
            match cache.mode {
                BnMode::Train => {
                    for ((o, &g), &xh) in out.iter_mut().zip(g).zip(xh) {
                        *o = T::from_f64(
                            scale / count * (count * g.as_f64() - sdy - xh.as_f64() * sdyx),
                        );
                    }
                }
                BnMode::Inference => {
                    for (o, &g) in out.iter_mut().zip(g) {
                        *o = T::from_f64(scale * g.as_f64());
                    }
                }
            }
        }
    }
    Ok(BnGrads { dx, dgamma, dbeta })
}
