//! Convolution + batch-norm unit, the building brick of blocks and the stem.

use crate::conv::{conv3d, conv3d_backward, ConvWeights, KernelSpec};
use crate::error::Result;
use crate::norm::{batch_norm_backward, BatchNorm, BnCache, BnMode};
use crate::params::{join, ParamKind, ParamView, ParamViewMut, Params};
use crate::real::Real;
use crate::rng::SplitMix64;
use crate::tensor::ClipTensor;

/// How a forward pass runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pass {
    pub bn: BnMode,
    /// Keep activations for a backward pass.
    pub record: bool,
}

impl Pass {
    pub const INFERENCE: Pass = Pass {
        bn: BnMode::Inference,
        record: false,
    };
    pub const TRAIN: Pass = Pass {
        bn: BnMode::Train,
        record: true,
    };
}

/// Convolution followed by batch normalization. The convolution has no
/// bias; the BN shift absorbs it.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn<T = f32> {
    pub spec: KernelSpec,
    pub weights: ConvWeights<T>,
    pub bn: BatchNorm<T>,
}

#[derive(Debug, Clone)]
pub struct ConvBnCache<T = f32> {
    x: Option<ClipTensor<T>>,
    pub bn: BnCache<T>,
}

#[derive(Debug, Clone)]
pub struct ConvBnGrads<T = f32> {
    pub dw: ConvWeights<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

impl<T: Real> ConvBn<T> {
    pub fn new(spec: KernelSpec, rng: &mut SplitMix64) -> Result<Self> {
        Ok(Self {
            weights: ConvWeights::he_normal(&spec, rng)?,
            bn: BatchNorm::new(spec.out_ch),
            spec,
        })
    }

    pub fn forward(&self, x: &ClipTensor<T>, pass: Pass) -> Result<(ClipTensor<T>, ConvBnCache<T>)> {
        let z = conv3d(x, &self.weights, &self.spec)?;
        let (y, bn) = self.bn.forward(&z, pass.bn, pass.record)?;
        let x = pass.record.then(|| x.clone());
        Ok((y, ConvBnCache { x, bn }))
    }

    pub fn backward(&self, cache: &ConvBnCache<T>, dy: &ClipTensor<T>) -> Result<(ClipTensor<T>, ConvBnGrads<T>)> {
        let bn = batch_norm_backward(&cache.bn, &self.bn.gamma, dy)?;
        let x = cache.x.as_ref().ok_or_else(|| {
            crate::Error::Invalid("conv cache was recorded without activations".into())
        })?;
        let conv = conv3d_backward(x, &self.weights, &self.spec, &bn.dx)?;
        Ok((
            conv.dx,
            ConvBnGrads {
                dw: conv.dw,
                dgamma: bn.dgamma,
                dbeta: bn.dbeta,
            },
        ))
    }

    pub fn commit_stats(&mut self, cache: &ConvBnCache<T>) {
        self.bn.update_running(&cache.bn);
    }

    pub fn cast<U: Real>(&self) -> ConvBn<U> {
        ConvBn {
            spec: self.spec,
            weights: self.weights.cast(),
            bn: self.bn.cast(),
        }
    }

    /// Trainable parameters: kernel weights plus BN scale and shift.
    pub fn trainable_count(&self) -> usize {
        self.spec.weight_count() + 2 * self.spec.out_ch
    }
}

impl<T: Real> Params<T> for ConvBn<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(ParamView<'a, T>)) {
        f(ParamView {
            name: join(prefix, "weight"),
            kind: ParamKind::ConvWeight,
            dims: self.spec.weight_shape().to_vec(),
            data: self.weights.kernel.data(),
        });
        let c = self.spec.out_ch;
        for (name, kind, data) in [
            ("bn.gamma", ParamKind::BnScale, &self.bn.gamma),
            ("bn.beta", ParamKind::BnShift, &self.bn.beta),
            ("bn.running_mean", ParamKind::BnMean, &self.bn.running_mean),
            ("bn.running_var", ParamKind::BnVar, &self.bn.running_var),
        ] {
            f(ParamView {
                name: join(prefix, name),
                kind,
                dims: vec![c],
                data,
            });
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(ParamViewMut<'a, T>)) {
        let c = self.spec.out_ch;
        f(ParamViewMut {
            name: join(prefix, "weight"),
            kind: ParamKind::ConvWeight,
            dims: self.spec.weight_shape().to_vec(),
            data: self.weights.kernel.data_mut(),
        });
        let bn = &mut self.bn;
        for (name, kind, data) in [
            ("bn.gamma", ParamKind::BnScale, &mut bn.gamma),
            ("bn.beta", ParamKind::BnShift, &mut bn.beta),
            ("bn.running_mean", ParamKind::BnMean, &mut bn.running_mean),
            ("bn.running_var", ParamKind::BnVar, &mut bn.running_var),
        ] {
            f(ParamViewMut {
                name: join(prefix, name),
                kind,
                dims: vec![c],
                data,
            });
        }
    }
}

impl<T: Real> ConvBnGrads<T> {
    /// Visits gradients in the same order and under the same names as the
    /// trainable parameters of the owning [`ConvBn`].
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a [T])) {
        f(join(prefix, "weight"), self.dw.kernel.data());
        f(join(prefix, "bn.gamma"), &self.dgamma);
        f(join(prefix, "bn.beta"), &self.dbeta);
    }
}
