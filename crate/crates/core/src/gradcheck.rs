//! Central-difference verification of the hand-written backward passes.
//!
//! The scalar objective is a random projection of the op's output,
//! `L(θ) = ⟨R, f(θ)⟩`. For every tensor θᵢ the check draws random
//! directions `v` and compares the analytic directional derivative
//! `⟨∂L/∂θᵢ, v⟩` with `(L(θᵢ + h·v) − L(θᵢ − h·v)) / 2h`. The relative
//! error is `|a − n| / max(|a|, |n|, 1e-8)`. Everything runs in f64.

use crate::block::{Block, BlockKind, BlockSpec};
use crate::conv::{
    conv3d, conv3d_backward, conv_pointwise, conv_pointwise_backward, conv_spatial,
    conv_spatial_backward, conv_temporal, conv_temporal_backward, ConvGrads, ConvWeights, KernelSpec,
};
use crate::error::{Error, Result};
use crate::layers::Pass;
use crate::linear::{
    apply_mask, dropout_mask, fully_connected, fully_connected_backward, softmax_cross_entropy, Linear,
    Matrix,
};
use crate::norm::{batch_norm, batch_norm_backward, BatchNorm, BnMode};
use crate::params::Params;
use crate::pool::{global_avg_pool, global_avg_pool_backward, MaxPool};
use crate::rng::SplitMix64;
use crate::tensor::{relu, relu_backward, ClipTensor};

pub const DEFAULT_STEP: f64 = 1e-6;
/// Relative error a probe must stay below to pass.
pub const TOLERANCE: f64 = 1e-5;
const DIRECTIONS: usize = 3;

/// An operation with inputs and parameters exposed as flat f64 tensors.
pub trait Differentiable {
    fn tensor_names(&self) -> Vec<String>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;
    /// Flattened output.
    fn forward(&self) -> Result<Vec<f64>>;
    /// Gradient for every tensor, in `tensor_names` order.
    fn backward(&self, upstream: &[f64]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Tensor where the worst error occurred.
    pub worst: String,
    pub checks: usize,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn projected(op: &dyn Differentiable, r: &[f64]) -> Result<f64> {
    let y = op.forward()?;
    if y.len() != r.len() {
        return Err(Error::Shape("forward output length changed between calls".into()));
    }
    Ok(y.iter().zip(r).map(|(a, b)| a * b).sum())
}

pub fn grad_check(op: &mut dyn Differentiable, seed: u64, h: f64) -> Result<GradCheckReport> {
    let mut rng = SplitMix64::new(seed);
    let y = op.forward()?;
    let r: Vec<f64> = (0..y.len()).map(|_| rng.normal()).collect();
    let grads = op.backward(&r)?;
    let names = op.tensor_names();
    if grads.len() != names.len() {
        return Err(Error::Invalid("backward returned the wrong number of gradients".into()));
    }
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checks: 0,
    };
    for (i, name) in names.iter().enumerate() {
        for _ in 0..DIRECTIONS {
            let len = op.tensors_mut()[i].len();
            if grads[i].len() != len {
                return Err(Error::Shape(format!("gradient of `{name}` has the wrong length")));
            }
            let v: Vec<f64> = (0..len).map(|_| rng.normal()).collect();
            let analytic: f64 = grads[i].iter().zip(&v).map(|(g, d)| g * d).sum();

            let original = op.tensors_mut()[i].to_vec();
            let shift = |op: &mut dyn Differentiable, s: f64| {
                for ((t, o), d) in op.tensors_mut()[i].iter_mut().zip(&original).zip(&v) {
                    *t = o + s * d;
                }
            };
            shift(op, h);
            let plus = projected(op, &r)?;
            shift(op, -h);
            let minus = projected(op, &r)?;
            op.tensors_mut()[i].copy_from_slice(&original);

            let numeric = (plus - minus) / (2.0 * h);
            let e = rel_err(analytic, numeric);
            report.checks += 1;
            if e > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = report.max_rel_err.max(e);
                report.worst = name.clone();
            }
        }
    }
    Ok(report)
}

/// ReLU on an input kept away from the kink.
pub struct ReluProbe {
    pub x: ClipTensor<f64>,
}

impl ReluProbe {
    /// Entries uniform in ±[0.1, 1).
    pub fn away_from_zero(shape: [usize; 5], seed: u64) -> Result<Self> {
        let mut rng = SplitMix64::new(seed);
        let x = ClipTensor::from_fn(shape, |_| {
            let m = rng.uniform(0.1, 1.0);
            if rng.next_u64() & 1 == 0 { m } else { -m }
        })?;
        Ok(Self { x })
    }
}

impl Differentiable for ReluProbe {
    fn tensor_names(&self) -> Vec<String> {
        vec!["x".into()]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.x.data_mut()]
    }
    fn forward(&self) -> Result<Vec<f64>> {
        Ok(relu(&self.x).into_data())
    }
    fn backward(&self, upstream: &[f64]) -> Result<Vec<Vec<f64>>> {
        let up = ClipTensor::from_vec(self.x.shape(), upstream.to_vec())?;
        Ok(vec![relu_backward(&self.x, &up)?.into_data()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvVariant {
    Spatial,
    Temporal,
    Pointwise,
    Full,
}

pub struct ConvProbe {
    pub variant: ConvVariant,
    pub spec: KernelSpec,
    pub x: ClipTensor<f64>,
    pub w: ConvWeights<f64>,
}

impl ConvProbe {
    pub fn random(variant: ConvVariant, spec: KernelSpec, input: [usize; 5], seed: u64) -> Result<Self> {
        Ok(Self {
            variant,
            spec,
            x: ClipTensor::uniform(input, -1.0, 1.0, seed)?,
            w: ConvWeights::uniform(&spec, -1.0, 1.0, seed ^ 0x5555)?,
        })
    }
}

impl Differentiable for ConvProbe {
    fn tensor_names(&self) -> Vec<String> {
        vec!["x".into(), "weight".into()]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.x.data_mut(), self.w.kernel.data_mut()]
    }
    fn forward(&self) -> Result<Vec<f64>> {
        let y = match self.variant {
            ConvVariant::Spatial => conv_spatial(&self.x, &self.w, &self.spec)?,
            ConvVariant::Temporal => conv_temporal(&self.x, &self.w, &self.spec)?,
            ConvVariant::Pointwise => conv_pointwise(&self.x, &self.w, &self.spec)?,
            ConvVariant::Full => conv3d(&self.x, &self.w, &self.spec)?,
        };
        Ok(y.into_data())
    }
    fn backward(&self, upstream: &[f64]) -> Result<Vec<Vec<f64>>> {
        let dy = ClipTensor::from_vec(self.spec.output_shape(self.x.shape())?, upstream.to_vec())?;
        let ConvGrads { dx, dw } = match self.variant {
            ConvVariant::Spatial => conv_spatial_backward(&self.x, &self.w, &self.spec, &dy)?,
            ConvVariant::Temporal => conv_temporal_backward(&self.x, &self.w, &self.spec, &dy)?,
            ConvVariant::Pointwise => conv_pointwise_backward(&self.x, &self.w, &self.spec, &dy)?,
            ConvVariant::Full => conv3d_backward(&self.x, &self.w, &self.spec, &dy)?,
        };
        Ok(vec![dx.into_data(), dw.kernel.into_data()])
    }
}

pub struct BatchNormProbe {
    pub mode: BnMode,
    pub x: ClipTensor<f64>,
    pub bn: BatchNorm<f64>,
}

impl BatchNormProbe {
    pub fn random(mode: BnMode, shape: [usize; 5], seed: u64) -> Result<Self> {
        let c = shape[1];
        let mut rng = SplitMix64::new(seed ^ 0xB0);
        let mut bn = BatchNorm::new(c);
        for ch in 0..c {
            bn.gamma[ch] = rng.uniform(0.5, 1.5);
            bn.beta[ch] = rng.uniform(-0.5, 0.5);
            bn.running_mean[ch] = rng.uniform(-0.2, 0.2);
            bn.running_var[ch] = rng.uniform(0.5, 1.5);
        }
        Ok(Self {
            mode,
            x: ClipTensor::uniform(shape, -2.0, 2.0, seed)?,
            bn,
        })
    }
}

impl Differentiable for BatchNormProbe {
    fn tensor_names(&self) -> Vec<String> {
        vec!["x".into(), "gamma".into(), "beta".into()]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.x.data_mut(), &mut self.bn.gamma, &mut self.bn.beta]
    }
    fn forward(&self) -> Result<Vec<f64>> {
        Ok(batch_norm(&self.x, &self.bn, self.mode, false)?.0.into_data())
    }
    fn backward(&self, upstream: &[f64]) -> Result<Vec<Vec<f64>>> {
        let (_, cache) = batch_norm(&self.x, &self.bn, self.mode, true)?;
        let dy = ClipTensor::from_vec(self.x.shape(), upstream.to_vec())?;
        let g = batch_norm_backward(&cache, &self.bn.gamma, &dy)?;
        Ok(vec![g.dx.into_data(), g.dgamma, g.dbeta])
    }
}

pub struct MaxPoolProbe {
    pub pool: MaxPool,
    pub x: ClipTensor<f64>,
}

impl MaxPoolProbe {
    /// Input is a shuffled ramp so every window has a unique, well
    /// separated maximum.
    pub fn random(pool: MaxPool, shape: [usize; 5], seed: u64) -> Result<Self> {
        let len: usize = shape.iter().product();
        let mut vals: Vec<f64> = (0..len).map(|i| i as f64 / len as f64).collect();
        SplitMix64::new(seed).shuffle(&mut vals);
        Ok(Self {
            pool,
            x: ClipTensor::from_vec(shape, vals)?,
        })
    }
}

impl Differentiable for MaxPoolProbe {
    fn tensor_names(&self) -> Vec<String> {
        vec!["x".into()]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.x.data_mut()]
    }
    fn forward(&self) -> Result<Vec<f64>> {
        Ok(self.pool.forward(&self.x)?.0.into_data())
    }
    fn backward(&self, upstream: &[f64]) -> Result<Vec<Vec<f64>>> {
        let (y, cache) = self.pool.forward(&self.x)?;
        let dy = ClipTensor::from_vec(y.shape(), upstream.to_vec())?;
        Ok(vec![self.pool.backward(&cache, &dy)?.into_data()])
    }
}

pub struct GlobalPoolProbe {
    pub x: ClipTensor<f64>,
}

impl Differentiable for GlobalPoolProbe {
    fn tensor_names(&self) -> Vec<String> {
        vec!["x".into()]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.x.data_mut()]
    }
    fn forward(&self) -> Result<Vec<f64>> {
        Ok(global_avg_pool(&self.x).data().to_vec())
    }
    fn backward(&self, upstream: &[f64]) -> Result<Vec<Vec<f64>>> {
        let dy = Matrix::from_vec(self.x.batch(), self.x.channels(), upstream.to_vec())?;
        Ok(vec![global_avg_pool_backward(self.x.shape(), &dy)?.into_data()])
    }
}

/// Fully connected layer preceded by a fixed inverted-dropout mask.
pub struct LinearProbe {
    pub x: Matrix<f64>,
    pub layer: Linear<f64>,
    pub mask: Vec<f64>,
}

impl LinearProbe {
    pub fn random(rows: usize, features: usize, classes: usize, dropout: f64, seed: u64) -> Result<Self> {
        let mut rng = SplitMix64::new(seed);
        let x = Matrix::from_vec(rows, features, (0..rows * features).map(|_| rng.normal()).collect())?;
        let mut layer = Linear::init(features, classes, &mut rng);
        layer.bias.iter_mut().for_each(|b| *b = rng.normal());
        let mask = dropout_mask(rows * features, dropout, &mut rng)?;
        Ok(Self { x, layer, mask })
    }
}

impl Differentiable for LinearProbe {
    fn tensor_names(&self) -> Vec<String> {
        vec!["x".into(), "weight".into(), "bias".into()]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.x.data_mut(), self.layer.weight.data_mut(), &mut self.layer.bias]
    }
    fn forward(&self) -> Result<Vec<f64>> {
        Ok(fully_connected(&apply_mask(&self.x, &self.mask), &self.layer)?.data().to_vec())
    }
    fn backward(&self, upstream: &[f64]) -> Result<Vec<Vec<f64>>> {
        let dropped = apply_mask(&self.x, &self.mask);
        let dy = Matrix::from_vec(self.x.rows(), self.layer.classes(), upstream.to_vec())?;
        let g = fully_connected_backward(&dropped, &self.layer, &dy)?;
        let dx = apply_mask(&g.dx, &self.mask);
        Ok(vec![dx.data().to_vec(), g.dweight.data().to_vec(), g.dbias])
    }
}

pub struct SoftmaxProbe {
    pub logits: Matrix<f64>,
    pub labels: Vec<usize>,
}

impl SoftmaxProbe {
    pub fn random(rows: usize, classes: usize, seed: u64) -> Result<Self> {
        let mut rng = SplitMix64::new(seed);
        let logits = Matrix::from_vec(rows, classes, (0..rows * classes).map(|_| 2.0 * rng.normal()).collect())?;
        let labels = (0..rows).map(|_| rng.below(classes)).collect();
        Ok(Self { logits, labels })
    }
}

impl Differentiable for SoftmaxProbe {
    fn tensor_names(&self) -> Vec<String> {
        vec!["logits".into()]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.logits.data_mut()]
    }
    fn forward(&self) -> Result<Vec<f64>> {
        Ok(vec![softmax_cross_entropy(&self.logits, &self.labels)?.0])
    }
    fn backward(&self, upstream: &[f64]) -> Result<Vec<Vec<f64>>> {
        let (_, g) = softmax_cross_entropy(&self.logits, &self.labels)?;
        Ok(vec![g.data().iter().map(|v| v * upstream[0]).collect()])
    }
}

/// A whole residual unit: input plus every trainable parameter.
pub struct BlockProbe {
    pub block: Block<f64>,
    pub x: ClipTensor<f64>,
    pub pass: Pass,
}

impl BlockProbe {
    /// Train-mode BN, random BN affine parameters so no path is trivial.
    pub fn random(spec: BlockSpec, input: [usize; 5], seed: u64) -> Result<Self> {
        let mut rng = SplitMix64::new(seed);
        let mut block = Block::build(spec, &mut rng, false)?;
        let mut views = block.param_views_mut("");
        for v in views.iter_mut() {
            if v.kind == crate::params::ParamKind::BnScale {
                v.data.iter_mut().for_each(|g| *g = rng.uniform(0.5, 1.5));
            } else if v.kind == crate::params::ParamKind::BnShift {
                v.data.iter_mut().for_each(|b| *b = rng.uniform(-0.3, 0.3));
            }
        }
        Ok(Self {
            block,
            x: ClipTensor::uniform(input, -1.0, 1.0, seed ^ 0xC11)?,
            pass: Pass::TRAIN,
        })
    }
}

impl Differentiable for BlockProbe {
    fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["x".to_string()];
        self.block.visit("", &mut |v| {
            if v.kind.trainable() {
                names.push(v.name);
            }
        });
        names
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.x.data_mut()];
        self.block.visit_mut("", &mut |v| {
            if v.kind.trainable() {
                out.push(v.data);
            }
        });
        out
    }
    fn forward(&self) -> Result<Vec<f64>> {
        let pass = Pass { record: false, ..self.pass };
        Ok(self.block.forward(&self.x, pass)?.0.into_data())
    }
    fn backward(&self, upstream: &[f64]) -> Result<Vec<Vec<f64>>> {
        let pass = Pass { record: true, ..self.pass };
        let (y, cache) = self.block.forward(&self.x, pass)?;
        let dy = ClipTensor::from_vec(y.shape(), upstream.to_vec())?;
        let (dx, grads) = self.block.backward(&cache.expect("recorded"), &dy)?;
        let mut out = vec![dx.into_data()];
        grads.visit("", &mut |_, g| out.push(g.to_vec()));
        Ok(out)
    }
}

/// A named probe in the standard suite.
pub struct NamedProbe {
    pub name: String,
    pub probe: Box<dyn Differentiable>,
}

/// Every differentiable op and every block kind on reduced shapes.
pub fn standard_probes(seed: u64) -> Result<Vec<NamedProbe>> {
    let mut probes: Vec<NamedProbe> = Vec::new();
    let mut add = |name: &str, probe: Box<dyn Differentiable>| {
        probes.push(NamedProbe {
            name: name.to_string(),
            probe,
        })
    };
    add("relu", Box::new(ReluProbe::away_from_zero([1, 2, 3, 3, 3], seed)?));
    add(
        "conv_spatial",
        Box::new(ConvProbe::random(ConvVariant::Spatial, KernelSpec::spatial(2, 3, 3)?, [1, 2, 2, 4, 4], seed)?),
    );
    add(
        "conv_spatial_strided",
        Box::new(ConvProbe::random(
            ConvVariant::Spatial,
            KernelSpec::spatial(2, 2, 3)?.with_stride(1, 2),
            [1, 2, 2, 5, 5],
            seed,
        )?),
    );
    add(
        "conv_temporal",
        Box::new(ConvProbe::random(ConvVariant::Temporal, KernelSpec::temporal(2, 3, 3)?, [1, 2, 5, 2, 2], seed)?),
    );
    add(
        "conv_pointwise",
        Box::new(ConvProbe::random(
            ConvVariant::Pointwise,
            KernelSpec::pointwise(3, 2).with_stride(1, 2),
            [2, 3, 2, 3, 3],
            seed,
        )?),
    );
    add(
        "conv3d",
        Box::new(ConvProbe::random(
            ConvVariant::Full,
            KernelSpec::same(2, 2, 3, 3)?.with_stride(2, 1),
            [1, 2, 4, 3, 3],
            seed,
        )?),
    );
    add("batch_norm_train", Box::new(BatchNormProbe::random(BnMode::Train, [2, 3, 2, 3, 3], seed)?));
    add(
        "batch_norm_inference",
        Box::new(BatchNormProbe::random(BnMode::Inference, [2, 3, 2, 3, 3], seed)?),
    );
    add(
        "max_pool",
        Box::new(MaxPoolProbe::random(MaxPool { window: 3, stride: 2, pad: 1 }, [1, 2, 2, 5, 5], seed)?),
    );
    add(
        "global_avg_pool",
        Box::new(GlobalPoolProbe {
            x: ClipTensor::uniform([2, 3, 2, 3, 3], -1.0, 1.0, seed)?,
        }),
    );
    add("fully_connected", Box::new(LinearProbe::random(3, 5, 4, 0.0, seed)?));
    add("dropout_fc", Box::new(LinearProbe::random(3, 6, 2, 0.5, seed)?));
    add("softmax_cross_entropy", Box::new(SoftmaxProbe::random(4, 5, seed)?));
    for kind in [BlockKind::Basic2D, BlockKind::P3dA, BlockKind::P3dB, BlockKind::P3dC] {
        let name = format!("block_{}", kind.short_name());
        add(&name, Box::new(BlockProbe::random(BlockSpec::new(kind, 8, 2, 1)?, [2, 8, 3, 4, 4], seed)?));
        let name = format!("block_{}_downsample", kind.short_name());
        add(&name, Box::new(BlockProbe::random(BlockSpec::new(kind, 4, 2, 2)?, [2, 4, 3, 4, 4], seed)?));
    }
    Ok(probes)
}
