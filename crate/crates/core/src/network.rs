//! Whole networks: stem, four bottleneck stages, pooled head.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use crate::block::{Block, BlockCache, BlockGrads, BlockKind, BlockSpec, EXPANSION};
use crate::checkpoint::{self, NamedTensor};
use crate::conv::{ConvWeights, KernelSpec};
use crate::error::{Error, Result};
use crate::layers::{ConvBn, ConvBnCache, ConvBnGrads, Pass};
use crate::linear::{apply_mask, dropout_mask, fully_connected, fully_connected_backward, Linear, Matrix};
use crate::norm::BnMode;
use crate::params::{join, ParamKind, ParamView, ParamViewMut, Params};
use crate::pool::{global_avg_pool, global_avg_pool_backward, MaxPool, PoolCache};
use crate::real::Real;
use crate::rng::SplitMix64;
use crate::tensor::{relu, relu_backward, ClipTensor, Shape5};

pub const INPUT_CHANNELS: usize = 3;
pub const STEM_KERNEL: usize = 7;
pub const DEFAULT_GEOMETRY: [usize; 3] = [16, 160, 160];
const META_NAME: &str = "meta.arch";
const META_VERSION: f32 = 1.0;

/// How blocks are assigned kinds along the flattened block sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockPolicy {
    /// Plain 2D bottlenecks, the frame-wise baseline.
    Basic2D,
    AllA,
    AllB,
    AllC,
    /// A, B, C, A, B, C, ...
    MixedAbc,
}

impl BlockPolicy {
    pub const ALL: [BlockPolicy; 5] = [
        BlockPolicy::Basic2D,
        BlockPolicy::AllA,
        BlockPolicy::AllB,
        BlockPolicy::AllC,
        BlockPolicy::MixedAbc,
    ];

    pub fn kind_at(self, index: usize) -> BlockKind {
        match self {
            BlockPolicy::Basic2D => BlockKind::Basic2D,
            BlockPolicy::AllA => BlockKind::P3dA,
            BlockPolicy::AllB => BlockKind::P3dB,
            BlockPolicy::AllC => BlockKind::P3dC,
            BlockPolicy::MixedAbc => [BlockKind::P3dA, BlockKind::P3dB, BlockKind::P3dC][index % 3],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BlockPolicy::Basic2D => "2d",
            BlockPolicy::AllA => "all_A",
            BlockPolicy::AllB => "all_B",
            BlockPolicy::AllC => "all_C",
            BlockPolicy::MixedAbc => "mixed_ABC",
        }
    }

    fn code(self) -> u32 {
        match self {
            BlockPolicy::Basic2D => 0,
            BlockPolicy::AllA => 1,
            BlockPolicy::AllB => 2,
            BlockPolicy::AllC => 3,
            BlockPolicy::MixedAbc => 4,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        BlockPolicy::ALL
            .into_iter()
            .find(|p| p.code() == code)
            .ok_or_else(|| Error::Invalid(format!("unknown block policy code {code}")))
    }
}

impl fmt::Display for BlockPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockPolicy {
    type Err = Error;

    /// Accepts the long names (`all_A`, `mixed_ABC`) and the short ones
    /// (`a`, `b`, `c`, `mixed`, `2d`), case-insensitively.
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "2d" | "basic2d" => Ok(BlockPolicy::Basic2D),
            "a" | "all_a" => Ok(BlockPolicy::AllA),
            "b" | "all_b" => Ok(BlockPolicy::AllB),
            "c" | "all_c" => Ok(BlockPolicy::AllC),
            "mixed" | "mixed_abc" => Ok(BlockPolicy::MixedAbc),
            _ => Err(Error::Invalid(format!(
                "unknown block policy `{s}` (expected a, b, c, mixed or 2d)"
            ))),
        }
    }
}

/// Channel widths: stem output and the bottleneck width of each stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Widths {
    pub stem: usize,
    pub mids: [usize; 4],
}

impl Widths {
    pub const STANDARD: Widths = Widths {
        stem: 64,
        mids: [64, 128, 256, 512],
    };
    /// Desk-scale widths for training tests.
    pub const REDUCED: Widths = Widths {
        stem: 16,
        mids: [8, 16, 32, 64],
    };

    pub fn pool5(&self) -> usize {
        EXPANSION * self.mids[3]
    }
}

pub fn stage_blocks_for_depth(depth: usize) -> Result<[usize; 4]> {
    match depth {
        50 => Ok([3, 4, 6, 3]),
        152 => Ok([3, 8, 36, 3]),
        _ => Err(Error::Invalid(format!("unsupported depth {depth} (expected 50 or 152)"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchSpec {
    pub base_depth: usize,
    pub stage_blocks: [usize; 4],
    pub policy: BlockPolicy,
    pub num_classes: usize,
    pub widths: Widths,
    /// (T, H, W) the network is meant for; used by summaries and benches.
    pub input_geometry: [usize; 3],
    pub dropout_rate: f64,
}

impl ArchSpec {
    pub fn new(depth: usize, policy: BlockPolicy, num_classes: usize) -> Result<Self> {
        let spec = Self {
            base_depth: depth,
            stage_blocks: stage_blocks_for_depth(depth)?,
            policy,
            num_classes,
            widths: Widths::STANDARD,
            input_geometry: DEFAULT_GEOMETRY,
            dropout_rate: 0.5,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_widths(mut self, widths: Widths) -> Self {
        self.widths = widths;
        self
    }

    /// Non-standard stage lengths, for small test networks. The nominal
    /// depth follows as 3·Σblocks + 2.
    pub fn with_stage_blocks(mut self, blocks: [usize; 4]) -> Self {
        self.stage_blocks = blocks;
        self.base_depth = 3 * blocks.iter().sum::<usize>() + 2;
        self
    }

    pub fn with_geometry(mut self, geometry: [usize; 3]) -> Self {
        self.input_geometry = geometry;
        self
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn with_policy(mut self, policy: BlockPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Invalid("num_classes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Invalid(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        if self.stage_blocks.contains(&0) {
            return Err(Error::Invalid(format!("empty stage in {:?}", self.stage_blocks)));
        }
        if self.widths.stem == 0 || self.widths.mids.contains(&0) {
            return Err(Error::Invalid(format!("zero width in {:?}", self.widths)));
        }
        if self.input_geometry.contains(&0) {
            return Err(Error::Invalid(format!("zero extent in geometry {:?}", self.input_geometry)));
        }
        Ok(())
    }

    pub fn block_count(&self) -> usize {
        self.stage_blocks.iter().sum()
    }

    pub fn stem_spec(&self) -> KernelSpec {
        KernelSpec::new(INPUT_CHANNELS, self.widths.stem, 1, STEM_KERNEL)
            .with_stride(1, 2)
            .with_padding(0, STEM_KERNEL / 2)
    }

    pub fn stem_pool(&self) -> MaxPool {
        MaxPool {
            window: 3,
            stride: 2,
            pad: 1,
        }
    }

    /// Block specs with their names, in forward order.
    pub fn block_specs(&self) -> Result<Vec<(String, BlockSpec)>> {
        let mut out = Vec::with_capacity(self.block_count());
        let mut in_ch = self.widths.stem;
        for (stage, (&count, &mid)) in self.stage_blocks.iter().zip(&self.widths.mids).enumerate() {
            for j in 0..count {
                let stride = if stage > 0 && j == 0 { 2 } else { 1 };
                let kind = self.policy.kind_at(out.len());
                let spec = BlockSpec::new(kind, in_ch, mid, stride)?;
                in_ch = spec.out_ch;
                out.push((format!("stage{}.block{j}", stage + 2), spec));
            }
        }
        Ok(out)
    }

    fn meta(&self) -> Vec<f32> {
        let mut m = vec![META_VERSION, self.policy.code() as f32, self.num_classes as f32, self.widths.stem as f32];
        m.extend(self.widths.mids.iter().map(|&v| v as f32));
        m.extend(self.stage_blocks.iter().map(|&v| v as f32));
        m.extend(self.input_geometry.iter().map(|&v| v as f32));
        m.push(self.dropout_rate as f32);
        m.push(self.base_depth as f32);
        m
    }

    fn from_meta(m: &[f32]) -> Result<Self> {
        if m.len() != 17 || m[0] != META_VERSION {
            return Err(Error::Format(format!("`{META_NAME}` has an unexpected layout")));
        }
        let u = |v: f32| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Format(format!("`{META_NAME}` holds non-integer {v}")))
            }
        };
        let spec = Self {
            policy: BlockPolicy::from_code(u(m[1])? as u32)?,
            num_classes: u(m[2])?,
            widths: Widths {
                stem: u(m[3])?,
                mids: [u(m[4])?, u(m[5])?, u(m[6])?, u(m[7])?],
            },
            stage_blocks: [u(m[8])?, u(m[9])?, u(m[10])?, u(m[11])?],
            input_geometry: [u(m[12])?, u(m[13])?, u(m[14])?],
            dropout_rate: m[15] as f64,
            base_depth: u(m[16])?,
        };
        spec.validate().map_err(|e| Error::Format(format!("`{META_NAME}`: {e}")))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InitRule {
    pub seed: u64,
    /// Start every restore BN scale at zero.
    pub zero_final_bn: bool,
}

impl InitRule {
    pub fn seeded(seed: u64) -> Self {
        Self {
            seed,
            zero_final_bn: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedBlock<T = f32> {
    pub name: String,
    pub block: Block<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph<T = f32> {
    pub arch: ArchSpec,
    pub stem: ConvBn<T>,
    pub stem_pool: MaxPool,
    pub blocks: Vec<NamedBlock<T>>,
    pub head: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct NetOutput<T = f32> {
    /// Globally pooled final feature map, one row per clip.
    pub pool5: Matrix<T>,
    pub logits: Matrix<T>,
}

#[derive(Debug, Clone)]
pub struct NetCache<T = f32> {
    stem: ConvBnCache<T>,
    stem_act: ClipTensor<T>,
    pool: PoolCache,
    blocks: Vec<BlockCache<T>>,
    feature_shape: Shape5,
    mask: Option<Vec<T>>,
    head_in: Matrix<T>,
}

#[derive(Debug, Clone)]
pub struct NetGrads<T = f32> {
    pub stem: ConvBnGrads<T>,
    pub blocks: Vec<BlockGrads<T>>,
    pub fc_weight: Matrix<T>,
    pub fc_bias: Vec<T>,
}

impl<T: Real> NetGrads<T> {
    /// Same order and names as the trainable parameters of the network.
    pub fn visit<'a>(&'a self, names: &[String], f: &mut dyn FnMut(String, &'a [T])) {
        self.stem.visit("stem", f);
        for (name, g) in names.iter().zip(&self.blocks) {
            g.visit(name, f);
        }
        f("fc.weight".into(), self.fc_weight.data());
        f("fc.bias".into(), &self.fc_bias);
    }
}

/// Per-layer wall-clock times collected by [`NetworkGraph::forward_timed`].
pub type LayerTimes = Vec<(String, Duration)>;

/// Whether `--freeze-bn` keeps this tensor fixed: every BN tensor except
/// those of the stem.
pub fn frozen_under_bn_freeze(name: &str, kind: ParamKind) -> bool {
    kind.is_bn() && !name.starts_with("stem.")
}

pub fn build_network<T: Real>(arch: ArchSpec, init: InitRule) -> Result<NetworkGraph<T>> {
    arch.validate()?;
    let mut rng = SplitMix64::new(init.seed);
    let stem = ConvBn::new(arch.stem_spec(), &mut rng)?;
    let blocks = arch
        .block_specs()?
        .into_iter()
        .map(|(name, spec)| {
            Ok(NamedBlock {
                name,
                block: Block::build(spec, &mut rng, init.zero_final_bn)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let head = Linear::init(arch.widths.pool5(), arch.num_classes, &mut rng);
    Ok(NetworkGraph {
        stem_pool: arch.stem_pool(),
        arch,
        stem,
        blocks,
        head,
    })
}

impl<T: Real> NetworkGraph<T> {
    pub fn block_names(&self) -> Vec<String> {
        self.blocks.iter().map(|b| b.name.clone()).collect()
    }

    pub fn block_kinds(&self) -> Vec<BlockKind> {
        self.blocks.iter().map(|b| b.block.spec.kind).collect()
    }

    fn check_input(&self, x: &ClipTensor<T>) -> Result<()> {
        if x.channels() != INPUT_CHANNELS {
            return Err(Error::Shape(format!(
                "network expects {INPUT_CHANNELS} input channels, got {}",
                x.channels()
            )));
        }
        Ok(())
    }

    fn run_inference(&self, x: &ClipTensor<T>, mut times: Option<&mut LayerTimes>) -> Result<NetOutput<T>> {
        self.check_input(x)?;
        let mut clock = Instant::now();
        let mut lap = |name: &str, times: &mut Option<&mut LayerTimes>| {
            if let Some(t) = times.as_deref_mut() {
                let now = Instant::now();
                t.push((name.to_string(), now - clock));
                clock = now;
            }
        };
        let (pre, _) = self.stem.forward(x, Pass::INFERENCE)?;
        let (mut h, _) = self.stem_pool.forward(&relu(&pre))?;
        lap("stem", &mut times);
        for nb in &self.blocks {
            h = nb.block.forward(&h, Pass::INFERENCE)?.0;
            lap(&nb.name, &mut times);
        }
        let pool5 = global_avg_pool(&h);
        let logits = fully_connected(&pool5, &self.head)?;
        lap("head", &mut times);
        Ok(NetOutput { pool5, logits })
    }

    /// Inference forward: BN uses running statistics, dropout is off and no
    /// activations are kept.
    pub fn forward(&self, x: &ClipTensor<T>) -> Result<NetOutput<T>> {
        self.run_inference(x, None)
    }

    pub fn forward_timed(&self, x: &ClipTensor<T>) -> Result<(NetOutput<T>, LayerTimes)> {
        let mut times = Vec::with_capacity(self.blocks.len() + 2);
        let out = self.run_inference(x, Some(&mut times))?;
        Ok((out, times))
    }

    /// Training forward: batch-statistics BN, dropout drawn from `rng`.
    /// With `freeze_bn` every BN but the stem's normalizes with its
    /// running statistics.
    pub fn forward_train(
        &self,
        x: &ClipTensor<T>,
        rng: &mut SplitMix64,
        freeze_bn: bool,
    ) -> Result<(NetOutput<T>, NetCache<T>)> {
        self.check_input(x)?;
        let inner = if freeze_bn {
            Pass {
                bn: BnMode::Inference,
                record: true,
            }
        } else {
            Pass::TRAIN
        };
        let (pre, stem) = self.stem.forward(x, Pass::TRAIN)?;
        let stem_act = relu(&pre);
        let (mut h, pool) = self.stem_pool.forward(&stem_act)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for nb in &self.blocks {
            let (y, cache) = nb.block.forward(&h, inner)?;
            blocks.push(cache.expect("recording pass"));
            h = y;
        }
        let feature_shape = h.shape();
        let pool5 = global_avg_pool(&h);
        let mask = if self.arch.dropout_rate > 0.0 {
            Some(dropout_mask(pool5.data().len(), self.arch.dropout_rate, rng)?)
        } else {
            None
        };
        let head_in = match &mask {
            Some(m) => apply_mask(&pool5, m),
            None => pool5.clone(),
        };
        let logits = fully_connected(&head_in, &self.head)?;
        Ok((
            NetOutput { pool5, logits },
            NetCache {
                stem,
                stem_act,
                pool,
                blocks,
                feature_shape,
                mask,
                head_in,
            },
        ))
    }

    pub fn backward(&self, cache: &NetCache<T>, dlogits: &Matrix<T>) -> Result<NetGrads<T>> {
        let fc = fully_connected_backward(&cache.head_in, &self.head, dlogits)?;
        let dpool5 = match &cache.mask {
            Some(m) => apply_mask(&fc.dx, m),
            None => fc.dx,
        };
        let mut dh = global_avg_pool_backward(cache.feature_shape, &dpool5)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (nb, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let (dx, g) = nb.block.backward(bc, &dh)?;
            blocks.push(g);
            dh = dx;
        }
        blocks.reverse();
        let dact = self.stem_pool.backward(&cache.pool, &dh)?;
        let (_, stem) = self.stem.backward(&cache.stem, &relu_backward(&cache.stem_act, &dact)?)?;
        Ok(NetGrads {
            stem,
            blocks,
            fc_weight: fc.dweight,
            fc_bias: fc.dbias,
        })
    }

    /// Folds the batch statistics of a training pass into the running BN
    /// state. Under `freeze_bn` only the stem BN moves.
    pub fn commit_stats(&mut self, cache: &NetCache<T>, freeze_bn: bool) {
        self.stem.commit_stats(&cache.stem);
        if freeze_bn {
            return;
        }
        for (nb, bc) in self.blocks.iter_mut().zip(&cache.blocks) {
            nb.block.commit_stats(bc);
        }
    }

    pub fn cast<U: Real>(&self) -> NetworkGraph<U> {
        NetworkGraph {
            arch: self.arch,
            stem: self.stem.cast(),
            stem_pool: self.stem_pool,
            blocks: self
                .blocks
                .iter()
                .map(|b| NamedBlock {
                    name: b.name.clone(),
                    block: b.block.cast(),
                })
                .collect(),
            head: self.head.cast(),
        }
    }

    /// Every parameter tensor, preceded by the architecture record.
    pub fn to_named(&self) -> Vec<NamedTensor> {
        let meta = self.arch.meta();
        let mut out = vec![NamedTensor {
            name: META_NAME.into(),
            dims: vec![meta.len()],
            data: meta,
        }];
        self.visit("", &mut |v| {
            out.push(NamedTensor {
                name: v.name,
                dims: v.dims,
                data: v.data.iter().map(|x| x.as_f64() as f32).collect(),
            })
        });
        out
    }

    /// Rebuilds a network from [`NetworkGraph::to_named`] output.
    pub fn from_named(tensors: &[NamedTensor]) -> Result<Self> {
        let meta = tensors
            .iter()
            .find(|t| t.name == META_NAME)
            .ok_or_else(|| Error::Format(format!("checkpoint has no `{META_NAME}` record")))?;
        let arch = ArchSpec::from_meta(&meta.data)?;
        let mut net = build_network(arch, InitRule::seeded(0))?;
        net.load_named(tensors)?;
        Ok(net)
    }

    /// Overwrites every parameter from `tensors`. Names and shapes must
    /// match exactly, and the architecture record, when present, must
    /// describe this graph.
    pub fn load_named(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let mut by_name: HashMap<&str, &NamedTensor> = tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let meta = by_name.remove(META_NAME);
        let mut failure = None;
        self.visit_mut("", &mut |v| {
            if failure.is_some() {
                return;
            }
            match by_name.remove(v.name.as_str()) {
                None => {
                    failure = Some(Error::TensorMismatch {
                        name: v.name,
                        detail: "missing from checkpoint".into(),
                    })
                }
                Some(t) if t.dims != v.dims => {
                    failure = Some(Error::TensorMismatch {
                        detail: format!("checkpoint has shape {:?}, graph expects {:?}", t.dims, v.dims),
                        name: v.name,
                    })
                }
                Some(t) => {
                    for (dst, &src) in v.data.iter_mut().zip(&t.data) {
                        *dst = T::from_f64(src as f64);
                    }
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(extra) = by_name.keys().min() {
            return Err(Error::TensorMismatch {
                name: extra.to_string(),
                detail: "not present in the graph".into(),
            });
        }
        if let Some(meta) = meta {
            let ours = self.arch.meta();
            if meta.data != ours {
                return Err(Error::TensorMismatch {
                    name: META_NAME.into(),
                    detail: format!(
                        "checkpoint describes a different architecture ({} blocks, policy code {})",
                        meta.data.get(8..12).map(|b| b.iter().sum::<f32>()).unwrap_or(0.0),
                        meta.data.get(1).copied().unwrap_or(-1.0)
                    ),
                });
            }
        }
        Ok(())
    }
}

impl<T: Real> Params<T> for NetworkGraph<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(ParamView<'a, T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for nb in &self.blocks {
            nb.block.visit(&join(prefix, &nb.name), f);
        }
        f(ParamView {
            name: join(prefix, "fc.weight"),
            kind: ParamKind::FcWeight,
            dims: vec![self.head.in_features(), self.head.classes()],
            data: self.head.weight.data(),
        });
        f(ParamView {
            name: join(prefix, "fc.bias"),
            kind: ParamKind::FcBias,
            dims: vec![self.head.classes()],
            data: &self.head.bias,
        });
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(ParamViewMut<'a, T>)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for nb in &mut self.blocks {
            nb.block.visit_mut(&join(prefix, &nb.name), f);
        }
        let dims = vec![self.head.in_features(), self.head.classes()];
        let classes = self.head.classes();
        f(ParamViewMut {
            name: join(prefix, "fc.weight"),
            kind: ParamKind::FcWeight,
            dims,
            data: self.head.weight.data_mut(),
        });
        f(ParamViewMut {
            name: join(prefix, "fc.bias"),
            kind: ParamKind::FcBias,
            dims: vec![classes],
            data: &mut self.head.bias,
        });
    }
}

pub fn save_checkpoint<T: Real>(net: &NetworkGraph<T>, path: impl AsRef<Path>) -> Result<()> {
    checkpoint::save_tensors(path, &net.to_named())
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<NetworkGraph<T>> {
    NetworkGraph::from_named(&checkpoint::load_tensors(path)?)
}

/// Starting point for the temporal kernels of an inflated network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemporalInit {
    /// Centre tap one, and BN set so the temporal layer passes its input
    /// through (P3D-A) or contributes nothing (P3D-B, P3D-C).
    Identity,
    Zeros,
    Random { seed: u64 },
}

impl FromStr for TemporalInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(TemporalInit::Identity),
            "zeros" => Ok(TemporalInit::Zeros),
            "random" => Ok(TemporalInit::Random { seed: 0 }),
            _ => Err(Error::Invalid(format!(
                "unknown temporal init `{s}` (expected identity, zeros or random)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InflateReport {
    pub copied: usize,
    pub temporal_layers: usize,
    pub head_reinitialized: bool,
}

fn inflate_temporal<T: Real>(layer: &mut ConvBn<T>, kind: BlockKind, init: TemporalInit, rng: &mut SplitMix64) -> Result<()> {
    let c = layer.spec.out_ch;
    layer.bn = crate::norm::BatchNorm::new(c);
    match init {
        TemporalInit::Identity => {
            layer.weights = ConvWeights::identity(&layer.spec)?;
            if kind == BlockKind::P3dA {
                // (x − 0)/√(var + eps) with var + eps = 1 is exact.
                let v = T::from_f64(1.0 - layer.bn.eps);
                layer.bn.running_var.iter_mut().for_each(|r| *r = v);
            } else {
                layer.bn.gamma.iter_mut().for_each(|g| *g = T::zero());
            }
        }
        TemporalInit::Zeros => layer.weights = ConvWeights::zeros(&layer.spec)?,
        TemporalInit::Random { .. } => layer.weights = ConvWeights::he_normal(&layer.spec, rng)?,
    }
    Ok(())
}

/// Whether a checkpoint tensor of shape `src` can fill a parameter of
/// shape `dst`. Rank-4 2D kernels (out, in, k, k) fill (out, in, 1, k, k).
fn inflatable(src: &[usize], dst: &[usize]) -> bool {
    src == dst || (src.len() == 4 && dst.len() == 5 && dst[2] == 1 && src[..2] == dst[..2] && src[2..] == dst[3..])
}

impl<T: Real> NetworkGraph<T> {
    /// Fills every non-temporal parameter from a 2D checkpoint and
    /// initializes the temporal layers per `init`. The classifier is kept
    /// as built when the checkpoint's head has a different class count.
    pub fn inflate_from_2d(&mut self, ckpt: &[NamedTensor], init: TemporalInit) -> Result<InflateReport> {
        let mut by_name: HashMap<&str, &NamedTensor> = ckpt.iter().map(|t| (t.name.as_str(), t)).collect();
        by_name.remove(META_NAME);
        let head_matches = matches!(
            (by_name.get("fc.weight"), by_name.get("fc.bias")),
            (Some(w), Some(b)) if w.dims == [self.head.in_features(), self.head.classes()] && b.dims == [self.head.classes()]
        );
        if !head_matches {
            by_name.remove("fc.weight");
            by_name.remove("fc.bias");
        }

        let mut copied = 0;
        let mut failure = None;
        self.visit_mut("", &mut |v| {
            if failure.is_some() || v.name.contains(".temporal.") {
                return;
            }
            if matches!(v.kind, ParamKind::FcWeight | ParamKind::FcBias) && !head_matches {
                return;
            }
            match by_name.remove(v.name.as_str()) {
                None => {
                    failure = Some(Error::TensorMismatch {
                        name: v.name,
                        detail: "missing from the 2D checkpoint".into(),
                    })
                }
                Some(t) if !inflatable(&t.dims, &v.dims) => {
                    failure = Some(Error::TensorMismatch {
                        detail: format!("2D checkpoint has shape {:?}, network expects {:?}", t.dims, v.dims),
                        name: v.name,
                    })
                }
                Some(t) => {
                    for (dst, &src) in v.data.iter_mut().zip(&t.data) {
                        *dst = T::from_f64(src as f64);
                    }
                    copied += 1;
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(extra) = by_name.keys().min() {
            return Err(Error::TensorMismatch {
                name: extra.to_string(),
                detail: "2D checkpoint tensor has no counterpart in the network".into(),
            });
        }

        let seed = match init {
            TemporalInit::Random { seed } => seed,
            _ => 0,
        };
        let mut rng = SplitMix64::new(seed);
        let mut temporal_layers = 0;
        for nb in &mut self.blocks {
            let kind = nb.block.spec.kind;
            if let Some(t) = nb.block.temporal.as_mut() {
                inflate_temporal(t, kind, init, &mut rng)?;
                temporal_layers += 1;
            }
        }
        Ok(InflateReport {
            copied,
            temporal_layers,
            head_reinitialized: !head_matches,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamRow {
    pub layer: String,
    /// Kernel weights, or weights plus bias for the classifier.
    pub weights: usize,
    /// BN scale and shift.
    pub bn: usize,
    /// BN running mean and variance.
    pub bn_running: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamTable {
    pub rows: Vec<ParamRow>,
}

impl ParamTable {
    pub fn total_weights(&self) -> usize {
        self.rows.iter().map(|r| r.weights).sum()
    }

    pub fn total_bn(&self) -> usize {
        self.rows.iter().map(|r| r.bn).sum()
    }

    pub fn total_bn_running(&self) -> usize {
        self.rows.iter().map(|r| r.bn_running).sum()
    }

    /// Trainable parameters: weights, classifier bias, BN scale and shift.
    pub fn total(&self) -> usize {
        self.total_weights() + self.total_bn()
    }
}

fn layer_of(name: &str, kind: ParamKind) -> &str {
    let suffix = match kind {
        ParamKind::ConvWeight => ".weight",
        ParamKind::BnScale => ".bn.gamma",
        ParamKind::BnShift => ".bn.beta",
        ParamKind::BnMean => ".bn.running_mean",
        ParamKind::BnVar => ".bn.running_var",
        ParamKind::FcWeight => ".weight",
        ParamKind::FcBias => ".bias",
    };
    name.strip_suffix(suffix).unwrap_or(name)
}

/// Per-layer counts taken from the stored tensors.
pub fn count_parameters<T: Real>(net: &NetworkGraph<T>) -> ParamTable {
    let mut rows: Vec<ParamRow> = Vec::new();
    net.visit("", &mut |v| {
        let layer = layer_of(&v.name, v.kind);
        if rows.last().map(|r| r.layer.as_str()) != Some(layer) {
            rows.push(ParamRow {
                layer: layer.to_string(),
                weights: 0,
                bn: 0,
                bn_running: 0,
            });
        }
        let row = rows.last_mut().expect("just pushed");
        let n = v.data.len();
        match v.kind {
            ParamKind::ConvWeight | ParamKind::FcWeight | ParamKind::FcBias => row.weights += n,
            ParamKind::BnScale | ParamKind::BnShift => row.bn += n,
            ParamKind::BnMean | ParamKind::BnVar => row.bn_running += n,
        }
    });
    ParamTable { rows }
}

pub const BYTES_PER_PARAM: usize = 4;

/// 4 bytes per parameter over weights, classifier bias and BN scale and
/// shift; `storage` adds the BN running statistics.
pub fn model_size_bytes<T: Real>(net: &NetworkGraph<T>, storage: bool) -> usize {
    let t = count_parameters(net);
    let n = t.total() + if storage { t.total_bn_running() } else { 0 };
    n * BYTES_PER_PARAM
}

/// Weighted layers on the main path: stem, three convolutions per block,
/// classifier; plus one temporal convolution per P3D block.
pub fn layer_depth<T: Real>(net: &NetworkGraph<T>) -> (usize, usize) {
    let base = 2 + 3 * net.blocks.len();
    let temporal = net.blocks.iter().filter(|b| b.block.temporal.is_some()).count();
    (base, temporal)
}

fn shape_text(s: Shape5) -> String {
    format!("{}x{}x{}x{}", s[1], s[2], s[3], s[4])
}

/// Column-aligned table of layers, kinds, output shapes (C×T×H×W for one
/// clip of the given geometry) and trainable parameter counts.
pub fn summarize<T: Real>(net: &NetworkGraph<T>, geometry: [usize; 3]) -> Result<String> {
    let [t, h, w] = geometry;
    let mut rows: Vec<[String; 4]> = vec![["layer".into(), "kind".into(), "output".into(), "params".into()]];
    let mut shape = net.stem.spec.output_shape([1, INPUT_CHANNELS, t, h, w])?;
    rows.push([
        "stem".into(),
        format!("conv 1x{0}x{0}", STEM_KERNEL),
        shape_text(shape),
        net.stem.trainable_count().to_string(),
    ]);
    let p = net.stem_pool;
    shape = [shape[0], shape[1], shape[2], p.output_extent(shape[3])?, p.output_extent(shape[4])?];
    rows.push([
        "pool1".into(),
        format!("maxpool 1x{0}x{0}", p.window),
        shape_text(shape),
        "0".into(),
    ]);
    for nb in &net.blocks {
        shape = nb.block.output_shape(shape)?;
        let params: usize = nb.block.param_views("").iter().filter(|v| v.kind.trainable()).map(|v| v.data.len()).sum();
        rows.push([nb.name.clone(), nb.block.spec.kind.to_string(), shape_text(shape), params.to_string()]);
    }
    rows.push(["pool5".into(), "avgpool".into(), format!("{}", shape[1]), "0".into()]);
    rows.push(["dropout".into(), format!("p={}", net.arch.dropout_rate), format!("{}", shape[1]), "0".into()]);
    let k = net.head.classes();
    rows.push(["fc".into(), "linear".into(), format!("{k}"), (net.head.in_features() * k + k).to_string()]);
    let table = count_parameters(net);
    rows.push(["total".into(), String::new(), String::new(), table.total().to_string()]);

    let widths: Vec<usize> = (0..4).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        if i + 1 == rows.len() {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 6));
            out.push('\n');
        }
        let line = format!(
            "{:<w0$}  {:<w1$}  {:<w2$}  {:>w3$}",
            r[0],
            r[1],
            r[2],
            r[3],
            w0 = widths[0],
            w1 = widths[1],
            w2 = widths[2],
            w3 = widths[3]
        );
        out.push_str(line.trim_end());
        out.push('\n');
    }
    let (base, temporal) = layer_depth(net);
    out.push_str(&format!(
        "blocks: {}  policy: {}  weighted layers: {base} + {temporal} temporal = {}\n",
        net.blocks.len(),
        net.arch.policy,
        base + temporal
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, Differentiable};
    use crate::linear::softmax_cross_entropy;

    fn tiny(policy: BlockPolicy) -> ArchSpec {
        ArchSpec::new(50, policy, 3)
            .unwrap()
            .with_widths(Widths { stem: 4, mids: [2, 2, 3, 3] })
            .with_stage_blocks([1, 2, 1, 1])
            .with_dropout(0.0)
    }

    #[test]
    fn stage_layout() {
        let arch = ArchSpec::new(50, BlockPolicy::MixedAbc, 101).unwrap();
        let specs = arch.block_specs().unwrap();
        assert_eq!(specs.len(), 16);
        let strides: Vec<usize> = specs.iter().map(|(_, s)| s.spatial_stride).collect();
        assert_eq!(strides, [1, 1, 1, 2, 1, 1, 1, 2, 1, 1, 1, 1, 1, 2, 1, 1]);
        assert_eq!(specs[0].1.in_ch, 64);
        assert_eq!(specs[15].1.out_ch, 2048);
        assert_eq!(specs[3].0, "stage3.block0");
        assert_eq!(ArchSpec::new(152, BlockPolicy::AllA, 10).unwrap().block_count(), 50);
        assert!(ArchSpec::new(101, BlockPolicy::AllA, 10).is_err());
        assert!(ArchSpec::new(50, BlockPolicy::AllA, 0).is_err());
        assert!("d".parse::<BlockPolicy>().is_err());
        assert_eq!("mixed".parse::<BlockPolicy>().unwrap(), BlockPolicy::MixedAbc);
        assert_eq!("all_B".parse::<BlockPolicy>().unwrap(), BlockPolicy::AllB);
    }

    #[test]
    fn mixed_policy_cycles() {
        for i in 0..60 {
            let want = [BlockKind::P3dA, BlockKind::P3dB, BlockKind::P3dC][i % 3];
            assert_eq!(BlockPolicy::MixedAbc.kind_at(i), want);
        }
    }

    #[test]
    fn meta_round_trip() {
        let arch = tiny(BlockPolicy::AllC).with_geometry([4, 24, 20]).with_dropout(0.25);
        assert_eq!(ArchSpec::from_meta(&arch.meta()).unwrap(), arch);
    }

    #[test]
    fn names_are_unique() {
        let net: NetworkGraph<f32> = build_network(tiny(BlockPolicy::MixedAbc), InitRule::seeded(1)).unwrap();
        let names: Vec<String> = net.param_views("").into_iter().map(|v| v.name).collect();
        let set: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        assert!(names.contains(&"stage3.block1.temporal.weight".to_string()));
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let net: NetworkGraph<f32> = build_network(tiny(BlockPolicy::MixedAbc), InitRule::seeded(2)).unwrap();
        let back = NetworkGraph::<f32>::from_named(&net.to_named()).unwrap();
        assert_eq!(back, net);

        let mut other: NetworkGraph<f32> = build_network(tiny(BlockPolicy::MixedAbc).with_stage_blocks([1, 1, 1, 1]), InitRule::seeded(2)).unwrap();
        match other.load_named(&net.to_named()) {
            Err(Error::TensorMismatch { name, .. }) => assert!(name.starts_with("stage3.block1")),
            e => panic!("expected a named mismatch, got {e:?}"),
        }

        let mut all_a: NetworkGraph<f32> = build_network(tiny(BlockPolicy::AllA), InitRule::seeded(2)).unwrap();
        assert!(matches!(all_a.load_named(&net.to_named()), Err(Error::TensorMismatch { name, .. }) if name == META_NAME));
    }

    #[test]
    fn inference_shapes() {
        let net: NetworkGraph<f32> = build_network(tiny(BlockPolicy::AllB), InitRule::seeded(3)).unwrap();
        let x = ClipTensor::uniform([2, 3, 4, 32, 32], -1.0, 1.0, 4).unwrap();
        let out = net.forward(&x).unwrap();
        assert_eq!((out.pool5.rows(), out.pool5.cols()), (2, 12));
        assert_eq!((out.logits.rows(), out.logits.cols()), (2, 3));
        let (timed, times) = net.forward_timed(&x).unwrap();
        assert_eq!(timed.logits, out.logits);
        assert_eq!(times.len(), net.blocks.len() + 2);
    }

    #[test]
    fn zero_temporal_b_matches_2d() {
        let mut net: NetworkGraph<f64> = build_network(tiny(BlockPolicy::AllB), InitRule::seeded(5)).unwrap();
        let twod: NetworkGraph<f64> = build_network(tiny(BlockPolicy::Basic2D), InitRule::seeded(6)).unwrap();
        net.inflate_from_2d(&twod.to_named(), TemporalInit::Zeros).unwrap();
        let x = ClipTensor::uniform([1, 3, 4, 24, 24], -1.0, 1.0, 7).unwrap();
        // A zero temporal path adds relu(BN(0)) = relu(beta) = 0.
        let a = net.forward(&x).unwrap();
        let b = twod.forward(&x).unwrap();
        assert!(a.logits.max_abs_diff(&b.logits).unwrap() < 1e-5);
    }

    #[test]
    fn inflation_errors_name_the_layer() {
        let mut net: NetworkGraph<f32> = build_network(tiny(BlockPolicy::AllA), InitRule::seeded(1)).unwrap();
        let wider = tiny(BlockPolicy::Basic2D).with_widths(Widths { stem: 4, mids: [2, 3, 3, 3] });
        let twod: NetworkGraph<f32> = build_network(wider, InitRule::seeded(1)).unwrap();
        match net.inflate_from_2d(&twod.to_named(), TemporalInit::Identity) {
            Err(Error::TensorMismatch { name, detail }) => {
                assert_eq!(name, "stage3.block0.reduce.weight");
                assert!(detail.contains("shape"));
            }
            e => panic!("expected a named mismatch, got {e:?}"),
        }
    }

    #[test]
    fn rank4_kernels_inflate() {
        let mut net: NetworkGraph<f32> = build_network(tiny(BlockPolicy::AllA), InitRule::seeded(1)).unwrap();
        let twod: NetworkGraph<f32> = build_network(tiny(BlockPolicy::Basic2D), InitRule::seeded(9)).unwrap();
        let squeezed: Vec<NamedTensor> = twod
            .to_named()
            .into_iter()
            .map(|mut t| {
                if t.dims.len() == 5 {
                    t.dims.remove(2);
                }
                t
            })
            .collect();
        let report = net.inflate_from_2d(&squeezed, TemporalInit::Identity).unwrap();
        assert_eq!(report.temporal_layers, 5);
        assert!(!report.head_reinitialized);
        assert_eq!(net.stem, twod.stem);
    }

    #[test]
    fn head_reinitialized_on_class_change() {
        let mut net: NetworkGraph<f32> = build_network(tiny(BlockPolicy::AllA), InitRule::seeded(1)).unwrap();
        let mut arch2d = tiny(BlockPolicy::Basic2D);
        arch2d.num_classes = 7;
        let twod: NetworkGraph<f32> = build_network(arch2d, InitRule::seeded(2)).unwrap();
        let head = net.head.clone();
        let report = net.inflate_from_2d(&twod.to_named(), TemporalInit::Identity).unwrap();
        assert!(report.head_reinitialized);
        assert_eq!(net.head, head);
    }

    #[test]
    fn counts_follow_tensors() {
        let net: NetworkGraph<f32> = build_network(tiny(BlockPolicy::MixedAbc), InitRule::seeded(1)).unwrap();
        let table = count_parameters(&net);
        let stored: usize = net.param_views("").iter().map(|v| v.data.len()).sum();
        assert_eq!(table.total() + table.total_bn_running(), stored);
        assert_eq!(table.rows[0].layer, "stem");
        assert_eq!(table.rows[0].weights, 4 * 3 * 49);
        assert_eq!(table.rows.last().unwrap().layer, "fc");
        assert_eq!(model_size_bytes(&net, false), 4 * table.total());
        assert_eq!(model_size_bytes(&net, true), 4 * stored);
    }

    #[test]
    fn summary_is_deterministic_and_totals_agree() {
        let net: NetworkGraph<f32> = build_network(tiny(BlockPolicy::MixedAbc), InitRule::seeded(1)).unwrap();
        let a = summarize(&net, [4, 32, 32]).unwrap();
        assert_eq!(a, summarize(&net, [4, 32, 32]).unwrap());
        let total = count_parameters(&net).total().to_string();
        let total_line = a.lines().find(|l| l.starts_with("total")).unwrap();
        assert!(total_line.ends_with(&total));
        let block_rows: Vec<&str> = a.lines().filter(|l| l.starts_with("stage")).collect();
        assert_eq!(block_rows.len(), 5);
        assert!(block_rows[1].contains("P3D-B"));
    }

    struct NetProbe {
        net: NetworkGraph<f64>,
        x: ClipTensor<f64>,
        labels: Vec<usize>,
    }

    impl NetProbe {
        fn loss_grads(&self) -> (f64, NetGrads<f64>) {
            let mut rng = SplitMix64::new(0);
            let (out, cache) = self.net.forward_train(&self.x, &mut rng, false).unwrap();
            let (loss, dlogits) = softmax_cross_entropy(&out.logits, &self.labels).unwrap();
            (loss, self.net.backward(&cache, &dlogits).unwrap())
        }
    }

    impl Differentiable for NetProbe {
        fn tensor_names(&self) -> Vec<String> {
            self.net.param_views("").into_iter().filter(|v| v.kind.trainable()).map(|v| v.name).collect()
        }

        fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
            self.net
                .param_views_mut("")
                .into_iter()
                .filter(|v| v.kind.trainable())
                .map(|v| v.data)
                .collect()
        }

        fn forward(&self) -> Result<Vec<f64>> {
            Ok(vec![self.loss_grads().0])
        }

        fn backward(&self, upstream: &[f64]) -> Result<Vec<Vec<f64>>> {
            let (_, g) = self.loss_grads();
            let mut out = Vec::new();
            g.visit(&self.net.block_names(), &mut |_, d| out.push(d.iter().map(|v| v * upstream[0]).collect()));
            Ok(out)
        }
    }

    #[test]
    fn whole_network_gradient() {
        let mut net: NetworkGraph<f64> = build_network(tiny(BlockPolicy::MixedAbc), InitRule::seeded(11)).unwrap();
        let mut rng = SplitMix64::new(12);
        for v in net.param_views_mut("") {
            if matches!(v.kind, ParamKind::BnScale | ParamKind::BnShift) {
                v.data.iter_mut().for_each(|g| *g += 0.3 * rng.normal());
            }
        }
        let probe = NetProbe {
            net,
            x: ClipTensor::uniform([2, 3, 3, 20, 20], -1.0, 1.0, 13).unwrap(),
            labels: vec![0, 2],
        };
        let names = probe.tensor_names();
        let mut grad_names = Vec::new();
        probe.loss_grads().1.visit(&probe.net.block_names(), &mut |n, _| grad_names.push(n));
        assert_eq!(names, grad_names);
        let mut probe = probe;
        let report = grad_check(&mut probe, 21, 1e-6).unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }
}
