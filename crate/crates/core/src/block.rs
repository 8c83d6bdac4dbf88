//! Bottleneck residual units: the 2D baseline and the three pseudo-3D
//! variants.
//!
//! Notation: `R` reduce (1×1×1), `S` spatial (1×3×3), `T` temporal (3×1×1),
//! `W` restore (1×1×1), `B` batch norm, `r` ReLU, `s` the shortcut. Every
//! convolution is followed by its own BN.
//!
//! ```text
//! Basic2D  u = r(B(R x))   m = r(B(S u))                 y = r(s + B(W m))
//! P3D-A    u = r(B(R x))   m = r(B(T r(B(S u))))         y = r(s + B(W m))
//! P3D-B    u = r(B(R x))   m = r(B(S u)) + r(B(T u))     y = r(s + B(W m))
//! P3D-C    u = r(B(R x))   v = r(B(S u))
//!                          m = v + r(B(T v))             y = r(s + B(W m))
//! ```
//!
//! Spatial downsampling happens in `R` (and in the projection shortcut), so
//! the parallel `S` and `T` paths of P3D-B always agree in shape. Time is
//! never strided.

use std::fmt;

use crate::conv::KernelSpec;
use crate::error::{Error, Result};
use crate::layers::{ConvBn, ConvBnCache, ConvBnGrads, Pass};
use crate::params::{join, ParamView, ParamViewMut, Params};
use crate::real::Real;
use crate::rng::SplitMix64;
use crate::tensor::{relu, relu_backward, ClipTensor};

/// Temporal kernel depth of every P3D block.
pub const TEMPORAL_DEPTH: usize = 3;
/// Spatial kernel size of every block's middle convolution.
pub const SPATIAL_SIZE: usize = 3;
/// `out_ch = EXPANSION × mid_ch`.
pub const EXPANSION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Basic2D,
    P3dA,
    P3dB,
    P3dC,
}

impl BlockKind {
    pub fn has_temporal(self) -> bool {
        self != BlockKind::Basic2D
    }

    pub fn short_name(self) -> &'static str {
        match self {
            BlockKind::Basic2D => "2D",
            BlockKind::P3dA => "A",
            BlockKind::P3dB => "B",
            BlockKind::P3dC => "C",
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::Basic2D => "Basic2D",
            BlockKind::P3dA => "P3D-A",
            BlockKind::P3dB => "P3D-B",
            BlockKind::P3dC => "P3D-C",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shortcut {
    Identity,
    /// Strided 1×1×1 convolution followed by BN.
    Projection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_ch: usize,
    pub mid_ch: usize,
    pub out_ch: usize,
    pub spatial_stride: usize,
    pub shortcut: Shortcut,
}

impl BlockSpec {
    /// Bottleneck with `out_ch = 4·mid_ch`; the shortcut is a projection
    /// exactly when the channel count or resolution changes.
    pub fn new(kind: BlockKind, in_ch: usize, mid_ch: usize, spatial_stride: usize) -> Result<Self> {
        let out_ch = EXPANSION * mid_ch;
        let shortcut = if in_ch != out_ch || spatial_stride != 1 {
            Shortcut::Projection
        } else {
            Shortcut::Identity
        };
        let spec = Self {
            kind,
            in_ch,
            mid_ch,
            out_ch,
            spatial_stride,
            shortcut,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_ch == 0 || self.mid_ch == 0 {
            return Err(Error::Invalid(format!("zero channels in {self:?}")));
        }
        if self.out_ch != EXPANSION * self.mid_ch {
            return Err(Error::Invalid(format!(
                "bottleneck needs out_ch = {EXPANSION}·mid_ch, got {self:?}"
            )));
        }
        if !matches!(self.spatial_stride, 1 | 2) {
            return Err(Error::Invalid(format!("spatial stride must be 1 or 2, got {self:?}")));
        }
        let needs_projection = self.in_ch != self.out_ch || self.spatial_stride != 1;
        if needs_projection != (self.shortcut == Shortcut::Projection) {
            return Err(Error::Invalid(format!(
                "shortcut must be a projection iff channels or resolution change, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn with_kind(mut self, kind: BlockKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn reduce_spec(&self) -> KernelSpec {
        KernelSpec::pointwise(self.in_ch, self.mid_ch).with_stride(1, self.spatial_stride)
    }

    pub fn spatial_spec(&self) -> KernelSpec {
        KernelSpec::spatial(self.mid_ch, self.mid_ch, SPATIAL_SIZE).expect("odd size")
    }

    pub fn temporal_spec(&self) -> KernelSpec {
        KernelSpec::temporal(self.mid_ch, self.mid_ch, TEMPORAL_DEPTH).expect("odd depth")
    }

    pub fn restore_spec(&self) -> KernelSpec {
        KernelSpec::pointwise(self.mid_ch, self.out_ch)
    }

    pub fn projection_spec(&self) -> KernelSpec {
        KernelSpec::pointwise(self.in_ch, self.out_ch).with_stride(1, self.spatial_stride)
    }
}

/// Per-layer weight counts of one block (BN excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockParamCount {
    pub reduce: usize,
    pub spatial: usize,
    pub temporal: usize,
    pub restore: usize,
    pub projection: usize,
    pub total: usize,
}

pub fn block_param_count(spec: &BlockSpec) -> BlockParamCount {
    let reduce = spec.reduce_spec().weight_count();
    let spatial = spec.spatial_spec().weight_count();
    let temporal = if spec.kind.has_temporal() {
        spec.temporal_spec().weight_count()
    } else {
        0
    };
    let restore = spec.restore_spec().weight_count();
    let projection = match spec.shortcut {
        Shortcut::Projection => spec.projection_spec().weight_count(),
        Shortcut::Identity => 0,
    };
    BlockParamCount {
        reduce,
        spatial,
        temporal,
        restore,
        projection,
        total: reduce + spatial + temporal + restore + projection,
    }
}

/// Weight count of the same bottleneck with a full 3×3×3 middle convolution,
/// the unfactorized alternative.
pub fn full3d_block_param_count(spec: &BlockSpec) -> usize {
    let middle = KernelSpec::new(spec.mid_ch, spec.mid_ch, TEMPORAL_DEPTH, SPATIAL_SIZE).weight_count();
    let c = block_param_count(spec);
    c.reduce + middle + c.restore + c.projection
}

/// One residual unit with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T = f32> {
    pub spec: BlockSpec,
    pub reduce: ConvBn<T>,
    pub spatial: ConvBn<T>,
    pub temporal: Option<ConvBn<T>>,
    pub restore: ConvBn<T>,
    pub projection: Option<ConvBn<T>>,
}

#[derive(Debug, Clone)]
pub struct BlockCache<T = f32> {
    reduce: ConvBnCache<T>,
    u: ClipTensor<T>,
    spatial: ConvBnCache<T>,
    s: ClipTensor<T>,
    temporal: Option<(ConvBnCache<T>, ClipTensor<T>)>,
    restore: ConvBnCache<T>,
    projection: Option<ConvBnCache<T>>,
    y: ClipTensor<T>,
}

#[derive(Debug, Clone)]
pub struct BlockGrads<T = f32> {
    pub reduce: ConvBnGrads<T>,
    pub spatial: ConvBnGrads<T>,
    pub temporal: Option<ConvBnGrads<T>>,
    pub restore: ConvBnGrads<T>,
    pub projection: Option<ConvBnGrads<T>>,
}

impl<T: Real> Block<T> {
    /// He-normal convolutions, unit BN scale, zero BN shift. With
    /// `zero_final_bn` the restore BN scale starts at zero so the block
    /// begins as its shortcut.
    pub fn build(spec: BlockSpec, rng: &mut SplitMix64, zero_final_bn: bool) -> Result<Self> {
        spec.validate()?;
        let mut restore = ConvBn::new(spec.restore_spec(), rng)?;
        if zero_final_bn {
            restore.bn.gamma.iter_mut().for_each(|g| *g = T::zero());
        }
        Ok(Self {
            reduce: ConvBn::new(spec.reduce_spec(), rng)?,
            spatial: ConvBn::new(spec.spatial_spec(), rng)?,
            temporal: if spec.kind.has_temporal() {
                Some(ConvBn::new(spec.temporal_spec(), rng)?)
            } else {
                None
            },
            restore,
            projection: match spec.shortcut {
                Shortcut::Projection => Some(ConvBn::new(spec.projection_spec(), rng)?),
                Shortcut::Identity => None,
            },
            spec,
        })
    }

    fn temporal_layer(&self) -> Result<&ConvBn<T>> {
        self.temporal
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("{} block has no temporal layer", self.spec.kind)))
    }

    /// Returns the output and, when `pass.record` is set, the cache for
    /// [`Block::backward`] (the cache also carries train-mode batch
    /// statistics for [`Block::commit_stats`]).
    pub fn forward(&self, x: &ClipTensor<T>, pass: Pass) -> Result<(ClipTensor<T>, Option<BlockCache<T>>)> {
        if x.channels() != self.spec.in_ch {
            return Err(Error::Shape(format!(
                "block expects {} input channels, got {}",
                self.spec.in_ch,
                x.channels()
            )));
        }
        let (pre, reduce) = self.reduce.forward(x, pass)?;
        let u = relu(&pre);
        let (pre, spatial_c) = self.spatial.forward(&u, pass)?;
        let s = relu(&pre);

        let (m, temporal) = match self.spec.kind {
            BlockKind::Basic2D => (s.clone(), None),
            BlockKind::P3dA => {
                let (pre, c) = self.temporal_layer()?.forward(&s, pass)?;
                let t = relu(&pre);
                (t.clone(), Some((c, t)))
            }
            BlockKind::P3dB => {
                let (pre, c) = self.temporal_layer()?.forward(&u, pass)?;
                let t = relu(&pre);
                (s.add(&t)?, Some((c, t)))
            }
            BlockKind::P3dC => {
                let (pre, c) = self.temporal_layer()?.forward(&s, pass)?;
                let t = relu(&pre);
                (s.add(&t)?, Some((c, t)))
            }
        };

        let (z, restore) = self.restore.forward(&m, pass)?;
        let (shortcut, projection) = match &self.projection {
            Some(p) => {
                let (sc, c) = p.forward(x, pass)?;
                (sc, Some(c))
            }
            None => (x.clone(), None),
        };
        let y = relu(&shortcut.add(&z)?);
        let cache = pass.record.then(|| BlockCache {
            reduce,
            u,
            spatial: spatial_c,
            s,
            temporal,
            restore,
            projection,
            y: y.clone(),
        });
        Ok((y, cache))
    }

    pub fn backward(&self, cache: &BlockCache<T>, dy: &ClipTensor<T>) -> Result<(ClipTensor<T>, BlockGrads<T>)> {
        let dpre = relu_backward(&cache.y, dy)?;
        let (dm, restore) = self.restore.backward(&cache.restore, &dpre)?;

        let (du, spatial, temporal) = match (self.spec.kind, &cache.temporal) {
            (BlockKind::Basic2D, _) => {
                let (du, gs) = self.spatial.backward(&cache.spatial, &relu_backward(&cache.s, &dm)?)?;
                (du, gs, None)
            }
            (BlockKind::P3dA, Some((tc, t))) => {
                let (ds, gt) = self.temporal_layer()?.backward(tc, &relu_backward(t, &dm)?)?;
                let (du, gs) = self.spatial.backward(&cache.spatial, &relu_backward(&cache.s, &ds)?)?;
                (du, gs, Some(gt))
            }
            (BlockKind::P3dB, Some((tc, t))) => {
                let (du_t, gt) = self.temporal_layer()?.backward(tc, &relu_backward(t, &dm)?)?;
                let (du_s, gs) = self.spatial.backward(&cache.spatial, &relu_backward(&cache.s, &dm)?)?;
                (du_s.add(&du_t)?, gs, Some(gt))
            }
            (BlockKind::P3dC, Some((tc, t))) => {
                let (ds_t, gt) = self.temporal_layer()?.backward(tc, &relu_backward(t, &dm)?)?;
                let ds = dm.add(&ds_t)?;
                let (du, gs) = self.spatial.backward(&cache.spatial, &relu_backward(&cache.s, &ds)?)?;
                (du, gs, Some(gt))
            }
            _ => return Err(Error::Invalid("block cache is missing its temporal path".into())),
        };

        let (mut dx, reduce) = self.reduce.backward(&cache.reduce, &relu_backward(&cache.u, &du)?)?;
        let projection = match (&self.projection, &cache.projection) {
            (Some(p), Some(pc)) => {
                let (dxs, gp) = p.backward(pc, &dpre)?;
                dx.add_assign(&dxs)?;
                Some(gp)
            }
            _ => {
                dx.add_assign(&dpre)?;
                None
            }
        };
        Ok((
            dx,
            BlockGrads {
                reduce,
                spatial,
                temporal,
                restore,
                projection,
            },
        ))
    }

    /// Folds train-mode batch statistics into every BN's running state.
    pub fn commit_stats(&mut self, cache: &BlockCache<T>) {
        self.reduce.commit_stats(&cache.reduce);
        self.spatial.commit_stats(&cache.spatial);
        if let (Some(t), Some((c, _))) = (self.temporal.as_mut(), &cache.temporal) {
            t.commit_stats(c);
        }
        self.restore.commit_stats(&cache.restore);
        if let (Some(p), Some(c)) = (self.projection.as_mut(), &cache.projection) {
            p.commit_stats(c);
        }
    }

    pub fn cast<U: Real>(&self) -> Block<U> {
        Block {
            spec: self.spec,
            reduce: self.reduce.cast(),
            spatial: self.spatial.cast(),
            temporal: self.temporal.as_ref().map(ConvBn::cast),
            restore: self.restore.cast(),
            projection: self.projection.as_ref().map(ConvBn::cast),
        }
    }

    /// Output shape for an input shape, without running the block.
    pub fn output_shape(&self, input: [usize; 5]) -> Result<[usize; 5]> {
        let reduced = self.spec.reduce_spec().output_shape(input)?;
        let [n, _, t, h, w] = reduced;
        Ok([n, self.spec.out_ch, t, h, w])
    }
}

impl<T: Real> Params<T> for Block<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(ParamView<'a, T>)) {
        self.reduce.visit(&join(prefix, "reduce"), f);
        self.spatial.visit(&join(prefix, "spatial"), f);
        if let Some(t) = &self.temporal {
            t.visit(&join(prefix, "temporal"), f);
        }
        self.restore.visit(&join(prefix, "restore"), f);
        if let Some(p) = &self.projection {
            p.visit(&join(prefix, "projection"), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(ParamViewMut<'a, T>)) {
        self.reduce.visit_mut(&join(prefix, "reduce"), f);
        self.spatial.visit_mut(&join(prefix, "spatial"), f);
        if let Some(t) = &mut self.temporal {
            t.visit_mut(&join(prefix, "temporal"), f);
        }
        self.restore.visit_mut(&join(prefix, "restore"), f);
        if let Some(p) = &mut self.projection {
            p.visit_mut(&join(prefix, "projection"), f);
        }
    }
}

impl<T: Real> BlockGrads<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a [T])) {
        self.reduce.visit(&join(prefix, "reduce"), f);
        self.spatial.visit(&join(prefix, "spatial"), f);
        if let Some(t) = &self.temporal {
            t.visit(&join(prefix, "temporal"), f);
        }
        self.restore.visit(&join(prefix, "restore"), f);
        if let Some(p) = &self.projection {
            p.visit(&join(prefix, "projection"), f);
        }
    }
}
