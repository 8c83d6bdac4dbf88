use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::SplitMix64;
use crate::tensor::{ClipTensor, Shape5};

/// Geometry of one convolution: a `d × k × k` kernel mapping `in_ch` to
/// `out_ch` channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KernelSpec {
    /// Temporal depth in frames.
    pub d: usize,
    /// Spatial size (square).
    pub k: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride_t: usize,
    pub stride_s: usize,
    pub pad_t: usize,
    pub pad_s: usize,
}

impl KernelSpec {
    /// Unit strides, no padding.
    pub fn new(in_ch: usize, out_ch: usize, d: usize, k: usize) -> Self {
        Self {
            d,
            k,
            in_ch,
            out_ch,
            stride_t: 1,
            stride_s: 1,
            pad_t: 0,
            pad_s: 0,
        }
    }

    /// "Same" padding: `pad_t = (d-1)/2`, `pad_s = (k-1)/2`. Requires odd
    /// `d` and `k`.
    pub fn same(in_ch: usize, out_ch: usize, d: usize, k: usize) -> Result<Self> {
        if d.is_multiple_of(2) || k.is_multiple_of(2) {
            return Err(Error::Spec(format!(
                "same padding needs odd kernel extents, got d={d} k={k}"
            )));
        }
        Ok(Self::new(in_ch, out_ch, d, k).with_padding((d - 1) / 2, (k - 1) / 2))
    }

    /// `1 × k × k`, same-padded.
    pub fn spatial(in_ch: usize, out_ch: usize, k: usize) -> Result<Self> {
        Self::same(in_ch, out_ch, 1, k)
    }

    /// `d × 1 × 1`, same-padded.
    pub fn temporal(in_ch: usize, out_ch: usize, d: usize) -> Result<Self> {
        Self::same(in_ch, out_ch, d, 1)
    }

    pub fn pointwise(in_ch: usize, out_ch: usize) -> Self {
        Self::new(in_ch, out_ch, 1, 1)
    }

    pub fn with_stride(mut self, stride_t: usize, stride_s: usize) -> Self {
        self.stride_t = stride_t;
        self.stride_s = stride_s;
        self
    }

    pub fn with_padding(mut self, pad_t: usize, pad_s: usize) -> Self {
        self.pad_t = pad_t;
        self.pad_s = pad_s;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k == 0 || self.in_ch == 0 || self.out_ch == 0 {
            return Err(Error::Spec(format!("zero extent in {self:?}")));
        }
        if self.stride_t == 0 || self.stride_s == 0 {
            return Err(Error::Spec(format!("strides must be positive in {self:?}")));
        }
        Ok(())
    }

    /// `(T', H', W')` with `X' = floor((X + 2·pad − kernel) / stride) + 1`.
    pub fn output_extents(&self, t: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        self.validate()?;
        let out = |x: usize, pad: usize, kernel: usize, stride: usize| {
            let padded = x + 2 * pad;
            if padded < kernel {
                None
            } else {
                Some((padded - kernel) / stride + 1)
            }
        };
        match (
            out(t, self.pad_t, self.d, self.stride_t),
            out(h, self.pad_s, self.k, self.stride_s),
            out(w, self.pad_s, self.k, self.stride_s),
        ) {
            (Some(t), Some(h), Some(w)) => Ok((t, h, w)),
            _ => Err(Error::Shape(format!(
                "kernel {}x{}x{} does not fit input {t}x{h}x{w} under {self:?}",
                self.d, self.k, self.k
            ))),
        }
    }

    pub fn output_shape(&self, input: Shape5) -> Result<Shape5> {
        let [n, c, t, h, w] = input;
        if c != self.in_ch {
            return Err(Error::Shape(format!(
                "input has {c} channels, kernel expects {}",
                self.in_ch
            )));
        }
        let (t, h, w) = self.output_extents(t, h, w)?;
        Ok([n, self.out_ch, t, h, w])
    }

    pub fn weight_shape(&self) -> Shape5 {
        [self.out_ch, self.in_ch, self.d, self.k, self.k]
    }

    pub fn weight_count(&self) -> usize {
        self.out_ch * self.in_ch * self.d * self.k * self.k
    }

    pub fn is_spatial(&self) -> bool {
        self.d == 1 && self.pad_t == 0 && self.stride_t == 1
    }

    pub fn is_temporal(&self) -> bool {
        self.k == 1 && self.pad_s == 0 && self.stride_s == 1
    }

    pub fn is_pointwise(&self) -> bool {
        self.d == 1 && self.k == 1
    }
}

/// Kernel of shape (out_ch, in_ch, d, k, k). Convolutions carry no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights<T = f32> {
    pub kernel: ClipTensor<T>,
}

impl<T: Real> ConvWeights<T> {
    pub fn zeros(spec: &KernelSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            kernel: ClipTensor::zeros(spec.weight_shape())?,
        })
    }

    /// Normal with variance `2 / fan_in`, `fan_in = in_ch·d·k·k`.
    pub fn he_normal(spec: &KernelSpec, rng: &mut SplitMix64) -> Result<Self> {
        let mut w = Self::zeros(spec)?;
        let std = (2.0 / (spec.in_ch * spec.d * spec.k * spec.k) as f64).sqrt();
        for v in w.kernel.data_mut() {
            *v = T::from_f64(rng.normal() * std);
        }
        Ok(w)
    }

    pub fn uniform(spec: &KernelSpec, lo: f64, hi: f64, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            kernel: ClipTensor::uniform(spec.weight_shape(), lo, hi, seed)?,
        })
    }

    pub fn from_tensor(spec: &KernelSpec, kernel: ClipTensor<T>) -> Result<Self> {
        let w = Self { kernel };
        w.check(spec)?;
        Ok(w)
    }

    /// Temporal identity: `w[o, i, ·, c, c] = δ(o = i)` at the temporal
    /// centre tap and zero elsewhere, spatially centred. Requires
    /// `in_ch == out_ch` and odd extents.
    pub fn identity(spec: &KernelSpec) -> Result<Self> {
        if spec.in_ch != spec.out_ch || spec.d.is_multiple_of(2) || spec.k.is_multiple_of(2) {
            return Err(Error::Spec(format!(
                "identity kernel needs in_ch == out_ch and odd extents, got {spec:?}"
            )));
        }
        let mut w = Self::zeros(spec)?;
        let (ct, cs) = (spec.d / 2, spec.k / 2);
        for c in 0..spec.in_ch {
            w.kernel.set(c, c, ct, cs, cs, T::one());
        }
        Ok(w)
    }

    pub fn check(&self, spec: &KernelSpec) -> Result<()> {
        if self.kernel.shape() != spec.weight_shape() {
            return Err(Error::Shape(format!(
                "kernel shape {:?} does not match spec {:?}",
                self.kernel.shape(),
                spec.weight_shape()
            )));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ConvWeights<U> {
        ConvWeights {
            kernel: self.kernel.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn same_padding_rules() {
        let s = KernelSpec::same(2, 4, 3, 5).unwrap();
        assert_eq!((s.pad_t, s.pad_s), (1, 2));
        assert!(KernelSpec::same(2, 4, 2, 3).is_err());
        assert_eq!(s.output_extents(7, 9, 11).unwrap(), (7, 9, 11));
    }

    #[test]
    fn output_extent_errors() {
        let s = KernelSpec::new(1, 1, 3, 3);
        assert!(s.output_extents(2, 5, 5).is_err());
        assert!(KernelSpec::new(1, 1, 1, 1).with_stride(0, 1).validate().is_err());
        assert!(s.output_shape([1, 2, 3, 3, 3]).is_err());
    }

    proptest! {
        #[test]
        fn output_extents_follow_formula(
            t in 1usize..12, h in 1usize..12, w in 1usize..12,
            d in 1usize..4, k in 1usize..4,
            st in 1usize..3, ss in 1usize..3, pt in 0usize..2, ps in 0usize..2,
        ) {
            let spec = KernelSpec::new(1, 1, d, k).with_stride(st, ss).with_padding(pt, ps);
            let expect = |x: usize, p: usize, kk: usize, s: usize| {
                let v = x as i64 + 2 * p as i64 - kk as i64;
                if v < 0 { None } else { Some((v / s as i64 + 1) as usize) }
            };
            match (expect(t, pt, d, st), expect(h, ps, k, ss), expect(w, ps, k, ss)) {
                (Some(a), Some(b), Some(c)) => prop_assert_eq!(spec.output_extents(t, h, w).unwrap(), (a, b, c)),
                _ => prop_assert!(spec.output_extents(t, h, w).is_err()),
            }
        }
    }
}
