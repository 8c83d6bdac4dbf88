//! The five-dimensional clip tensor and its elementwise operations.
//!
//! Layout is fixed: (N, C, T, H, W), row-major, W fastest. Every kernel in
//! the crate indexes data under that assumption.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::SplitMix64;

/// Extents in (N, C, T, H, W) order.
pub type Shape5 = [usize; 5];

/// How a freshly created tensor is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FillRule {
    Zeros,
    Constant(f64),
    /// Uniform in `[lo, hi)` from a [`SplitMix64`] stream seeded with `seed`,
    /// consumed in storage order.
    SeededUniform { lo: f64, hi: f64, seed: u64 },
}

/// Dense (batch, channel, time, height, width) array.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipTensor<T = f32> {
    shape: Shape5,
    data: Vec<T>,
}

fn check_shape(shape: Shape5) -> Result<usize> {
    if shape.contains(&0) {
        return Err(Error::Shape(format!(
            "all extents must be >= 1, got {shape:?}"
        )));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Shape(format!("element count overflows for {shape:?}")))
}

impl<T: Real> ClipTensor<T> {
    pub fn new(shape: Shape5, fill: FillRule) -> Result<Self> {
        let len = check_shape(shape)?;
        let data = match fill {
            FillRule::Zeros => vec![T::zero(); len],
            FillRule::Constant(v) => vec![T::from_f64(v); len],
            FillRule::SeededUniform { lo, hi, seed } => {
                if !(lo <= hi) {
                    return Err(Error::Invalid(format!("uniform bounds {lo} > {hi}")));
                }
                let mut rng = SplitMix64::new(seed);
                (0..len).map(|_| T::from_f64(rng.uniform(lo, hi))).collect()
            }
        };
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape5) -> Result<Self> {
        Self::new(shape, FillRule::Zeros)
    }

    pub fn uniform(shape: Shape5, lo: f64, hi: f64, seed: u64) -> Result<Self> {
        Self::new(shape, FillRule::SeededUniform { lo, hi, seed })
    }

    pub fn from_vec(shape: Shape5, data: Vec<T>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {len} elements but {} were supplied",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor from a function of the (n, c, t, h, w) index.
    pub fn from_fn(shape: Shape5, mut f: impl FnMut([usize; 5]) -> T) -> Result<Self> {
        let len = check_shape(shape)?;
        let mut data = Vec::with_capacity(len);
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for t in 0..shape[2] {
                    for h in 0..shape[3] {
                        for w in 0..shape[4] {
                            data.push(f([n, c, t, h, w]));
                        }
                    }
                }
            }
        }
        Ok(Self { shape, data })
    }
}

impl<T: Copy> ClipTensor<T> {
    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn frames(&self) -> usize {
        self.shape[2]
    }

    pub fn height(&self) -> usize {
        self.shape[3]
    }

    pub fn width(&self) -> usize {
        self.shape[4]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, t: usize, h: usize, w: usize) -> usize {
        let [_, cs, ts, hs, ws] = self.shape;
        debug_assert!(c < cs && t < ts && h < hs && w < ws);
        (((n * cs + c) * ts + t) * hs + h) * ws + w
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, t: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, t, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, t: usize, h: usize, w: usize, v: T) {
        let i = self.offset(n, c, t, h, w);
        self.data[i] = v;
    }

    /// Elements of one batch item, laid out (C, T, H, W).
    pub fn item(&self, n: usize) -> &[T] {
        let per = self.data.len() / self.shape[0];
        &self.data[n * per..(n + 1) * per]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> ClipTensor<U> {
        ClipTensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Same data under a new shape of equal element count.
    pub fn reshape(self, shape: Shape5) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    /// Reorders frames: output frame `i` is input frame `order[i]`.
    pub fn permute_frames(&self, order: &[usize]) -> Result<Self> {
        let [n, c, t, h, w] = self.shape;
        if order.len() != t || order.iter().any(|&i| i >= t) {
            return Err(Error::Shape(format!(
                "frame order {order:?} is not valid for {t} frames"
            )));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(self.data.len());
        for nc in 0..n * c {
            let base = nc * t * plane;
            for &src in order {
                data.extend_from_slice(&self.data[base + src * plane..base + (src + 1) * plane]);
            }
        }
        Ok(Self {
            shape: self.shape,
            data,
        })
    }

    pub fn reverse_frames(&self) -> Self {
        let order: Vec<usize> = (0..self.shape[2]).rev().collect();
        self.permute_frames(&order).expect("reversal is a valid order")
    }

    /// Frames `start..start + len` of every (n, c) plane.
    pub fn frame_range(&self, start: usize, len: usize) -> Result<Self> {
        let [n, c, t, h, w] = self.shape;
        if len == 0 || start + len > t {
            return Err(Error::Shape(format!(
                "frames {start}..{} out of range for {t} frames",
                start + len
            )));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * c * len * plane);
        for nc in 0..n * c {
            let base = (nc * t + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Ok(Self {
            shape: [n, c, len, h, w],
            data,
        })
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let inner = &first.shape[1..];
        let mut data = Vec::with_capacity(first.data.len() * items.len());
        let mut batch = 0;
        for item in items {
            if &item.shape[1..] != inner {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    first.shape, item.shape
                )));
            }
            batch += item.shape[0];
            data.extend_from_slice(&item.data);
        }
        Ok(Self {
            shape: [batch, inner[0], inner[1], inner[2], inner[3]],
            data,
        })
    }

    /// Splits along the batch axis into single-item tensors.
    pub fn unstack(&self) -> Vec<Self> {
        let [n, c, t, h, w] = self.shape;
        (0..n)
            .map(|i| Self {
                shape: [1, c, t, h, w],
                data: self.item(i).to_vec(),
            })
            .collect()
    }
}

fn same_shape(a: Shape5, b: Shape5) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("shape mismatch: {a:?} vs {b:?}")));
    }
    Ok(())
}

impl<T: Real> ClipTensor<T> {
    pub fn cast<U: Real>(&self) -> ClipTensor<U> {
        self.map(|v| U::from_f64(v.as_f64()))
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        same_shape(self.shape, other.shape)?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        same_shape(self.shape, other.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Σ a·b accumulated in f64.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        same_shape(self.shape, other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a.as_f64() * b.as_f64())
            .sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        same_shape(self.shape, other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }
}

/// Elementwise sum; the residual addition of a shortcut and its branch.
pub fn tensor_add<T: Real>(a: &ClipTensor<T>, b: &ClipTensor<T>) -> Result<ClipTensor<T>> {
    a.add(b)
}

pub fn relu<T: Real>(x: &ClipTensor<T>) -> ClipTensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `upstream` where `x > 0`, zero elsewhere.
pub fn relu_backward<T: Real>(x: &ClipTensor<T>, upstream: &ClipTensor<T>) -> Result<ClipTensor<T>> {
    x.zip_with(upstream, |x, g| if x > T::zero() { g } else { T::zero() })
}

/// Returns whether `max |a - b| <= tol`, together with that maximum.
pub fn almost_equal<T: Real>(a: &ClipTensor<T>, b: &ClipTensor<T>, tol: f64) -> Result<(bool, f64)> {
    let diff = a.max_abs_diff(b)?;
    Ok((diff <= tol, diff))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t1(v: &[f32]) -> ClipTensor {
        ClipTensor::from_vec([1, 1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn fills() {
        let z = ClipTensor::<f32>::new([1, 1, 1, 2, 2], FillRule::Zeros).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let c = ClipTensor::<f32>::new([1, 1, 1, 1, 1], FillRule::Constant(3.5)).unwrap();
        assert_eq!(c.data(), &[3.5]);
        let a = ClipTensor::<f32>::uniform([1, 2, 3, 4, 5], -1.0, 1.0, 7).unwrap();
        let b = ClipTensor::<f32>::uniform([1, 2, 3, 4, 5], -1.0, 1.0, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (-1.0..1.0).contains(v)));
    }

    #[test]
    fn zero_extent_is_rejected() {
        assert!(matches!(
            ClipTensor::<f32>::zeros([1, 0, 1, 1, 1]),
            Err(Error::Shape(_))
        ));
        assert!(ClipTensor::<f32>::from_vec([1, 1, 1, 1, 2], vec![1.0]).is_err());
    }

    #[test]
    fn add_examples() {
        assert_eq!(tensor_add(&t1(&[1., 2.]), &t1(&[3., 4.])).unwrap().data(), &[4., 6.]);
        assert_eq!(tensor_add(&t1(&[1.]), &t1(&[-1.])).unwrap().data(), &[0.]);
        let x = ClipTensor::<f32>::uniform([1, 2, 2, 2, 2], -1.0, 1.0, 1).unwrap();
        let z = ClipTensor::zeros(x.shape()).unwrap();
        assert_eq!(tensor_add(&x, &z).unwrap(), x);
        assert!(tensor_add(&t1(&[1.]), &t1(&[1., 2.])).is_err());
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&t1(&[-1., 0., 2.])).data(), &[0., 0., 2.]);
        let g = relu_backward(&t1(&[-1., 2.]), &t1(&[5., 5.])).unwrap();
        assert_eq!(g.data(), &[0., 5.]);
        let x = ClipTensor::<f32>::uniform([1, 1, 2, 3, 3], -1.0, 1.0, 5).unwrap();
        assert_eq!(relu(&relu(&x)), relu(&x));
    }

    #[test]
    fn almost_equal_examples() {
        let a = t1(&[1.0]);
        assert_eq!(almost_equal(&a, &a, 0.0).unwrap(), (true, 0.0));
        let (ok, d) = almost_equal(&t1(&[1.0]), &t1(&[1.1]), 0.05).unwrap();
        assert!(!ok);
        assert!((d - 0.1).abs() < 1e-6);
        let (ok, d) = almost_equal(&t1(&[1.0]), &t1(&[1.0001]), 1e-3).unwrap();
        assert!(ok);
        assert!((d - 1e-4).abs() < 1e-6);
        assert!(almost_equal(&t1(&[1.0]), &t1(&[1.0, 2.0]), 1.0).is_err());
    }

    #[test]
    fn layout_round_trip() {
        let shape = [2, 3, 4, 5, 6];
        let mut x = ClipTensor::<f32>::zeros(shape).unwrap();
        let code = |n: usize, c: usize, t: usize, h: usize, w: usize| {
            (n * 10000 + c * 1000 + t * 100 + h * 10 + w) as f32
        };
        for n in 0..2 {
            for c in 0..3 {
                for t in 0..4 {
                    for h in 0..5 {
                        for w in 0..6 {
                            x.set(n, c, t, h, w, code(n, c, t, h, w));
                        }
                    }
                }
            }
        }
        for n in 0..2 {
            for c in 0..3 {
                for t in 0..4 {
                    for h in 0..5 {
                        for w in 0..6 {
                            assert_eq!(x.get(n, c, t, h, w), code(n, c, t, h, w));
                        }
                    }
                }
            }
        }
        // W fastest.
        assert_eq!(x.data()[1], code(0, 0, 0, 0, 1));
        assert_eq!(x.data()[6], code(0, 0, 0, 1, 0));
    }

    #[test]
    fn frame_helpers() {
        let x = ClipTensor::<f32>::from_fn([1, 2, 3, 1, 1], |[_, c, t, _, _]| (c * 10 + t) as f32).unwrap();
        assert_eq!(x.reverse_frames().data(), &[2., 1., 0., 12., 11., 10.]);
        assert_eq!(x.frame_range(1, 2).unwrap().data(), &[1., 2., 11., 12.]);
        let s = ClipTensor::stack(&[x.clone(), x.clone()]).unwrap();
        assert_eq!(s.shape(), [2, 2, 3, 1, 1]);
        assert_eq!(s.unstack()[1], x);
    }

    proptest! {
        #[test]
        fn add_is_commutative_and_associative(
            a in proptest::collection::vec(-1000i32..1000, 8),
            b in proptest::collection::vec(-1000i32..1000, 8),
            c in proptest::collection::vec(-1000i32..1000, 8),
        ) {
            let mk = |v: &[i32]| ClipTensor::<f32>::from_vec([1, 2, 1, 2, 2], v.iter().map(|&x| x as f32 / 8.0).collect()).unwrap();
            let (a, b, c) = (mk(&a), mk(&b), mk(&c));
            prop_assert_eq!(a.add(&b).unwrap(), b.add(&a).unwrap());
            prop_assert_eq!(a.add(&b).unwrap().add(&c).unwrap(), a.add(&b.add(&c).unwrap()).unwrap());
        }

        #[test]
        fn seeded_fill_is_bytewise_stable(seed in any::<u64>()) {
            let a = ClipTensor::<f32>::uniform([1, 1, 2, 3, 3], -2.0, 2.0, seed).unwrap();
            let b = ClipTensor::<f32>::uniform([1, 1, 2, 3, 3], -2.0, 2.0, seed).unwrap();
            let bytes = |t: &ClipTensor| t.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>();
            prop_assert_eq!(bytes(&a), bytes(&b));
        }
    }
}
