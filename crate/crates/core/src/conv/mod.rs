//! Convolutions over NCTHW clips.
//!
//! All convolutions are cross-correlations (the kernel is not flipped) with
//! zero padding and no bias. [`conv3d_ref`] is the naive oracle; everything
//! else goes through an im2col lowering followed by a GEMM.
//!
//! The factorized operators:
//!
//! | function          | kernel      | role                                 |
//! |-------------------|-------------|--------------------------------------|
//! | [`conv_spatial`]  | `1 × k × k` | 2D filter applied to every frame     |
//! | [`conv_temporal`] | `d × 1 × 1` | 1D filter along time at every pixel  |
//! | [`conv_pointwise`]| `1 × 1 × 1` | channel mixing (bottleneck reduce/restore) |
//! | [`conv3d`]        | `d × k × k` | unrestricted                         |

mod lowered;
mod reference;
mod spec;

pub use reference::conv3d_ref;
pub use spec::{ConvWeights, KernelSpec};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{ClipTensor, Shape5};

/// Gradients of a convolution with respect to its input and kernel.
#[derive(Debug, Clone)]
pub struct ConvGrads<T = f32> {
    pub dx: ClipTensor<T>,
    pub dw: ConvWeights<T>,
}

pub(crate) fn check_operands<T: Real>(
    x: &ClipTensor<T>,
    w: &ConvWeights<T>,
    spec: &KernelSpec,
) -> Result<Shape5> {
    spec.validate()?;
    w.check(spec)?;
    spec.output_shape(x.shape())
}

fn require(cond: bool, what: &str, spec: &KernelSpec) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Spec(format!("{what}, got {spec:?}")))
    }
}

fn check_backward<T: Real>(
    x: &ClipTensor<T>,
    w: &ConvWeights<T>,
    spec: &KernelSpec,
    dy: &ClipTensor<T>,
) -> Result<()> {
    let out = check_operands(x, w, spec)?;
    if dy.shape() != out {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} does not match output {out:?}",
            dy.shape()
        )));
    }
    Ok(())
}

/// Unrestricted `d × k × k` convolution via im2col + GEMM.
pub fn conv3d<T: Real>(x: &ClipTensor<T>, w: &ConvWeights<T>, spec: &KernelSpec) -> Result<ClipTensor<T>> {
    let out = check_operands(x, w, spec)?;
    Ok(lowered::forward(x, w, spec, out))
}

pub fn conv3d_backward<T: Real>(
    x: &ClipTensor<T>,
    w: &ConvWeights<T>,
    spec: &KernelSpec,
    dy: &ClipTensor<T>,
) -> Result<ConvGrads<T>> {
    check_backward(x, w, spec, dy)?;
    Ok(lowered::backward(x, w, spec, dy))
}

fn spatial_contract(spec: &KernelSpec) -> Result<()> {
    require(
        spec.is_spatial(),
        "spatial convolution needs d = 1, pad_t = 0, stride_t = 1",
        spec,
    )
}

fn temporal_contract(spec: &KernelSpec) -> Result<()> {
    require(
        spec.is_temporal(),
        "temporal convolution needs k = 1, pad_s = 0, stride_s = 1",
        spec,
    )
}

fn pointwise_contract(spec: &KernelSpec) -> Result<()> {
    require(spec.is_pointwise(), "pointwise convolution needs d = k = 1", spec)
}

/// `1 × k × k` filter applied independently to each frame.
pub fn conv_spatial<T: Real>(x: &ClipTensor<T>, w: &ConvWeights<T>, spec: &KernelSpec) -> Result<ClipTensor<T>> {
    spatial_contract(spec)?;
    conv3d(x, w, spec)
}

pub fn conv_spatial_backward<T: Real>(
    x: &ClipTensor<T>,
    w: &ConvWeights<T>,
    spec: &KernelSpec,
    dy: &ClipTensor<T>,
) -> Result<ConvGrads<T>> {
    spatial_contract(spec)?;
    conv3d_backward(x, w, spec, dy)
}

/// `d × 1 × 1` filter along time at every spatial location.
pub fn conv_temporal<T: Real>(x: &ClipTensor<T>, w: &ConvWeights<T>, spec: &KernelSpec) -> Result<ClipTensor<T>> {
    temporal_contract(spec)?;
    conv3d(x, w, spec)
}

pub fn conv_temporal_backward<T: Real>(
    x: &ClipTensor<T>,
    w: &ConvWeights<T>,
    spec: &KernelSpec,
    dy: &ClipTensor<T>,
) -> Result<ConvGrads<T>> {
    temporal_contract(spec)?;
    conv3d_backward(x, w, spec, dy)
}

/// Per-position linear map across channels.
pub fn conv_pointwise<T: Real>(x: &ClipTensor<T>, w: &ConvWeights<T>, spec: &KernelSpec) -> Result<ClipTensor<T>> {
    pointwise_contract(spec)?;
    conv3d(x, w, spec)
}

pub fn conv_pointwise_backward<T: Real>(
    x: &ClipTensor<T>,
    w: &ConvWeights<T>,
    spec: &KernelSpec,
    dy: &ClipTensor<T>,
) -> Result<ConvGrads<T>> {
    pointwise_contract(spec)?;
    conv3d_backward(x, w, spec, dy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(shape: Shape5) -> ClipTensor {
        ClipTensor::from_vec(shape, vec![1.0; shape.iter().product()]).unwrap()
    }

    #[test]
    fn counting_overlapped_taps() {
        let x = ones([1, 1, 3, 3, 3]);
        let spec = KernelSpec::same(1, 1, 3, 3).unwrap();
        let w = ConvWeights { kernel: ones(spec.weight_shape()) };
        for y in [conv3d_ref(&x, &w, &spec).unwrap(), conv3d(&x, &w, &spec).unwrap()] {
            assert_eq!(y.get(0, 0, 1, 1, 1), 27.0);
            assert_eq!(y.get(0, 0, 0, 0, 0), 8.0);
            assert_eq!(y.get(0, 0, 0, 1, 1), 18.0);
        }
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = ClipTensor::<f32>::uniform([1, 2, 4, 5, 5], -1.0, 1.0, 3).unwrap();
        let spec = KernelSpec::same(2, 2, 3, 3).unwrap();
        let w = ConvWeights::identity(&spec).unwrap();
        assert_eq!(conv3d_ref(&x, &w, &spec).unwrap(), x);
        assert_eq!(conv3d(&x, &w, &spec).unwrap(), x);
    }

    #[test]
    fn spatial_examples() {
        let x = ones([1, 1, 2, 3, 3]);
        let spec = KernelSpec::spatial(1, 1, 3).unwrap();
        let w = ConvWeights { kernel: ones(spec.weight_shape()) };
        let y = conv_spatial(&x, &w, &spec).unwrap();
        assert_eq!(y.get(0, 0, 0, 1, 1), 9.0);
        assert_eq!(y.get(0, 0, 1, 1, 1), 9.0);
        assert!(matches!(
            conv_spatial(&x, &w, &KernelSpec::same(1, 1, 3, 3).unwrap()),
            Err(Error::Spec(_))
        ));
    }

    #[test]
    fn spatial_is_frame_independent() {
        let x = ClipTensor::<f32>::uniform([1, 2, 4, 5, 5], -1.0, 1.0, 9).unwrap();
        let spec = KernelSpec::spatial(2, 3, 3).unwrap();
        let w = ConvWeights::uniform(&spec, -1.0, 1.0, 10).unwrap();
        let order = [2, 0, 3, 1];
        let a = conv_spatial(&x.permute_frames(&order).unwrap(), &w, &spec).unwrap();
        let b = conv_spatial(&x, &w, &spec).unwrap().permute_frames(&order).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn temporal_examples() {
        let x = ClipTensor::<f32>::uniform([1, 3, 5, 2, 2], -1.0, 1.0, 4).unwrap();
        let spec = KernelSpec::temporal(3, 3, 3).unwrap();
        let w = ConvWeights::identity(&spec).unwrap();
        assert_eq!(conv_temporal(&x, &w, &spec).unwrap(), x);

        let x = ones([1, 1, 4, 2, 2]);
        let spec = KernelSpec::temporal(1, 1, 3).unwrap();
        let w = ConvWeights { kernel: ones(spec.weight_shape()) };
        let y = conv_temporal(&x, &w, &spec).unwrap();
        for (t, want) in [(0, 2.0), (1, 3.0), (2, 3.0), (3, 2.0)] {
            assert_eq!(y.get(0, 0, t, 1, 0), want);
        }
        assert!(conv_temporal(&x, &w, &KernelSpec::same(1, 1, 3, 3).unwrap()).is_err());
    }

    #[test]
    fn pointwise_examples() {
        let x = ClipTensor::from_vec([1, 2, 1, 1, 1], vec![3.0f32, 4.0]).unwrap();
        let spec = KernelSpec::pointwise(2, 1);
        let w = ConvWeights { kernel: ones(spec.weight_shape()) };
        assert_eq!(conv_pointwise(&x, &w, &spec).unwrap().data(), &[7.0]);

        let x = ClipTensor::<f32>::uniform([2, 3, 2, 3, 3], -1.0, 1.0, 8).unwrap();
        let spec = KernelSpec::pointwise(3, 3);
        let w = ConvWeights::identity(&spec).unwrap();
        assert_eq!(conv_pointwise(&x, &w, &spec).unwrap(), x);
        assert!(conv_pointwise(&x, &w, &KernelSpec::spatial(3, 3, 3).unwrap()).is_err());
    }

    #[test]
    fn channel_mismatch_and_tiny_inputs() {
        let x = ClipTensor::<f32>::zeros([1, 2, 1, 2, 2]).unwrap();
        let spec = KernelSpec::new(3, 1, 1, 1);
        let w = ConvWeights::zeros(&spec).unwrap();
        assert!(conv3d_ref(&x, &w, &spec).is_err());
        let spec = KernelSpec::new(2, 1, 1, 3);
        let w = ConvWeights::zeros(&spec).unwrap();
        assert!(matches!(conv3d(&x, &w, &spec), Err(Error::Shape(_))));
    }

    #[test]
    fn strided_pointwise_matches_reference() {
        let x = ClipTensor::<f32>::uniform([2, 3, 3, 7, 6], -1.0, 1.0, 21).unwrap();
        let spec = KernelSpec::pointwise(3, 5).with_stride(1, 2);
        let w = ConvWeights::uniform(&spec, -1.0, 1.0, 22).unwrap();
        let a = conv_pointwise(&x, &w, &spec).unwrap();
        let b = conv3d_ref(&x, &w, &spec).unwrap();
        assert_eq!(a.shape(), [2, 5, 3, 4, 3]);
        assert!(a.max_abs_diff(&b).unwrap() < 1e-6);
    }
}
