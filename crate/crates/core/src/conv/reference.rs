use super::{check_operands, ConvWeights, KernelSpec};
use crate::error::Result;
use crate::real::Real;
use crate::tensor::ClipTensor;

/// Direct 3D cross-correlation with zero padding. Deliberately naive: one
/// loop per output index and kernel tap, accumulated in f64. Every other
/// convolution in the crate is tested against this.
pub fn conv3d_ref<T: Real>(
    x: &ClipTensor<T>,
    w: &ConvWeights<T>,
    spec: &KernelSpec,
) -> Result<ClipTensor<T>> {
    let out_shape = check_operands(x, w, spec)?;
    let [n_batch, _, t_in, h_in, w_in] = x.shape();
    let [_, _, t_out, h_out, w_out] = out_shape;
    let mut y = ClipTensor::zeros(out_shape)?;
    for n in 0..n_batch {
        for o in 0..spec.out_ch {
            for ot in 0..t_out {
                for oh in 0..h_out {
                    for ow in 0..w_out {
                        let mut acc = 0.0f64;
                        for c in 0..spec.in_ch {
                            for dt in 0..spec.d {
                                let it = (ot * spec.stride_t + dt) as isize - spec.pad_t as isize;
                                if it < 0 || it >= t_in as isize {
                                    continue;
                                }
                                for dh in 0..spec.k {
                                    let ih =
                                        (oh * spec.stride_s + dh) as isize - spec.pad_s as isize;
                                    if ih < 0 || ih >= h_in as isize {
                                        continue;
                                    }
                                    for dw in 0..spec.k {
                                        let iw = (ow * spec.stride_s + dw) as isize
                                            - spec.pad_s as isize;
                                        if iw < 0 || iw >= w_in as isize {
                                            continue;
                                        }
                                        acc += x
                                            .get(n, c, it as usize, ih as usize, iw as usize)
                                            .as_f64()
                                            * w.kernel.get(o, c, dt, dh, dw).as_f64();
                                    }
                                }
                            }
                        }
                        y.set(n, o, ot, oh, ow, T::from_f64(acc));
                    }
                }
            }
        }
    }
    Ok(y)
}
