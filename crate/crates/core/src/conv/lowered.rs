//! im2col lowering: each batch item's receptive fields are unrolled into a
//! (in_ch·d·k·k) × positions matrix so the convolution becomes one GEMM
//! against the (out_ch) × (in_ch·d·k·k) kernel matrix. Output frames are
//! processed in chunks to bound the size of the unrolled matrix.

use rayon::prelude::*;

use super::{ConvGrads, ConvWeights, KernelSpec};
use crate::real::Real;
use crate::tensor::ClipTensor;

/// Upper bound on elements in one unrolled chunk.
const COL_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    t: usize,
    h: usize,
    w: usize,
    t_out: usize,
    h_out: usize,
    w_out: usize,
}

impl Geometry {
    fn new(x: [usize; 5], y: [usize; 5]) -> Self {
        Self {
            c: x[1],
            t: x[2],
            h: x[3],
            w: x[4],
            t_out: y[2],
            h_out: y[3],
            w_out: y[4],
        }
    }

    fn plane_out(&self) -> usize {
        self.h_out * self.w_out
    }

    fn positions(&self) -> usize {
        self.t_out * self.plane_out()
    }

    fn in_len(&self) -> usize {
        self.c * self.t * self.h * self.w
    }
}

/// Whether the input item can be used as the column matrix as-is.
fn is_identity_lowering(spec: &KernelSpec) -> bool {
    spec.is_pointwise()
        && spec.stride_t == 1
        && spec.stride_s == 1
        && spec.pad_t == 0
        && spec.pad_s == 0
}

fn frames_per_chunk(spec: &KernelSpec, g: &Geometry) -> usize {
    let rows = spec.in_ch * spec.d * spec.k * spec.k;
    let per_frame = rows * g.plane_out();
    (COL_BUDGET / per_frame.max(1)).clamp(1, g.t_out)
}

/// Maps output coordinate `o` to the input coordinate for tap `tap`, or
/// `None` inside the zero padding.
#[inline]
fn source(o: usize, stride: usize, tap: usize, pad: usize, extent: usize) -> Option<usize> {
    let i = (o * stride + tap) as isize - pad as isize;
    (i >= 0 && (i as usize) < extent).then_some(i as usize)
}

fn im2col<T: Real>(
    x: &[T],
    spec: &KernelSpec,
    g: &Geometry,
    t0: usize,
    t1: usize,
    col: &mut [T],
) {
    let cols = (t1 - t0) * g.plane_out();
    let mut row = 0;
    for c in 0..g.c {
        for dt in 0..spec.d {
            for dh in 0..spec.k {
                for dw in 0..spec.k {
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    let mut p = 0;
                    for ot in t0..t1 {
                        let Some(it) = source(ot, spec.stride_t, dt, spec.pad_t, g.t) else {
                            dst[p..p + g.plane_out()].fill(T::zero());
                            p += g.plane_out();
                            continue;
                        };
                        for oh in 0..g.h_out {
                            let Some(ih) = source(oh, spec.stride_s, dh, spec.pad_s, g.h) else {
                                dst[p..p + g.w_out].fill(T::zero());
                                p += g.w_out;
                                continue;
                            };
                            let base = ((c * g.t + it) * g.h + ih) * g.w;
                            for ow in 0..g.w_out {
                                dst[p] = match source(ow, spec.stride_s, dw, spec.pad_s, g.w) {
                                    Some(iw) => x[base + iw],
                                    None => T::zero(),
                                };
                                p += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into `dx`.
fn col2im<T: Real>(
    col: &[T],
    spec: &KernelSpec,
    g: &Geometry,
    t0: usize,
    t1: usize,
    dx: &mut [T],
) {
    let cols = (t1 - t0) * g.plane_out();
    let mut row = 0;
    for c in 0..g.c {
        for dt in 0..spec.d {
            for dh in 0..spec.k {
                for dw in 0..spec.k {
                    let src = &col[row * cols..(row + 1) * cols];
                    let mut p = 0;
                    for ot in t0..t1 {
                        let Some(it) = source(ot, spec.stride_t, dt, spec.pad_t, g.t) else {
                            p += g.plane_out();
                            continue;
                        };
                        for oh in 0..g.h_out {
                            let Some(ih) = source(oh, spec.stride_s, dh, spec.pad_s, g.h) else {
                                p += g.w_out;
                                continue;
                            };
                            let base = ((c * g.t + it) * g.h + ih) * g.w;
                            for ow in 0..g.w_out {
                                if let Some(iw) = source(ow, spec.stride_s, dw, spec.pad_s, g.w) {
                                    dx[base + iw] += src[p];
                                }
                                p += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn forward_item<T: Real>(x: &[T], kernel: &[T], spec: &KernelSpec, g: &Geometry, y: &mut [T]) {
    let rows = spec.in_ch * spec.d * spec.k * spec.k;
    let total = g.positions();
    if is_identity_lowering(spec) {
        T::gemm(
            spec.out_ch, rows, total, T::one(), kernel, rows as isize, 1, x, total as isize, 1,
            T::zero(), y, total as isize, 1,
        );
        return;
    }
    let chunk = frames_per_chunk(spec, g);
    let mut col = vec![T::zero(); rows * chunk * g.plane_out()];
    let mut t0 = 0;
    while t0 < g.t_out {
        let t1 = (t0 + chunk).min(g.t_out);
        let cols = (t1 - t0) * g.plane_out();
        im2col(x, spec, g, t0, t1, &mut col[..rows * cols]);
        T::gemm(
            spec.out_ch,
            rows,
            cols,
            T::one(),
            kernel,
            rows as isize,
            1,
            &col[..rows * cols],
            cols as isize,
            1,
            T::zero(),
            &mut y[t0 * g.plane_out()..],
            total as isize,
            1,
        );
        t0 = t1;
    }
}

/// Returns the kernel gradient contribution of one item; accumulates the
/// input gradient into `dx`.
fn backward_item<T: Real>(
    x: &[T],
    kernel: &[T],
    dy: &[T],
    spec: &KernelSpec,
    g: &Geometry,
    dx: &mut [T],
) -> Vec<T> {
    let rows = spec.in_ch * spec.d * spec.k * spec.k;
    let total = g.positions();
    let mut dw = vec![T::zero(); spec.out_ch * rows];
    if is_identity_lowering(spec) {
        // dW = dY · Xᵀ ; dX = Wᵀ · dY
        T::gemm(
            spec.out_ch, total, rows, T::one(), dy, total as isize, 1, x, 1, total as isize,
            T::zero(), &mut dw, rows as isize, 1,
        );
        T::gemm(
            rows, spec.out_ch, total, T::one(), kernel, 1, rows as isize, dy, total as isize, 1,
            T::one(), dx, total as isize, 1,
        );
        return dw;
    }
    let chunk = frames_per_chunk(spec, g);
    let mut col = vec![T::zero(); rows * chunk * g.plane_out()];
    let mut dcol = vec![T::zero(); rows * chunk * g.plane_out()];
    let mut t0 = 0;
    while t0 < g.t_out {
        let t1 = (t0 + chunk).min(g.t_out);
        let cols = (t1 - t0) * g.plane_out();
        let dy_chunk = &dy[t0 * g.plane_out()..];
        im2col(x, spec, g, t0, t1, &mut col[..rows * cols]);
        T::gemm(
            spec.out_ch,
            cols,
            rows,
            T::one(),
            dy_chunk,
            total as isize,
            1,
            &col[..rows * cols],
            1,
            cols as isize,
            T::one(),
            &mut dw,
            rows as isize,
            1,
        );
        T::gemm(
            rows,
            spec.out_ch,
            cols,
            T::one(),
            kernel,
            1,
            rows as isize,
            dy_chunk,
            total as isize,
            1,
            T::zero(),
            &mut dcol[..rows * cols],
            cols as isize,
            1,
        );
        col2im(&dcol[..rows * cols], spec, g, t0, t1, dx);
        t0 = t1;
    }
    dw
}

/// Forward pass. Operands must already be validated.
pub(super) fn forward<T: Real>(
    x: &ClipTensor<T>,
    w: &ConvWeights<T>,
    spec: &KernelSpec,
    out_shape: [usize; 5],
) -> ClipTensor<T> {
    let g = Geometry::new(x.shape(), out_shape);
    let mut y = ClipTensor::zeros(out_shape).expect("validated shape");
    let per_out = spec.out_ch * g.positions();
    let kernel = w.kernel.data();
    y.data_mut()
        .par_chunks_mut(per_out)
        .enumerate()
        .for_each(|(n, y_item)| forward_item(x.item(n), kernel, spec, &g, y_item));
    y
}

pub(super) fn backward<T: Real>(
    x: &ClipTensor<T>,
    w: &ConvWeights<T>,
    spec: &KernelSpec,
    dy: &ClipTensor<T>,
) -> ConvGrads<T> {
    let g = Geometry::new(x.shape(), dy.shape());
    let mut dx = ClipTensor::zeros(x.shape()).expect("validated shape");
    let kernel = w.kernel.data();
    let partials: Vec<Vec<T>> = dx
        .data_mut()
        .par_chunks_mut(g.in_len())
        .enumerate()
        .map(|(n, dx_item)| backward_item(x.item(n), kernel, dy.item(n), spec, &g, dx_item))
        .collect();
    // Fixed summation order over the batch keeps results reproducible.
    let mut dw = ClipTensor::zeros(spec.weight_shape()).expect("validated shape");
    for part in &partials {
        for (acc, &v) in dw.data_mut().iter_mut().zip(part) {
            *acc += v;
        }
    }
    ConvGrads {
        dx,
        dw: ConvWeights { kernel: dw },
    }
}
