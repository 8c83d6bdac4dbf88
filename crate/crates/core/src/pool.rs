use crate::error::{Error, Result};
use crate::linear::Matrix;
use crate::real::Real;
use crate::tensor::ClipTensor;

/// Spatial max pooling applied per frame; padding cells never win.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool {
    pub window: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Index of the winning input element for every output element.
#[derive(Debug, Clone)]
pub struct PoolCache {
    input_shape: [usize; 5],
    argmax: Vec<usize>,
}

impl MaxPool {
    pub fn output_extent(&self, x: usize) -> Result<usize> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::Invalid(format!("degenerate pool {self:?}")));
        }
        if self.pad >= self.window {
            return Err(Error::Invalid(format!("pool padding must be below the window, got {self:?}")));
        }
        if self.window > x + 2 * self.pad {
            return Err(Error::Shape(format!(
                "pool window {} larger than input extent {x}",
                self.window
            )));
        }
        Ok((x + 2 * self.pad - self.window) / self.stride + 1)
    }

    pub fn forward<T: Real>(&self, x: &ClipTensor<T>) -> Result<(ClipTensor<T>, PoolCache)> {
        let [n, c, t, h, w] = x.shape();
        let (ho, wo) = (self.output_extent(h)?, self.output_extent(w)?);
        let mut y = ClipTensor::zeros([n, c, t, ho, wo])?;
        let mut argmax = Vec::with_capacity(y.len());
        let data = x.data();
        let mut out = 0;
        for plane in 0..n * c * t {
            let base = plane * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for dh in 0..self.window {
                        let ih = (oh * self.stride + dh) as isize - self.pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for dw in 0..self.window {
                            let iw = (ow * self.stride + dw) as isize - self.pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let i = base + ih as usize * w + iw as usize;
                            if best_i == usize::MAX || data[i] > best {
                                best = data[i];
                                best_i = i;
                            }
                        }
                    }
                    y.data_mut()[out] = best;
                    argmax.push(best_i);
                    out += 1;
                }
            }
        }
        Ok((
            y,
            PoolCache {
                input_shape: x.shape(),
                argmax,
            },
        ))
    }

    pub fn backward<T: Real>(&self, cache: &PoolCache, dy: &ClipTensor<T>) -> Result<ClipTensor<T>> {
        if dy.len() != cache.argmax.len() {
            return Err(Error::Shape("pool gradient does not match cached forward".into()));
        }
        let mut dx = ClipTensor::zeros(cache.input_shape)?;
        for (&i, &g) in cache.argmax.iter().zip(dy.data()) {
            dx.data_mut()[i] += g;
        }
        Ok(dx)
    }
}

/// Unpadded spatial max pooling.
pub fn max_pool_spatial<T: Real>(x: &ClipTensor<T>, window: usize, stride: usize) -> Result<ClipTensor<T>> {
    Ok(MaxPool { window, stride, pad: 0 }.forward(x)?.0)
}

/// Mean over (T, H, W) per channel: the pool5 descriptor, shape (N, C).
pub fn global_avg_pool<T: Real>(x: &ClipTensor<T>) -> Matrix<T> {
    let [n, c, t, h, w] = x.shape();
    let plane = t * h * w;
    let data = x
        .data()
        .chunks(plane)
        .map(|p| T::from_f64(p.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64))
        .collect();
    Matrix::from_vec(n, c, data).expect("consistent shape")
}

pub fn global_avg_pool_backward<T: Real>(shape: [usize; 5], dy: &Matrix<T>) -> Result<ClipTensor<T>> {
    let [n, c, t, h, w] = shape;
    if dy.rows() != n || dy.cols() != c {
        return Err(Error::Shape(format!(
            "pool gradient {}x{} does not match input {shape:?}",
            dy.rows(),
            dy.cols()
        )));
    }
    let plane = t * h * w;
    let inv = T::from_f64(1.0 / plane as f64);
    let mut data = Vec::with_capacity(n * c * plane);
    for &g in dy.data() {
        data.extend(std::iter::repeat_n(g * inv, plane));
    }
    ClipTensor::from_vec(shape, data)
}
