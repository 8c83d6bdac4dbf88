//! Classifier head: feature matrices, the fully connected layer, inverted
//! dropout and softmax cross-entropy.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::SplitMix64;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::Shape("matrix shape mismatch".into()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }
}

/// `y = x·W + b` with `W` of shape (in_features, classes).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T = f32> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct LinearGrads<T = f32> {
    pub dx: Matrix<T>,
    pub dweight: Matrix<T>,
    pub dbias: Vec<T>,
}

impl<T: Real> Linear<T> {
    /// Normal weights with variance `1 / in_features`, zero bias.
    pub fn init(in_features: usize, classes: usize, rng: &mut SplitMix64) -> Self {
        let std = (1.0 / in_features as f64).sqrt();
        let data = (0..in_features * classes)
            .map(|_| T::from_f64(rng.normal() * std))
            .collect();
        Self {
            weight: Matrix::from_vec(in_features, classes, data).expect("consistent"),
            bias: vec![T::zero(); classes],
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.rows
    }

    pub fn classes(&self) -> usize {
        self.weight.cols
    }

    pub fn cast<U: Real>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

pub fn fully_connected<T: Real>(x: &Matrix<T>, layer: &Linear<T>) -> Result<Matrix<T>> {
    let (n, c, k) = (x.rows, layer.weight.rows, layer.weight.cols);
    if x.cols != c || layer.bias.len() != k {
        return Err(Error::Shape(format!(
            "fully connected: input has {} features, weight is {c}x{k}, bias {}",
            x.cols,
            layer.bias.len()
        )));
    }
    let mut y = Matrix::zeros(n, k);
    for r in 0..n {
        y.data[r * k..(r + 1) * k].copy_from_slice(&layer.bias);
    }
    T::gemm(
        n, c, k, T::one(), &x.data, c as isize, 1, &layer.weight.data, k as isize, 1, T::one(),
        &mut y.data, k as isize, 1,
    );
    Ok(y)
}

pub fn fully_connected_backward<T: Real>(
    x: &Matrix<T>,
    layer: &Linear<T>,
    dy: &Matrix<T>,
) -> Result<LinearGrads<T>> {
    let (n, c, k) = (x.rows, layer.weight.rows, layer.weight.cols);
    if dy.rows != n || dy.cols != k || x.cols != c {
        return Err(Error::Shape("fully connected gradient shape mismatch".into()));
    }
    let mut dx = Matrix::zeros(n, c);
    let mut dweight = Matrix::zeros(c, k);
    // dx = dy·Wᵀ ; dW = xᵀ·dy
    T::gemm(
        n, k, c, T::one(), &dy.data, k as isize, 1, &layer.weight.data, 1, k as isize, T::zero(),
        &mut dx.data, c as isize, 1,
    );
    T::gemm(
        c, n, k, T::one(), &x.data, 1, c as isize, &dy.data, k as isize, 1, T::zero(),
        &mut dweight.data, k as isize, 1,
    );
    let mut dbias = vec![T::zero(); k];
    for r in 0..n {
        for (acc, &g) in dbias.iter_mut().zip(dy.row(r)) {
            *acc += g;
        }
    }
    Ok(LinearGrads { dx, dweight, dbias })
}

/// Mean negative log-likelihood of the true classes and its gradient
/// `(softmax − onehot) / N` with respect to the logits.
pub fn softmax_cross_entropy<T: Real>(logits: &Matrix<T>, labels: &[usize]) -> Result<(f64, Matrix<T>)> {
    let (n, k) = (logits.rows, logits.cols);
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    let mut grad = Matrix::zeros(n, k);
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::Invalid(format!("label {label} out of range for {k} classes")));
        }
        let row: Vec<f64> = logits.row(r).iter().map(|v| v.as_f64()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        for (j, &v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            let onehot = if j == label { 1.0 } else { 0.0 };
            grad.data[r * k + j] = T::from_f64((p - onehot) / n as f64);
        }
    }
    Ok((loss / n as f64, grad))
}

/// Inverted dropout mask: kept entries scale by `1 / (1 − rate)`.
pub fn dropout_mask<T: Real>(len: usize, rate: f64, rng: &mut SplitMix64) -> Result<Vec<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    Ok((0..len)
        .map(|_| if rng.next_f64() < rate { T::zero() } else { keep })
        .collect())
}

pub fn apply_mask<T: Real>(x: &Matrix<T>, mask: &[T]) -> Matrix<T> {
    Matrix {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().zip(mask).map(|(&v, &m)| v * m).collect(),
    }
}
