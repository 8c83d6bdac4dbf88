//! Resize, crop, flip and mean subtraction, applied identically to every
//! frame and every clip of a batch.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::ClipTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Crop {
    None,
    Center { height: usize, width: usize },
    Random { height: usize, width: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flip {
    None,
    Always,
    /// Flip with probability one half.
    Random { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preprocess {
    pub resize: Option<(usize, usize)>,
    pub crop: Crop,
    pub flip: Flip,
    /// Per-channel value subtracted last.
    pub mean: [f32; 3],
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            resize: None,
            crop: Crop::None,
            flip: Flip::None,
            mean: [0.0; 3],
        }
    }
}

/// Bilinear resampling with corner alignment: output pixel `o` samples
/// input coordinate `o·(in − 1)/(out − 1)`, so the four corners map onto
/// the four input corners. A one-pixel output samples coordinate 0.
pub fn resize_bilinear(x: &ClipTensor<f32>, height: usize, width: usize) -> Result<ClipTensor<f32>> {
    if height == 0 || width == 0 {
        return Err(Error::Invalid("resize target must be non-empty".into()));
    }
    let [n, c, t, h, w] = x.shape();
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        (0..out)
            .map(|o| {
                let src = if out > 1 { (o * (inp - 1)) as f64 / (out - 1) as f64 } else { 0.0 };
                let lo = (src.floor() as usize).min(inp - 1);
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let (ty, tx) = (taps(height, h), taps(width, w));
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * t * height * width);
    for plane in 0..n * c * t {
        let p = &src[plane * h * w..(plane + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bottom = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out.push(if fy == 0.0 { top } else { top * (1.0 - fy) + bottom * fy });
            }
        }
    }
    ClipTensor::from_vec([n, c, t, height, width], out)
}

/// Offsets of a centred crop: floor((H − h)/2), floor((W − w)/2).
pub fn center_offsets(h: usize, w: usize, ch: usize, cw: usize) -> Result<(usize, usize)> {
    check_crop(h, w, ch, cw)?;
    Ok(((h - ch) / 2, (w - cw) / 2))
}

fn check_crop(h: usize, w: usize, ch: usize, cw: usize) -> Result<()> {
    if ch > h || cw > w || ch == 0 || cw == 0 {
        return Err(Error::Invalid(format!("crop {ch}x{cw} does not fit a {h}x{w} frame")));
    }
    Ok(())
}

pub fn crop(x: &ClipTensor<f32>, top: usize, left: usize, ch: usize, cw: usize) -> Result<ClipTensor<f32>> {
    let [n, c, t, h, w] = x.shape();
    if top + ch > h || left + cw > w {
        return Err(Error::Invalid(format!(
            "crop {ch}x{cw} at ({top}, {left}) leaves the {h}x{w} frame"
        )));
    }
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * t * ch * cw);
    for plane in 0..n * c * t {
        for r in top..top + ch {
            let row = plane * h * w + r * w;
            out.extend_from_slice(&src[row + left..row + left + cw]);
        }
    }
    ClipTensor::from_vec([n, c, t, ch, cw], out)
}

pub fn flip_horizontal(x: &ClipTensor<f32>) -> ClipTensor<f32> {
    let [_, _, _, _, w] = x.shape();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    out
}

pub fn preprocess(x: &ClipTensor<f32>, cfg: &Preprocess) -> Result<ClipTensor<f32>> {
    if x.channels() != 3 {
        return Err(Error::Shape(format!("preprocess expects RGB clips, got {} channels", x.channels())));
    }
    let mut y = match cfg.resize {
        Some((h, w)) => resize_bilinear(x, h, w)?,
        None => x.clone(),
    };
    let (h, w) = (y.height(), y.width());
    y = match cfg.crop {
        Crop::None => y,
        Crop::Center { height, width } => {
            let (top, left) = center_offsets(h, w, height, width)?;
            crop(&y, top, left, height, width)?
        }
        Crop::Random { height, width, seed } => {
            check_crop(h, w, height, width)?;
            let mut rng = SplitMix64::new(seed);
            let top = rng.below(h - height + 1);
            let left = rng.below(w - width + 1);
            crop(&y, top, left, height, width)?
        }
    };
    let flip = match cfg.flip {
        Flip::None => false,
        Flip::Always => true,
        Flip::Random { seed } => SplitMix64::new(seed).next_f64() < 0.5,
    };
    if flip {
        y = flip_horizontal(&y);
    }
    if cfg.mean != [0.0; 3] {
        let plane = y.frames() * y.height() * y.width();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v -= cfg.mean[(i / plane) % 3];
        }
    }
    Ok(y)
}
