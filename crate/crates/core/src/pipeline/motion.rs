//! Labelled clip collections and the synthetic direction-of-motion task.
//!
//! Class 0 clips show a bright square moving left to right, class 1 clips
//! are the same clips played backwards. Both classes therefore contain the
//! same frames, and only their order tells them apart.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::clip::{read_clp, write_clp, ClipSource};
use crate::rng::SplitMix64;
use crate::tensor::{ClipTensor, Shape5};

pub const NOISE_STD: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClips {
    /// (N, C, T, H, W)
    pub clips: ClipTensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledClips {
    pub fn new(clips: ClipTensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != clips.batch() {
            return Err(Error::Shape(format!("{} labels for {} clips", labels.len(), clips.batch())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Invalid(format!("label {l} out of range for {num_classes} classes")));
        }
        Ok(Self {
            clips,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn clip_shape(&self) -> [usize; 4] {
        let [_, c, t, h, w] = self.clips.shape();
        [c, t, h, w]
    }

    pub fn gather(&self, indices: &[usize]) -> Result<(ClipTensor<f32>, Vec<usize>)> {
        let [c, t, h, w] = self.clip_shape();
        let mut data = Vec::with_capacity(indices.len() * c * t * h * w);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Invalid(format!("clip index {i} out of range")));
            }
            data.extend_from_slice(self.clips.item(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((ClipTensor::from_vec([indices.len(), c, t, h, w], data)?, labels))
    }

    /// Writes `dir/class{k}/clip{i}.clp`, one single-clip file each.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for k in 0..self.num_classes {
            let d = dir.join(format!("class{k}"));
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for i in 0..self.len() {
            let (clip, labels) = self.gather(&[i])?;
            write_clp(dir.join(format!("class{}/clip{i:04}.clp", labels[0])), &clip)?;
        }
        Ok(())
    }

    /// Reads a directory with one subdirectory per class (sorted by name,
    /// labelled 0, 1, ...). Each entry is a `.clp` file, whose clips are
    /// all taken, or a directory of PPM frames taken as one clip.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut classes: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        classes.sort();
        if classes.is_empty() {
            return Err(Error::Format(format!("{}: no class subdirectories", dir.display())));
        }
        let mut items: Vec<ClipTensor<f32>> = Vec::new();
        let mut labels = Vec::new();
        for (label, class_dir) in classes.iter().enumerate() {
            let mut entries: Vec<_> = fs::read_dir(class_dir)
                .map_err(|e| Error::io(class_dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .collect();
            entries.sort();
            for entry in entries {
                let clip = if entry.is_dir() {
                    ClipSource::load(&entry)?.video().clone()
                } else if entry.extension().is_some_and(|x| x == "clp") {
                    read_clp(&entry)?
                } else {
                    continue;
                };
                for item in clip.unstack() {
                    if let Some(first) = items.first() {
                        if first.shape() != item.shape() {
                            return Err(Error::Format(format!(
                                "{}: clip shape {:?} differs from {:?}",
                                entry.display(),
                                &item.shape()[1..],
                                &first.shape()[1..]
                            )));
                        }
                    }
                    items.push(item);
                    labels.push(label);
                }
            }
        }
        if items.is_empty() {
            return Err(Error::Format(format!("{}: no clips found", dir.display())));
        }
        LabeledClips::new(ClipTensor::stack(&items)?, labels, classes.len())
    }
}

/// Side length of the moving square for an `h`×`w` frame.
pub fn square_size(h: usize, w: usize) -> usize {
    (h.min(w) / 8).max(2)
}

fn draw_pair(shape: Shape5, rng: &mut SplitMix64) -> Result<ClipTensor<f32>> {
    let [_, c, t, h, w] = shape;
    let s = square_size(h, w);
    let travel = t.saturating_sub(1);
    if s > h || w < s + travel {
        return Err(Error::Invalid(format!(
            "a {s}-pixel square cannot cross a {h}x{w} frame in {t} frames"
        )));
    }
    let max_speed = if travel == 0 { 1 } else { (w - s) / travel };
    let speed = 1 + rng.below(max_speed);
    let x0 = rng.below(w - s - speed * travel + 1);
    let y0 = rng.below(h - s + 1);
    let brightness = rng.uniform(0.6, 1.0);
    let plane = h * w;
    let mut data = vec![0.0f32; c * t * plane];
    for ti in 0..t {
        let left = x0 + speed * ti;
        for ci in 0..c {
            let frame = &mut data[(ci * t + ti) * plane..(ci * t + ti + 1) * plane];
            let mut noise: Vec<f64> = (0..plane).map(|_| rng.normal() * NOISE_STD).collect();
            let mean = noise.iter().sum::<f64>() / plane as f64;
            noise.iter_mut().for_each(|v| *v -= mean);
            for (p, v) in frame.iter_mut().enumerate() {
                let (y, x) = (p / w, p % w);
                let inside = y >= y0 && y < y0 + s && x >= left && x < left + s;
                *v = ((if inside { brightness } else { 0.0 }) + noise[p]) as f32;
            }
        }
    }
    ClipTensor::from_vec([1, c, t, h, w], data)
}

/// `n_per_class` clips of each direction with geometry (C, T, H, W),
/// ordered as pairs: clip 2i has label 0, clip 2i+1 is its reversal with
/// label 1. Speed, start position and brightness vary per pair; additive
/// noise is re-centred to zero mean in every frame.
pub fn make_motion_dataset(n_per_class: usize, geometry: [usize; 4], seed: u64) -> Result<LabeledClips> {
    if n_per_class == 0 {
        return Err(Error::Invalid("need at least one clip per class".into()));
    }
    let [c, t, h, w] = geometry;
    if c == 0 || t < 2 || h == 0 {
        return Err(Error::Invalid(format!("degenerate motion geometry {geometry:?}")));
    }
    let mut rng = SplitMix64::new(seed);
    let mut items = Vec::with_capacity(2 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for _ in 0..n_per_class {
        let forward = draw_pair([1, c, t, h, w], &mut rng)?;
        let backward = forward.reverse_frames();
        items.push(forward);
        items.push(backward);
        labels.extend_from_slice(&[0, 1]);
    }
    LabeledClips::new(ClipTensor::stack(&items)?, labels, 2)
}
