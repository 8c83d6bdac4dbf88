//! Video-level descriptors: pool5 activations averaged over sampled clips.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::NetworkGraph;
use crate::pipeline::clip::{sample_clips, ClipSource, SampleMode};
use crate::pipeline::preprocess::{preprocess, Preprocess};

pub const DEFAULT_CLIPS: usize = 20;

/// Samples `num_clips` clips of the network's frame count, preprocesses
/// each, and returns the mean of their pool5 vectors.
pub fn extract_features(
    net: &NetworkGraph<f32>,
    video: &ClipSource,
    num_clips: usize,
    mode: SampleMode,
    prep: &Preprocess,
) -> Result<Vec<f32>> {
    if num_clips == 0 {
        return Err(Error::Invalid("need at least one clip".into()));
    }
    let clip_len = net.arch.input_geometry[0];
    let clips = sample_clips(video, clip_len, num_clips, mode)?;
    let feats = clips
        .par_iter()
        .map(|c| Ok(net.forward(&preprocess(c, prep)?)?.pool5.data().to_vec()))
        .collect::<Result<Vec<Vec<f32>>>>()?;
    Ok(average(&feats))
}

/// Element-wise mean, accumulated in f64.
pub fn average(rows: &[Vec<f32>]) -> Vec<f32> {
    let dim = rows.first().map_or(0, Vec::len);
    let mut acc = vec![0.0f64; dim];
    for r in rows {
        for (a, &v) in acc.iter_mut().zip(r) {
            *a += v as f64;
        }
    }
    acc.iter().map(|&a| (a / rows.len() as f64) as f32).collect()
}

/// `u32` dimension followed by that many little-endian f32 values.
pub fn encode_features(feature: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * feature.len());
    out.extend_from_slice(&(feature.len() as u32).to_le_bytes());
    for v in feature {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<f32>> {
    let dim = bytes
        .get(..4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
        .ok_or_else(|| Error::Format("feature file shorter than its header".into()))?;
    if bytes.len() != 4 + 4 * dim {
        return Err(Error::Format(format!(
            "feature file declares {dim} values but holds {} bytes of payload",
            bytes.len() - 4
        )));
    }
    Ok(bytes[4..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

pub fn write_features(path: impl AsRef<Path>, feature: &[f32]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_features(feature)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Vec<f32>> {
    let path = path.as_ref();
    decode_features(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
