//! Frame ingestion: binary PPM directories and the raw `.clp` tensor format.
//!
//! A `.clp` file is one text line `N C T H W\n` followed by `N·C·T·H·W`
//! little-endian f32 values in NCTHW order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::ClipTensor;

/// One decoded RGB frame, channel-major, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "frame {height}x{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }
}

/// A decoded video held as a single (1, 3, F, H, W) tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSource {
    video: ClipTensor<f32>,
    pub fps: Option<f64>,
}

impl ClipSource {
    pub fn from_frames(frames: &[Frame]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Invalid("video has no frames".into()))?;
        let (h, w) = (first.height, first.width);
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| (f.height, f.width) != (h, w)) {
            return Err(Error::Shape(format!(
                "frame {i} is {}x{}, frame 0 is {h}x{w}",
                f.height, f.width
            )));
        }
        let t = frames.len();
        let plane = h * w;
        let mut data = vec![0.0f32; 3 * t * plane];
        for (ti, f) in frames.iter().enumerate() {
            for c in 0..3 {
                let dst = (c * t + ti) * plane;
                data[dst..dst + plane].copy_from_slice(&f.data[c * plane..(c + 1) * plane]);
            }
        }
        Ok(Self {
            video: ClipTensor::from_vec([1, 3, t, h, w], data)?,
            fps: None,
        })
    }

    /// Wraps a (1, 3, F, H, W) tensor.
    pub fn from_tensor(video: ClipTensor<f32>) -> Result<Self> {
        let [n, c, ..] = video.shape();
        if n != 1 || c != 3 {
            return Err(Error::Shape(format!("video tensor must be (1, 3, F, H, W), got {:?}", video.shape())));
        }
        Ok(Self { video, fps: None })
    }

    /// A directory of `.ppm` frames or a single-clip `.clp` file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if path.is_dir() {
            Self::from_frames(&read_ppm_dir(path)?)
        } else {
            Self::from_tensor(read_clp(path)?)
        }
    }

    pub fn frame_count(&self) -> usize {
        self.video.frames()
    }

    pub fn frame_size(&self) -> (usize, usize) {
        (self.video.height(), self.video.width())
    }

    pub fn video(&self) -> &ClipTensor<f32> {
        &self.video
    }

    pub fn frame(&self, t: usize) -> Result<Frame> {
        let f = self.video.frame_range(t, 1)?;
        let (h, w) = self.frame_size();
        Frame::new(h, w, f.into_data())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Consecutive clips starting at 0, len, 2·len, ...
    NonOverlap,
    /// Start indices drawn uniformly from every valid position.
    Random { seed: u64 },
}

/// Cuts `clip_len`-frame clips out of a video. Non-overlapping mode yields
/// at most `num_clips` tiles; random mode yields exactly `num_clips`.
pub fn sample_clips(src: &ClipSource, clip_len: usize, num_clips: usize, mode: SampleMode) -> Result<Vec<ClipTensor<f32>>> {
    clip_starts(src.frame_count(), clip_len, num_clips, mode)?
        .into_iter()
        .map(|s| src.video.frame_range(s, clip_len))
        .collect::<Result<Vec<_>>>()
}

pub fn clip_starts(frames: usize, clip_len: usize, num_clips: usize, mode: SampleMode) -> Result<Vec<usize>> {
    if clip_len == 0 {
        return Err(Error::Invalid("clip length must be positive".into()));
    }
    if frames < clip_len {
        return Err(Error::Invalid(format!(
            "video has {frames} frames, fewer than the clip length {clip_len}"
        )));
    }
    Ok(match mode {
        SampleMode::NonOverlap => (0..frames / clip_len).take(num_clips).map(|i| i * clip_len).collect(),
        SampleMode::Random { seed } => {
            let mut rng = SplitMix64::new(seed);
            (0..num_clips).map(|_| rng.below(frames - clip_len + 1)).collect()
        }
    })
}

fn ppm_token(bytes: &[u8], pos: &mut usize, path: &Path) -> Result<usize> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("{}: malformed PPM header", path.display())))
}

/// Decodes a binary (P6) PPM with an 8- or 16-bit maxval.
pub fn parse_ppm(bytes: &[u8], path: &Path) -> Result<Frame> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::Format(format!("{}: not a binary PPM (P6)", path.display())));
    }
    let mut pos = 2;
    let width = ppm_token(bytes, &mut pos, path)?;
    let height = ppm_token(bytes, &mut pos, path)?;
    let maxval = ppm_token(bytes, &mut pos, path)?;
    if !(1..=65535).contains(&maxval) || width == 0 || height == 0 {
        return Err(Error::Format(format!("{}: bad PPM dimensions or maxval", path.display())));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format(format!("{}: truncated PPM header", path.display())));
    }
    pos += 1;
    let sample = if maxval < 256 { 1 } else { 2 };
    let plane = width * height;
    let payload = &bytes[pos..];
    if payload.len() < 3 * plane * sample {
        return Err(Error::Format(format!("{}: truncated PPM pixel data", path.display())));
    }
    let mut data = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            let i = (3 * p + c) * sample;
            let v = if sample == 1 {
                payload[i] as u32
            } else {
                u16::from_be_bytes([payload[i], payload[i + 1]]) as u32
            };
            data[c * plane + p] = v as f32 / maxval as f32;
        }
    }
    Frame::new(height, width, data)
}

/// Writes an 8-bit P6 PPM, clamping values to [0, 1].
pub fn write_ppm(path: impl AsRef<Path>, frame: &Frame) -> Result<()> {
    let path = path.as_ref();
    let plane = frame.height * frame.width;
    let mut out = format!("P6\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    for p in 0..plane {
        for c in 0..3 {
            out.push((frame.data[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Every `.ppm` file in a directory, ordered by file name.
pub fn read_ppm_dir(dir: impl AsRef<Path>) -> Result<Vec<Frame>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Format(format!("{}: no .ppm frames", dir.display())));
    }
    paths
        .iter()
        .map(|p| parse_ppm(&fs::read(p).map_err(|e| Error::io(p, e))?, p))
        .collect()
}

pub fn encode_clp(clip: &ClipTensor<f32>) -> Vec<u8> {
    let [n, c, t, h, w] = clip.shape();
    let mut out = format!("{n} {c} {t} {h} {w}\n").into_bytes();
    out.reserve(4 * clip.len());
    for v in clip.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_clp(bytes: &[u8], path: &Path) -> Result<ClipTensor<f32>> {
    let bad = |what: &str| Error::Format(format!("{}: {what}", path.display()));
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing .clp header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not text"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| bad("header must be five integers")))
        .collect::<Result<_>>()?;
    let shape: [usize; 5] = dims.try_into().map_err(|_| bad("header must be five integers"))?;
    let payload = &bytes[nl + 1..];
    let count = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| bad("shape overflows"))?;
    if payload.len() != 4 * count {
        return Err(bad(&format!("expected {} payload bytes, found {}", 4 * count, payload.len())));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    ClipTensor::from_vec(shape, data)
}

pub fn write_clp(path: impl AsRef<Path>, clip: &ClipTensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_clp(clip)).map_err(|e| Error::io(path, e))
}

pub fn read_clp(path: impl AsRef<Path>) -> Result<ClipTensor<f32>> {
    let path = path.as_ref();
    decode_clp(&fs::read(path).map_err(|e| Error::io(path, e))?, path)
}
