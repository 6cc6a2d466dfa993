//! Clip directories: `frame_%05d.png` (8-bit), optional `frame_%05d.f32`
//! raw dumps (little-endian, C-order `C x H x W`, no header), and a
//! `manifest.json` describing the clip.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{DegradationSpec, FrameSequence, Pattern};
use crate::error::{check_shape, Error, Result};
use crate::prompts::Task;

pub const MANIFEST_FILE: &str = "manifest.json";
/// Upper bound on frame side and channel count accepted by the decoders.
pub const MAX_SIDE: usize = 4096;
pub const MAX_CHANNELS: usize = 4;
pub const MAX_FRAMES: usize = 10_000;

fn bad(msg: impl Into<String>) -> Error {
    Error::Clip(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degradation: Option<DegradationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<Pattern>,
    pub seed: u64,
    /// `[C, H, W]`.
    pub shape: [usize; 3],
    pub n_frames: usize,
    /// Per-step `[dx, dy]` ground-truth flow, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<Vec<[i64; 2]>>,
    /// Whether raw `.f32` dumps accompany the PNGs.
    #[serde(default)]
    pub raw_f32: bool,
}

impl Manifest {
    /// Manifest describing `seq` with no task information.
    pub fn for_sequence(seq: &FrameSequence, seed: u64) -> Result<Self> {
        let (c, h, w) = seq.shape()?;
        Ok(Self {
            task: None,
            degradation: None,
            pattern: None,
            seed,
            shape: [c, h, w],
            n_frames: seq.len(),
            flow: seq.motion.as_ref().map(|m| m.iter().map(|&(dx, dy)| [dx, dy]).collect()),
            raw_f32: false,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.shape;
        if !(1..=MAX_CHANNELS).contains(&c) || !(1..=MAX_SIDE).contains(&h) || !(1..=MAX_SIDE).contains(&w) {
            return Err(bad(format!("unsupported frame shape {:?}", self.shape)));
        }
        if !(1..=MAX_FRAMES).contains(&self.n_frames) {
            return Err(bad(format!("n_frames = {} outside [1, {MAX_FRAMES}]", self.n_frames)));
        }
        if let Some(flow) = &self.flow {
            if flow.len() + 1 != self.n_frames {
                return Err(bad(format!("{} flow entries for {} frames", flow.len(), self.n_frames)));
            }
            if flow.iter().flatten().any(|d| d.unsigned_abs() as usize > h.max(w)) {
                return Err(bad("flow displacement exceeds frame size"));
            }
        }
        if let Some(spec) = &self.degradation {
            spec.params.validate()?;
            if self.task.is_some_and(|t| t != spec.task()) {
                return Err(bad("task disagrees with degradation"));
            }
        }
        Ok(())
    }

    pub fn motion(&self) -> Option<Vec<(i64, i64)>> {
        self.flow.as_ref().map(|f| f.iter().map(|d| (d[0], d[1])).collect())
    }
}

/// Parses and validates `manifest.json` bytes.
pub fn parse_manifest(bytes: &[u8]) -> Result<Manifest> {
    let m: Manifest = serde_json::from_slice(bytes)?;
    m.validate()?;
    Ok(m)
}

pub fn frame_path(dir: &Path, index: usize, ext: &str) -> PathBuf {
    dir.join(format!("frame_{index:05}.{ext}"))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a 1- or 3-channel frame as an 8-bit PNG.
pub fn encode_png_frame(frame: &Array3<f64>) -> Result<Vec<u8>> {
    let (c, h, w) = frame.dim();
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(bad(format!("PNG frames need 1 or 3 channels, got {c}"))),
    };
    let mut data = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data.push(quantize(frame[[ch, y, x]]));
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| bad(format!("png: {e}")))?;
        writer.write_image_data(&data).map_err(|e| bad(format!("png: {e}")))?;
    }
    Ok(out)
}

/// Decodes a PNG into `C x H x W` values in `[0, 1]`. Palette and low bit
/// depths are expanded, 16-bit is reduced to 8, alpha is dropped.
pub fn decode_png_frame(bytes: &[u8]) -> Result<Array3<f64>> {
    let limits = png::Limits { bytes: 64 << 20 };
    let mut dec = png::Decoder::new_with_limits(Cursor::new(bytes), limits);
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| bad(format!("png: {e}")))?;
    let (hw, hh) = (reader.info().width as usize, reader.info().height as usize);
    if hh > MAX_SIDE || hw > MAX_SIDE {
        return Err(bad(format!("png: {hw}x{hh} exceeds {MAX_SIDE}")));
    }
    let size = reader.output_buffer_size().ok_or_else(|| bad("png: image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(format!("png: {e}")))?;
    let (h, w) = (info.height as usize, info.width as usize);
    if h > MAX_SIDE || w > MAX_SIDE {
        return Err(bad(format!("png: {w}x{h} exceeds {MAX_SIDE}")));
    }
    let (stride, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(bad("png: unexpanded palette")),
    };
    if info.bit_depth != png::BitDepth::Eight {
        return Err(bad("png: expected 8-bit output"));
    }
    let line = info.line_size;
    Ok(Array3::from_shape_fn((keep, h, w), |(ch, y, x)| {
        f64::from(buf[y * line + x * stride + ch]) / 255.0
    }))
}

pub fn encode_raw_frame(frame: &Array3<f64>) -> Vec<u8> {
    frame.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect()
}

/// Decodes a header-less little-endian `f32` dump of the given `[C, H, W]`.
pub fn decode_raw_frame(bytes: &[u8], shape: [usize; 3]) -> Result<Array3<f64>> {
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("raw: shape overflows"))?;
    if Some(bytes.len()) != n.checked_mul(4) {
        return Err(bad(format!("raw: {} bytes for shape {shape:?}", bytes.len())));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("raw frame"));
    }
    Array3::from_shape_vec((shape[0], shape[1], shape[2]), values).map_err(|e| bad(format!("raw: {e}")))
}

/// Writes every frame and the manifest. `manifest.shape` and `n_frames`
/// must describe `seq`.
pub fn write_clip(dir: &Path, seq: &FrameSequence, manifest: &Manifest) -> Result<()> {
    let (c, h, w) = seq.shape()?;
    check_shape(&manifest.shape, &[c, h, w])?;
    if manifest.n_frames != seq.len() {
        return Err(bad(format!("manifest lists {} frames, clip has {}", manifest.n_frames, seq.len())));
    }
    manifest.validate()?;
    fs::create_dir_all(dir)?;
    for (i, f) in seq.frames.iter().enumerate() {
        fs::write(frame_path(dir, i, "png"), encode_png_frame(f)?)?;
        if manifest.raw_f32 {
            fs::write(frame_path(dir, i, "f32"), encode_raw_frame(f))?;
        }
    }
    let mut text = serde_json::to_vec_pretty(manifest)?;
    text.push(b'\n');
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

/// Reads a clip, preferring raw dumps when the manifest lists them.
pub fn read_clip(dir: &Path) -> Result<(FrameSequence, Manifest)> {
    let manifest = parse_manifest(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let frames = (0..manifest.n_frames)
        .map(|i| {
            let frame = if manifest.raw_f32 {
                decode_raw_frame(&fs::read(frame_path(dir, i, "f32"))?, manifest.shape)?
            } else {
                decode_png_frame(&fs::read(frame_path(dir, i, "png"))?)?
            };
            check_shape(&manifest.shape, frame.shape())?;
            Ok(frame)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        FrameSequence {
            frames,
            motion: manifest.motion(),
        },
        manifest,
    ))
}
