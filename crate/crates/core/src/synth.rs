//! Deterministic synthetic clean clips and the five task degradations.

use std::str::FromStr;

use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::prompts::Task;

pub mod io;

/// An index-ordered clip. `motion`, when present, holds the exact per-step
/// circular displacement `(dx, dy)` from frame `t` to frame `t + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<Array3<f64>>,
    pub motion: Option<Vec<(i64, i64)>>,
}

impl FrameSequence {
    pub fn new(frames: Vec<Array3<f64>>) -> Result<Self> {
        let seq = Self { frames, motion: None };
        seq.shape()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Shared `(C, H, W)` of every frame.
    pub fn shape(&self) -> Result<(usize, usize, usize)> {
        let first = self.frames.first().ok_or_else(|| invalid("clip has no frames"))?;
        if let Some(f) = self.frames.iter().find(|f| f.dim() != first.dim()) {
            return Err(Error::ShapeMismatch {
                expected: first.shape().to_vec(),
                actual: f.shape().to_vec(),
            });
        }
        Ok(first.dim())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    Checker,
    GradientBlobs,
    TexturedNoiseField,
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "checker" => Ok(Pattern::Checker),
            "gradient-blobs" => Ok(Pattern::GradientBlobs),
            "textured-noise-field" | "textured" => Ok(Pattern::TexturedNoiseField),
            other => Err(invalid(format!("unknown pattern {other:?}"))),
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    (0..c).map(|_| rng.random_range(0.1..0.9)).collect()
}

/// Circular box blur with radius 1 on every channel.
fn box_blur3(img: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = img.dim();
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
        let mut acc = 0.0;
        for dy in [h - 1, 0, 1] {
            for dx in [w - 1, 0, 1] {
                acc += img[[ch, (y + dy) % h, (x + dx) % w]];
            }
        }
        acc / 9.0
    })
}

fn first_frame(pattern: Pattern, shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Array3<f64> {
    let (c, h, w) = shape;
    match pattern {
        Pattern::Checker => {
            let cell = (h.min(w) / 8).max(2);
            let (a, b) = (random_color(rng, c), random_color(rng, c));
            Array3::from_shape_fn(shape, |(ch, y, x)| {
                if (y / cell + x / cell) % 2 == 0 {
                    a[ch]
                } else {
                    b[ch]
                }
            })
        }
        Pattern::GradientBlobs => {
            let base = random_color(rng, c);
            let tilt: Vec<(f64, f64)> = (0..c)
                .map(|_| (rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)))
                .collect();
            let blobs: Vec<(f64, f64, f64, Vec<f64>)> = (0..5)
                .map(|_| {
                    (
                        rng.random_range(0.0..h as f64),
                        rng.random_range(0.0..w as f64),
                        rng.random_range(0.08..0.2) * h.min(w) as f64,
                        (0..c).map(|_| rng.random_range(-0.4..0.4)).collect(),
                    )
                })
                .collect();
            Array3::from_shape_fn(shape, |(ch, y, x)| {
                let (fy, fx) = (y as f64, x as f64);
                let ty = (2.0 * std::f64::consts::PI * fy / h as f64).cos();
                let tx = (2.0 * std::f64::consts::PI * fx / w as f64).cos();
                let mut v = base[ch] + tilt[ch].0 * ty + tilt[ch].1 * tx;
                for (cy, cx, r, col) in &blobs {
                    // Circular distance keeps the pattern seamless under wrap.
                    let dy = (fy - cy).abs().min(h as f64 - (fy - cy).abs());
                    let dx = (fx - cx).abs().min(w as f64 - (fx - cx).abs());
                    v += col[ch] * (-(dy * dy + dx * dx) / (2.0 * r * r)).exp();
                }
                v.clamp(0.0, 1.0)
            })
        }
        Pattern::TexturedNoiseField => {
            let noise = Array3::from_shape_fn(shape, |_| rng.random::<f64>());
            let smooth = box_blur3(&box_blur3(&noise));
            let (lo, hi) = smooth
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
            let span = (hi - lo).max(1e-12);
            smooth.mapv(|v| (v - lo) / span)
        }
    }
}

/// Circularly translates `img` by `(dx, dy)` pixels: the value at `(y, x)`
/// moves to `(y + dy, x + dx)`.
pub fn circular_shift(img: &Array3<f64>, dx: i64, dy: i64) -> Array3<f64> {
    let (_, h, w) = img.dim();
    Array3::from_shape_fn(img.dim(), |(c, y, x)| {
        let sy = (y as i64 - dy).rem_euclid(h as i64) as usize;
        let sx = (x as i64 - dx).rem_euclid(w as i64) as usize;
        img[[c, sy, sx]]
    })
}

/// Frame `t` is frame 0 circularly translated by `t * velocity`.
pub fn generate_clean_video(
    pattern: Pattern,
    shape: (usize, usize, usize),
    n_frames: usize,
    velocity: (i64, i64),
    seed: u64,
) -> Result<FrameSequence> {
    let (c, h, w) = shape;
    if c == 0 || h == 0 || w == 0 {
        return Err(invalid(format!("frame shape {shape:?} has a zero side")));
    }
    if n_frames == 0 {
        return Err(invalid("n_frames must be >= 1"));
    }
    let limit = (h.min(w) / n_frames) as i64;
    if velocity.0.abs() > limit || velocity.1.abs() > limit {
        return Err(invalid(format!(
            "velocity {velocity:?} too large: |v| must be <= {limit} for {n_frames} frames of {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f0 = first_frame(pattern, shape, &mut rng);
    let frames = (0..n_frames as i64)
        .map(|t| circular_shift(&f0, t * velocity.0, t * velocity.1))
        .collect();
    Ok(FrameSequence {
        frames,
        motion: Some(vec![velocity; n_frames - 1]),
    })
}

/// Task-specific degradation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case", deny_unknown_fields)]
pub enum Degradation {
    /// Additive Gaussian noise with standard deviation `sigma`, clamped.
    Denoise { sigma: f64 },
    /// `I = J e^{-beta d} + A (1 - e^{-beta d})` over a vertical depth ramp.
    Dehaze { beta: f64, airlight: f64 },
    /// Seeded oriented streak overlay.
    Derain {
        density: f64,
        angle_deg: f64,
        length: usize,
        intensity: f64,
    },
    /// Block-mean posterization plus an edge-ringing sharpen.
    Mp4 { block: usize, strength: f64 },
    /// Box-downsample by 4 then nearest-upsample back.
    Sr4,
}

impl Degradation {
    pub fn task(&self) -> Task {
        match self {
            Degradation::Denoise { .. } => Task::Denoise,
            Degradation::Dehaze { .. } => Task::Dehaze,
            Degradation::Derain { .. } => Task::Derain,
            Degradation::Mp4 { .. } => Task::Mp4,
            Degradation::Sr4 => Task::Sr4,
        }
    }

    /// Moderate default strength for each task.
    pub fn default_for(task: Task) -> Self {
        match task {
            Task::Denoise => Degradation::Denoise { sigma: 0.2 },
            Task::Dehaze => Degradation::Dehaze { beta: 1.2, airlight: 0.8 },
            Task::Derain => Degradation::Derain {
                density: 0.5,
                angle_deg: 20.0,
                length: 6,
                intensity: 0.6,
            },
            Task::Mp4 => Degradation::Mp4 { block: 4, strength: 0.8 },
            Task::Sr4 => Degradation::Sr4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |name: &str, v: f64, lo: f64, hi: f64| {
            if v.is_finite() && (lo..=hi).contains(&v) {
                Ok(())
            } else {
                Err(invalid(format!("{name} = {v} outside [{lo}, {hi}]")))
            }
        };
        match *self {
            Degradation::Denoise { sigma } => in_range("sigma", sigma, 0.0, 1.0),
            Degradation::Dehaze { beta, airlight } => {
                in_range("beta", beta, 0.0, 5.0)?;
                in_range("airlight", airlight, 0.0, 1.0)
            }
            Degradation::Derain { density, angle_deg, length, intensity } => {
                in_range("density", density, 0.0, 1.0)?;
                in_range("angle_deg", angle_deg, -90.0, 90.0)?;
                in_range("intensity", intensity, 0.0, 1.0)?;
                if !(1..=64).contains(&length) {
                    return Err(invalid(format!("length = {length} outside [1, 64]")));
                }
                Ok(())
            }
            Degradation::Mp4 { block, strength } => {
                in_range("strength", strength, 0.0, 1.0)?;
                if !(1..=32).contains(&block) {
                    return Err(invalid(format!("block = {block} outside [1, 32]")));
                }
                Ok(())
            }
            Degradation::Sr4 => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSpec {
    pub params: Degradation,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn task(&self) -> Task {
        self.params.task()
    }
}

fn frame_rng(seed: u64, frame: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (frame as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn add_noise(img: &Array3<f64>, sigma: f64, rng: &mut ChaCha8Rng) -> Array3<f64> {
    if sigma == 0.0 {
        return img.clone();
    }
    img.mapv(|v| {
        let n: f64 = StandardNormal.sample(rng);
        (v + sigma * n).clamp(0.0, 1.0)
    })
}

fn haze(img: &Array3<f64>, beta: f64, airlight: f64) -> Array3<f64> {
    let (_, h, _) = img.dim();
    let mut out = img.clone();
    for y in 0..h {
        let depth = if h > 1 { y as f64 / (h - 1) as f64 } else { 0.0 };
        let trans = (-beta * depth).exp();
        out.slice_mut(s![.., y, ..])
            .mapv_inplace(|j| (j * trans + airlight * (1.0 - trans)).clamp(0.0, 1.0));
    }
    out
}

fn rain(img: &Array3<f64>, density: f64, angle_deg: f64, length: usize, intensity: f64, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let (_, h, w) = img.dim();
    let mut mask = Array2::<f64>::zeros((h, w));
    let start_prob = 0.04 * density;
    let (dy, dx) = {
        let a = angle_deg.to_radians();
        (a.cos(), a.sin())
    };
    for y in 0..h {
        for x in 0..w {
            if rng.random::<f64>() >= start_prob {
                continue;
            }
            let strength = rng.random_range(0.6..1.0);
            for k in 0..length {
                let py = (y as f64 + dy * k as f64).round() as i64;
                let px = (x as f64 + dx * k as f64).round() as i64;
                let (py, px) = (py.rem_euclid(h as i64) as usize, px.rem_euclid(w as i64) as usize);
                mask[[py, px]] = f64::max(mask[[py, px]], strength);
            }
        }
    }
    let mut out = img.clone();
    for ((_, y, x), v) in out.indexed_iter_mut() {
        let m = mask[[y, x]] * intensity;
        *v = (*v * (1.0 - m) + m).clamp(0.0, 1.0);
    }
    out
}

fn compression(img: &Array3<f64>, block: usize, strength: f64) -> Array3<f64> {
    if strength == 0.0 {
        return img.clone();
    }
    let (c, h, w) = img.dim();
    let mut poster = img.clone();
    for ch in 0..c {
        for by in (0..h).step_by(block) {
            for bx in (0..w).step_by(block) {
                let mut blk = poster.slice_mut(s![ch, by..(by + block).min(h), bx..(bx + block).min(w)]);
                let mean = blk.mean().unwrap_or(0.0);
                blk.mapv_inplace(|v| (1.0 - strength) * v + strength * mean);
            }
        }
    }
    let blurred = box_blur3(&poster);
    let mut out = poster.clone();
    out.zip_mut_with(&blurred, |p, &b| *p = (*p + 0.5 * strength * (*p - b)).clamp(0.0, 1.0));
    out
}

fn down_up4(img: &Array3<f64>) -> Result<Array3<f64>> {
    let low = box_downsample(img, 4)?;
    Ok(nearest_upsample(&low, 4))
}

/// Mean over `factor x factor` blocks; sides must be divisible by `factor`.
pub fn box_downsample(img: &Array3<f64>, factor: usize) -> Result<Array3<f64>> {
    let (c, h, w) = img.dim();
    if h % factor != 0 || w % factor != 0 {
        return Err(invalid(format!("{h}x{w} is not divisible by {factor}")));
    }
    Ok(Array3::from_shape_fn((c, h / factor, w / factor), |(ch, y, x)| {
        img.slice(s![ch, y * factor..(y + 1) * factor, x * factor..(x + 1) * factor])
            .mean()
            .expect("nonempty block")
    }))
}

pub fn nearest_upsample(img: &Array3<f64>, factor: usize) -> Array3<f64> {
    let (c, h, w) = img.dim();
    Array3::from_shape_fn((c, h * factor, w * factor), |(ch, y, x)| img[[ch, y / factor, x / factor]])
}

/// Applies `spec` frame by frame. Output shape equals input shape.
pub fn degrade(clean: &FrameSequence, spec: &DegradationSpec) -> Result<FrameSequence> {
    spec.params.validate()?;
    clean.shape()?;
    let frames = clean
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mut rng = frame_rng(spec.seed, i);
            match spec.params {
                Degradation::Denoise { sigma } => Ok(add_noise(f, sigma, &mut rng)),
                Degradation::Dehaze { beta, airlight } => Ok(haze(f, beta, airlight)),
                Degradation::Derain { density, angle_deg, length, intensity } => {
                    Ok(rain(f, density, angle_deg, length, intensity, &mut rng))
                }
                Degradation::Mp4 { block, strength } => Ok(compression(f, block, strength)),
                Degradation::Sr4 => down_up4(f),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FrameSequence {
        frames,
        motion: clean.motion.clone(),
    })
}
