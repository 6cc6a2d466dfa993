//! Self-attention, first-frame cross-frame attention, and sliding-window
//! cross-frame attention (SW-CFA) over per-frame token matrices.
//!
//! Tokens are stored row-per-position: a frame is an `L x d_model` matrix and
//! projections multiply on the right (`Q = tokens . W^Q`).

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Window radius used when none is given.
pub const DEFAULT_WINDOW_RADIUS: usize = 3;

/// Which attention construction a transformer block uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    #[serde(alias = "self")]
    SelfAttention,
    #[serde(alias = "first")]
    FirstFrameCfa,
    #[serde(alias = "swcfa")]
    SlidingWindowCfa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionMode {
    pub variant: AttentionVariant,
    /// Only meaningful for [`AttentionVariant::SlidingWindowCfa`].
    pub window_radius: usize,
}

impl AttentionMode {
    pub const SELF: AttentionMode = AttentionMode {
        variant: AttentionVariant::SelfAttention,
        window_radius: 0,
    };
    pub const FIRST_FRAME: AttentionMode = AttentionMode {
        variant: AttentionVariant::FirstFrameCfa,
        window_radius: 0,
    };

    pub fn sliding_window(radius: usize) -> Self {
        Self {
            variant: AttentionVariant::SlidingWindowCfa,
            window_radius: radius,
        }
    }

    /// Frames (with weights) whose keys and values frame `i` attends to in a
    /// video of `n_frames`. Weights sum to one.
    pub fn reference_frames(&self, n_frames: usize, i: usize) -> Vec<(usize, f64)> {
        match self.variant {
            AttentionVariant::SelfAttention => vec![(i, 1.0)],
            AttentionVariant::FirstFrameCfa => vec![(0, 1.0)],
            AttentionVariant::SlidingWindowCfa => {
                let lo = i.saturating_sub(self.window_radius);
                let hi = (i + self.window_radius).min(n_frames - 1);
                let w = 1.0 / (hi - lo + 1) as f64;
                (lo..=hi).map(|j| (j, w)).collect()
            }
        }
    }

    /// Reference frames for every frame of the video.
    pub fn mixing(&self, n_frames: usize) -> Vec<Vec<(usize, f64)>> {
        (0..n_frames).map(|i| self.reference_frames(n_frames, i)).collect()
    }
}

impl Default for AttentionMode {
    fn default() -> Self {
        Self::sliding_window(DEFAULT_WINDOW_RADIUS)
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.variant {
            AttentionVariant::SelfAttention => f.write_str("self"),
            AttentionVariant::FirstFrameCfa => f.write_str("first"),
            AttentionVariant::SlidingWindowCfa => write!(f, "swcfa{}", self.window_radius),
        }
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" | "self_attention" => Ok(Self::SelfAttention),
            "first" | "first_frame" | "first_frame_cfa" => Ok(Self::FirstFrameCfa),
            "swcfa" | "sw_cfa" | "sliding_window_cfa" => Ok(Self::SlidingWindowCfa),
            other => Err(invalid(format!("unknown attention mode {other:?}"))),
        }
    }
}

/// Query, key and value projections, each `d_model x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
}

impl ProjectionWeights {
    pub fn new(w_q: Array2<f64>, w_k: Array2<f64>, w_v: Array2<f64>) -> Result<Self> {
        if w_q.dim() != w_k.dim() || w_q.dim() != w_v.dim() {
            return Err(invalid(format!(
                "projection shapes differ: {:?} {:?} {:?}",
                w_q.dim(),
                w_k.dim(),
                w_v.dim()
            )));
        }
        if [&w_q, &w_k, &w_v].iter().any(|w| w.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("projection weights"));
        }
        Ok(Self { w_q, w_k, w_v })
    }

    pub fn d_model(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn d(&self) -> usize {
        self.w_q.ncols()
    }
}

fn check_frame(frame: &Array2<f64>, w: &ProjectionWeights) -> Result<()> {
    if frame.ncols() != w.d_model() {
        return Err(invalid(format!(
            "token dimension {} does not match projection input {}",
            frame.ncols(),
            w.d_model()
        )));
    }
    Ok(())
}

fn check_video(video: &[Array2<f64>], i: usize) -> Result<()> {
    if video.is_empty() {
        return Err(invalid("empty video"));
    }
    if i >= video.len() {
        return Err(invalid(format!("frame index {i} out of range for {} frames", video.len())));
    }
    let dim = video[0].dim();
    if let Some(f) = video.iter().find(|f| f.dim() != dim) {
        return Err(invalid(format!("frames disagree in shape: {:?} vs {:?}", dim, f.dim())));
    }
    Ok(())
}

pub fn project_qkv(
    frame: &Array2<f64>,
    w: &ProjectionWeights,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    check_frame(frame, w)?;
    Ok((frame.dot(&w.w_q), frame.dot(&w.w_k), frame.dot(&w.w_v)))
}

/// Row-wise `softmax(Q K^T / sqrt(d))`.
pub fn attention_weights(q: ArrayView2<f64>, k: ArrayView2<f64>) -> Array2<f64> {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut logits = q.dot(&k.t());
    for mut row in logits.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| ((v - max) * scale).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    logits
}

/// `softmax(Q K^T / sqrt(d)) V`.
pub fn attend(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Result<Array2<f64>> {
    if k.nrows() != v.nrows() || q.ncols() != k.ncols() || k.ncols() != v.ncols() {
        return Err(invalid(format!(
            "attention shapes incompatible: q {:?}, k {:?}, v {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    if k.nrows() == 0 {
        return Err(invalid("attention over zero keys"));
    }
    if [q, k, v].iter().any(|m| m.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite("attention inputs"));
    }
    Ok(attention_weights(q.view(), k.view()).dot(v))
}

fn weighted_kv(
    video: &[Array2<f64>],
    w: &ProjectionWeights,
    refs: &[(usize, f64)],
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_frame(&video[0], w)?;
    let shape = (video[0].nrows(), w.d());
    let mut k = Array2::zeros(shape);
    let mut v = Array2::zeros(shape);
    for &(j, weight) in refs {
        k.scaled_add(weight, &video[j].dot(&w.w_k));
        v.scaled_add(weight, &video[j].dot(&w.w_v));
    }
    Ok((k, v))
}

/// Keys and values of frame 0, whatever frame is asking.
pub fn first_frame_kv(
    video: &[Array2<f64>],
    w: &ProjectionWeights,
    i: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_video(video, i)?;
    weighted_kv(video, w, &AttentionMode::FIRST_FRAME.reference_frames(video.len(), i))
}

/// Keys and values averaged over frames `[i - N, i + N]`, clipped to the
/// video and normalized by the clipped window size.
pub fn sw_cfa_kv(
    video: &[Array2<f64>],
    w: &ProjectionWeights,
    i: usize,
    radius: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_video(video, i)?;
    weighted_kv(
        video,
        w,
        &AttentionMode::sliding_window(radius).reference_frames(video.len(), i),
    )
}

/// Attention output for frame `i`: its own queries against the keys and
/// values selected by `mode`.
pub fn cross_frame_attend(
    video: &[Array2<f64>],
    w: &ProjectionWeights,
    mode: AttentionMode,
    i: usize,
) -> Result<Array2<f64>> {
    check_video(video, i)?;
    let (q, _, _) = project_qkv(&video[i], w)?;
    let (k, v) = weighted_kv(video, w, &mode.reference_frames(video.len(), i))?;
    attend(&q, &k, &v)
}
