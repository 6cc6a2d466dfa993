//! Temporal consistency (FC, WE), PSNR, and a block-matching flow estimator.

use std::io::Write;

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, invalid, Error, Result};
use crate::synth::FrameSequence;

pub const PSNR_CAP: f64 = 99.0;
pub const DEFAULT_BLOCK: usize = 7;
pub const DEFAULT_RADIUS: usize = 4;

/// Per-pixel displacement from frame `t` to frame `t + 1`: content at
/// `(y, x)` in frame `t` sits at `(y + dy, x + dx)` in frame `t + 1`.
///
/// With `wrap` set, warp sources are taken modulo the frame size (exact for
/// circularly translated clips); otherwise out-of-bounds sources are masked.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub dx: Array2<f64>,
    pub dy: Array2<f64>,
    pub wrap: bool,
}

impl FlowField {
    pub fn constant(h: usize, w: usize, dx: f64, dy: f64, wrap: bool) -> Self {
        Self {
            dx: Array2::from_elem((h, w), dx),
            dy: Array2::from_elem((h, w), dy),
            wrap,
        }
    }

    /// Exact flows of a circularly translated clip.
    pub fn from_motion(motion: &[(i64, i64)], h: usize, w: usize) -> Vec<Self> {
        motion
            .iter()
            .map(|&(dx, dy)| Self::constant(h, w, dx as f64, dy as f64, true))
            .collect()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.dx.dim()
    }
}

fn centered(frame: &Array3<f64>) -> (Vec<f64>, bool) {
    let first = frame.iter().next().copied().unwrap_or(0.0);
    let constant = frame.iter().all(|v| *v == first);
    let mean = frame.mean().unwrap_or(0.0);
    (frame.iter().map(|v| v - mean).collect(), constant)
}

fn pair_cosine(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    let (ca, const_a) = centered(a);
    let (cb, const_b) = centered(b);
    if const_a || const_b {
        // Cosine is undefined for a zero centered vector.
        return if const_a && const_b && a == b { 1.0 } else { 0.0 };
    }
    let dot: f64 = ca.iter().zip(&cb).map(|(x, y)| x * y).sum();
    let na: f64 = ca.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = cb.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean cosine similarity of consecutive centered frames, scaled by 10.
///
/// A constant frame has no direction; a pair scores 1 when both frames are
/// the same constant image and 0 otherwise.
pub fn frame_consistency(video: &FrameSequence) -> Result<f64> {
    if video.len() < 2 {
        return Err(invalid("frame consistency needs at least 2 frames"));
    }
    video.shape()?;
    let sum: f64 = video.frames.windows(2).map(|p| pair_cosine(&p[0], &p[1])).sum();
    Ok(10.0 * sum / (video.len() - 1) as f64)
}

fn sample_bilinear(frame: &Array3<f64>, c: usize, y: f64, x: f64, wrap: bool) -> Option<f64> {
    let (_, h, w) = frame.dim();
    let (hf, wf) = (h as f64, w as f64);
    let (y, x) = if wrap {
        (y.rem_euclid(hf), x.rem_euclid(wf))
    } else if y < 0.0 || x < 0.0 || y > hf - 1.0 || x > wf - 1.0 {
        return None;
    } else {
        (y, x)
    };
    let (y0, x0) = (y.floor(), x.floor());
    let (ty, tx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as usize % h, x0 as usize % w);
    let (y1, x1) = ((y0 + 1) % h, (x0 + 1) % w);
    let at = |yy: usize, xx: usize| frame[[c, yy, xx]];
    // Integer positions read a single pixel so exact flows stay exact.
    let top = if tx == 0.0 { at(y0, x0) } else { (1.0 - tx) * at(y0, x0) + tx * at(y0, x1) };
    if ty == 0.0 {
        return Some(top);
    }
    let bottom = if tx == 0.0 { at(y1, x0) } else { (1.0 - tx) * at(y1, x0) + tx * at(y1, x1) };
    Some((1.0 - ty) * top + ty * bottom)
}

/// Warps `next` backward onto the grid of the current frame and returns the
/// MSE over valid pixels, or `None` when no pixel is valid.
fn pair_warp_mse(cur: &Array3<f64>, next: &Array3<f64>, flow: &FlowField) -> Option<f64> {
    let (c, h, w) = cur.dim();
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let sy = y as f64 + flow.dy[[y, x]];
            let sx = x as f64 + flow.dx[[y, x]];
            for ch in 0..c {
                if let Some(v) = sample_bilinear(next, ch, sy, sx, flow.wrap) {
                    let d = cur[[ch, y, x]] - v;
                    sum += d * d;
                    count += 1;
                }
            }
        }
    }
    (count > 0).then(|| sum / count as f64)
}

/// Mean over consecutive pairs of the flow-aligned MSE, scaled by 1000.
pub fn warping_error(video: &FrameSequence, flows: &[FlowField]) -> Result<f64> {
    let (_, h, w) = video.shape()?;
    if flows.len() + 1 != video.len() {
        return Err(invalid(format!(
            "{} flows for {} frames; expected {}",
            flows.len(),
            video.len(),
            video.len().saturating_sub(1)
        )));
    }
    if video.len() < 2 {
        return Err(invalid("warping error needs at least 2 frames"));
    }
    let mut total = 0.0;
    for (pair, flow) in video.frames.windows(2).zip(flows) {
        check_shape(&[h, w], &[flow.dim().0, flow.dim().1])?;
        if flow.dx.iter().chain(flow.dy.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow"));
        }
        total += pair_warp_mse(&pair[0], &pair[1], flow)
            .ok_or_else(|| invalid("flow leaves no valid pixel in a frame pair"))?;
    }
    Ok(1000.0 * total / flows.len() as f64)
}

/// Exhaustive block-matching SAD search. Each `block x block` tile (partial
/// at the borders) gets the integer displacement within `±radius` whose
/// displaced tile stays in bounds and minimises SAD; ties go to the smaller
/// displacement magnitude, then to the lexicographically smaller `(dx, dy)`.
pub fn estimate_flow(a: &Array3<f64>, b: &Array3<f64>, block: usize, radius: usize) -> Result<FlowField> {
    check_shape(a.shape(), b.shape())?;
    if block == 0 {
        return Err(invalid("block must be >= 1"));
    }
    let (c, h, w) = a.dim();
    let r = radius as i64;
    let mut flow = FlowField::constant(h, w, 0.0, 0.0, false);
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let (ey, ex) = ((by + block).min(h), (bx + block).min(w));
            let mut best: Option<(f64, i64, i64, i64)> = None;
            for dx in -r..=r {
                for dy in -r..=r {
                    let inside = by as i64 + dy >= 0
                        && bx as i64 + dx >= 0
                        && ey as i64 + dy <= h as i64
                        && ex as i64 + dx <= w as i64;
                    if !inside {
                        continue;
                    }
                    let mut sad = 0.0;
                    for ch in 0..c {
                        for y in by..ey {
                            for x in bx..ex {
                                let ty = (y as i64 + dy) as usize;
                                let tx = (x as i64 + dx) as usize;
                                sad += (a[[ch, y, x]] - b[[ch, ty, tx]]).abs();
                            }
                        }
                    }
                    let key = (sad, dx * dx + dy * dy, dx, dy);
                    let better = match best {
                        None => true,
                        Some(cur) => key.0 < cur.0 || (key.0 == cur.0 && (key.1, key.2, key.3) < (cur.1, cur.2, cur.3)),
                    };
                    if better {
                        best = Some(key);
                    }
                }
            }
            let (_, _, dx, dy) = best.expect("zero displacement is always in bounds");
            flow.dx.slice_mut(ndarray::s![by..ey, bx..ex]).fill(dx as f64);
            flow.dy.slice_mut(ndarray::s![by..ey, bx..ex]).fill(dy as f64);
        }
    }
    Ok(flow)
}

/// Flows between consecutive frames of `video` from [`estimate_flow`].
pub fn estimate_video_flows(video: &FrameSequence, block: usize, radius: usize) -> Result<Vec<FlowField>> {
    video
        .frames
        .windows(2)
        .map(|p| estimate_flow(&p[0], &p[1], block, radius))
        .collect()
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    check_shape(a.shape(), b.shape())?;
    let mut sum = 0.0;
    Zip::from(a).and(b).for_each(|x, y| sum += (x - y) * (x - y));
    Ok(psnr_from_mse(sum / a.len().max(1) as f64))
}

/// PSNR of the MSE pooled over every frame of two equal-length clips.
pub fn clip_psnr(a: &FrameSequence, b: &FrameSequence) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid(format!("clip lengths differ: {} vs {}", a.len(), b.len())));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (x, y) in a.frames.iter().zip(&b.frames) {
        check_shape(x.shape(), y.shape())?;
        Zip::from(x).and(y).for_each(|p, q| sum += (p - q) * (p - q));
        n += x.len();
    }
    Ok(psnr_from_mse(sum / n.max(1) as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub clip_id: String,
    pub task: String,
    pub mode: String,
    #[serde(rename = "FC")]
    pub fc: f64,
    #[serde(rename = "WE")]
    pub we: f64,
    #[serde(rename = "PSNR")]
    pub psnr: Option<f64>,
}

/// Computes one row. Ground-truth flows are used when given, otherwise they
/// are estimated with the default block matcher.
pub fn evaluate_clip(
    clip_id: &str,
    task: &str,
    mode: &str,
    video: &FrameSequence,
    flows: Option<&[FlowField]>,
    clean: Option<&FrameSequence>,
) -> Result<MetricsRow> {
    let estimated;
    let flows = match flows {
        Some(f) => f,
        None => {
            estimated = estimate_video_flows(video, DEFAULT_BLOCK, DEFAULT_RADIUS)?;
            &estimated
        }
    };
    let (fc, we) = if video.len() >= 2 {
        (frame_consistency(video)?, warping_error(video, flows)?)
    } else {
        (10.0, 0.0)
    };
    Ok(MetricsRow {
        clip_id: clip_id.to_string(),
        task: task.to_string(),
        mode: mode.to_string(),
        fc,
        we,
        psnr: clean.map(|c| clip_psnr(video, c)).transpose()?,
    })
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{circular_shift, generate_clean_video, Pattern};
    use proptest::prelude::*;

    fn textured(seed: u64, h: usize, w: usize) -> Array3<f64> {
        generate_clean_video(Pattern::TexturedNoiseField, (3, h, w), 1, (0, 0), seed)
            .unwrap()
            .frames
            .remove(0)
    }

    fn seq(frames: Vec<Array3<f64>>) -> FrameSequence {
        FrameSequence::new(frames).unwrap()
    }

    #[test]
    fn static_clip_scores() {
        let f = textured(1, 16, 16);
        let v = seq(vec![f.clone(), f.clone(), f]);
        assert_eq!(frame_consistency(&v).unwrap(), 10.0);
        let flows = vec![FlowField::constant(16, 16, 0.0, 0.0, false); 2];
        assert_eq!(warping_error(&v, &flows).unwrap(), 0.0);
    }

    #[test]
    fn orthogonal_and_mixed_cosines() {
        // Centered vectors [1,-1,1,-1] and [1,1,-1,-1] are orthogonal.
        let a = Array3::from_shape_vec((1, 2, 2), vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let b = Array3::from_shape_vec((1, 2, 2), vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(frame_consistency(&seq(vec![a.clone(), b.clone()])).unwrap().abs() < 1e-15);

        // cos(a, c) = 0.5 with c = a + sqrt(3) b in centered coordinates.
        let s3 = 3f64.sqrt();
        let c = Array3::from_shape_fn((1, 2, 2), |i| a[i] + s3 * b[i]);
        let fc = frame_consistency(&seq(vec![a, c.clone(), c])).unwrap();
        assert!((fc - 7.5).abs() < 1e-12, "{fc}");
    }

    #[test]
    fn constant_frame_rule() {
        let k = Array3::from_elem((1, 4, 4), 0.3);
        let j = Array3::from_elem((1, 4, 4), 0.6);
        let t = Array3::from_shape_fn((1, 4, 4), |(_, y, x)| (y * 4 + x) as f64);
        assert_eq!(frame_consistency(&seq(vec![k.clone(), k.clone()])).unwrap(), 10.0);
        assert_eq!(frame_consistency(&seq(vec![k.clone(), j])).unwrap(), 0.0);
        assert_eq!(frame_consistency(&seq(vec![k, t])).unwrap(), 0.0);
        assert!(frame_consistency(&seq(vec![textured(3, 4, 4)])).is_err());
    }

    #[test]
    fn ground_truth_flow_gives_zero_warping_error() {
        let clip = generate_clean_video(Pattern::GradientBlobs, (3, 24, 24), 6, (2, -3), 5).unwrap();
        let flows = FlowField::from_motion(clip.motion.as_ref().unwrap(), 24, 24);
        assert!(warping_error(&clip, &flows).unwrap() <= 1e-12);
    }

    #[test]
    fn shifted_flow_matches_direct_mse() {
        let f = textured(4, 12, 10);
        let v = seq(vec![f.clone(), f.clone()]);
        let we = warping_error(&v, &[FlowField::constant(12, 10, 1.0, 0.0, false)]).unwrap();
        let mut sum = 0.0;
        let mut n = 0;
        for c in 0..3 {
            for y in 0..12 {
                for x in 0..9 {
                    sum += (f[[c, y, x]] - f[[c, y, x + 1]]).powi(2);
                    n += 1;
                }
            }
        }
        assert!((we - 1000.0 * sum / n as f64).abs() < 1e-12);
        assert!(warping_error(&v, &[]).is_err());
    }

    #[test]
    fn half_pixel_flow_interpolates() {
        let f = Array3::from_shape_fn((1, 1, 3), |(_, _, x)| x as f64);
        let g = Array3::zeros((1, 1, 3));
        // Source x + 0.5 on a ramp reads x + 0.5; valid for x in {0, 1}.
        let v = seq(vec![g, f]);
        let we = warping_error(&v, &[FlowField::constant(1, 3, 0.5, 0.0, false)]).unwrap();
        assert!((we - 1000.0 * (0.25 + 2.25) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn block_matching_recovers_shift() {
        let a = textured(6, 32, 32);
        let b = circular_shift(&a, 2, 0);
        let flow = estimate_flow(&a, &b, DEFAULT_BLOCK, DEFAULT_RADIUS).unwrap();
        let mut hits = 0;
        let mut total = 0;
        for by in (0..32).step_by(7) {
            for bx in (0..32).step_by(7) {
                if bx + 7 + 2 > 32 {
                    continue;
                }
                total += 1;
                hits += usize::from(flow.dx[[by, bx]] == 2.0 && flow.dy[[by, bx]] == 0.0);
            }
        }
        assert_eq!(hits, total);
        let zero = estimate_flow(&a, &a, 7, 4).unwrap();
        assert!(zero.dx.iter().chain(zero.dy.iter()).all(|v| *v == 0.0));
        let r0 = estimate_flow(&a, &b, 7, 0).unwrap();
        assert!(r0.dx.iter().all(|v| *v == 0.0));
        assert!(estimate_flow(&a, &textured(1, 16, 16), 7, 4).is_err());
    }

    #[test]
    fn tie_break_prefers_small_then_lexicographic() {
        // A constant image matches every candidate equally.
        let k = Array3::from_elem((1, 8, 8), 0.5);
        let flow = estimate_flow(&k, &k, 4, 2).unwrap();
        assert!(flow.dx.iter().all(|v| *v == 0.0));
        // Period-2 stripes shifted by one: dx = -1 and dx = 1 both match.
        let a = Array3::from_shape_fn((1, 4, 12), |(_, _, x)| (x % 2) as f64);
        let b = circular_shift(&a, 1, 0);
        let flow = estimate_flow(&a, &b, 4, 2).unwrap();
        assert_eq!(flow.dx[[0, 4]], -1.0);
        assert_eq!(flow.dy[[0, 4]], 0.0);
    }

    #[test]
    fn psnr_values() {
        let a = Array3::<f64>::zeros((1, 2, 2));
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Array3::from_elem((1, 2, 2), 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let c = Array3::from_elem((1, 2, 2), 1.0);
        assert!(psnr(&a, &c).unwrap().abs() < 1e-12);
        assert!(psnr(&a, &Array3::zeros((1, 2, 3))).is_err());
    }

    #[test]
    fn csv_has_expected_columns() {
        let f = textured(7, 8, 8);
        let v = seq(vec![f.clone(), f]);
        let row = evaluate_clip("c0", "denoise", "swcfa3", &v, None, Some(&v)).unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&[row], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("clip_id,task,mode,FC,WE,PSNR\n"), "{text}");
        assert!(text.contains("c0,denoise,swcfa3,10.0,0.0,99.0"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn metrics_ignore_global_offset(seed in 0u64..1000, offset in -0.5f64..0.5, v in -2i64..=2) {
            let clip = generate_clean_video(Pattern::TexturedNoiseField, (1, 12, 12), 4, (v, 1), seed).unwrap();
            let flows = FlowField::from_motion(clip.motion.as_ref().unwrap(), 12, 12);
            let shifted = seq(clip.frames.iter().map(|f| f + offset).collect());
            let (fc, fc2) = (frame_consistency(&clip).unwrap(), frame_consistency(&shifted).unwrap());
            prop_assert!((-10.0..=10.0).contains(&fc));
            prop_assert!((fc - fc2).abs() < 1e-9);
            let wrong = vec![FlowField::constant(12, 12, 0.0, 0.0, false); 3];
            let (we, we2) = (warping_error(&clip, &wrong).unwrap(), warping_error(&shifted, &wrong).unwrap());
            prop_assert!(we >= 0.0);
            prop_assert!((we - we2).abs() < 1e-9);
            prop_assert!(warping_error(&clip, &flows).unwrap() <= 1e-12);
        }

        #[test]
        fn block_matching_is_translation_consistent(seed in 0u64..1000, dx in -3i64..=3, dy in -3i64..=3) {
            let a = textured(seed, 24, 24);
            let b = circular_shift(&a, dx, dy);
            let flow = estimate_flow(&a, &b, 6, 3).unwrap();
            // Interior tiles whose displaced copy stays in bounds.
            for by in (6..18).step_by(6) {
                for bx in (6..18).step_by(6) {
                    prop_assert_eq!(flow.dx[[by, bx]], dx as f64);
                    prop_assert_eq!(flow.dy[[by, bx]], dy as f64);
                }
            }
        }
    }
}
