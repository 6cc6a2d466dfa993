//! Toy epsilon-prediction U-net with a control branch.
//!
//! Layout (latent resolution `h x w`, widths `w0`, `w1`):
//!
//! ```text
//! z ── conv_in ── res0 ── attn0 ──┬── down ── res1 ── attn1 ──(+ctrl1)── up ──(+)── res2 ── conv_out ── v
//!                                 └──────────────(+ctrl0)──────────────────────┘
//! control: conv_in(z) + hint(c) ── res0 ── attn0 ── zero0 ──> ctrl0
//!                                               └── down ── res1 ── attn1 ── zero1 ──> ctrl1
//! ```
//!
//! Every transformer block (base and control) runs the configured
//! [`AttentionMode`] for its spatial attention and cross-attends to the task
//! prompt. Base weights are frozen; only the control branch is trained.
//!
//! The network output is the velocity `v = sqrt(ab) eps - sqrt(1 - ab) z0`;
//! [`NoisePredictor::predict_noise`] turns it back into `eps` with the
//! model's own noise schedule.

mod checkpoint;
mod layout;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use layout::{DenoiserDims, ParamStore};
pub use train::{train_batch_step, train_step, AdamW, TrainExample};

use ndarray::{concatenate, stack, Array1, Array3, Array4, ArrayD, Axis, Ix4};

use crate::attention::AttentionMode;
use crate::autograd::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::prompts::TaskPrompt;
use crate::scheduler::{Schedule, ScheduleConfig};
use layout::{BaseLayout, Conv, ControlLayout, Encoder, Linear, Norm, ResBlock, Transformer};

/// Anything that predicts per-frame noise for a batch of frames sharing one
/// timestep.
pub trait NoisePredictor: Sync {
    fn predict_noise(
        &self,
        latents: &[Array3<f64>],
        t: usize,
        condition: &[Array3<f64>],
        prompt: &TaskPrompt,
        mode: AttentionMode,
    ) -> Result<Vec<Array3<f64>>>;

    /// The noise schedule the predictor was trained under, if it has one.
    fn schedule(&self) -> Option<&ScheduleConfig> {
        None
    }
}

/// Sinusoidal embedding of a timestep: `[sin(t f_k), cos(t f_k)]` with
/// geometrically spaced frequencies.
pub fn timestep_embedding(t: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = (t as f64 * freq).sin();
        out[half + k] = (t as f64 * freq).cos();
    }
    out
}

#[derive(Debug, Clone)]
pub struct DenoiserModel {
    dims: DenoiserDims,
    seed: u64,
    schedule: ScheduleConfig,
    alpha_bars: Schedule,
    base: ParamStore,
    control: ParamStore,
    base_layout: BaseLayout,
    control_layout: ControlLayout,
}

impl PartialEq for DenoiserModel {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self.seed == other.seed
            && self.schedule == other.schedule
            && self.base == other.base
            && self.control == other.control
    }
}

/// Tape handles for every parameter of one store.
pub(crate) struct Params(pub(crate) Vec<Var>);

impl Params {
    fn load(tape: &mut Tape, store: &ParamStore, trainable: bool) -> Self {
        Self(store.values.iter().map(|v| tape.leaf(v.clone(), trainable)).collect())
    }
}

struct Graph<'a> {
    tape: &'a mut Tape,
    frame_refs: Vec<Vec<(usize, f64)>>,
    temb: Var,
    context: Var,
}

impl Graph<'_> {
    fn conv(&mut self, p: &Params, c: Conv, x: Var) -> Var {
        self.tape.conv2d(x, p.0[c.w], p.0[c.b], c.stride)
    }

    fn linear(&mut self, p: &Params, l: Linear, x: Var) -> Var {
        self.tape.linear(x, p.0[l.w], l.b.map(|b| p.0[b]))
    }

    fn norm(&mut self, p: &Params, n: Norm, x: Var) -> Var {
        self.tape.group_norm(x, p.0[n.gamma], p.0[n.beta], n.groups)
    }

    fn resblock(&mut self, p: &Params, r: ResBlock, temb: Var, x: Var) -> Var {
        let h = self.norm(p, r.norm1, x);
        let h = self.tape.silu(h);
        let h = self.conv(p, r.conv1, h);
        let bias = self.linear(p, r.temb, temb);
        let h = self.tape.add_channel_bias(h, bias);
        let h = self.norm(p, r.norm2, h);
        let h = self.tape.silu(h);
        let h = self.conv(p, r.conv2, h);
        self.tape.add(x, h)
    }

    fn transformer(&mut self, p: &Params, tr: Transformer, x: Var) -> Var {
        let shape = self.tape.value(x).shape().to_vec();
        let (h, w) = (shape[2], shape[3]);

        let n = self.norm(p, tr.norm1, x);
        let tok = self.tape.to_tokens(n);
        let q = self.linear(p, tr.q, tok);
        let k = self.linear(p, tr.k, tok);
        let v = self.linear(p, tr.v, tok);
        let k = self.tape.frame_mix(k, self.frame_refs.clone());
        let v = self.tape.frame_mix(v, self.frame_refs.clone());
        let a = self.tape.attention(q, k, v);
        let a = self.linear(p, tr.o, a);
        let a = self.tape.from_tokens(a, h, w);
        let x = self.tape.add(x, a);

        let n = self.norm(p, tr.norm2, x);
        let tok = self.tape.to_tokens(n);
        let q = self.linear(p, tr.cross_q, tok);
        let k = self.linear(p, tr.cross_k, self.context);
        let v = self.linear(p, tr.cross_v, self.context);
        let a = self.tape.attention(q, k, v);
        let a = self.linear(p, tr.cross_o, a);
        let a = self.tape.from_tokens(a, h, w);
        let x = self.tape.add(x, a);

        let n = self.norm(p, tr.norm3, x);
        let tok = self.tape.to_tokens(n);
        let f = self.linear(p, tr.ff1, tok);
        let f = self.tape.silu(f);
        let f = self.linear(p, tr.ff2, f);
        let f = self.tape.from_tokens(f, h, w);
        self.tape.add(x, f)
    }

    /// Runs an encoder from already-embedded input features; returns the
    /// full- and half-resolution outputs.
    fn encoder(&mut self, p: &Params, e: Encoder, features: Var) -> (Var, Var) {
        let temb = self.linear(p, e.time, self.temb);
        let temb = self.tape.silu(temb);
        let h = self.resblock(p, e.res0, temb, features);
        let h0 = self.transformer(p, e.attn0, h);
        let h = self.conv(p, e.down, h0);
        let h = self.resblock(p, e.res1, temb, h);
        let h1 = self.transformer(p, e.attn1, h);
        (h0, h1)
    }
}

/// Which parameter store, if any, records gradients in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Trainable {
    Nothing,
    Control,
}

/// Output of a forward pass recorded on a tape.
pub(crate) struct Forward {
    /// Velocity prediction, stacked over frames.
    pub v: Var,
    pub control_params: Option<Params>,
    pub residuals: Option<(Var, Var)>,
}

impl DenoiserModel {
    /// Seeded deterministic initialization under the default schedule;
    /// control output projections are zero so the control branch starts as
    /// a no-op.
    pub fn new(dims: DenoiserDims, seed: u64) -> Result<Self> {
        let mut model = Self::zeroed(dims, seed, ScheduleConfig::default())?;
        layout::initialize(&mut model.base, &mut model.control, seed);
        Ok(model)
    }

    /// A model whose every parameter is zero, to be filled in by a loader.
    pub(crate) fn zeroed(dims: DenoiserDims, seed: u64, schedule: ScheduleConfig) -> Result<Self> {
        dims.validate()?;
        let alpha_bars = schedule.build()?;
        let (mut base, base_layout) = layout::declare_base(&dims);
        let (mut control, control_layout) = layout::declare_control(&dims);
        layout::zeros(&mut base);
        layout::zeros(&mut control);
        Ok(Self { dims, seed, schedule, alpha_bars, base, control, base_layout, control_layout })
    }

    /// Replaces the noise schedule used for training targets and for turning
    /// velocity back into noise.
    pub fn with_schedule(mut self, schedule: ScheduleConfig) -> Result<Self> {
        self.alpha_bars = schedule.build()?;
        self.schedule = schedule;
        Ok(self)
    }

    pub fn schedule(&self) -> &ScheduleConfig {
        &self.schedule
    }

    pub(crate) fn noise_schedule(&self) -> &Schedule {
        &self.alpha_bars
    }

    /// `eps = sqrt(ab) v + sqrt(1 - ab) z_t`, frame by frame.
    fn velocity_to_noise(&self, v: &ArrayD<f64>, latents: &[Array3<f64>], t: usize) -> Result<Vec<Array3<f64>>> {
        let ab = self.alpha_bars.alpha_bar(t)?;
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        let out: Vec<Array3<f64>> = unstack(v)
            .into_iter()
            .zip(latents)
            .map(|(v, z)| v * a + z * s)
            .collect();
        if out.iter().any(|f| f.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("noise prediction"));
        }
        Ok(out)
    }

    pub fn dims(&self) -> &DenoiserDims {
        &self.dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn base(&self) -> &ParamStore {
        &self.base
    }

    pub fn control(&self) -> &ParamStore {
        &self.control
    }

    /// Mutable access to control weights. Base weights have no mutable
    /// accessor other than [`Self::zero_base`].
    pub fn control_mut(&mut self) -> &mut ParamStore {
        &mut self.control
    }

    /// Zeroes every base parameter, so the velocity output is zero.
    pub fn zero_base(&mut self) {
        for v in self.base.values.iter_mut() {
            v.fill(0.0);
        }
    }

    fn check_inputs(&self, latents: &[Array3<f64>], condition: Option<&[Array3<f64>]>, prompt: &TaskPrompt) -> Result<()> {
        let Some(first) = latents.first() else {
            return Err(invalid("no frames to denoise"));
        };
        let (c, h, w) = first.dim();
        if c != self.dims.latent_channels {
            return Err(Error::ShapeMismatch {
                expected: vec![self.dims.latent_channels, h, w],
                actual: vec![c, h, w],
            });
        }
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(invalid(format!("latent grid {h}x{w} must have even, nonzero sides")));
        }
        if let Some(f) = latents.iter().find(|f| f.dim() != first.dim()) {
            return Err(Error::ShapeMismatch {
                expected: first.shape().to_vec(),
                actual: f.shape().to_vec(),
            });
        }
        if let Some(cond) = condition {
            if cond.len() != latents.len() {
                return Err(invalid(format!(
                    "{} condition frames for {} latent frames",
                    cond.len(),
                    latents.len()
                )));
            }
            if let Some(f) = cond.iter().find(|f| f.dim() != first.dim()) {
                return Err(Error::ShapeMismatch {
                    expected: first.shape().to_vec(),
                    actual: f.shape().to_vec(),
                });
            }
        }
        if prompt.dim() != self.dims.prompt_dim {
            return Err(invalid(format!(
                "prompt dimension {} does not match model {}",
                prompt.dim(),
                self.dims.prompt_dim
            )));
        }
        if latents.iter().any(|f| f.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("latents"));
        }
        Ok(())
    }

    /// Records a forward pass on `tape`. `condition = None` skips the control
    /// branch entirely.
    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        latents: &[Array3<f64>],
        t: usize,
        condition: Option<&[Array3<f64>]>,
        prompt: &TaskPrompt,
        mode: AttentionMode,
        trainable: Trainable,
    ) -> Result<Forward> {
        self.check_inputs(latents, condition, prompt)?;
        if t == 0 {
            return Err(Error::TimestepOutOfRange { t, lo: 1, hi: usize::MAX });
        }
        let n = latents.len();
        let stack4 = |frames: &[Array3<f64>]| -> ArrayD<f64> {
            let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
            stack(Axis(0), &views).expect("same-shape frames").into_dyn()
        };

        let base = Params::load(tape, &self.base, false);
        let temb_row = timestep_embedding(t, self.dims.time_dim);
        let temb = tape.constant(
            stack(Axis(0), &vec![temb_row.view(); n]).expect("temb").into_dyn(),
        );
        // Unit-norm prompts are rescaled to unit RMS per entry, the scale of
        // the feature maps that attend to them.
        let tau = prompt.embedding.mapv(|v| v * (self.dims.prompt_dim as f64).sqrt());
        let tau = tau.view().insert_axis(Axis(0));
        let null = Array1::<f64>::zeros(self.dims.prompt_dim);
        let ctx_one = concatenate(Axis(0), &[tau, null.view().insert_axis(Axis(0))]).expect("context");
        let context = tape.constant(
            stack(Axis(0), &vec![ctx_one.view(); n]).expect("context").into_dyn(),
        );
        let z = tape.constant(stack4(latents));

        let mut g = Graph {
            tape,
            frame_refs: mode.mixing(n),
            temb,
            context,
        };

        let (control_params, residuals) = match condition {
            Some(cond) => {
                let cp = Params::load(g.tape, &self.control, trainable == Trainable::Control);
                let cl = self.control_layout;
                let c = g.tape.constant(stack4(cond));
                let hz = g.conv(&cp, cl.enc.conv_in, z);
                let hc = g.conv(&cp, cl.hint, c);
                let x = g.tape.add(hz, hc);
                let (c0, c1) = g.encoder(&cp, cl.enc, x);
                let r0 = g.conv(&cp, cl.zero0, c0);
                let r1 = g.conv(&cp, cl.zero1, c1);
                (Some(cp), Some((r0, r1)))
            }
            None => (None, None),
        };

        let bl = self.base_layout;
        let x = g.conv(&base, bl.enc.conv_in, z);
        let (mut skip, mut mid) = g.encoder(&base, bl.enc, x);
        if let Some((r0, r1)) = residuals {
            skip = g.tape.add(skip, r0);
            mid = g.tape.add(mid, r1);
        }
        let temb = g.linear(&base, bl.enc.time, g.temb);
        let temb = g.tape.silu(temb);
        let u = g.conv(&base, bl.up, mid);
        let u = g.tape.upsample2(u);
        let d = g.tape.add(u, skip);
        let d = g.resblock(&base, bl.res2, temb, d);
        let d = g.norm(&base, bl.norm_out, d);
        let d = g.tape.silu(d);
        let v = g.conv(&base, bl.conv_out, d);
        Ok(Forward {
            v,
            control_params,
            residuals,
        })
    }

    /// Per-frame noise prediction without the control branch.
    pub fn predict_noise_uncontrolled(
        &self,
        latents: &[Array3<f64>],
        t: usize,
        prompt: &TaskPrompt,
        mode: AttentionMode,
    ) -> Result<Vec<Array3<f64>>> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, latents, t, None, prompt, mode, Trainable::Nothing)?;
        self.velocity_to_noise(tape.value(fwd.v), latents, t)
    }

    /// Control-branch residuals at the two taps (full and half resolution),
    /// one entry per tap, each stacked over frames.
    pub fn control_residuals(
        &self,
        latents: &[Array3<f64>],
        t: usize,
        condition: &[Array3<f64>],
        prompt: &TaskPrompt,
        mode: AttentionMode,
    ) -> Result<Vec<Array4<f64>>> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, latents, t, Some(condition), prompt, mode, Trainable::Nothing)?;
        let (r0, r1) = fwd.residuals.expect("condition given");
        Ok([r0, r1]
            .iter()
            .map(|r| tape.value(*r).clone().into_dimensionality::<Ix4>().expect("rank 4"))
            .collect())
    }
}

pub(crate) fn unstack(eps: &ArrayD<f64>) -> Vec<Array3<f64>> {
    eps.outer_iter()
        .map(|f| f.to_owned().into_dimensionality().expect("rank-3 frame"))
        .collect()
}

impl NoisePredictor for DenoiserModel {
    fn predict_noise(
        &self,
        latents: &[Array3<f64>],
        t: usize,
        condition: &[Array3<f64>],
        prompt: &TaskPrompt,
        mode: AttentionMode,
    ) -> Result<Vec<Array3<f64>>> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, latents, t, Some(condition), prompt, mode, Trainable::Nothing)?;
        self.velocity_to_noise(tape.value(fwd.v), latents, t)
    }

    fn schedule(&self) -> Option<&ScheduleConfig> {
        Some(&self.schedule)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::Task;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_dims() -> DenoiserDims {
        DenoiserDims {
            latent_channels: 12,
            width0: 8,
            width1: 16,
            attn_dim: 8,
            prompt_dim: 16,
            time_dim: 8,
            ffn_mult: 2,
        }
    }

    fn frames(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<Array3<f64>> {
        (0..n)
            .map(|_| Array3::from_shape_fn((c, 4, 4), |_| rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn max_diff(a: &[Array3<f64>], b: &[Array3<f64>]) -> f64 {
        a.iter()
            .zip(b)
            .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn init_is_deterministic() {
        let a = DenoiserModel::new(small_dims(), 3).unwrap();
        let b = DenoiserModel::new(small_dims(), 3).unwrap();
        assert_eq!(a, b);
        let c = DenoiserModel::new(small_dims(), 4).unwrap();
        assert_ne!(a.base(), c.base());
    }

    #[test]
    fn control_projections_start_at_zero() {
        let m = DenoiserModel::new(small_dims(), 1).unwrap();
        for name in ["zero0.w", "zero0.b", "zero1.w", "zero1.b"] {
            assert!(m.control().get(name).unwrap().iter().all(|v| *v == 0.0));
        }
        assert_eq!(m.control().get("enc.res0.conv1.w"), m.base().get("enc.res0.conv1.w"));
    }

    #[test]
    fn fresh_control_residuals_are_zero_and_no_op() {
        let dims = small_dims();
        let m = DenoiserModel::new(dims, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = frames(&mut rng, 3, 12);
        let c = frames(&mut rng, 3, 12);
        let p = TaskPrompt::for_task(Task::Denoise, 16, 0);
        let mode = AttentionMode::sliding_window(1);
        let res = m.control_residuals(&z, 50, &c, &p, mode).unwrap();
        assert_eq!(res.len(), 2);
        assert_eq!(res[0].dim(), (3, 8, 4, 4));
        assert_eq!(res[1].dim(), (3, 16, 2, 2));
        assert!(res.iter().all(|r| r.iter().all(|v| *v == 0.0)));

        let with = m.predict_noise(&z, 50, &c, &p, mode).unwrap();
        let without = m.predict_noise_uncontrolled(&z, 50, &p, mode).unwrap();
        assert!(max_diff(&with, &without) <= 1e-12);
    }

    #[test]
    fn zero_base_predicts_scaled_latent() {
        let mut m = DenoiserModel::new(small_dims(), 5).unwrap();
        m.zero_base();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = frames(&mut rng, 2, 12);
        let p = TaskPrompt::for_task(Task::Derain, 16, 0);
        let t = 10;
        let s = (1.0 - ScheduleConfig::default().build().unwrap().alpha_bar(t).unwrap()).sqrt();
        let eps = m.predict_noise(&z, t, &z, &p, AttentionMode::default()).unwrap();
        for (e, z) in eps.iter().zip(&z) {
            assert!(e.iter().zip(z).all(|(e, z)| *e == z * s));
        }
    }

    #[test]
    fn window_zero_equals_self_attention() {
        let m = DenoiserModel::new(small_dims(), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = frames(&mut rng, 4, 12);
        let c = frames(&mut rng, 4, 12);
        let p = TaskPrompt::for_task(Task::Dehaze, 16, 0);
        let a = m.predict_noise(&z, 300, &c, &p, AttentionMode::SELF).unwrap();
        let b = m.predict_noise(&z, 300, &c, &p, AttentionMode::sliding_window(0)).unwrap();
        assert!(max_diff(&a, &b) <= 1e-10);
        let s = m.predict_noise(&z, 300, &c, &p, AttentionMode::sliding_window(2)).unwrap();
        assert!(max_diff(&a, &s) > 1e-6);
    }

    #[test]
    fn single_frame_modes_agree() {
        let m = DenoiserModel::new(small_dims(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = frames(&mut rng, 1, 12);
        let p = TaskPrompt::for_task(Task::Mp4, 16, 0);
        let a = m.predict_noise(&z, 999, &z, &p, AttentionMode::SELF).unwrap();
        for r in 0..4 {
            let b = m.predict_noise(&z, 999, &z, &p, AttentionMode::sliding_window(r)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn outputs_are_finite_and_reproducible() {
        let m = DenoiserModel::new(DenoiserDims::default(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = frames(&mut rng, 2, 12);
        let p = TaskPrompt::for_task(Task::Sr4, 64, 0);
        let a = m.predict_noise(&z, 500, &z, &p, AttentionMode::default()).unwrap();
        let b = m.predict_noise(&z, 500, &z, &p, AttentionMode::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|f| f.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = DenoiserModel::new(small_dims(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = frames(&mut rng, 2, 12);
        let p = TaskPrompt::for_task(Task::Denoise, 16, 0);
        let wrong_c = frames(&mut rng, 2, 8);
        assert!(m.predict_noise(&wrong_c, 5, &wrong_c, &p, AttentionMode::SELF).is_err());
        assert!(m.predict_noise(&z, 5, &z[..1], &p, AttentionMode::SELF).is_err());
        assert!(m.predict_noise(&z, 0, &z, &p, AttentionMode::SELF).is_err());
        assert!(m.predict_noise(&[], 5, &[], &p, AttentionMode::SELF).is_err());
        let p64 = TaskPrompt::for_task(Task::Denoise, 64, 0);
        assert!(m.predict_noise(&z, 5, &z, &p64, AttentionMode::SELF).is_err());
    }

    #[test]
    fn timestep_embeddings_are_distinct() {
        let embs: Vec<_> = (1..=1000).map(|t| timestep_embedding(t, 32)).collect();
        for w in embs.windows(2) {
            assert!(w[0].iter().zip(w[1].iter()).any(|(a, b)| (a - b).abs() > 1e-9));
        }
        assert_eq!(timestep_embedding(17, 32), timestep_embedding(17, 32));
    }
}
