//! End-to-end restoration: encode, DDIM inversion, DDIM sampling with
//! cross-frame attention and task prompts, decode. Also the fine-tuning
//! driver and the four-configuration ablation harness.

use std::io::Write;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMode;
use crate::codec::{Codec, LatentGrid, DEFAULT_PATCH};
use crate::denoiser::{train_batch_step, AdamW, DenoiserModel, NoisePredictor, TrainExample};
use crate::error::{check_shape, invalid, Result};
use crate::metrics::{clip_psnr, evaluate_clip, FlowField, MetricsRow};
use crate::prompts::{Task, TaskPrompt, DEFAULT_PROMPT_DIM, DEFAULT_PROMPT_SEED};
use crate::scheduler::{ddim_backward_step, ddim_inversion_step, select_timesteps, Schedule, ScheduleConfig};
use crate::synth::{degrade, generate_clean_video, Degradation, DegradationSpec, FrameSequence, Pattern};

/// Per-frame latents that all sit at the same noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoLatents {
    pub latents: Vec<LatentGrid>,
    pub timestep_level: usize,
}

impl VideoLatents {
    fn data(&self) -> Vec<Array3<f64>> {
        self.latents.iter().map(|l| l.data.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestoreConfig {
    pub task: Task,
    /// When false the neutral (all-zero) prompt replaces the task prompt.
    pub use_prompt: bool,
    pub mode: AttentionMode,
    pub inversion_steps: usize,
    pub sampling_steps: usize,
    pub use_inversion: bool,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub patch: usize,
    pub prompt_dim: usize,
    pub prompt_seed: u64,
}

impl RestoreConfig {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            use_prompt: true,
            mode: AttentionMode::default(),
            inversion_steps: 10,
            sampling_steps: 32,
            use_inversion: true,
            seed: 0,
            schedule: ScheduleConfig::default(),
            patch: DEFAULT_PATCH,
            prompt_dim: DEFAULT_PROMPT_DIM,
            prompt_seed: DEFAULT_PROMPT_SEED,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inversion_steps == 0 || self.sampling_steps == 0 {
            return Err(invalid("inversion_steps and sampling_steps must be >= 1"));
        }
        if self.patch == 0 || self.prompt_dim == 0 {
            return Err(invalid("patch and prompt_dim must be >= 1"));
        }
        Ok(())
    }

    pub fn prompt(&self) -> TaskPrompt {
        if self.use_prompt {
            TaskPrompt::for_task(self.task, self.prompt_dim, self.prompt_seed)
        } else {
            TaskPrompt::neutral(self.prompt_dim)
        }
    }

    fn codec_for(&self, frames: &FrameSequence) -> Result<Codec> {
        let (c, _, _) = frames.shape()?;
        Codec::new(c, self.patch)
    }
}

/// The sampling schedule, which must match the one the model was trained
/// under.
fn schedule_for(model: &dyn NoisePredictor, cfg: &RestoreConfig) -> Result<Schedule> {
    if let Some(trained) = model.schedule() {
        if *trained != cfg.schedule {
            return Err(invalid(format!(
                "restore schedule {:?} differs from the model's {:?}",
                cfg.schedule, trained
            )));
        }
    }
    cfg.schedule.build()
}

fn encode_all(codec: &Codec, frames: &FrameSequence) -> Result<Vec<LatentGrid>> {
    frames.frames.iter().map(|f| codec.encode(f)).collect()
}

/// Climbs the inversion ladder from the clean latents of `frames` to its
/// top. At each rung the noise estimate is taken at the destination level,
/// conditioned on the input frames with the same prompt and attention mode
/// as sampling.
pub fn invert_video(model: &dyn NoisePredictor, frames: &FrameSequence, cfg: &RestoreConfig) -> Result<VideoLatents> {
    cfg.validate()?;
    let sched = schedule_for(model, cfg)?;
    let codec = cfg.codec_for(frames)?;
    let grids = encode_all(&codec, frames)?;
    let cond: Vec<Array3<f64>> = grids.iter().map(|g| g.data.clone()).collect();
    let prompt = cfg.prompt();
    let ladder = select_timesteps(&sched, cfg.inversion_steps)?;
    let mut z = cond.clone();
    for (t, t_next) in ladder.ascending_pairs() {
        let eps = model.predict_noise(&z, t_next, &cond, &prompt, cfg.mode)?;
        z = z
            .iter()
            .zip(&eps)
            .map(|(zi, ei)| ddim_inversion_step(zi, ei, t, t_next, &sched))
            .collect::<Result<_>>()?;
    }
    let latents = z
        .into_iter()
        .zip(&grids)
        .map(|(d, g)| codec.wrap(d, g.source_shape))
        .collect::<Result<_>>()?;
    Ok(VideoLatents {
        latents,
        timestep_level: ladder.top(),
    })
}

/// Independent standard Gaussian latents per frame at the sampling ladder's
/// top, drawn from `cfg.seed`.
pub fn gaussian_latents(frames: &FrameSequence, cfg: &RestoreConfig) -> Result<VideoLatents> {
    cfg.validate()?;
    let sched = cfg.schedule.build()?;
    let codec = cfg.codec_for(frames)?;
    let shape = frames.shape()?;
    let lshape = codec.latent_shape(shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let latents = (0..frames.len())
        .map(|_| {
            let d = Array3::from_shape_fn(lshape, |_| StandardNormal.sample(&mut rng));
            codec.wrap(d, shape)
        })
        .collect::<Result<_>>()?;
    Ok(VideoLatents {
        latents,
        timestep_level: select_timesteps(&sched, cfg.sampling_steps)?.top(),
    })
}

/// Descends the sampling ladder from `latents` and decodes, clamping to
/// `[0, 1]`. `condition` is the degraded clip.
pub fn sample_video(
    model: &dyn NoisePredictor,
    latents: &VideoLatents,
    condition: &FrameSequence,
    cfg: &RestoreConfig,
) -> Result<FrameSequence> {
    cfg.validate()?;
    let sched = schedule_for(model, cfg)?;
    let ladder = select_timesteps(&sched, cfg.sampling_steps)?;
    if latents.timestep_level != ladder.top() {
        return Err(invalid(format!(
            "latents sit at t = {}, sampling starts at t = {}",
            latents.timestep_level,
            ladder.top()
        )));
    }
    if latents.latents.len() != condition.len() {
        return Err(invalid(format!(
            "{} latent frames for {} condition frames",
            latents.latents.len(),
            condition.len()
        )));
    }
    let codec = cfg.codec_for(condition)?;
    let cond: Vec<Array3<f64>> = encode_all(&codec, condition)?.into_iter().map(|g| g.data).collect();
    let prompt = cfg.prompt();
    let mut z = latents.data();
    for (t, t_prev) in ladder.descending_pairs() {
        let eps = model.predict_noise(&z, t, &cond, &prompt, cfg.mode)?;
        z = z
            .iter()
            .zip(&eps)
            .map(|(zi, ei)| ddim_backward_step(zi, ei, t, t_prev, &sched))
            .collect::<Result<_>>()?;
    }
    let frames = z
        .into_iter()
        .zip(&latents.latents)
        .map(|(d, g)| {
            let img = codec.decode(&codec.wrap(d, g.source_shape)?)?;
            Ok(img.mapv(|v| v.clamp(0.0, 1.0)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FrameSequence {
        frames,
        motion: condition.motion.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Restored {
    pub frames: FrameSequence,
    pub metrics: MetricsRow,
}

/// Inverts (or draws Gaussian latents), samples, and scores the result.
/// WE uses ground-truth flow when the clip carries motion, estimated flow
/// otherwise; PSNR needs `clean`.
pub fn restore_video(
    model: &dyn NoisePredictor,
    clip_id: &str,
    degraded: &FrameSequence,
    clean: Option<&FrameSequence>,
    cfg: &RestoreConfig,
) -> Result<Restored> {
    let latents = if cfg.use_inversion {
        invert_video(model, degraded, cfg)?
    } else {
        gaussian_latents(degraded, cfg)?
    };
    let frames = sample_video(model, &latents, degraded, cfg)?;
    let metrics = score(clip_id, cfg, &frames, clean)?;
    Ok(Restored { frames, metrics })
}

fn score(clip_id: &str, cfg: &RestoreConfig, frames: &FrameSequence, clean: Option<&FrameSequence>) -> Result<MetricsRow> {
    let (_, h, w) = frames.shape()?;
    let flows = frames.motion.as_ref().map(|m| FlowField::from_motion(m, h, w));
    evaluate_clip(clip_id, cfg.task.as_str(), &cfg.mode.to_string(), frames, flows.as_deref(), clean)
}

/// One paired single-image training sample.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub clean: Array3<f64>,
    pub degraded: Array3<f64>,
    pub task: Task,
}

const PATTERNS: [Pattern; 3] = [Pattern::Checker, Pattern::GradientBlobs, Pattern::TexturedNoiseField];

/// `per_task` synthetic single-image pairs for each task, cycling through
/// the patterns, with the task's default degradation. Pair `i` of task
/// index `k` uses seed `seed + 1000 k + i`.
pub fn synthetic_pairs(tasks: &[Task], per_task: usize, shape: (usize, usize, usize), seed: u64) -> Result<Vec<TrainPair>> {
    let mut out = Vec::with_capacity(tasks.len() * per_task);
    for (k, &task) in tasks.iter().enumerate() {
        for i in 0..per_task {
            let s = seed.wrapping_add(1000 * k as u64 + i as u64);
            let clip = synthetic_clip(task, PATTERNS[i % 3], shape, 1, (0, 0), s)?;
            out.push(TrainPair {
                clean: clip.clean.frames[0].clone(),
                degraded: clip.degraded.frames[0].clone(),
                task,
            });
        }
    }
    Ok(out)
}

/// A translating clean clip and its degradation under the task's default
/// parameters, both seeded by `seed`.
pub fn synthetic_clip(
    task: Task,
    pattern: Pattern,
    shape: (usize, usize, usize),
    n_frames: usize,
    velocity: (i64, i64),
    seed: u64,
) -> Result<AblationClip> {
    let clean = generate_clean_video(pattern, shape, n_frames, velocity, seed)?;
    let spec = DegradationSpec {
        params: Degradation::default_for(task),
        seed,
    };
    let degraded = degrade(&clean, &spec)?;
    Ok(AblationClip {
        id: format!("{task}-{seed}"),
        task,
        degraded,
        clean,
    })
}

/// `per_task` translating clips for each task, cycling through the
/// patterns; clip `i` of task index `k` uses seed `seed + 1000 k + i`.
pub fn synthetic_clips(
    tasks: &[Task],
    per_task: usize,
    shape: (usize, usize, usize),
    n_frames: usize,
    velocity: (i64, i64),
    seed: u64,
) -> Result<Vec<AblationClip>> {
    let mut out = Vec::with_capacity(tasks.len() * per_task);
    for (k, &task) in tasks.iter().enumerate() {
        for i in 0..per_task {
            let s = seed.wrapping_add(1000 * k as u64 + i as u64);
            out.push(synthetic_clip(task, PATTERNS[i % 3], shape, n_frames, velocity, s)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineTuneConfig {
    pub epochs: usize,
    /// Stops after this many optimizer steps when set, mid-epoch if needed.
    pub max_steps: Option<usize>,
    /// Examples averaged per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub patch: usize,
    pub prompt_seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            max_steps: None,
            batch_size: 8,
            lr: 3e-3,
            seed: 0,
            patch: DEFAULT_PATCH,
            prompt_seed: DEFAULT_PROMPT_SEED,
        }
    }
}

/// Shuffled single-image control-branch training in minibatches of
/// `cfg.batch_size`. Every example draws its own timestep uniformly from
/// `[1, T]` of the model's schedule and fresh Gaussian noise. Returns the
/// mean batch loss of every optimizer step.
pub fn fine_tune(model: &mut DenoiserModel, dataset: &[TrainPair], cfg: &FineTuneConfig) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(invalid("fine-tuning dataset is empty"));
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(invalid(format!("learning rate {} must be finite and >= 0", cfg.lr)));
    }
    if cfg.batch_size == 0 {
        return Err(invalid("batch_size must be >= 1"));
    }
    let total_steps = model.noise_schedule().total_steps();
    let shape = dataset[0].clean.dim();
    let codec = Codec::new(shape.0, cfg.patch)?;
    let lshape = codec.latent_shape(shape)?;
    for p in dataset {
        check_shape(p.clean.shape(), p.degraded.shape())?;
        check_shape(&[shape.0, shape.1, shape.2], p.clean.shape())?;
    }
    let prompt_dim = model.dims().prompt_dim;
    let prompts: Vec<TaskPrompt> = Task::ALL
        .iter()
        .map(|t| TaskPrompt::for_task(*t, prompt_dim, cfg.prompt_seed))
        .collect();
    let prompt_of = |task: Task| &prompts[Task::ALL.iter().position(|t| *t == task).expect("catalog task")];

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(model.control());
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let limit = cfg.max_steps.unwrap_or(usize::MAX);
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if losses.len() >= limit {
                break 'epochs;
            }
            let draws: Vec<(usize, Array3<f64>)> = chunk
                .iter()
                .map(|_| {
                    let t = rng.random_range(1..=total_steps);
                    (t, Array3::from_shape_fn(lshape, |_| StandardNormal.sample(&mut rng)))
                })
                .collect();
            let batch: Vec<TrainExample<'_>> = chunk
                .iter()
                .zip(&draws)
                .map(|(&i, (t, noise))| TrainExample {
                    clean: &dataset[i].clean,
                    degraded: &dataset[i].degraded,
                    prompt: prompt_of(dataset[i].task),
                    t: *t,
                    noise,
                })
                .collect();
            losses.push(train_batch_step(model, &mut opt, &codec, &batch, cfg.lr)?);
        }
    }
    Ok(losses)
}

/// Mean training loss over fixed seeded `(t, noise)` draws, with
/// each pair scored under `prompt`.
pub fn eval_loss(
    model: &DenoiserModel,
    pairs: &[&TrainPair],
    prompt: &TaskPrompt,
    draws: usize,
    patch: usize,
    seed: u64,
) -> Result<f64> {
    if pairs.is_empty() || draws == 0 {
        return Err(invalid("evaluation needs at least one pair and one draw"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for p in pairs {
        let codec = Codec::new(p.clean.dim().0, patch)?;
        let lshape = codec.latent_shape(p.clean.dim())?;
        for _ in 0..draws {
            let t = rng.random_range(1..=model.noise_schedule().total_steps());
            let noise = Array3::from_shape_fn(lshape, |_| StandardNormal.sample(&mut rng));
            let ex = TrainExample {
                clean: &p.clean,
                degraded: &p.degraded,
                prompt,
                t,
                noise: &noise,
            };
            total += model.training_loss(&codec, &ex)?;
        }
    }
    Ok(total / (pairs.len() * draws) as f64)
}

/// Trailing moving average with the given window.
pub fn smooth(losses: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(losses.len());
    let mut acc = 0.0;
    for (i, l) in losses.iter().enumerate() {
        acc += l;
        if i >= window {
            acc -= losses[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// The four configurations compared by the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationConfig {
    /// Task prompt + inversion, plain self-attention.
    #[serde(rename = "T+I")]
    TaskInversion,
    /// Task prompt + sliding-window attention, Gaussian initial latents.
    #[serde(rename = "T+S")]
    TaskSliding,
    /// Inversion + sliding-window attention, neutral prompt.
    #[serde(rename = "I+S")]
    InversionSliding,
    #[serde(rename = "full")]
    Full,
}

impl AblationConfig {
    pub const ALL: [AblationConfig; 4] = [
        AblationConfig::TaskInversion,
        AblationConfig::TaskSliding,
        AblationConfig::InversionSliding,
        AblationConfig::Full,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationConfig::TaskInversion => "T+I",
            AblationConfig::TaskSliding => "T+S",
            AblationConfig::InversionSliding => "I+S",
            AblationConfig::Full => "full",
        }
    }

    /// `(task prompt, inversion, sliding-window attention)`.
    pub fn flags(&self) -> (bool, bool, bool) {
        match self {
            AblationConfig::TaskInversion => (true, true, false),
            AblationConfig::TaskSliding => (true, false, true),
            AblationConfig::InversionSliding => (false, true, true),
            AblationConfig::Full => (true, true, true),
        }
    }

    /// `base` with this configuration's switches applied. The sliding
    /// window keeps `base`'s radius (or the default when `base` is not a
    /// sliding-window mode).
    pub fn apply(&self, base: &RestoreConfig) -> RestoreConfig {
        let (tpg, inversion, sliding) = self.flags();
        let radius = match base.mode.variant {
            crate::attention::AttentionVariant::SlidingWindowCfa => base.mode.window_radius,
            _ => crate::attention::DEFAULT_WINDOW_RADIUS,
        };
        RestoreConfig {
            use_prompt: tpg,
            use_inversion: inversion,
            mode: if sliding {
                AttentionMode::sliding_window(radius)
            } else {
                AttentionMode::SELF
            },
            ..*base
        }
    }
}

/// A degraded clip with its clean reference.
#[derive(Debug, Clone)]
pub struct AblationClip {
    pub id: String,
    pub task: Task,
    pub degraded: FrameSequence,
    pub clean: FrameSequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub fc: f64,
    pub we: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: AblationConfig,
    /// One cell per task in `AblationTable::tasks` order; each is the mean
    /// over that task's clips.
    pub cells: Vec<AblationCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub tasks: Vec<Task>,
    pub rows: Vec<AblationRow>,
    pub per_clip: Vec<MetricsRow>,
}

impl AblationTable {
    pub fn cell(&self, config: AblationConfig, task: Task) -> Option<AblationCell> {
        let ti = self.tasks.iter().position(|t| *t == task)?;
        let row = self.rows.iter().find(|r| r.config == config)?;
        Some(row.cells[ti])
    }

    /// One line per configuration with flag columns followed by
    /// `<task>_FC, <task>_WE, <task>_PSNR` for every task.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["config".to_string(), "tpg".into(), "inversion".into(), "sw_cfa".into()];
        for t in &self.tasks {
            for m in ["FC", "WE", "PSNR"] {
                header.push(format!("{t}_{m}"));
            }
        }
        w.write_record(&header)?;
        for row in &self.rows {
            let (tpg, inv, sw) = row.config.flags();
            let mut rec = vec![row.config.name().to_string(), tpg.to_string(), inv.to_string(), sw.to_string()];
            for c in &row.cells {
                rec.extend([c.fc, c.we, c.psnr].iter().map(|v| format!("{v:.6}")));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Restores every clip under each of the four configurations. Clips run in
/// parallel on the current rayon pool; results are reduced in input order
/// so the table does not depend on the thread count. Gaussian-init runs use
/// `base.seed + clip index` as their seed.
pub fn run_ablation(model: &dyn NoisePredictor, clips: &[AblationClip], base: &RestoreConfig) -> Result<AblationTable> {
    if clips.is_empty() {
        return Err(invalid("ablation needs at least one clip"));
    }
    let tasks: Vec<Task> = Task::ALL.into_iter().filter(|t| clips.iter().any(|c| c.task == *t)).collect();
    let jobs: Vec<(AblationConfig, usize)> = AblationConfig::ALL
        .iter()
        .flat_map(|c| (0..clips.len()).map(move |i| (*c, i)))
        .collect();
    let results: Vec<MetricsRow> = jobs
        .par_iter()
        .map(|(config, i)| {
            let clip = &clips[*i];
            let cfg = RestoreConfig {
                task: clip.task,
                seed: base.seed.wrapping_add(*i as u64),
                ..config.apply(base)
            };
            let mut row = restore_video(model, &clip.id, &clip.degraded, Some(&clip.clean), &cfg)?.metrics;
            row.mode = config.name().to_string();
            Ok(row)
        })
        .collect::<Result<_>>()?;

    let rows = AblationConfig::ALL
        .iter()
        .enumerate()
        .map(|(ci, config)| {
            let cells = tasks
                .iter()
                .map(|task| {
                    let picked: Vec<&MetricsRow> = (0..clips.len())
                        .filter(|i| clips[*i].task == *task)
                        .map(|i| &results[ci * clips.len() + i])
                        .collect();
                    let n = picked.len() as f64;
                    AblationCell {
                        fc: picked.iter().map(|r| r.fc).sum::<f64>() / n,
                        we: picked.iter().map(|r| r.we).sum::<f64>() / n,
                        psnr: picked.iter().map(|r| r.psnr.unwrap_or(f64::NAN)).sum::<f64>() / n,
                    }
                })
                .collect();
            AblationRow { config: *config, cells }
        })
        .collect();
    Ok(AblationTable {
        tasks,
        rows,
        per_clip: results,
    })
}

/// PSNR of `restored` against `clean`, for convenience in harnesses.
pub fn restored_psnr(restored: &FrameSequence, clean: &FrameSequence) -> Result<f64> {
    clip_psnr(restored, clean)
}

/// Noise predictors with closed-form outputs, used to pin the pipeline's
/// algebra.
pub mod fixtures {
    use super::*;

    /// Predicts the same constant for every latent entry.
    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct ConstantEps(pub f64);

    impl NoisePredictor for ConstantEps {
        fn predict_noise(
            &self,
            latents: &[Array3<f64>],
            _t: usize,
            _condition: &[Array3<f64>],
            _prompt: &TaskPrompt,
            _mode: AttentionMode,
        ) -> Result<Vec<Array3<f64>>> {
            Ok(latents.iter().map(|z| Array3::from_elem(z.dim(), self.0)).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::ConstantEps;
    use super::*;
    use crate::denoiser::DenoiserDims;
    use crate::synth::{degrade, generate_clean_video, Degradation, DegradationSpec, Pattern};

    fn clip(n: usize, seed: u64) -> FrameSequence {
        generate_clean_video(Pattern::GradientBlobs, (3, 16, 16), n, (1, 0), seed).unwrap()
    }

    fn max_abs(a: &FrameSequence, b: &FrameSequence) -> f64 {
        a.frames
            .iter()
            .zip(&b.frames)
            .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs()))
            .fold(0.0, f64::max)
    }

    fn tiny_model(seed: u64) -> DenoiserModel {
        DenoiserModel::new(
            DenoiserDims {
                latent_channels: 12,
                width0: 8,
                width1: 16,
                attn_dim: 8,
                prompt_dim: 16,
                time_dim: 8,
                ffn_mult: 2,
            },
            seed,
        )
        .unwrap()
    }

    fn tiny_cfg(task: Task) -> RestoreConfig {
        RestoreConfig {
            prompt_dim: 16,
            inversion_steps: 4,
            sampling_steps: 6,
            ..RestoreConfig::new(task)
        }
    }

    #[test]
    fn zero_eps_inversion_is_pure_rescaling() {
        let v = clip(3, 1);
        let cfg = RestoreConfig::new(Task::Denoise);
        let lat = invert_video(&ConstantEps(0.0), &v, &cfg).unwrap();
        let sched = cfg.schedule.build().unwrap();
        let scale = sched.alpha_bar(lat.timestep_level).unwrap().sqrt();
        let codec = Codec::new(3, DEFAULT_PATCH).unwrap();
        for (l, f) in lat.latents.iter().zip(&v.frames) {
            let expect = codec.encode(f).unwrap().data * scale;
            let err = (&l.data - &expect).iter().fold(0.0f64, |m, d| m.max(d.abs()));
            assert!(err <= 1e-12 * scale, "{err}");
        }
    }

    #[test]
    fn identity_fixtures_round_trip() {
        let v = clip(4, 2);
        for (eps, tol) in [(0.0, 1e-12), (0.3, 1e-8)] {
            let cfg = RestoreConfig {
                sampling_steps: 10,
                ..RestoreConfig::new(Task::Denoise)
            };
            let out = restore_video(&ConstantEps(eps), "c", &v, Some(&v), &cfg).unwrap();
            assert!(max_abs(&out.frames, &v) <= tol, "eps {eps}");
            assert_eq!(out.frames.len(), v.len());
        }
    }

    #[test]
    fn zero_eps_preserves_warping_error() {
        let clean = clip(4, 3);
        let deg = degrade(&clean, &DegradationSpec { params: Degradation::Denoise { sigma: 0.1 }, seed: 2 }).unwrap();
        let cfg = RestoreConfig {
            sampling_steps: 10,
            ..RestoreConfig::new(Task::Denoise)
        };
        let out = restore_video(&ConstantEps(0.0), "c", &deg, None, &cfg).unwrap();
        let before = score("c", &cfg, &deg, None).unwrap();
        assert!((out.metrics.we - before.we).abs() < 1e-9);
    }

    #[test]
    fn mismatched_ladder_level_is_rejected() {
        let v = clip(2, 4);
        let cfg = RestoreConfig::new(Task::Denoise);
        let mut lat = invert_video(&ConstantEps(0.0), &v, &cfg).unwrap();
        lat.timestep_level -= 1;
        assert!(sample_video(&ConstantEps(0.0), &lat, &v, &cfg).is_err());
    }

    #[test]
    fn inversion_is_seed_independent_and_gaussian_is_not() {
        let m = tiny_model(5);
        let v = clip(2, 5);
        let run = |seed, inv| {
            let cfg = RestoreConfig {
                seed,
                use_inversion: inv,
                ..tiny_cfg(Task::Denoise)
            };
            restore_video(&m, "c", &v, None, &cfg).unwrap().frames
        };
        assert_eq!(run(1, true), run(2, true));
        assert_ne!(run(1, false), run(2, false));
    }

    #[test]
    fn single_frame_modes_agree() {
        let m = tiny_model(6);
        let v = clip(1, 6);
        let run = |mode| {
            let cfg = RestoreConfig { mode, ..tiny_cfg(Task::Dehaze) };
            restore_video(&m, "c", &v, None, &cfg).unwrap().frames
        };
        let base = run(AttentionMode::SELF);
        for n in 0..4 {
            assert!(max_abs(&run(AttentionMode::sliding_window(n)), &base) <= 1e-12);
        }
    }

    #[test]
    fn fine_tune_zero_epochs_is_noop() {
        let mut m = tiny_model(7);
        let before = m.clone();
        let v = clip(1, 7);
        let pair = TrainPair {
            clean: v.frames[0].clone(),
            degraded: v.frames[0].clone(),
            task: Task::Denoise,
        };
        let cfg = FineTuneConfig { epochs: 0, ..FineTuneConfig::default() };
        assert!(fine_tune(&mut m, &[pair.clone()], &cfg).unwrap().is_empty());
        assert_eq!(m.control(), before.control());

        let cfg = FineTuneConfig { epochs: 3, max_steps: Some(2), ..FineTuneConfig::default() };
        let losses = fine_tune(&mut m, &[pair.clone(), pair], &cfg).unwrap();
        assert_eq!(losses.len(), 2);
        assert_eq!(m.base(), before.base());
        assert!(fine_tune(&mut m, &[], &cfg).is_err());
    }

    #[test]
    fn ablation_table_shape_and_flags() {
        let clips: Vec<AblationClip> = Task::ALL
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let clean = clip(2, i as u64);
                let degraded = degrade(&clean, &DegradationSpec { params: Degradation::default_for(*t), seed: 1 }).unwrap();
                AblationClip { id: format!("c{i}"), task: *t, degraded, clean }
            })
            .collect();
        let cfg = RestoreConfig {
            sampling_steps: 3,
            inversion_steps: 3,
            ..RestoreConfig::new(Task::Denoise)
        };
        let table = run_ablation(&ConstantEps(0.0), &clips, &cfg).unwrap();
        assert_eq!(table.rows.len(), 4);
        assert!(table.rows.iter().all(|r| r.cells.len() == 5));
        assert_eq!(table.per_clip.len(), 20);
        assert_eq!(AblationConfig::TaskInversion.flags(), (true, true, false));
        assert_eq!(AblationConfig::TaskSliding.flags(), (true, false, true));
        assert_eq!(AblationConfig::InversionSliding.flags(), (false, true, true));
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("config,tpg,inversion,sw_cfa,dehaze_FC,dehaze_WE,dehaze_PSNR,"));
        // Zero-eps with inversion returns the degraded clip itself.
        let full = table.cell(AblationConfig::Full, Task::Denoise).unwrap();
        let ti = table.cell(AblationConfig::TaskInversion, Task::Denoise).unwrap();
        assert_eq!(full, ti);
    }

    #[test]
    fn smoothing() {
        assert_eq!(smooth(&[2.0, 4.0, 6.0, 8.0], 2), vec![2.0, 3.0, 5.0, 7.0]);
    }
}
