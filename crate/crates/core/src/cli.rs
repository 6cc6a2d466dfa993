//! Argument parsing and command dispatch for the `tdm` binary.
//!
//! Every setting lives in [`Settings`]. A JSON file passed with `--config`
//! fills it first, then any flag given on the command line overrides the
//! file. All randomness derives from `seed`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMode, AttentionVariant, DEFAULT_WINDOW_RADIUS};
use crate::codec::DEFAULT_PATCH;
use crate::denoiser::{load_checkpoint, save_checkpoint, DenoiserDims, DenoiserModel};
use crate::error::{invalid, Error, Result};
use crate::metrics::{evaluate_clip, write_metrics_csv, FlowField};
use crate::pipeline::{
    fine_tune, invert_video, restore_video, run_ablation, smooth, synthetic_clips, synthetic_pairs, AblationClip,
    FineTuneConfig, RestoreConfig,
};
use crate::prompts::{Task, DEFAULT_PROMPT_SEED};
use crate::scheduler::ScheduleConfig;
use crate::synth::io::{encode_raw_frame, read_clip, write_clip, Manifest, MAX_FRAMES, MAX_SIDE};
use crate::synth::{degrade, generate_clean_video, Degradation, DegradationSpec, Pattern};

/// Window used for the smoothed column of `losses.csv`.
const LOSS_WINDOW: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Synth,
    Train,
    Restore,
    Invert,
    Metrics,
    Ablate,
}

impl Command {
    fn default_out(&self) -> &'static str {
        match self {
            Command::Synth => "clip",
            Command::Train => "run",
            Command::Restore => "restored",
            Command::Invert => "inverted",
            Command::Metrics => "metrics",
            Command::Ablate => "ablation",
        }
    }
}

/// Settings shared by all commands; each command reads the ones it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Settings {
    pub seed: u64,
    /// Worker threads for clip- and frame-level parallelism.
    pub threads: usize,
    pub out: Option<PathBuf>,
    #[serde(rename = "in")]
    pub input: Option<PathBuf>,
    #[serde(rename = "ref")]
    pub reference: Option<PathBuf>,
    /// Trained model; a freshly initialized one built from `dims`,
    /// `schedule` and `seed` is used when absent.
    pub checkpoint: Option<PathBuf>,
    pub task: Option<Task>,
    pub mode: AttentionVariant,
    /// Signed so that negative input is reported rather than wrapped.
    pub window_radius: i64,
    pub inversion_steps: usize,
    pub sampling_steps: usize,
    pub use_inversion: bool,
    pub use_prompt: bool,
    pub schedule: ScheduleConfig,
    pub patch: usize,
    pub prompt_seed: u64,
    pub dims: DenoiserDims,

    pub pattern: Pattern,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub velocity: [i64; 2],
    /// Overrides the task's default degradation in `synth`.
    pub degradation: Option<Degradation>,

    pub tasks: Vec<Task>,
    /// Training pairs per task.
    pub pairs: usize,
    /// Side of the square training images.
    pub size: usize,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    /// Synthesized ablation clips per task when no input directory is given.
    pub clips: usize,
}

impl Default for Settings {
    fn default() -> Self {
        let ft = FineTuneConfig::default();
        Self {
            seed: 0,
            threads: 1,
            out: None,
            input: None,
            reference: None,
            checkpoint: None,
            task: None,
            mode: AttentionVariant::SlidingWindowCfa,
            window_radius: DEFAULT_WINDOW_RADIUS as i64,
            inversion_steps: 10,
            sampling_steps: 32,
            use_inversion: true,
            use_prompt: true,
            schedule: ScheduleConfig::default(),
            patch: DEFAULT_PATCH,
            prompt_seed: DEFAULT_PROMPT_SEED,
            dims: DenoiserDims::default(),
            pattern: Pattern::Checker,
            frames: 8,
            height: 64,
            width: 64,
            channels: 3,
            velocity: [1, 0],
            degradation: None,
            tasks: Task::ALL.to_vec(),
            pairs: 24,
            size: 48,
            epochs: 1000,
            max_steps: Some(500),
            batch_size: ft.batch_size,
            lr: ft.lr,
            clips: 10,
        }
    }
}

impl Settings {
    pub fn attention_mode(&self) -> AttentionMode {
        match self.mode {
            AttentionVariant::SelfAttention => AttentionMode::SELF,
            AttentionVariant::FirstFrameCfa => AttentionMode::FIRST_FRAME,
            AttentionVariant::SlidingWindowCfa => AttentionMode::sliding_window(self.window_radius.max(0) as usize),
        }
    }

    /// Restoration settings for `task` on `model`.
    pub fn restore_config(&self, task: Task, model: &DenoiserModel) -> RestoreConfig {
        RestoreConfig {
            task,
            use_prompt: self.use_prompt,
            mode: self.attention_mode(),
            inversion_steps: self.inversion_steps,
            sampling_steps: self.sampling_steps,
            use_inversion: self.use_inversion,
            seed: self.seed,
            schedule: *model.schedule(),
            patch: self.patch,
            prompt_dim: model.dims().prompt_dim,
            prompt_seed: self.prompt_seed,
        }
    }

    pub fn fine_tune_config(&self) -> FineTuneConfig {
        FineTuneConfig {
            epochs: self.epochs,
            max_steps: self.max_steps,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            patch: self.patch,
            prompt_seed: self.prompt_seed,
        }
    }

    /// Checks every field against the preconditions of the module that
    /// consumes it.
    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(invalid("threads must be >= 1"));
        }
        if self.window_radius < 0 {
            return Err(invalid("window_radius must be ≥ 0"));
        }
        if self.inversion_steps == 0 {
            return Err(invalid("inversion_steps must be >= 1"));
        }
        if self.sampling_steps == 0 {
            return Err(invalid("sampling_steps must be >= 1"));
        }
        for (name, v) in [("inversion_steps", self.inversion_steps), ("sampling_steps", self.sampling_steps)] {
            if v > self.schedule.total_steps {
                return Err(invalid(format!(
                    "{name} = {v} exceeds schedule.total_steps = {}",
                    self.schedule.total_steps
                )));
            }
        }
        self.schedule
            .build()
            .map_err(|e| invalid(format!("schedule: {e}")))?;
        self.dims.validate().map_err(|e| invalid(format!("dims: {e}")))?;
        if self.patch == 0 || self.patch > 16 {
            return Err(invalid(format!("patch must be in [1, 16], got {}", self.patch)));
        }
        if !matches!(self.channels, 1 | 3) {
            return Err(invalid(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if !(1..=MAX_FRAMES).contains(&self.frames) {
            return Err(invalid(format!("frames must be in [1, {MAX_FRAMES}], got {}", self.frames)));
        }
        for (name, v) in [("height", self.height), ("width", self.width), ("size", self.size)] {
            if !(1..=MAX_SIDE).contains(&v) {
                return Err(invalid(format!("{name} must be in [1, {MAX_SIDE}], got {v}")));
            }
        }
        if let Some(d) = &self.degradation {
            d.validate().map_err(|e| invalid(format!("degradation: {e}")))?;
            if self.task.is_some_and(|t| t != d.task()) {
                return Err(invalid("task disagrees with degradation"));
            }
        }
        if self.tasks.is_empty() {
            return Err(invalid("tasks must name at least one task"));
        }
        if self.pairs == 0 {
            return Err(invalid("pairs must be >= 1"));
        }
        if self.clips == 0 {
            return Err(invalid("clips must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(invalid(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        Ok(())
    }
}

/// A parsed and validated invocation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: Command,
    pub settings: Settings,
}

impl RunConfig {
    pub fn out_dir(&self) -> PathBuf {
        self.settings
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from(self.command.default_out()))
    }
}

/// Parses and validates a JSON settings file. Unknown keys are rejected.
pub fn parse_settings_json(bytes: &[u8]) -> Result<Settings> {
    let s: Settings = serde_json::from_slice(bytes)?;
    s.validate()?;
    Ok(s)
}

#[derive(Debug)]
pub enum CliError {
    /// Bad command line, or a help/version request.
    Usage(clap::Error),
    Invalid(Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(e) => write!(f, "{e}"),
            CliError::Invalid(e) => write!(f, "error: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Invalid(e)
    }
}

#[derive(Parser, Debug)]
#[command(name = "tdm", version, about = "Temporally consistent diffusion video restoration")]
struct Cli {
    #[command(subcommand)]
    command: CommandArgs,
    /// JSON settings file; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum CommandArgs {
    /// Write a translating synthetic clip, plus a degraded copy when a task is given.
    Synth {
        #[command(flatten)]
        clip: ClipArgs,
        #[arg(long)]
        task: Option<Task>,
    },
    /// Fine-tune the control branch on synthetic single-image pairs.
    Train(TrainArgs),
    /// Restore a degraded clip.
    Restore {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long)]
        task: Option<Task>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Write the inverted latents of a clip.
    Invert {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long)]
        task: Option<Task>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Score a clip: FC, WE and, with a reference, PSNR.
    Metrics {
        #[command(flatten)]
        io: IoArgs,
    },
    /// Run the four-configuration ablation over prepared or synthesized clips.
    Ablate {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long, value_delimiter = ',')]
        tasks: Option<Vec<Task>>,
        #[arg(long)]
        clips: Option<usize>,
        #[command(flatten)]
        clip: ClipArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
}

#[derive(Args, Debug)]
struct IoArgs {
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ClipArgs {
    #[arg(long)]
    pattern: Option<Pattern>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    /// Per-frame displacement `dx,dy`.
    #[arg(long, value_parser = parse_velocity, allow_hyphen_values = true)]
    velocity: Option<[i64; 2]>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// self, first or swcfa.
    #[arg(long, value_parser = parse_variant)]
    mode: Option<AttentionVariant>,
    /// Sliding-window radius.
    #[arg(long = "N", allow_negative_numbers = true)]
    window_radius: Option<i64>,
    #[arg(long)]
    inversion_steps: Option<usize>,
    #[arg(long)]
    sampling_steps: Option<usize>,
    /// Start sampling from Gaussian latents instead of inverted ones.
    #[arg(long)]
    no_inversion: bool,
    /// Use the neutral prompt.
    #[arg(long)]
    no_prompt: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_delimiter = ',')]
    tasks: Option<Vec<Task>>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

fn parse_velocity(s: &str) -> std::result::Result<[i64; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    let [dx, dy] = parts.as_slice() else {
        return Err(format!("expected dx,dy, got {s:?}"));
    };
    let p = |v: &str| v.trim().parse::<i64>().map_err(|e| format!("{v:?}: {e}"));
    Ok([p(dx)?, p(dy)?])
}

fn parse_variant(s: &str) -> std::result::Result<AttentionVariant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl IoArgs {
    fn apply(self, s: &mut Settings) {
        if self.input.is_some() {
            s.input = self.input;
        }
        if self.reference.is_some() {
            s.reference = self.reference;
        }
    }
}

impl ClipArgs {
    fn apply(self, s: &mut Settings) {
        set(&mut s.pattern, self.pattern);
        set(&mut s.frames, self.frames);
        set(&mut s.height, self.height);
        set(&mut s.width, self.width);
        set(&mut s.channels, self.channels);
        set(&mut s.velocity, self.velocity);
    }
}

impl ModelArgs {
    fn apply(self, s: &mut Settings) {
        if self.checkpoint.is_some() {
            s.checkpoint = self.checkpoint;
        }
        set(&mut s.mode, self.mode);
        set(&mut s.window_radius, self.window_radius);
        set(&mut s.inversion_steps, self.inversion_steps);
        set(&mut s.sampling_steps, self.sampling_steps);
        if self.no_inversion {
            s.use_inversion = false;
        }
        if self.no_prompt {
            s.use_prompt = false;
        }
    }
}

impl TrainArgs {
    fn apply(self, s: &mut Settings) {
        set(&mut s.tasks, self.tasks);
        set(&mut s.pairs, self.pairs);
        set(&mut s.size, self.size);
        set(&mut s.channels, self.channels);
        set(&mut s.epochs, self.epochs);
        if self.max_steps.is_some() {
            s.max_steps = self.max_steps;
        }
        set(&mut s.batch_size, self.batch_size);
        set(&mut s.lr, self.lr);
    }
}

/// Parses `argv` (program name first), reads `--config` if given, applies
/// flag overrides and validates the result.
pub fn parse_config<I, T>(argv: I) -> std::result::Result<RunConfig, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(CliError::Usage)?;
    let mut s = match &cli.config {
        Some(path) => {
            let bytes = fs::read(path).map_err(|e| invalid(format!("config {}: {e}", path.display())))?;
            serde_json::from_slice(&bytes).map_err(|e| invalid(format!("config {}: {e}", path.display())))?
        }
        None => Settings::default(),
    };
    set(&mut s.seed, cli.seed);
    set(&mut s.threads, cli.threads);
    if cli.out.is_some() {
        s.out = cli.out;
    }
    let command = match cli.command {
        CommandArgs::Synth { clip, task } => {
            clip.apply(&mut s);
            if task.is_some() {
                s.task = task;
            }
            Command::Synth
        }
        CommandArgs::Train(args) => {
            args.apply(&mut s);
            Command::Train
        }
        CommandArgs::Restore { io, task, model } => {
            io.apply(&mut s);
            if task.is_some() {
                s.task = task;
            }
            model.apply(&mut s);
            Command::Restore
        }
        CommandArgs::Invert { io, task, model } => {
            io.apply(&mut s);
            if task.is_some() {
                s.task = task;
            }
            model.apply(&mut s);
            Command::Invert
        }
        CommandArgs::Metrics { io } => {
            io.apply(&mut s);
            Command::Metrics
        }
        CommandArgs::Ablate { io, tasks, clips, clip, model } => {
            io.apply(&mut s);
            set(&mut s.tasks, tasks);
            set(&mut s.clips, clips);
            clip.apply(&mut s);
            model.apply(&mut s);
            Command::Ablate
        }
    };
    s.validate()?;
    if matches!(command, Command::Restore | Command::Invert | Command::Metrics) && s.input.is_none() {
        return Err(invalid("in is required: pass --in <clip dir>").into());
    }
    // A fresh model must match the synthetic data these commands generate.
    let synthesizes = command == Command::Train || (command == Command::Ablate && s.input.is_none());
    let latent = s.channels * s.patch * s.patch;
    if synthesizes && s.checkpoint.is_none() && s.dims.latent_channels != latent {
        return Err(invalid(format!(
            "dims.latent_channels must equal channels * patch^2 = {latent}, got {}",
            s.dims.latent_channels
        ))
        .into());
    }
    Ok(RunConfig { command, settings: s })
}

/// Runs the command on a pool of `settings.threads` workers. Artifacts go
/// to [`RunConfig::out_dir`]; `report.json` is a deterministic function of
/// the configuration, wall-clock times go to `timings.json`.
pub fn dispatch(cfg: &RunConfig) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.settings.threads)
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))?;
    pool.install(|| {
        let start = Instant::now();
        match cfg.command {
            Command::Synth => synth(cfg),
            Command::Train => train(cfg),
            Command::Restore => restore(cfg),
            Command::Invert => invert(cfg),
            Command::Metrics => metrics(cfg),
            Command::Ablate => ablate(cfg),
        }?;
        if cfg.command != Command::Synth {
            write_json(
                &cfg.out_dir().join("timings.json"),
                &serde_json::json!({ "seconds": start.elapsed().as_secs_f64() }),
            )?;
        }
        Ok(())
    })
}

/// Entry point for the binary: returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cfg = match parse_config(argv) {
        Ok(cfg) => cfg,
        Err(CliError::Usage(e)) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            eprint!("{e}");
            if matches!(e, CliError::Invalid(_)) {
                eprintln!();
            }
            return 1;
        }
    };
    match dispatch(&cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    fs::write(path, text)?;
    Ok(())
}

fn required<'a>(p: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| invalid(format!("{name} is required")))
}

fn clip_id(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn load_model(s: &Settings) -> Result<DenoiserModel> {
    match &s.checkpoint {
        Some(path) => load_checkpoint(path),
        None => DenoiserModel::new(s.dims, s.seed)?.with_schedule(s.schedule),
    }
}

fn synth(cfg: &RunConfig) -> Result<()> {
    let s = &cfg.settings;
    let out = cfg.out_dir();
    let shape = (s.channels, s.height, s.width);
    let clean = generate_clean_video(s.pattern, shape, s.frames, (s.velocity[0], s.velocity[1]), s.seed)?;
    let task = s.task.or(s.degradation.map(|d| d.task()));
    let mut manifest = Manifest::for_sequence(&clean, s.seed)?;
    manifest.pattern = Some(s.pattern);
    manifest.task = task;
    manifest.raw_f32 = true;
    let Some(task) = task else {
        return write_clip(&out, &clean, &manifest);
    };
    let spec = DegradationSpec {
        params: s.degradation.unwrap_or(Degradation::default_for(task)),
        seed: s.seed,
    };
    let degraded = degrade(&clean, &spec)?;
    write_clip(&out.join("clean"), &clean, &manifest)?;
    let manifest = Manifest {
        degradation: Some(spec),
        ..manifest
    };
    write_clip(&out.join("degraded"), &degraded, &manifest)
}

fn train(cfg: &RunConfig) -> Result<()> {
    let s = &cfg.settings;
    let out = cfg.out_dir();
    let data = synthetic_pairs(&s.tasks, s.pairs, (s.channels, s.size, s.size), s.seed)?;
    let mut model = load_model(s)?;
    let losses = fine_tune(&mut model, &data, &s.fine_tune_config())?;
    fs::create_dir_all(&out)?;
    save_checkpoint(&model, &out.join("model.ckpt"))?;
    let smoothed = smooth(&losses, LOSS_WINDOW);
    let mut w = csv::Writer::from_path(out.join("losses.csv"))?;
    w.write_record(["step", "loss", "smoothed"])?;
    for (i, (l, sm)) in losses.iter().zip(&smoothed).enumerate() {
        w.write_record([i.to_string(), format!("{l:.8}"), format!("{sm:.8}")])?;
    }
    w.flush()?;
    let window = LOSS_WINDOW.min(smoothed.len()).max(1);
    write_json(
        &out.join("report.json"),
        &serde_json::json!({
            "config": cfg,
            "steps": losses.len(),
            "smoothed_first": smoothed.get(window - 1),
            "smoothed_last": smoothed.last(),
        }),
    )
}

fn resolve_task(s: &Settings, manifest: &Manifest) -> Result<Task> {
    s.task
        .or(manifest.task)
        .ok_or_else(|| invalid("task is required: pass --task or use a clip whose manifest names one"))
}

fn restore(cfg: &RunConfig) -> Result<()> {
    let s = &cfg.settings;
    let out = cfg.out_dir();
    let input = required(&s.input, "in")?;
    let (degraded, manifest) = read_clip(input)?;
    let task = resolve_task(s, &manifest)?;
    let clean = s.reference.as_deref().map(|r| read_clip(r).map(|c| c.0)).transpose()?;
    let model = load_model(s)?;
    let rc = s.restore_config(task, &model);
    let restored = restore_video(&model, &clip_id(input), &degraded, clean.as_ref(), &rc)?;
    let mut m = Manifest::for_sequence(&restored.frames, s.seed)?;
    m.task = Some(task);
    m.raw_f32 = true;
    write_clip(&out, &restored.frames, &m)?;
    write_json(
        &out.join("report.json"),
        &serde_json::json!({ "config": cfg, "metrics": [restored.metrics] }),
    )
}

fn invert(cfg: &RunConfig) -> Result<()> {
    let s = &cfg.settings;
    let out = cfg.out_dir();
    let input = required(&s.input, "in")?;
    let (frames, manifest) = read_clip(input)?;
    let task = resolve_task(s, &manifest)?;
    let model = load_model(s)?;
    let rc = s.restore_config(task, &model);
    let latents = invert_video(&model, &frames, &rc)?;
    fs::create_dir_all(&out)?;
    for (i, l) in latents.latents.iter().enumerate() {
        fs::write(out.join(format!("latent_{i:05}.f32")), encode_raw_frame(&l.data))?;
    }
    let shape = latents.latents.first().map(|l| l.data.shape().to_vec()).unwrap_or_default();
    write_json(
        &out.join("report.json"),
        &serde_json::json!({
            "config": cfg,
            "latent_shape": shape,
            "n_frames": latents.latents.len(),
            "timestep_level": latents.timestep_level,
        }),
    )
}

fn metrics(cfg: &RunConfig) -> Result<()> {
    let s = &cfg.settings;
    let out = cfg.out_dir();
    let input = required(&s.input, "in")?;
    let (video, manifest) = read_clip(input)?;
    let clean = s.reference.as_deref().map(|r| read_clip(r).map(|c| c.0)).transpose()?;
    let (_, h, w) = video.shape()?;
    let flows = video.motion.as_ref().map(|m| FlowField::from_motion(m, h, w));
    let task = manifest.task.map(|t| t.as_str()).unwrap_or("");
    let row = evaluate_clip(&clip_id(input), task, "", &video, flows.as_deref(), clean.as_ref())?;
    fs::create_dir_all(&out)?;
    write_metrics_csv(&[row.clone()], fs::File::create(out.join("metrics.csv"))?)?;
    write_json(&out.join("report.json"), &serde_json::json!({ "config": cfg, "metrics": [row] }))
}

/// Reads every subdirectory of `root` that holds `clean/` and `degraded/`
/// clips, in name order.
fn prepared_clips(root: &Path) -> Result<Vec<AblationClip>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    dirs.retain(|d| d.join("clean").is_dir() && d.join("degraded").is_dir());
    dirs.sort();
    if dirs.is_empty() {
        return Err(invalid(format!(
            "{} holds no clip directories with clean/ and degraded/",
            root.display()
        )));
    }
    dirs.iter()
        .map(|d| {
            let (degraded, manifest) = read_clip(&d.join("degraded"))?;
            let (clean, _) = read_clip(&d.join("clean"))?;
            let task = manifest
                .task
                .ok_or_else(|| invalid(format!("{}: degraded manifest names no task", d.display())))?;
            Ok(AblationClip {
                id: clip_id(d),
                task,
                degraded,
                clean,
            })
        })
        .collect()
}

fn ablate(cfg: &RunConfig) -> Result<()> {
    let s = &cfg.settings;
    let out = cfg.out_dir();
    let clips = match &s.input {
        Some(root) => prepared_clips(root)?,
        None => synthetic_clips(
            &s.tasks,
            s.clips,
            (s.channels, s.height, s.width),
            s.frames,
            (s.velocity[0], s.velocity[1]),
            s.seed,
        )?,
    };
    let model = load_model(s)?;
    let base = s.restore_config(clips[0].task, &model);
    let table = run_ablation(&model, &clips, &base)?;
    fs::create_dir_all(&out)?;
    table.write_csv(fs::File::create(out.join("ablation.csv"))?)?;
    write_metrics_csv(&table.per_clip, fs::File::create(out.join("per_clip.csv"))?)?;
    write_json(&out.join("report.json"), &serde_json::json!({ "config": cfg, "table": table }))
}
