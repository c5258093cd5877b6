//! Rectified-flow noising, diffusion-forcing timesteps, teacher and causal
//! training steps, and the multi-step teacher sampler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::ClipRecord;
use crate::error::{Error, Result};
use crate::metrics::MetricsLog;
use crate::model::conditioning::{frame_action_features, route_expert, tokenize_prompt, Expert, TextCond};
use crate::model::dit::{dit_forward, is_adapter_param, predict, ForwardInput};
use crate::model::latent::patchify;
use crate::model::mask::build_block_causal_mask;
use crate::model::ModelConfig;
use crate::params::{Adam, AdamConfig, Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    /// Distinct, strictly descending, within `(0, 1]`.
    pub targets: Vec<f64>,
    pub p_clean: f64,
    pub sampler_steps: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { targets: vec![1.0, 0.75, 0.5, 0.25], p_clean: 0.2, sampler_steps: 8 }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Config("target timestep set is empty".into()));
        }
        if self.targets.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::Config("target timesteps must lie in (0, 1]".into()));
        }
        if self.targets.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Config("target timesteps must be strictly descending".into()));
        }
        if !(0.0..=1.0).contains(&self.p_clean) {
            return Err(Error::Config(format!("p_clean {} outside [0, 1]", self.p_clean)));
        }
        if self.sampler_steps == 0 {
            return Err(Error::Config("sampler_steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumPhase {
    pub chunks: usize,
    pub shift: f64,
    pub steps: usize,
}

/// Phases with non-decreasing clip length and flow shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curriculum {
    phases: Vec<CurriculumPhase>,
}

impl Curriculum {
    pub fn new(phases: Vec<CurriculumPhase>) -> Result<Self> {
        if phases.is_empty() {
            return Err(Error::Config("curriculum has no phases".into()));
        }
        if phases.iter().any(|p| p.chunks == 0 || p.shift < 1.0) {
            return Err(Error::Config("phases need chunks ≥ 1 and shift ≥ 1".into()));
        }
        if phases.windows(2).any(|w| w[1].chunks < w[0].chunks || w[1].shift < w[0].shift) {
            return Err(Error::Config("curriculum durations and shifts must be non-decreasing".into()));
        }
        Ok(Self { phases })
    }

    pub fn phases(&self) -> &[CurriculumPhase] {
        &self.phases
    }

    pub fn total_steps(&self) -> usize {
        self.phases.iter().map(|p| p.steps).sum()
    }
}

impl Default for Curriculum {
    fn default() -> Self {
        Self::new(vec![
            CurriculumPhase { chunks: 2, shift: 3.0, steps: 100 },
            CurriculumPhase { chunks: 4, shift: 5.0, steps: 100 },
            CurriculumPhase { chunks: 8, shift: 8.0, steps: 100 },
        ])
        .expect("default curriculum is monotone")
    }
}

/// Flat key-value training configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    pub chunk_len: usize,
    pub targets: Vec<f64>,
    pub p_clean: f64,
    pub sampler_steps: usize,
    pub phase_chunks: Vec<usize>,
    pub phase_shift: Vec<f64>,
    pub phase_steps: Vec<usize>,
    /// Causal adaptation steps.
    pub adapt_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let d = DiffusionConfig::default();
        let m = ModelConfig::default();
        Self {
            seed: 0,
            lr: 1e-3,
            dim: m.dim,
            depth: m.depth,
            heads: m.heads,
            patch: m.patch,
            chunk_len: m.chunk_len,
            targets: d.targets,
            p_clean: d.p_clean,
            sampler_steps: d.sampler_steps,
            phase_chunks: vec![2, 4, 8],
            phase_shift: vec![3.0, 5.0, 8.0],
            phase_steps: vec![100, 100, 100],
            adapt_steps: 200,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.diffusion().validate()?;
        cfg.curriculum()?;
        Ok(cfg)
    }

    pub fn diffusion(&self) -> DiffusionConfig {
        DiffusionConfig { targets: self.targets.clone(), p_clean: self.p_clean, sampler_steps: self.sampler_steps }
    }

    pub fn curriculum(&self) -> Result<Curriculum> {
        let n = self.phase_chunks.len();
        if self.phase_shift.len() != n || self.phase_steps.len() != n {
            return Err(Error::Config("phase_chunks, phase_shift and phase_steps differ in length".into()));
        }
        Curriculum::new(
            (0..n)
                .map(|i| CurriculumPhase { chunks: self.phase_chunks[i], shift: self.phase_shift[i], steps: self.phase_steps[i] })
                .collect(),
        )
    }

    pub fn model(&self, frame_height: usize, frame_width: usize) -> ModelConfig {
        ModelConfig {
            frame_height,
            frame_width,
            patch: self.patch,
            chunk_len: self.chunk_len,
            dim: self.dim,
            depth: self.depth,
            heads: self.heads,
            ..ModelConfig::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }
}

/// `t = s·u / (1 + (s − 1)·u)`: endpoints fixed, monotone, identity at `s = 1`.
pub fn shift_timestep(u: f64, s: f64) -> f64 {
    s * u / (1.0 + (s - 1.0) * u)
}

/// `x_t = (1 − t)·x0 + t·eps`.
pub fn add_noise<T: Scalar>(x0: &Tensor<T>, t: T, eps: &Tensor<T>) -> Tensor<T> {
    x0.zip_map(eps, |a, e| (T::one() - t) * a + t * e)
}

/// Independent per-chunk noise levels: 0 with probability `p_clean`, else a uniform target.
pub fn sample_chunk_timesteps(chunks: usize, cfg: &DiffusionConfig, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    chunk_timesteps(chunks, cfg, &mut rng)
}

fn chunk_timesteps<R: Rng>(chunks: usize, cfg: &DiffusionConfig, rng: &mut R) -> Vec<f64> {
    (0..chunks)
        .map(|_| {
            let clean = rng.gen::<f64>() < cfg.p_clean;
            let pick = cfg.targets[rng.gen_range(0..cfg.targets.len())];
            if clean {
                0.0
            } else {
                pick
            }
        })
        .collect()
}

/// `steps + 1` descending noise levels from 1 to 0 on the shifted grid.
pub fn sampling_grid(steps: usize, shift: f64) -> Vec<f64> {
    (0..=steps).map(|k| shift_timestep(1.0 - k as f64 / steps as f64, shift)).collect()
}

/// Per-sample RNG stream: independent of batch position.
pub fn sample_rng(step_seed: u64, sample_seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(step_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ sample_seed.rotate_left(17))
}

/// Clean latents with their conditioning, frame-aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample<T> {
    pub latents: Tensor<T>,
    pub frames: usize,
    pub tokens_per_frame: usize,
    /// `frames × ACTION_FEATURES`.
    pub actions: Tensor<T>,
    /// Prompt tokens of each frame.
    pub text: Vec<Vec<usize>>,
    pub seed: u64,
}

impl<T: Scalar> TrainSample<T> {
    /// Patchify a rendered clip and derive action features relative to its first pose.
    pub fn from_clip(record: &ClipRecord, cfg: &ModelConfig, prompt: &str, seed: u64) -> Result<Self> {
        let first = record.frames.first().ok_or(Error::InsufficientFrames { needed: 1, got: 0 })?;
        if (first.height, first.width) != (cfg.frame_height, cfg.frame_width) {
            return Err(Error::ResolutionMismatch {
                expected_h: cfg.frame_height,
                expected_w: cfg.frame_width,
                got_h: first.height,
                got_w: first.width,
            });
        }
        let video = patchify::<T>(&record.frames, cfg.patch, cfg.chunk_len)?;
        let poses = &record.trajectory.poses;
        let actions = frame_action_features(poses, &record.trajectory.actions, &poses[0])?;
        Ok(Self {
            latents: video.tokens,
            frames: video.frames,
            tokens_per_frame: video.tokens_per_frame,
            actions,
            text: vec![tokenize_prompt(prompt, cfg.vocab); video.frames],
            seed,
        })
    }

    /// Frames `[start, start + count)`.
    pub fn window(&self, start: usize, count: usize) -> Result<Self> {
        if start + count > self.frames {
            return Err(Error::InsufficientFrames { needed: start + count, got: self.frames });
        }
        let n = self.tokens_per_frame;
        Ok(Self {
            latents: self.latents.slice_rows(start * n, count * n),
            frames: count,
            tokens_per_frame: n,
            actions: self.actions.slice_rows(start, count),
            text: self.text[start..start + count].to_vec(),
            seed: self.seed,
        })
    }

    /// Switch the prompt from `frame` onward.
    pub fn with_prompt_from(mut self, frame: usize, prompt: &str, vocab: usize) -> Self {
        let tokens = tokenize_prompt(prompt, vocab);
        for t in self.text.iter_mut().skip(frame) {
            t.clone_from(&tokens);
        }
        self
    }

    pub fn chunk_rows(&self, chunk_len: usize) -> usize {
        chunk_len * self.tokens_per_frame
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskMode {
    /// One clean conditioning frame.
    ImageToVideo,
    /// A sampled clean prefix of at least two frames.
    VideoToVideo,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherStep {
    pub mode: TaskMode,
    pub shift: f64,
    pub seed: u64,
    /// Train only the action adapter; backbone parameters stay bit-identical.
    pub frozen_backbone: bool,
    /// Use this noise level instead of sampling one.
    pub fixed_t: Option<f64>,
}

/// Teacher objective on one sample: MSE of the routed expert's x0 prediction
/// on the non-prefix frames under full bidirectional attention.
pub fn teacher_loss<'t, T: Scalar>(
    cfg: &ModelConfig,
    params: &Bound<'t, T>,
    sample: &TrainSample<T>,
    step: &TeacherStep,
) -> Result<(Var<'t, T>, Expert)> {
    let mut rng = sample_rng(step.seed, sample.seed);
    let prefix = match step.mode {
        TaskMode::ImageToVideo => 1,
        TaskMode::VideoToVideo => {
            if sample.frames < 3 {
                return Err(Error::InsufficientFrames { needed: 3, got: sample.frames });
            }
            rng.gen_range(2..sample.frames)
        }
    };
    if sample.frames <= prefix {
        return Err(Error::InsufficientFrames { needed: prefix + 1, got: sample.frames });
    }
    let u: f64 = rng.gen();
    let t = step.fixed_t.unwrap_or_else(|| shift_timestep(u, step.shift));
    let expert = route_expert(t, cfg.boundary);
    let n = sample.tokens_per_frame;
    let eps = Tensor::randn(sample.latents.rows(), sample.latents.cols(), 1.0, &mut rng);
    let mut x = add_noise(&sample.latents, T::lit(t), &eps);
    x.data_mut()[..prefix * n * sample.latents.cols()]
        .copy_from_slice(&sample.latents.data()[..prefix * n * sample.latents.cols()]);
    let frame_t: Vec<T> = (0..sample.frames).map(|f| if f < prefix { T::zero() } else { T::lit(t) }).collect();
    let tape = params.get(&format!("{}in.w", expert.prefix())).tape();
    let input = ForwardInput { frame_t: &frame_t, actions: &sample.actions, text: TextCond::PerFrame(&sample.text), first_frame: 0, mask: None, cache: None };
    let out = dit_forward(cfg, params, expert.prefix(), tape.constant(x), &input)?;
    let rows = (sample.frames - prefix) * n;
    let target = tape.constant(sample.latents.slice_rows(prefix * n, rows));
    Ok((out.x0.slice_rows(prefix * n, rows).mse(target), expert))
}

fn mean_loss<'t, T: Scalar>(losses: Vec<Var<'t, T>>) -> Result<Var<'t, T>> {
    let n = losses.len();
    let mut it = losses.into_iter();
    let first = it.next().ok_or_else(|| Error::Precondition("empty batch".into()))?;
    Ok(it.fold(first, |acc, l| acc.add(l)).scale(T::lit(1.0 / n as f64)))
}

/// One optimizer step of teacher training; returns the batch loss.
pub fn teacher_train_step<T: Scalar>(
    cfg: &ModelConfig,
    params: &mut ParamStore<T>,
    opt: &mut Adam<T>,
    batch: &[TrainSample<T>],
    step: &TeacherStep,
) -> Result<f64> {
    let tape = Tape::new();
    let frozen = step.frozen_backbone;
    let bound = Bound::new(&tape, params, |name| !frozen || is_adapter_param(name));
    let losses = batch.iter().map(|s| teacher_loss(cfg, &bound, s, step).map(|(l, _)| l)).collect::<Result<Vec<_>>>()?;
    let loss = mean_loss(losses)?;
    let grads = bound.grads(&tape.backward(loss));
    opt.step(params, &grads);
    Ok(loss.value().item().to_f64_lossy())
}

/// Causal adaptation objective on one sample: block-causal mask, per-chunk
/// timesteps, MSE against clean latents over every chunk.
pub fn causal_adapt_loss<'t, T: Scalar>(
    cfg: &ModelConfig,
    params: &Bound<'t, T>,
    sample: &TrainSample<T>,
    dcfg: &DiffusionConfig,
    seed: u64,
) -> Result<Var<'t, T>> {
    if sample.frames == 0 || sample.frames % cfg.chunk_len != 0 {
        return Err(Error::Precondition(format!("{} frames do not fill whole chunks of {}", sample.frames, cfg.chunk_len)));
    }
    let chunks = sample.frames / cfg.chunk_len;
    let mut rng = sample_rng(seed, sample.seed);
    let ts = chunk_timesteps(chunks, dcfg, &mut rng);
    let ct = sample.chunk_rows(cfg.chunk_len);
    let eps = Tensor::<T>::randn(sample.latents.rows(), sample.latents.cols(), 1.0, &mut rng);
    let mut x = sample.latents.clone();
    for (c, &t) in ts.iter().enumerate() {
        let noisy = add_noise(&sample.latents.slice_rows(c * ct, ct), T::lit(t), &eps.slice_rows(c * ct, ct));
        let cols = x.cols();
        x.data_mut()[c * ct * cols..(c + 1) * ct * cols].copy_from_slice(noisy.data());
    }
    let frame_t: Vec<T> = (0..sample.frames).map(|f| T::lit(ts[f / cfg.chunk_len])).collect();
    let mask = build_block_causal_mask(chunks, ct);
    let tape = params.get("in.w").tape();
    let input =
        ForwardInput { frame_t: &frame_t, actions: &sample.actions, text: TextCond::PerFrame(&sample.text), first_frame: 0, mask: Some(&mask), cache: None };
    let out = dit_forward(cfg, params, "", tape.constant(x), &input)?;
    Ok(out.x0.mse(tape.constant(sample.latents.clone())))
}

/// One optimizer step on the causal student; returns the batch loss.
pub fn causal_adapt_step<T: Scalar>(
    cfg: &ModelConfig,
    student: &mut ParamStore<T>,
    opt: &mut Adam<T>,
    batch: &[TrainSample<T>],
    dcfg: &DiffusionConfig,
    seed: u64,
) -> Result<f64> {
    let tape = Tape::new();
    let bound = Bound::trainable(&tape, student);
    let losses = batch.iter().map(|s| causal_adapt_loss(cfg, &bound, s, dcfg, seed)).collect::<Result<Vec<_>>>()?;
    let loss = mean_loss(losses)?;
    let grads = bound.grads(&tape.backward(loss));
    opt.step(student, &grads);
    Ok(loss.value().item().to_f64_lossy())
}

/// Student initialization: the high-noise expert with its prefix removed.
pub fn student_from_teacher<T: Scalar>(teacher: &ParamStore<T>) -> ParamStore<T> {
    teacher.strip_prefix(Expert::High.prefix())
}

/// Conditioning for teacher sampling.
pub struct SampleCondition<'a, T> {
    /// Clean latents of the leading conditioning frames, held fixed.
    pub prefix: Option<&'a Tensor<T>>,
    pub actions: &'a Tensor<T>,
    pub text: TextCond<'a>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleTrace<T> {
    pub latents: Tensor<T>,
    /// Expert used at each step.
    pub experts: Vec<Expert>,
}

impl<T> SampleTrace<T> {
    pub fn expert_switches(&self) -> usize {
        self.experts.windows(2).filter(|w| w[0] != w[1]).count()
    }
}

/// Deterministic Euler integration of the x0 field from `t = 1` to `0`:
/// `x ← x̂0 + (t_next / t)·(x − x̂0)`, routing each step to its expert.
pub fn teacher_sample<T: Scalar>(
    cfg: &ModelConfig,
    teacher: &ParamStore<T>,
    x_init: &Tensor<T>,
    cond: &SampleCondition<'_, T>,
    steps: usize,
    shift: f64,
) -> Result<SampleTrace<T>> {
    if steps == 0 {
        return Err(Error::Precondition("sampler needs at least one step".into()));
    }
    let n = cfg.tokens_per_frame();
    let frames = x_init.rows() / n;
    let prefix_rows = cond.prefix.map_or(0, |p| p.rows());
    let prefix_frames = prefix_rows / n;
    let cols = x_init.cols();
    let hold = |x: &mut Tensor<T>| {
        if let Some(p) = cond.prefix {
            x.data_mut()[..prefix_rows * cols].copy_from_slice(p.data());
        }
    };
    let mut x = x_init.clone();
    hold(&mut x);
    let grid = sampling_grid(steps, shift);
    let mut experts = Vec::with_capacity(steps);
    for k in 0..steps {
        let (t, t_next) = (grid[k], grid[k + 1]);
        let expert = route_expert(t, cfg.boundary);
        experts.push(expert);
        let frame_t: Vec<T> = (0..frames).map(|f| if f < prefix_frames { T::zero() } else { T::lit(t) }).collect();
        let input = ForwardInput { frame_t: &frame_t, actions: cond.actions, text: cond.text, first_frame: 0, mask: None, cache: None };
        let (x0, _) = predict(cfg, teacher, expert.prefix(), &x, &input)?;
        let ratio = T::lit(t_next / t);
        x = x0.zip_map(&x, |a, b| a + ratio * (b - a));
        hold(&mut x);
    }
    Ok(SampleTrace { latents: x, experts })
}

/// Seeded window start for a curriculum crop of `frames` frames.
fn crop<T: Scalar>(sample: &TrainSample<T>, frames: usize, rng: &mut ChaCha8Rng) -> Result<TrainSample<T>> {
    let frames = frames.min(sample.frames);
    let start = rng.gen_range(0..=sample.frames - frames);
    sample.window(start, frames)
}

#[derive(Clone, Debug, Serialize)]
struct StepRecord<'a> {
    step: usize,
    loss: f64,
    phase: &'a str,
}

/// Run the curriculum, alternating image- and video-conditioned batches.
/// Returns the loss of every step.
pub fn train_teacher<T: Scalar>(
    cfg: &ModelConfig,
    curriculum: &Curriculum,
    teacher: &mut ParamStore<T>,
    opt: &mut Adam<T>,
    samples: &[TrainSample<T>],
    seed: u64,
    log: &mut MetricsLog,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut losses = Vec::with_capacity(curriculum.total_steps());
    for (pi, phase) in curriculum.phases().iter().enumerate() {
        let label = format!("teacher-{pi}");
        for _ in 0..phase.steps {
            let batch = samples.iter().map(|s| crop(s, phase.chunks * cfg.chunk_len, &mut rng)).collect::<Result<Vec<_>>>()?;
            let mode = if losses.len() % 2 == 0 { TaskMode::ImageToVideo } else { TaskMode::VideoToVideo };
            let step = TeacherStep { mode, shift: phase.shift, seed: rng.gen(), frozen_backbone: false, fixed_t: None };
            let loss = teacher_train_step(cfg, teacher, opt, &batch, &step)?;
            log.record(&StepRecord { step: losses.len(), loss, phase: &label })?;
            losses.push(loss);
        }
    }
    Ok(losses)
}

/// Teacher objective averaged over `draws` fixed noise draws per sample,
/// without updating parameters. Equal seeds give equal draws, so values
/// taken before and after training are directly comparable.
pub fn teacher_eval_loss<T: Scalar>(cfg: &ModelConfig, teacher: &ParamStore<T>, samples: &[TrainSample<T>], shift: f64, draws: usize, seed: u64) -> Result<f64> {
    if samples.is_empty() || draws == 0 {
        return Err(Error::Precondition("evaluation needs at least one sample and one draw".into()));
    }
    let mut total = 0.0;
    for d in 0..draws {
        let mode = if d % 2 == 0 { TaskMode::ImageToVideo } else { TaskMode::VideoToVideo };
        let step = TeacherStep { mode, shift, seed: seed.wrapping_add(d as u64), frozen_backbone: false, fixed_t: None };
        for s in samples {
            let tape = Tape::new();
            let bound = Bound::frozen(&tape, teacher);
            let (loss, _) = teacher_loss(cfg, &bound, s, &step)?;
            total += loss.value().item().to_f64_lossy();
        }
    }
    Ok(total / (draws * samples.len()) as f64)
}

/// Causal adaptation over whole-chunk crops of `chunks` chunks.
#[allow(clippy::too_many_arguments)]
pub fn train_causal<T: Scalar>(
    cfg: &ModelConfig,
    dcfg: &DiffusionConfig,
    student: &mut ParamStore<T>,
    opt: &mut Adam<T>,
    samples: &[TrainSample<T>],
    chunks: usize,
    steps: usize,
    seed: u64,
    log: &mut MetricsLog,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = samples
            .iter()
            .map(|s| {
                let whole = (s.frames / cfg.chunk_len).min(chunks) * cfg.chunk_len;
                let start = cfg.chunk_len * rng.gen_range(0..=(s.frames - whole) / cfg.chunk_len);
                s.window(start, whole)
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = causal_adapt_step(cfg, student, opt, &batch, dcfg, rng.gen())?;
        log.record(&StepRecord { step, loss, phase: "adapt" })?;
        losses.push(loss);
    }
    Ok(losses)
}
