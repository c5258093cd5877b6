//! Overfit rigs: a whole training pipeline on one seeded oracle clip, small
//! enough to run on a single CPU core, plus the probes that score it against
//! the oracle renderer.

use std::f64::consts::FRAC_PI_2;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{make_clip, ClipRecord, TimedEvent};
use crate::diffusion::{train_causal, teacher_eval_loss, train_teacher, student_from_teacher, Curriculum, CurriculumPhase, DiffusionConfig, TrainSample};
use crate::distillation::{train_distill, DistillConfig, DistillMetrics, DistillState};
use crate::error::{Error, Result};
use crate::geometry::trajectory::gen_rotation_path;
use crate::inference::{start_session, SessionConfig};
use crate::metrics::MetricsLog;
use crate::model::checkpoint::{Checkpoint, CheckpointMeta};
use crate::model::{init_expert, init_teacher, ModelConfig};
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::world::action::ActionState;
use crate::world::dynamics::step_dynamics;
use crate::world::render::{psnr, render, Frame};
use crate::world::spec::{build_world, EventSpec, TimeOfDay};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub chunk_len: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub prompt: String,
    pub world_seed: u64,
    pub teacher_steps: usize,
    pub teacher_lr: f64,
    pub shift: f64,
    pub adapt_steps: usize,
    pub adapt_lr: f64,
    pub distill: DistillConfig,
    pub seed: u64,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            patch: 8,
            chunk_len: 4,
            dim: 128,
            depth: 4,
            heads: 4,
            prompt: "a quiet room".into(),
            world_seed: 0,
            teacher_steps: 500,
            teacher_lr: 2e-3,
            shift: 3.0,
            adapt_steps: 300,
            adapt_lr: 1e-3,
            distill: DistillConfig { steps: 100, ..DistillConfig::default() },
            seed: 0,
        }
    }
}

impl RigConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            frame_height: self.height,
            frame_width: self.width,
            patch: self.patch,
            chunk_len: self.chunk_len,
            dim: self.dim,
            depth: self.depth,
            heads: self.heads,
            ..ModelConfig::default()
        }
    }
}

/// Lowest per-chunk PSNR (dB) of the default rig's 4-step student over
/// four training horizons, less a 0.9 dB margin. Measured: 19.91.
pub const DRIFT_FLOOR_DB: f64 = 19.0;
/// Return-view PSNR (dB) of the default rig's 4-step student, less a
/// 1.3 dB margin. Measured: 28.30.
pub const MEMORY_FLOOR_DB: f64 = 27.0;

/// Fixed draws used to score the teacher before and after training.
pub const EVAL_DRAWS: usize = 32;
const EVAL_SEED: u64 = 0x7e57_da7a;

/// One full turn in place: 32 frames, the last view equal to the first.
pub fn rotation_clip(world_seed: u64, events: Vec<TimedEvent>, height: usize, width: usize) -> Result<ClipRecord> {
    let traj = gen_rotation_path(1, FRAC_PI_2, 8.0, world_seed)?;
    make_clip(world_seed, events, traj, height, width)
}

/// Mean of the first `k` and of the last `k` values.
pub fn loss_endpoints(losses: &[f64], k: usize) -> (f64, f64) {
    let k = k.clamp(1, losses.len().max(1));
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    (mean(&losses[..k.min(losses.len())]), mean(&losses[losses.len().saturating_sub(k)..]))
}

pub fn student_checkpoint(model: &ModelConfig, params: &ParamStore<f32>) -> Checkpoint {
    Checkpoint {
        meta: CheckpointMeta { kind: "student".into(), config: model.clone(), extra: serde_json::Value::Null },
        params: params.clone(),
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RigTimings {
    pub teacher_s: f64,
    pub adapt_s: f64,
    pub distill_s: f64,
}

pub struct WorldRig {
    pub config: RigConfig,
    pub model: ModelConfig,
    pub clip: ClipRecord,
    pub sample: TrainSample<f32>,
    pub teacher: ParamStore<f32>,
    /// Causal student before distillation.
    pub adapted: ParamStore<f32>,
    /// Distilled few-step student.
    pub student: ParamStore<f32>,
    pub teacher_losses: Vec<f64>,
    /// Teacher objective on fixed draws before and after training.
    pub teacher_eval: (f64, f64),
    pub adapt_losses: Vec<f64>,
    pub distill_metrics: Vec<DistillMetrics>,
    pub timings: RigTimings,
}

/// Teacher on the rotation clip, causal adaptation of its high-noise expert,
/// then self-rollout distillation.
pub fn train_world_rig(config: &RigConfig, log: &mut MetricsLog) -> Result<WorldRig> {
    let model = config.model();
    model.validate()?;
    let clip = rotation_clip(config.world_seed, vec![], config.height, config.width)?;
    let sample = TrainSample::<f32>::from_clip(&clip, &model, &config.prompt, config.seed)?;
    let chunks = sample.frames / model.chunk_len;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let t0 = Instant::now();
    let mut teacher = init_teacher::<f32, _>(&model, &mut rng);
    let mut opt = Adam::new(AdamConfig { lr: config.teacher_lr, ..AdamConfig::default() });
    let curriculum = Curriculum::new(vec![CurriculumPhase { chunks, shift: config.shift, steps: config.teacher_steps }])?;
    let samples = [sample.clone()];
    let eval_seed = config.seed ^ EVAL_SEED;
    let before = teacher_eval_loss(&model, &teacher, &samples, config.shift, EVAL_DRAWS, eval_seed)?;
    let teacher_losses = train_teacher(&model, &curriculum, &mut teacher, &mut opt, &samples, config.seed, log)?;
    let after = teacher_eval_loss(&model, &teacher, &samples, config.shift, EVAL_DRAWS, eval_seed)?;
    let teacher_s = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let mut adapted = student_from_teacher(&teacher);
    let mut opt = Adam::new(AdamConfig { lr: config.adapt_lr, ..AdamConfig::default() });
    let dcfg = DiffusionConfig::default();
    let adapt_losses = train_causal(&model, &dcfg, &mut adapted, &mut opt, &samples, chunks, config.adapt_steps, config.seed + 1, log)?;
    let adapt_s = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let mut state = DistillState::new(model.clone(), config.distill.clone(), teacher.clone(), adapted.clone())?;
    let distill_metrics = train_distill(&mut state, &samples, log)?;
    let distill_s = t2.elapsed().as_secs_f64();

    Ok(WorldRig {
        config: config.clone(),
        model,
        clip,
        sample,
        teacher,
        adapted,
        student: state.student,
        teacher_losses,
        teacher_eval: (before, after),
        adapt_losses,
        distill_metrics,
        timings: RigTimings { teacher_s, adapt_s, distill_s },
    })
}

impl WorldRig {
    /// Clip actions, continued past the clip end with its steady per-frame turn.
    pub fn actions(&self, frames: usize) -> Vec<ActionState> {
        let acts = &self.clip.trajectory.actions;
        let steady = acts[1];
        (0..frames)
            .map(|i| {
                let mut a = acts.get(i).copied().unwrap_or(steady);
                a.timestamp = i as f64 * crate::world::dynamics::FRAME_DT;
                a
            })
            .collect()
    }

    /// Oracle frames for `actions`, continued from the clip's poses.
    pub fn oracle(&self, frames: usize) -> Result<Vec<Frame>> {
        let world = build_world(self.config.world_seed);
        let actions = self.actions(frames);
        let poses = &self.clip.trajectory.poses;
        let mut pose = poses[0];
        let mut out = Vec::with_capacity(frames);
        for (i, a) in actions.iter().enumerate() {
            if i < poses.len() {
                pose = poses[i];
            } else {
                pose = step_dynamics(&pose, a, crate::world::dynamics::FRAME_DT, &world);
            }
            out.push(if i < self.clip.frames.len() { self.clip.frames[i].clone() } else { render(&world, &pose, self.config.height, self.config.width)? });
        }
        Ok(out)
    }

    /// Streamed rollout of `params` from the clip's first frame.
    pub fn rollout(&self, params: &ParamStore<f32>, chunks: usize, student_steps: usize) -> Result<Vec<Frame>> {
        let ckpt = student_checkpoint(&self.model, params);
        let config = SessionConfig { cache_chunks: self.config.distill.cache_chunks, student_steps, seed: self.config.seed, ..SessionConfig::default() };
        let mut session = start_session::<f32>(&ckpt, &self.config.prompt, Some(&self.clip.frames[0]), config)?;
        let actions = self.actions(chunks * self.model.chunk_len);
        let mut frames = Vec::with_capacity(actions.len());
        for chunk in actions.chunks(self.model.chunk_len) {
            frames.extend(session.stream_chunk(chunk)?);
        }
        Ok(frames)
    }

    /// Chunks seen per training window.
    pub fn training_chunks(&self) -> usize {
        self.sample.frames / self.model.chunk_len
    }

    /// Mean PSNR per chunk of a distilled-student rollout against the oracle.
    pub fn drift(&self, chunks: usize) -> Result<Vec<f64>> {
        let generated = self.rollout(&self.student, chunks, self.config.distill.student_steps)?;
        let oracle = self.oracle(generated.len())?;
        Ok(chunk_psnr(&generated, &oracle, self.model.chunk_len))
    }

    /// PSNR of the rollout's return view against the initial view.
    pub fn memory(&self) -> Result<f64> {
        let frames = self.clip.frames.len();
        let chunks = frames.div_ceil(self.model.chunk_len);
        let generated = self.rollout(&self.student, chunks, self.config.distill.student_steps)?;
        if generated.len() < frames {
            return Err(Error::InsufficientFrames { needed: frames, got: generated.len() });
        }
        Ok(psnr(&generated[frames - 1], &self.clip.frames[0]))
    }
}

pub fn chunk_psnr(generated: &[Frame], oracle: &[Frame], chunk_len: usize) -> Vec<f64> {
    generated
        .chunks(chunk_len)
        .zip(oracle.chunks(chunk_len))
        .map(|(g, o)| g.iter().zip(o).map(|(a, b)| psnr(a, b)).sum::<f64>() / g.len() as f64)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRigConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub chunk_len: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub steps: usize,
    pub lr: f64,
    /// Frame where the switch clip turns to night.
    pub switch_frame: usize,
    pub world_seed: u64,
    pub seed: u64,
}

impl Default for EventRigConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            patch: 4,
            chunk_len: 4,
            dim: 64,
            depth: 2,
            heads: 4,
            steps: 400,
            lr: 2e-3,
            switch_frame: 16,
            world_seed: 0,
            seed: 0,
        }
    }
}

impl EventRigConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            frame_height: self.height,
            frame_width: self.width,
            patch: self.patch,
            chunk_len: self.chunk_len,
            dim: self.dim,
            depth: self.depth,
            heads: self.heads,
            ..ModelConfig::default()
        }
    }
}

pub struct EventRig {
    pub config: EventRigConfig,
    pub model: ModelConfig,
    pub day: ClipRecord,
    pub night: ClipRecord,
    pub student: ParamStore<f32>,
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventProbe {
    pub midpoint: f64,
    /// Mean luminance of each generated chunk.
    pub chunk_luminance: Vec<f64>,
    /// Chunks streamed before the swap.
    pub swap_after: usize,
    /// Chunks after the swap until luminance first falls below the midpoint.
    pub chunks_to_flip: Option<usize>,
}

fn mean_luminance(frames: &[Frame]) -> f64 {
    frames.iter().map(Frame::mean_luminance).sum::<f64>() / frames.len().max(1) as f64
}

/// Causal student trained from scratch on day, night and day-to-night clips
/// with per-frame prompts that follow the world state.
pub fn train_event_rig(config: &EventRigConfig, log: &mut MetricsLog) -> Result<EventRig> {
    let model = config.model();
    model.validate()?;
    let night_at = |frame| vec![TimedEvent { frame, event: EventSpec::SetTimeOfDay(TimeOfDay::Night) }];
    let (h, w, seed) = (config.height, config.width, config.world_seed);
    let day = rotation_clip(seed, vec![], h, w)?;
    let night = rotation_clip(seed, night_at(0), h, w)?;
    let switch = rotation_clip(seed, night_at(config.switch_frame), h, w)?;
    let samples = vec![
        TrainSample::<f32>::from_clip(&day, &model, "day", config.seed)?,
        TrainSample::<f32>::from_clip(&night, &model, "night", config.seed + 1)?,
        TrainSample::<f32>::from_clip(&switch, &model, "day", config.seed + 2)?.with_prompt_from(config.switch_frame, "night", model.vocab),
    ];
    let chunks = samples[0].frames / model.chunk_len;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut student = init_expert::<f32, _>(&model, &mut rng);
    let mut opt = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() });
    let losses = train_causal(&model, &DiffusionConfig::default(), &mut student, &mut opt, &samples, chunks, config.steps, config.seed, log)?;
    Ok(EventRig { config: config.clone(), model, day, night, student, losses })
}

impl EventRig {
    /// Stream `before` chunks under "day", swap to "night", stream `after` more.
    pub fn probe(&self, before: usize, after: usize) -> Result<EventProbe> {
        let midpoint = 0.5 * (mean_luminance(&self.day.frames) + mean_luminance(&self.night.frames));
        let ckpt = student_checkpoint(&self.model, &self.student);
        let config = SessionConfig { cache_chunks: None, seed: self.config.seed, ..SessionConfig::default() };
        let mut session = start_session::<f32>(&ckpt, "day", Some(&self.day.frames[0]), config)?;
        let acts = &self.day.trajectory.actions;
        let n = self.model.chunk_len;
        let mut chunk_luminance = Vec::new();
        for c in 0..before + after {
            if c == before {
                session.swap_prompt("night");
            }
            let actions: Vec<ActionState> = (c * n..(c + 1) * n).map(|i| acts[i % acts.len()]).collect();
            chunk_luminance.push(mean_luminance(&session.stream_chunk(&actions)?));
        }
        let chunks_to_flip = chunk_luminance[before..].iter().position(|&l| l < midpoint).map(|i| i + 1);
        Ok(EventProbe { midpoint, chunk_luminance, swap_after: before, chunks_to_flip })
    }
}
