//! Streaming sessions: chunked generation against a rolling cache with live
//! actions, prompt swaps at chunk boundaries and latency accounting.

use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::geometry::pose::{CameraPose, Intrinsics};
use crate::model::cache::{CacheEntry, KvCache};
use crate::model::checkpoint::Checkpoint;
use crate::model::conditioning::{frame_action_features, tokenize_prompt, TextCond};
use crate::model::latent::{patchify_frame, unpatchify_frame};
use crate::model::ModelConfig;
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::streaming::{chunk_kv, generate_chunk, ChunkCond};
use crate::tensor::Tensor;
use crate::world::action::ActionState;
use crate::world::dynamics::{step_with_clearance, FRAME_DT};
use crate::world::render::Frame;
use crate::world::spec::WorldSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    /// Rolling cache capacity in chunks; `None` keeps everything.
    pub cache_chunks: Option<usize>,
    pub student_steps: usize,
    pub seed: u64,
    /// Target frame rate, reported against measured throughput.
    pub fps: f64,
    /// Drop cached history when the prompt changes instead of keeping it.
    pub flush_on_prompt: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self { cache_chunks: Some(8), student_steps: 4, seed: 0, fps: 16.0, flush_on_prompt: false }
    }
}

/// Pending actions with hold-to-repeat on underflow.
#[derive(Clone, Debug, Default)]
pub struct ActionQueue {
    pending: VecDeque<ActionState>,
    last: ActionState,
    repeated: u64,
}

impl ActionQueue {
    pub fn push(&mut self, action: ActionState) {
        self.pending.push_back(action);
    }

    pub fn depth(&self) -> usize {
        self.pending.len()
    }

    /// Actions substituted by repetition so far.
    pub fn repeated(&self) -> u64 {
        self.repeated
    }

    /// Next `n` actions; once the queue runs dry the last action repeats.
    pub fn take(&mut self, n: usize) -> Vec<ActionState> {
        (0..n)
            .map(|_| match self.pending.pop_front() {
                Some(a) => {
                    self.last = a;
                    a
                }
                None => {
                    self.repeated += 1;
                    self.last
                }
            })
            .collect()
    }

    pub fn clear(&mut self) {
        self.pending.clear();
        self.last = ActionState::default();
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub chunks: u64,
    pub frames: u64,
    pub wall_ms_p50: f64,
    pub wall_ms_p90: f64,
    pub wall_ms_p99: f64,
    pub model_ms_mean: f64,
    /// Encode, decode and queue handling per frame.
    pub overhead_ms_per_frame: f64,
    pub frames_per_second: f64,
    pub target_fps: f64,
    pub queue_depth: u64,
    pub repeated_actions: u64,
    pub dropped_frames: u64,
    pub evicted_chunks: u64,
}

#[derive(Clone, Debug, Default)]
struct Timings {
    wall: Vec<f64>,
    model: Vec<f64>,
    frames: u64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// One interactive world. Owned by a single generation loop; other contexts
/// talk to it only through its action queue and prompt slot.
pub struct Session<T> {
    pub model: ModelConfig,
    pub config: SessionConfig,
    params: ParamStore<T>,
    prompt: String,
    tokens: Vec<usize>,
    pending_prompt: Option<String>,
    image: Option<Tensor<T>>,
    cache: KvCache<T>,
    chunk_index: usize,
    pose: CameraPose,
    reference: CameraPose,
    queue: ActionQueue,
    timings: Timings,
    history: Vec<Tensor<T>>,
    pub dropped_frames: u64,
}

fn start_pose(cfg: &ModelConfig) -> CameraPose {
    let k = Intrinsics::for_resolution(cfg.frame_height, cfg.frame_width);
    CameraPose::quantized(Vector3::new(16.5, 0.0, 16.5), 0.0, 0.0, k)
}

/// Open a session from a student checkpoint. With an image the first frame
/// of chunk 0 is that image; otherwise chunk 0 is generated from the prompt alone.
pub fn start_session<T: Scalar>(
    ckpt: &Checkpoint,
    prompt: &str,
    image: Option<&Frame>,
    config: SessionConfig,
) -> Result<Session<T>> {
    let model = ckpt.meta.config.clone();
    model.validate()?;
    if !(1..=4).contains(&config.student_steps) {
        return Err(Error::Config(format!("student_steps {} outside 1..=4", config.student_steps)));
    }
    if config.cache_chunks == Some(0) {
        return Err(Error::Config("cache capacity must be at least one chunk".into()));
    }
    if ckpt.params.get("in.w").is_none() {
        return Err(Error::Malformed("checkpoint has no student parameters".into()));
    }
    let image = match image {
        Some(f) => {
            if (f.height, f.width) != (model.frame_height, model.frame_width) {
                return Err(Error::ResolutionMismatch {
                    expected_h: model.frame_height,
                    expected_w: model.frame_width,
                    got_h: f.height,
                    got_w: f.width,
                });
            }
            Some(patchify_frame::<T>(f, model.patch)?)
        }
        None => None,
    };
    let pose = start_pose(&model);
    Ok(Session {
        params: ckpt.params.cast(),
        prompt: prompt.to_string(),
        tokens: tokenize_prompt(prompt, model.vocab),
        pending_prompt: None,
        image,
        cache: KvCache::new(model.depth, model.chunk_tokens(), model.dim, config.cache_chunks),
        chunk_index: 0,
        pose,
        reference: pose,
        queue: ActionQueue::default(),
        timings: Timings::default(),
        history: Vec::new(),
        dropped_frames: 0,
        model,
        config,
    })
}

impl<T: Scalar> Session<T> {
    pub fn prompt(&self) -> &str {
        &self.prompt
    }

    pub fn chunk_index(&self) -> usize {
        self.chunk_index
    }

    pub fn cache(&self) -> &KvCache<T> {
        &self.cache
    }

    /// Latents of every chunk generated since the last reset.
    pub fn history(&self) -> &[Tensor<T>] {
        &self.history
    }

    pub fn enqueue_action(&mut self, action: ActionState) {
        self.queue.push(action);
    }

    /// Replace the prompt from the next chunk on; the chunk in flight keeps the old one.
    pub fn swap_prompt(&mut self, text: &str) {
        self.pending_prompt = Some(text.to_string());
    }

    /// Restart at chunk 0 with an empty cache, keeping the current prompt.
    pub fn reset(&mut self) {
        self.apply_pending_prompt();
        self.cache.clear();
        self.chunk_index = 0;
        self.pose = start_pose(&self.model);
        self.reference = self.pose;
        self.queue.clear();
        self.history.clear();
    }

    fn apply_pending_prompt(&mut self) {
        if let Some(p) = self.pending_prompt.take() {
            let changed = p != self.prompt;
            self.tokens = tokenize_prompt(&p, self.model.vocab);
            self.prompt = p;
            if changed && self.config.flush_on_prompt {
                let next = self.cache.next_index();
                self.cache = KvCache::new(self.model.depth, self.model.chunk_tokens(), self.model.dim, self.config.cache_chunks);
                for _ in 0..next {
                    // keep indices contiguous across the flush
                    self.cache.skip_index();
                }
            }
        }
    }

    /// Generate the chunk for queued actions, repeating the last one on underflow.
    pub fn step(&mut self) -> Result<Vec<Frame>> {
        let actions = self.queue.take(self.model.chunk_len);
        self.stream_chunk(&actions)
    }

    /// Generate and decode one chunk for exactly `chunk_len` actions.
    pub fn stream_chunk(&mut self, actions: &[ActionState]) -> Result<Vec<Frame>> {
        let cfg = self.model.clone();
        if actions.len() != cfg.chunk_len {
            return Err(Error::ActionCount { expected: cfg.chunk_len, got: actions.len() });
        }
        let start = Instant::now();
        self.apply_pending_prompt();
        let world = WorldSpec::empty(0);
        let mut poses = Vec::with_capacity(actions.len());
        for a in actions {
            self.pose = step_with_clearance(&self.pose, a, FRAME_DT, &world, 0.0);
            poses.push(self.pose);
        }
        let features = frame_action_features::<T>(&poses, actions, &self.reference)?;

        let model_start = Instant::now();
        let index = self.chunk_index;
        let image = if index == 0 { self.image.as_ref() } else { None };
        let cond = ChunkCond { index, actions: &features, text: TextCond::Uniform(&self.tokens), image };
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(index as u64));
        let layers = self.cache.layers();
        let chunk = {
            let tape = Tape::new();
            let bound = Bound::frozen(&tape, &self.params);
            let chunk = (*generate_chunk(&cfg, &bound, &layers, &cond, self.config.student_steps, &mut rng)?.value()).clone();
            let kv = chunk_kv(&cfg, &bound, &layers, &cond, &chunk)?;
            self.cache.append(CacheEntry { index, layers: kv })?;
            chunk
        };
        let model_time = model_start.elapsed().as_secs_f64();

        let n = cfg.tokens_per_frame();
        let frames = (0..cfg.chunk_len)
            .map(|f| unpatchify_frame(&chunk.slice_rows(f * n, n), cfg.frame_height, cfg.frame_width, cfg.patch))
            .collect::<Result<Vec<_>>>()?;
        self.history.push(chunk);
        self.chunk_index += 1;
        self.timings.wall.push(start.elapsed().as_secs_f64());
        self.timings.model.push(model_time);
        self.timings.frames += frames.len() as u64;
        Ok(frames)
    }

    pub fn stats(&self) -> StatsReport {
        let t = &self.timings;
        let mut wall: Vec<f64> = t.wall.iter().map(|s| s * 1e3).collect();
        wall.sort_by(f64::total_cmp);
        let total_wall: f64 = t.wall.iter().sum();
        let total_model: f64 = t.model.iter().sum();
        let chunks = t.wall.len() as u64;
        StatsReport {
            chunks,
            frames: t.frames,
            wall_ms_p50: percentile(&wall, 0.5),
            wall_ms_p90: percentile(&wall, 0.9),
            wall_ms_p99: percentile(&wall, 0.99),
            model_ms_mean: if chunks == 0 { 0.0 } else { total_model * 1e3 / chunks as f64 },
            overhead_ms_per_frame: if t.frames == 0 { 0.0 } else { (total_wall - total_model) * 1e3 / t.frames as f64 },
            frames_per_second: if total_wall > 0.0 { t.frames as f64 / total_wall } else { 0.0 },
            target_fps: self.config.fps,
            queue_depth: self.queue.depth() as u64,
            repeated_actions: self.queue.repeated(),
            dropped_frames: self.dropped_frames,
            evicted_chunks: self.cache.evicted().len() as u64,
        }
    }
}
