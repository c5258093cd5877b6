//! Behavior-cloned action planner: one observation in, a fixed-length plan of
//! (key, mouse-direction) tokens out. Plans drive streaming sessions.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::pose::quantize_toward_zero;
use crate::inference::Session;
use crate::model::attention::multi_head_attention;
use crate::model::checkpoint::{Checkpoint, CheckpointMeta};
use crate::model::latent::patchify_frame;
use crate::model::ModelConfig;
use crate::params::{Adam, Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::world::action::{ActionState, Keys};
use crate::world::dynamics::FRAME_DT;
use crate::world::render::Frame;

/// Classes per head: four directions plus none.
pub const CLASSES: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KeyToken {
    #[default]
    None,
    W,
    A,
    S,
    D,
}

/// Discretized mouse direction: I up, K down, J left, L right.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MouseToken {
    #[default]
    None,
    I,
    J,
    K,
    L,
}

const KEY_TOKENS: [KeyToken; CLASSES] = [KeyToken::None, KeyToken::W, KeyToken::A, KeyToken::S, KeyToken::D];
const MOUSE_TOKENS: [MouseToken; CLASSES] = [MouseToken::None, MouseToken::I, MouseToken::J, MouseToken::K, MouseToken::L];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PlanToken {
    pub key: KeyToken,
    pub mouse: MouseToken,
}

impl PlanToken {
    pub fn key_class(self) -> usize {
        KEY_TOKENS.iter().position(|&k| k == self.key).expect("closed alphabet")
    }

    pub fn mouse_class(self) -> usize {
        MOUSE_TOKENS.iter().position(|&m| m == self.mouse).expect("closed alphabet")
    }

    pub fn from_classes(key: usize, mouse: usize) -> Self {
        Self { key: KEY_TOKENS[key % CLASSES], mouse: MOUSE_TOKENS[mouse % CLASSES] }
    }

    /// Total: every token maps to a valid action.
    pub fn to_action(self, timestamp: f64) -> ActionState {
        let keys = match self.key {
            KeyToken::None => Keys::NONE,
            KeyToken::W => Keys::W,
            KeyToken::A => Keys::A,
            KeyToken::S => Keys::S,
            KeyToken::D => Keys::D,
        };
        let d = mouse_delta();
        let (yaw, pitch) = match self.mouse {
            MouseToken::None => (0.0, 0.0),
            MouseToken::I => (0.0, d),
            MouseToken::K => (0.0, -d),
            MouseToken::J => (-d, 0.0),
            MouseToken::L => (d, 0.0),
        };
        ActionState::new(keys, yaw, pitch, timestamp)
    }

    /// Dominant key and mouse direction of an action; forward/back beats strafing
    /// and the larger of pitch and yaw wins.
    pub fn from_action(a: &ActionState) -> Self {
        let (fwd, right) = a.keys.axes();
        let key = if fwd > 0.0 {
            KeyToken::W
        } else if fwd < 0.0 {
            KeyToken::S
        } else if right > 0.0 {
            KeyToken::D
        } else if right < 0.0 {
            KeyToken::A
        } else {
            KeyToken::None
        };
        let mouse = if a.pitch_delta == 0.0 && a.yaw_delta == 0.0 {
            MouseToken::None
        } else if a.pitch_delta.abs() >= a.yaw_delta.abs() {
            if a.pitch_delta > 0.0 { MouseToken::I } else { MouseToken::K }
        } else if a.yaw_delta > 0.0 {
            MouseToken::L
        } else {
            MouseToken::J
        };
        Self { key, mouse }
    }
}

/// Per-frame rotation of a mouse token: π/32 snapped onto the pose grid.
pub fn mouse_delta() -> f64 {
    quantize_toward_zero(PI / 32.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub frame_height: usize,
    pub frame_width: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    /// Plan length in seconds.
    pub horizon: f64,
    /// Plan tokens per second.
    pub rate: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self { frame_height: 64, frame_width: 64, patch: 8, dim: 32, heads: 4, horizon: 10.0, rate: 4.0 }
    }
}

impl AgentConfig {
    pub fn steps(&self) -> usize {
        (self.horizon * self.rate).round() as usize
    }

    pub fn tokens(&self) -> usize {
        (self.frame_height / self.patch) * (self.frame_width / self.patch)
    }

    pub fn channels(&self) -> usize {
        3 * self.patch * self.patch
    }

    /// World frames covered by one plan token.
    pub fn frames_per_token(&self) -> usize {
        ((1.0 / (self.rate * FRAME_DT)).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.frame_height % self.patch != 0 || self.frame_width % self.patch != 0 {
            return Err(Error::IndivisibleDims { height: self.frame_height, width: self.frame_width, patch: self.patch });
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if !(self.horizon > 0.0 && self.rate > 0.0) || self.steps() == 0 {
            return Err(Error::Config("plan must contain at least one step".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionChunkPlan {
    pub horizon: f64,
    pub rate: f64,
    pub tokens: Vec<PlanToken>,
}

impl ActionChunkPlan {
    /// Per-frame actions, each token held for `frames_per_token` frames.
    pub fn to_actions(&self, frames_per_token: usize, start_time: f64) -> Vec<ActionState> {
        self.tokens
            .iter()
            .flat_map(|t| std::iter::repeat_n(*t, frames_per_token))
            .enumerate()
            .map(|(i, t)| t.to_action(start_time + i as f64 * FRAME_DT))
            .collect()
    }
}

/// Behavior-cloning targets for a plan starting at `start`: one token per
/// `stride` actions, padded with none past the end.
pub fn plan_targets(actions: &[ActionState], start: usize, steps: usize, stride: usize) -> Vec<PlanToken> {
    (0..steps)
        .map(|s| actions.get(start + s * stride).map(PlanToken::from_action).unwrap_or_default())
        .collect()
}

fn randn<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(rows, cols, 1.0 / (rows as f64).sqrt(), rng)
}

/// Patch embedding, two self-attention blocks, then learned per-step queries
/// reading the encoded frame. Both heads start at zero, so logits start uniform.
pub fn init_agent<T: Scalar, R: Rng + ?Sized>(cfg: &AgentConfig, rng: &mut R) -> ParamStore<T> {
    let d = cfg.dim;
    let mut p = ParamStore::new();
    p.insert("in.w", randn(cfg.channels(), d, rng));
    p.insert("in.b", Tensor::zeros(1, d));
    p.insert("pos", Tensor::randn(cfg.tokens(), d, 0.1, rng));
    for l in 0..2 {
        for w in ["q", "k", "v", "o"] {
            p.insert(format!("blocks.{l}.attn.{w}"), randn(d, d, rng));
        }
        p.insert(format!("blocks.{l}.mlp.w1"), randn(d, 2 * d, rng));
        p.insert(format!("blocks.{l}.mlp.b1"), Tensor::zeros(1, 2 * d));
        p.insert(format!("blocks.{l}.mlp.w2"), randn(2 * d, d, rng));
        p.insert(format!("blocks.{l}.mlp.b2"), Tensor::zeros(1, d));
    }
    p.insert("plan.query", Tensor::randn(cfg.steps(), d, 1.0, rng));
    for w in ["q", "k", "v", "o"] {
        p.insert(format!("plan.{w}"), randn(d, d, rng));
    }
    p.insert("key.w", Tensor::zeros(d, CLASSES));
    p.insert("key.b", Tensor::zeros(1, CLASSES));
    p.insert("mouse.w", Tensor::zeros(d, CLASSES));
    p.insert("mouse.b", Tensor::zeros(1, CLASSES));
    p
}

/// `(key logits, mouse logits)`, each `steps × CLASSES`.
pub fn agent_forward<'t, T: Scalar>(
    cfg: &AgentConfig,
    params: &Bound<'t, T>,
    tokens: &Tensor<T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    if tokens.shape() != (cfg.tokens(), cfg.channels()) {
        return Err(Error::Shape(format!("observation {:?}, expected ({}, {})", tokens.shape(), cfg.tokens(), cfg.channels())));
    }
    let p = |n: &str| params.get(n);
    let tape = p("in.w").tape();
    let mut h = tape.constant(tokens.clone()).matmul(p("in.w")).add_row(p("in.b")).add(p("pos"));
    for l in 0..2 {
        let b = |n: &str| p(&format!("blocks.{l}.{n}"));
        let hn = h.layer_norm();
        let a = multi_head_attention(hn.matmul(b("attn.q")), hn.matmul(b("attn.k")), hn.matmul(b("attn.v")), cfg.heads, None);
        h = h.add(a.matmul(b("attn.o")));
        let m = h.layer_norm().matmul(b("mlp.w1")).add_row(b("mlp.b1")).silu().matmul(b("mlp.w2")).add_row(b("mlp.b2"));
        h = h.add(m);
    }
    let enc = h.layer_norm();
    let query = p("plan.query");
    let read = multi_head_attention(
        query.layer_norm().matmul(p("plan.q")),
        enc.matmul(p("plan.k")),
        enc.matmul(p("plan.v")),
        cfg.heads,
        None,
    );
    let z = query.add(read.matmul(p("plan.o"))).layer_norm();
    Ok((z.matmul(p("key.w")).add_row(p("key.b")), z.matmul(p("mouse.w")).add_row(p("mouse.b"))))
}

/// Mean per-step cross-entropy of both heads, summed.
pub fn agent_loss<'t, T: Scalar>(
    cfg: &AgentConfig,
    params: &Bound<'t, T>,
    tokens: &Tensor<T>,
    targets: &[PlanToken],
) -> Result<Var<'t, T>> {
    if targets.len() != cfg.steps() {
        return Err(Error::ActionCount { expected: cfg.steps(), got: targets.len() });
    }
    let (key, mouse) = agent_forward(cfg, params, tokens)?;
    let k = key.cross_entropy(targets.iter().map(|t| t.key_class()).collect());
    let m = mouse.cross_entropy(targets.iter().map(|t| t.mouse_class()).collect());
    Ok(k.add(m))
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Agent<T> {
    pub config: AgentConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Agent<T> {
    pub fn new<R: Rng + ?Sized>(config: AgentConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = init_agent(&config, rng);
        Ok(Self { config, params })
    }

    fn observe(&self, frame: &Frame) -> Result<Tensor<T>> {
        let c = &self.config;
        if (frame.height, frame.width) != (c.frame_height, c.frame_width) {
            return Err(Error::ResolutionMismatch {
                expected_h: c.frame_height,
                expected_w: c.frame_width,
                got_h: frame.height,
                got_w: frame.width,
            });
        }
        patchify_frame(frame, c.patch)
    }

    /// Greedy decode of both heads.
    pub fn predict(&self, observation: &Frame) -> Result<ActionChunkPlan> {
        let tokens = self.observe(observation)?;
        let tape = Tape::new();
        let bound = Bound::frozen(&tape, &self.params);
        let (key, mouse) = agent_forward(&self.config, &bound, &tokens)?;
        let (key, mouse) = (key.value(), mouse.value());
        let tokens = (0..self.config.steps())
            .map(|s| PlanToken::from_classes(argmax(key.row(s)), argmax(mouse.row(s))))
            .collect();
        Ok(ActionChunkPlan { horizon: self.config.horizon, rate: self.config.rate, tokens })
    }

    /// One optimizer step on the mean loss of `batch`; returns that loss.
    pub fn train_step(&mut self, opt: &mut Adam<T>, batch: &[(Frame, Vec<PlanToken>)]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        let obs = batch.iter().map(|(f, _)| self.observe(f)).collect::<Result<Vec<_>>>()?;
        let tape = Tape::new();
        let bound = Bound::trainable(&tape, &self.params);
        let mut total: Option<Var<T>> = None;
        for (o, (_, targets)) in obs.iter().zip(batch) {
            let l = agent_loss(&self.config, &bound, o, targets)?;
            total = Some(match total {
                Some(t) => t.add(l),
                None => l,
            });
        }
        let loss = total.expect("non-empty batch").scale(T::lit(1.0 / batch.len() as f64));
        let grads = bound.grads(&tape.backward(loss));
        opt.step(&mut self.params, &grads);
        Ok(loss.value().item().to_f64_lossy())
    }

    /// Share checkpoint framing with the world model; the planner config rides in the metadata.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let config = ModelConfig {
            frame_height: c.frame_height,
            frame_width: c.frame_width,
            patch: c.patch,
            dim: c.dim,
            heads: c.heads,
            ..ModelConfig::default()
        };
        Checkpoint {
            meta: CheckpointMeta {
                kind: "agent".into(),
                config,
                extra: serde_json::to_value(c).expect("plain config serializes"),
            },
            params: self.params.cast(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.kind != "agent" {
            return Err(Error::Malformed(format!("expected an agent checkpoint, found {}", ckpt.meta.kind)));
        }
        let config: AgentConfig =
            serde_json::from_value(ckpt.meta.extra.clone()).map_err(|e| Error::Malformed(e.to_string()))?;
        config.validate()?;
        Ok(Self { config, params: ckpt.params.cast() })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DriveRecord {
    pub frames: Vec<Frame>,
    pub plans: Vec<ActionChunkPlan>,
    pub actions: Vec<ActionState>,
}

/// Closed loop: plan from the latest frame, feed the plan's first chunk of
/// actions to the session, repeat. `start` is the observation before chunk 0.
pub fn agent_drive<T: Scalar, U: Scalar>(
    session: &mut Session<T>,
    agent: &Agent<U>,
    start: &Frame,
    n_chunks: usize,
) -> Result<DriveRecord> {
    let mut record = DriveRecord::default();
    let chunk_len = session.model.chunk_len;
    let mut obs = start.clone();
    for c in 0..n_chunks {
        let plan = agent.predict(&obs)?;
        let t0 = (c * chunk_len) as f64 * FRAME_DT;
        let mut actions = plan.to_actions(agent.config.frames_per_token(), t0);
        actions.truncate(chunk_len);
        while actions.len() < chunk_len {
            let last = actions.last().copied().unwrap_or_default();
            actions.push(last);
        }
        let frames = session.stream_chunk(&actions)?;
        obs = frames.last().expect("chunk_len > 0").clone();
        record.frames.extend(frames);
        record.actions.extend(actions);
        record.plans.push(plan);
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn plan_length_is_horizon_times_rate() {
        let cfg = AgentConfig::default();
        assert_eq!(cfg.steps(), 40);
        assert_eq!(cfg.frames_per_token(), 2);
    }

    #[test]
    fn token_conversion_is_documented_mapping() {
        let a = PlanToken { key: KeyToken::W, mouse: MouseToken::I }.to_action(0.0);
        assert_eq!(a.keys, Keys::W);
        assert_eq!(a.yaw_delta, 0.0);
        assert_eq!(a.pitch_delta, mouse_delta());
        assert!((mouse_delta() - PI / 32.0).abs() < 1e-8);
        let j = PlanToken { key: KeyToken::None, mouse: MouseToken::J }.to_action(0.0);
        assert_eq!(j.yaw_delta, -mouse_delta());
    }

    #[test]
    fn every_token_round_trips_through_its_action() {
        for k in 0..CLASSES {
            for m in 0..CLASSES {
                let t = PlanToken::from_classes(k, m);
                let a = t.to_action(0.0);
                assert!(a.is_valid());
                assert_eq!(PlanToken::from_action(&a), t);
            }
        }
    }

    #[test]
    fn zero_heads_give_uniform_loss() {
        let cfg = AgentConfig { frame_height: 16, frame_width: 16, patch: 8, dim: 8, heads: 2, ..AgentConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = init_agent::<f64, _>(&cfg, &mut rng);
        let tape = Tape::new();
        let bound = Bound::frozen(&tape, &params);
        let obs = Tensor::randn(cfg.tokens(), cfg.channels(), 1.0, &mut rng);
        let targets = vec![PlanToken { key: KeyToken::S, mouse: MouseToken::L }; cfg.steps()];
        let loss = agent_loss(&cfg, &bound, &obs, &targets).unwrap().value().item();
        assert!((loss - 2.0 * 5f64.ln()).abs() < 1e-12);
        assert!(matches!(agent_loss(&cfg, &bound, &obs, &targets[1..]), Err(Error::ActionCount { .. })));
    }
}
