//! Synthetic camera trajectories and the pose-log interchange format.
//!
//! Convention shared by every generator: `poses[i] = step(poses[i-1], actions[i])`
//! with `actions[0]` idle, so `poses[0]` is the start pose and replaying the
//! actions through the oracle dynamics reproduces the poses.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_8, PI, TAU};
use std::fmt::Write as _;

use nalgebra::{Quaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pose::{quantize, quantize_toward_zero, quantized_turn, wrap_angle, CameraPose, Intrinsics};
use crate::error::{Error, Result};
use crate::world::action::{ActionState, Keys, MAX_PITCH_DELTA, MAX_YAW_DELTA};
use crate::world::dynamics::{heading_axes, step_dynamics, step_with_clearance};
use crate::world::spec::{WorldSpec, ARENA_CELLS, CLEARANCE, MOVE_SPEED};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrajectoryKind {
    Rect,
    Rotation,
    Waypoint,
    Imported,
    Gameplay,
}

/// What the camera does over a run of frames; drives dense captions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Motion {
    Still,
    Rotate { sweep: f64 },
    Side { index: usize },
    Leg { waypoint: usize },
    LookBack { waypoint: usize },
    Forward,
    Backward,
    Strafe { right: bool },
    Turn { right: bool },
    Mixed,
}

/// Half-open frame range `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub motion: Motion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    #[serde(with = "pose_serde")]
    pub poses: Vec<CameraPose>,
    pub timestamps: Vec<f64>,
    pub actions: Vec<ActionState>,
    pub kind: TrajectoryKind,
    /// Tiles `[0, len)` in order.
    pub segments: Vec<Segment>,
}

impl Trajectory {
    pub fn new(
        poses: Vec<CameraPose>,
        timestamps: Vec<f64>,
        actions: Vec<ActionState>,
        kind: TrajectoryKind,
        segments: Vec<Segment>,
    ) -> Result<Self> {
        if poses.is_empty() || poses.len() != timestamps.len() || poses.len() != actions.len() {
            return Err(Error::Precondition(format!(
                "trajectory lengths disagree: {} poses, {} timestamps, {} actions",
                poses.len(),
                timestamps.len(),
                actions.len()
            )));
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0] || !w[1].is_finite()) {
            return Err(Error::NonMonotoneTimestamp { line: i + 2 });
        }
        let mut at = 0;
        for s in &segments {
            if s.start != at || s.end <= s.start {
                return Err(Error::Precondition("segments must tile the trajectory".into()));
            }
            at = s.end;
        }
        if !segments.is_empty() && at != poses.len() {
            return Err(Error::Precondition("segments must tile the trajectory".into()));
        }
        Ok(Self { poses, timestamps, actions, kind, segments })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Time from the first frame to the end of the last frame's interval.
    pub fn duration(&self) -> f64 {
        let n = self.timestamps.len();
        let last = if n >= 2 { self.timestamps[n - 1] - self.timestamps[n - 2] } else { 1.0 / 8.0 };
        self.timestamps[n - 1] - self.timestamps[0] + last
    }

    /// Start time of frame `i` relative to the first frame; `i == len` maps to the duration.
    pub fn relative_time(&self, i: usize) -> f64 {
        if i >= self.len() {
            self.duration()
        } else {
            self.timestamps[i] - self.timestamps[0]
        }
    }

    /// Step interval feeding action `i` (the idle first action uses the next interval).
    pub fn step_dt(&self, i: usize) -> f64 {
        if i == 0 {
            if self.len() >= 2 {
                self.timestamps[1] - self.timestamps[0]
            } else {
                1.0 / 8.0
            }
        } else {
            self.timestamps[i] - self.timestamps[i - 1]
        }
    }

    /// Re-integrate the actions from `poses[0]` through the oracle dynamics.
    pub fn replay(&self, world: &WorldSpec) -> Vec<CameraPose> {
        let mut out = Vec::with_capacity(self.len());
        let mut pose = self.poses[0];
        out.push(pose);
        for i in 1..self.len() {
            pose = step_dynamics(&pose, &self.actions[i], self.step_dt(i), world);
            out.push(pose);
        }
        out
    }

    /// Largest per-frame position or orientation error between stored poses and a replay.
    pub fn replay_error(&self, world: &WorldSpec) -> f64 {
        self.replay(world)
            .iter()
            .zip(&self.poses)
            .map(|(a, b)| {
                let dp = (a.position - b.position).norm();
                let dq = a.orientation.angle_to(&b.orientation);
                dp.max(dq)
            })
            .fold(0.0, f64::max)
    }
}

/// Incrementally builds a trajectory by stepping the oracle dynamics.
struct Builder<'w> {
    world: &'w WorldSpec,
    dt: f64,
    poses: Vec<CameraPose>,
    actions: Vec<ActionState>,
    segments: Vec<Segment>,
    seg_start: usize,
}

impl<'w> Builder<'w> {
    fn new(world: &'w WorldSpec, start: CameraPose, frame_rate: f64) -> Self {
        Self {
            world,
            dt: 1.0 / frame_rate,
            poses: vec![start],
            actions: vec![ActionState::idle(0.0)],
            segments: Vec::new(),
            seg_start: 0,
        }
    }

    fn pose(&self) -> CameraPose {
        *self.poses.last().expect("builder starts with a pose")
    }

    fn len(&self) -> usize {
        self.poses.len()
    }

    /// Steps and reports whether any requested translation actually happened.
    fn push(&mut self, keys: Keys, yaw_delta: f64, pitch_delta: f64) -> bool {
        let t = self.len() as f64 * self.dt;
        let a = ActionState::new(keys, yaw_delta, pitch_delta, t);
        let before = self.pose();
        let next = step_dynamics(&before, &a, self.dt, self.world);
        self.actions.push(a);
        self.poses.push(next);
        let (fwd, strafe) = keys.axes();
        fwd == 0.0 && strafe == 0.0 || next.position != before.position
    }

    fn close_segment(&mut self, motion: Motion) {
        if self.len() > self.seg_start {
            self.segments.push(Segment { start: self.seg_start, end: self.len(), motion });
            self.seg_start = self.len();
        }
    }

    fn truncate(&mut self, len: usize) {
        self.poses.truncate(len);
        self.actions.truncate(len);
    }

    fn finish(self, kind: TrajectoryKind) -> Result<Trajectory> {
        let timestamps = (0..self.poses.len()).map(|i| i as f64 * self.dt).collect();
        Trajectory::new(self.poses, timestamps, self.actions, kind, self.segments)
    }
}

fn default_intrinsics() -> Intrinsics {
    Intrinsics::for_resolution(64, 64)
}

/// Closed square loop of side `scale`: per side, forward steps spread evenly
/// over the side's frame budget followed by two turning frames.
///
/// Frame count is `4 · round(scale / speed · frame_rate)`. The walked side
/// length is the nearest multiple of the per-frame step `MOVE_SPEED / frame_rate`.
pub fn gen_rect_path(scale: f64, speed: f64, frame_rate: f64, seed: u64) -> Result<Trajectory> {
    if !(scale > 0.0 && speed > 0.0 && frame_rate > 0.0) {
        return Err(Error::Precondition("scale, speed and frame_rate must be positive".into()));
    }
    let frames_per_side = (scale / speed * frame_rate).round() as usize;
    let step = MOVE_SPEED / frame_rate;
    let walks = (scale / step).round() as usize;
    if walks == 0 || frames_per_side < walks + 3 {
        return Err(Error::Precondition(format!(
            "side needs {walks} steps plus 3 free frames but only has {frames_per_side}; lower the speed"
        )));
    }
    let side = walks as f64 * step;
    let limit = ARENA_CELLS as f64 - 1.0;
    if side > limit - 1.0 {
        return Err(Error::Precondition(format!("square side {side} does not fit in the arena")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let yaw0 = rng.gen_range(0..4) as f64 * FRAC_PI_2;
    let turn = if rng.gen_bool(0.5) { FRAC_PI_2 } else { -FRAC_PI_2 };

    // corners relative to the start, to place the square inside the arena
    let mut corner = Vector3::zeros();
    let (mut lo, mut hi) = (corner, corner);
    for k in 0..4 {
        let (f, _) = heading_axes(yaw0 + k as f64 * turn);
        corner += f * side;
        lo = lo.inf(&corner);
        hi = hi.sup(&corner);
    }
    let span = hi - lo;
    let x = rng.gen_range(1.0..=(limit - span.x)) - lo.x;
    let z = rng.gen_range(1.0..=(limit - span.z)) - lo.z;
    let start = CameraPose::quantized(Vector3::new(x, 0.0, z), yaw0, 0.0, default_intrinsics());

    let world = WorldSpec::empty(seed);
    let mut b = Builder::new(&world, start, frame_rate);
    let budget = frames_per_side - 2;
    // a grid-aligned quarter turn would exceed the per-frame limit by a
    // fraction of a quantum, so yaw closes to within a few grid steps
    let half = quantize_toward_zero(turn / 2.0);
    for s in 0..4 {
        for j in 0..frames_per_side {
            if j >= budget {
                b.push(Keys::NONE, half, 0.0);
            } else if s > 0 || j > 0 {
                // Bresenham spread of `walks` steps over local frames 1..budget
                let walk = j > 0 && (j * walks) / (budget - 1) > ((j - 1) * walks) / (budget - 1);
                b.push(if walk { Keys::W } else { Keys::NONE }, 0.0, 0.0);
            }
        }
        b.close_segment(Motion::Side { index: s });
    }
    b.finish(TrajectoryKind::Rect)
}

/// Stationary multi-turn rotation: `round(2π·turns / angular_speed · frame_rate)`
/// frames whose yaw sweeps exactly `2π·turns`.
pub fn gen_rotation_path(turns: u32, angular_speed: f64, frame_rate: f64, seed: u64) -> Result<Trajectory> {
    if turns == 0 || !(angular_speed > 0.0) || !(frame_rate > 0.0) {
        return Err(Error::Precondition("turns >= 1 and positive angular speed / frame rate required".into()));
    }
    let sweep = TAU * turns as f64;
    let n = (sweep / angular_speed * frame_rate).round() as usize;
    if n < 2 {
        return Err(Error::Precondition("rotation must span at least two frames".into()));
    }
    let per_frame = quantize(sweep / (n - 1) as f64);
    let last = turns as f64 * quantized_turn() - (n - 2) as f64 * per_frame;
    if per_frame.max(last) > MAX_YAW_DELTA {
        return Err(Error::Precondition(format!("angular speed needs {per_frame} rad/frame, above the limit")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = 16.0 + rng.gen_range(0.0..1.0);
    let z = 16.0 + rng.gen_range(0.0..1.0);
    let yaw0 = rng.gen_range(-PI..PI);
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let start = CameraPose::quantized(Vector3::new(x, 0.0, z), yaw0, 0.0, default_intrinsics());
    let world = WorldSpec::empty(seed);
    let mut b = Builder::new(&world, start, frame_rate);
    for i in 1..n {
        let d = if i == n - 1 { last } else { per_frame };
        b.push(Keys::NONE, sign * d, 0.0);
    }
    b.close_segment(Motion::Rotate { sweep: sign * sweep });
    b.finish(TrajectoryKind::Rotation)
}

/// Rotation speed used for look-back segments, radians per frame.
pub const LOOKBACK_RATE: f64 = FRAC_PI_8;
/// Largest yaw step used when turning toward the next waypoint.
const LEG_TURN_RATE: f64 = FRAC_PI_8;
/// Waypoints keep at least this distance from occupied cells.
const WAYPOINT_MARGIN: f64 = 0.5;

fn turn_in_place(b: &mut Builder, delta: f64, rate: f64) {
    if delta.abs() < 1e-12 {
        return;
    }
    let frames = (delta.abs() / rate).ceil() as usize;
    let d = delta / frames as f64;
    for _ in 0..frames {
        b.push(Keys::NONE, d, 0.0);
    }
}

fn heading_to(from: &Vector3<f64>, to: &Vector3<f64>) -> f64 {
    (to.x - from.x).atan2(to.z - from.z)
}

/// Turn toward the target, then walk straight for the nearest whole number
/// of steps. Returns false if any step was blocked or came within clearance.
fn walk_leg(b: &mut Builder, target: &Vector3<f64>) -> bool {
    let here = b.pose();
    let delta = wrap_angle(heading_to(&here.position, target) - here.yaw());
    turn_in_place(b, delta, LEG_TURN_RATE);
    let dist = (target - b.pose().position).norm();
    let steps = (dist / (MOVE_SPEED * b.dt)).round() as usize;
    for _ in 0..steps {
        if !b.push(Keys::W, 0.0, 0.0) {
            return false;
        }
    }
    true
}

/// Piecewise path through `n_waypoints` free-space points. After each leg,
/// with probability `lookback_prob`, the camera rotates in place to re-face
/// the waypoint it came from.
pub fn gen_waypoint_path(n_waypoints: usize, lookback_prob: f64, world: &WorldSpec, seed: u64) -> Result<Trajectory> {
    gen_waypoint_path_at(n_waypoints, lookback_prob, world, seed, 8.0)
}

pub fn gen_waypoint_path_at(
    n_waypoints: usize,
    lookback_prob: f64,
    world: &WorldSpec,
    seed: u64,
    frame_rate: f64,
) -> Result<Trajectory> {
    if n_waypoints < 2 {
        return Err(Error::Precondition("need at least two waypoints".into()));
    }
    if !(0.0..=1.0).contains(&lookback_prob) {
        return Err(Error::Precondition("lookback_prob must lie in [0, 1]".into()));
    }
    let max_attempts = 10 * n_waypoints;
    let mut attempts = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let limit = ARENA_CELLS as f64 - 1.0;
    let sample = |rng: &mut ChaCha8Rng, attempts: &mut usize| -> Result<Vector3<f64>> {
        loop {
            if *attempts >= max_attempts {
                return Err(Error::SamplingExhausted { attempts: *attempts });
            }
            *attempts += 1;
            let p = Vector3::new(rng.gen_range(1.0..limit), 0.0, rng.gen_range(1.0..limit));
            if world.clearance_at(p.x, p.z, WAYPOINT_MARGIN) >= WAYPOINT_MARGIN {
                return Ok(p);
            }
        }
    };

    let first = sample(&mut rng, &mut attempts)?;
    let mut waypoints = vec![first];
    // face a provisional direction; the first leg turns as needed
    let start = CameraPose::quantized(first, rng.gen_range(-PI..PI), 0.0, default_intrinsics());
    let mut b = Builder::new(world, start, frame_rate);
    for w in 1..n_waypoints {
        loop {
            let target = sample(&mut rng, &mut attempts)?;
            let checkpoint = b.len();
            if walk_leg(&mut b, &target) && check_poses(&b.poses[checkpoint..], world, CLEARANCE).is_empty() {
                waypoints.push(target);
                break;
            }
            b.truncate(checkpoint);
        }
        b.close_segment(Motion::Leg { waypoint: w });
        if rng.gen_bool(lookback_prob) {
            let here = b.pose();
            let prev = waypoints[w - 1];
            let delta = wrap_angle(heading_to(&here.position, &prev) - here.yaw());
            // a zero-length leg leaves nothing to re-face; still rotate a half turn
            let delta = if (here.position - prev).norm() < 1e-9 { PI } else { delta };
            turn_in_place(&mut b, delta, LOOKBACK_RATE);
            b.close_segment(Motion::LookBack { waypoint: w - 1 });
        }
    }
    b.finish(TrajectoryKind::Waypoint)
}

/// Game-capture style behaviours reproduced in the oracle world.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GameplayScenario {
    /// Random runs of keys and turns.
    FreeNavigation,
    /// Walk out, turn around, walk back to the start.
    LoopRoaming,
    /// Retreat while sweeping the view.
    BackwardNavigation,
    /// Fixed position and angle.
    Staring,
}

impl GameplayScenario {
    pub const ALL: [GameplayScenario; 4] = [
        GameplayScenario::FreeNavigation,
        GameplayScenario::LoopRoaming,
        GameplayScenario::BackwardNavigation,
        GameplayScenario::Staring,
    ];
}

/// Spawn point at the arena center with a seeded heading.
fn center_start(rng: &mut ChaCha8Rng) -> CameraPose {
    let yaw = rng.gen_range(-PI..PI);
    CameraPose::quantized(Vector3::new(16.5, 0.0, 16.5), yaw, 0.0, default_intrinsics())
}

pub fn gen_gameplay_path(
    scenario: GameplayScenario,
    frames: usize,
    world: &WorldSpec,
    seed: u64,
) -> Result<Trajectory> {
    if frames < 2 {
        return Err(Error::Precondition("gameplay path needs at least two frames".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = center_start(&mut rng);
    let mut b = Builder::new(world, start, 8.0);
    match scenario {
        GameplayScenario::Staring => {
            for _ in 1..frames {
                b.push(Keys::NONE, 0.0, 0.0);
            }
            b.close_segment(Motion::Still);
        }
        GameplayScenario::BackwardNavigation => {
            let amp = rng.gen_range(0.02..0.08);
            for i in 1..frames {
                let yaw = if (i / 8) % 2 == 0 { amp } else { -amp };
                b.push(Keys::S, yaw, 0.0);
            }
            b.close_segment(Motion::Backward);
        }
        GameplayScenario::LoopRoaming => {
            let turn_frames = (PI / LOOKBACK_RATE) as usize;
            let out = (frames.saturating_sub(1 + turn_frames)) / 2;
            for _ in 0..out {
                b.push(Keys::W, 0.0, 0.0);
            }
            b.close_segment(Motion::Forward);
            turn_in_place(&mut b, PI, LOOKBACK_RATE);
            b.close_segment(Motion::Turn { right: true });
            while b.len() < frames {
                b.push(Keys::W, 0.0, 0.0);
            }
            b.close_segment(Motion::Forward);
        }
        GameplayScenario::FreeNavigation => {
            const CHOICES: [(Keys, f64, Motion); 6] = [
                (Keys::W, 0.0, Motion::Forward),
                (Keys::S, 0.0, Motion::Backward),
                (Keys::A, 0.0, Motion::Strafe { right: false }),
                (Keys::D, 0.0, Motion::Strafe { right: true }),
                (Keys::NONE, 0.15, Motion::Turn { right: true }),
                (Keys::NONE, -0.15, Motion::Turn { right: false }),
            ];
            while b.len() < frames {
                let run = rng.gen_range(4..=12).min(frames - b.len());
                let (keys, yaw, motion) = CHOICES[rng.gen_range(0..CHOICES.len())];
                let pitch = rng.gen_range(-0.02..0.02f64).clamp(-MAX_PITCH_DELTA, MAX_PITCH_DELTA);
                for _ in 0..run {
                    b.push(keys, yaw, pitch);
                }
                b.close_segment(motion);
            }
        }
    }
    b.close_segment(Motion::Mixed);
    b.finish(TrajectoryKind::Gameplay)
}

/// Log-uniform angular speed in `[π/8, π]` rad/s.
pub fn sample_angular_speed<R: Rng>(rng: &mut R) -> f64 {
    let (lo, hi) = (FRAC_PI_8.ln(), PI.ln());
    rng.gen_range(lo..hi).exp()
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollisionReport {
    /// Frames whose position lies strictly within the clearance of an occupied cell.
    pub frames: Vec<usize>,
}

impl CollisionReport {
    pub fn is_clear(&self) -> bool {
        self.frames.is_empty()
    }
}

fn check_poses(poses: &[CameraPose], world: &WorldSpec, clearance: f64) -> Vec<usize> {
    poses
        .iter()
        .enumerate()
        .filter(|(_, p)| !world.is_clear(p.position.x, p.position.z, clearance))
        .map(|(i, _)| i)
        .collect()
}

pub fn check_collision(traj: &Trajectory, world: &WorldSpec, clearance: f64) -> Result<CollisionReport> {
    if !(clearance >= 0.0) {
        return Err(Error::Precondition("clearance must be non-negative".into()));
    }
    Ok(CollisionReport { frames: check_poses(&traj.poses, world, clearance) })
}

/// Pose log: one `t px py pz qw qx qy qz` line per frame, `#` starts a comment.
pub fn export_trajectory(traj: &Trajectory) -> String {
    let mut out = String::from("# t px py pz qw qx qy qz\n");
    for (p, t) in traj.poses.iter().zip(&traj.timestamps) {
        let q = p.orientation.quaternion();
        let _ = writeln!(
            out,
            "{t} {} {} {} {} {} {} {}",
            p.position.x, p.position.y, p.position.z, q.w, q.i, q.j, q.k
        );
    }
    out
}

/// Parse a pose log and reconstruct actions by inverse dynamics.
///
/// Timestamps and poses are kept exactly as written. Each frame's translation
/// is projected onto the mid-step heading and quantized to a key when it
/// exceeds half a full step; rotation deltas are clamped to the action limits.
pub fn import_trajectory(text: &str, intrinsics: Intrinsics) -> Result<Trajectory> {
    let mut poses = Vec::new();
    let mut timestamps: Vec<f64> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::PoseLogParse { line: line_no, message: e.to_string() })?;
        if fields.len() != 8 {
            return Err(Error::PoseLogParse {
                line: line_no,
                message: format!("expected 8 fields, found {}", fields.len()),
            });
        }
        let t = fields[0];
        if !t.is_finite() {
            return Err(Error::PoseLogParse { line: line_no, message: "non-finite timestamp".into() });
        }
        if let Some(&prev) = timestamps.last() {
            if t <= prev {
                return Err(Error::NonMonotoneTimestamp { line: line_no });
            }
        }
        let q = Quaternion::new(fields[4], fields[5], fields[6], fields[7]);
        let pose = CameraPose::new(Vector3::new(fields[1], fields[2], fields[3]), q, intrinsics)
            .map_err(|e| Error::PoseLogParse { line: line_no, message: e.to_string() })?;
        timestamps.push(t);
        poses.push(pose);
    }
    if poses.is_empty() {
        return Err(Error::PoseLogParse { line: 0, message: "no poses".into() });
    }
    let actions = inverse_dynamics(&poses, &timestamps);
    let n = poses.len();
    Trajectory::new(poses, timestamps, actions, TrajectoryKind::Imported, vec![Segment {
        start: 0,
        end: n,
        motion: Motion::Mixed,
    }])
}

pub fn inverse_dynamics(poses: &[CameraPose], timestamps: &[f64]) -> Vec<ActionState> {
    let mut actions = Vec::with_capacity(poses.len());
    if let Some(&t0) = timestamps.first() {
        actions.push(ActionState::idle(t0));
    }
    for i in 1..poses.len() {
        let (a, b) = (&poses[i - 1], &poses[i]);
        let dt = timestamps[i] - timestamps[i - 1];
        let yaw_delta = wrap_angle(b.yaw() - a.yaw()).clamp(-MAX_YAW_DELTA, MAX_YAW_DELTA);
        let pitch_delta = (b.pitch() - a.pitch()).clamp(-MAX_PITCH_DELTA, MAX_PITCH_DELTA);
        let (f, r) = heading_axes(a.yaw() + 0.5 * yaw_delta);
        let d = b.position - a.position;
        let half = 0.5 * MOVE_SPEED * dt;
        let mut keys = Keys::NONE;
        let along = d.dot(&f);
        let side = d.dot(&r);
        if along > half {
            keys = keys | Keys::W;
        } else if along < -half {
            keys = keys | Keys::S;
        }
        if side > half {
            keys = keys | Keys::D;
        } else if side < -half {
            keys = keys | Keys::A;
        }
        actions.push(ActionState::new(keys, yaw_delta, pitch_delta, timestamps[i]));
    }
    actions
}

/// Replays with an explicit clearance, for callers that relax collision handling.
pub fn replay_with_clearance(traj: &Trajectory, world: &WorldSpec, clearance: f64) -> Vec<CameraPose> {
    let mut out = vec![traj.poses[0]];
    for i in 1..traj.len() {
        let p = step_with_clearance(out.last().unwrap(), &traj.actions[i], traj.step_dt(i), world, clearance);
        out.push(p);
    }
    out
}

/// Serde for poses as `[px, py, pz, qw, qx, qy, qz, fx, fy, cx, cy]`.
mod pose_serde {
    use super::*;
    use nalgebra::UnitQuaternion;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(poses: &[CameraPose], s: S) -> std::result::Result<S::Ok, S::Error> {
        let flat: Vec<[f64; 11]> = poses
            .iter()
            .map(|p| {
                let q = p.orientation.quaternion();
                let k = p.intrinsics;
                [p.position.x, p.position.y, p.position.z, q.w, q.i, q.j, q.k, k.fx, k.fy, k.cx, k.cy]
            })
            .collect();
        flat.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<CameraPose>, D::Error> {
        let flat = Vec::<[f64; 11]>::deserialize(d)?;
        Ok(flat
            .into_iter()
            .map(|v| CameraPose {
                position: Vector3::new(v[0], v[1], v[2]),
                orientation: UnitQuaternion::new_unchecked(Quaternion::new(v[3], v[4], v[5], v[6])),
                intrinsics: Intrinsics { fx: v[7], fy: v[8], cx: v[9], cy: v[10] },
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::spec::{build_world, Cell, Color};

    #[test]
    fn rect_frame_count_and_closure() {
        let t = gen_rect_path(4.0, 1.0, 8.0, 7).unwrap();
        assert_eq!(t.len(), 128);
        assert!((t.poses[127].position - t.poses[0].position).norm() <= 1e-6);
        assert!(wrap_angle(t.poses[127].yaw() - t.poses[0].yaw()).abs() <= 1e-5);
        assert!(t.replay_error(&WorldSpec::empty(0)) <= 1e-5);
        assert_eq!(t.actions[0], ActionState::idle(0.0));
        assert_eq!(t.segments.len(), 4);
    }

    #[test]
    fn rect_rejects_too_fast() {
        assert!(gen_rect_path(4.0, 2.0, 8.0, 0).is_err());
        assert!(gen_rect_path(0.0, 1.0, 8.0, 0).is_err());
    }

    #[test]
    fn rotation_counts_and_sweep() {
        let t = gen_rotation_path(1, FRAC_PI_2, 8.0, 0).unwrap();
        assert_eq!(t.len(), 32);
        assert_eq!(t.poses[31].orientation, t.poses[0].orientation);
        let t3 = gen_rotation_path(3, FRAC_PI_2, 8.0, 1).unwrap();
        let sweep: f64 = t3.actions.iter().map(|a| a.yaw_delta).sum();
        assert!((sweep.abs() - 6.0 * PI).abs() <= 1e-5);
        assert!(t3.poses.iter().all(|p| p.position == t3.poses[0].position));
    }

    #[test]
    fn waypoint_lookbacks_counted() {
        let w = WorldSpec::empty(0);
        let t = gen_waypoint_path(5, 1.0, &w, 3).unwrap();
        let n = t.segments.iter().filter(|s| matches!(s.motion, Motion::LookBack { .. })).count();
        assert_eq!(n, 4);
        let legs = t.segments.iter().filter(|s| matches!(s.motion, Motion::Leg { .. })).count();
        assert_eq!(legs, 4);
    }

    #[test]
    fn two_waypoints_progress_monotonically() {
        let w = WorldSpec::empty(0);
        let t = gen_waypoint_path(2, 0.0, &w, 9).unwrap();
        let end = t.poses.last().unwrap().position;
        let d: Vec<f64> = t.poses.iter().map(|p| (p.position - end).norm()).collect();
        assert!(d.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn waypoint_exhaustion() {
        let mut w = WorldSpec::empty(0);
        for x in 0..ARENA_CELLS {
            for z in 0..ARENA_CELLS {
                w.pillars.insert(Cell::new(x, z), Color::Red);
            }
        }
        let err = gen_waypoint_path(3, 0.0, &w, 0).unwrap_err();
        assert!(matches!(err, Error::SamplingExhausted { attempts: 30 }));
    }

    #[test]
    fn waypoint_paths_are_collision_free_in_pillared_worlds() {
        for seed in 0..20 {
            let w = build_world(seed);
            let t = gen_waypoint_path(4, 0.5, &w, seed).unwrap();
            assert!(check_collision(&t, &w, CLEARANCE).unwrap().is_clear());
            assert!(t.replay_error(&w) <= 1e-5);
        }
    }

    #[test]
    fn gameplay_scenarios_replay() {
        let w = build_world(1);
        for s in GameplayScenario::ALL {
            let t = gen_gameplay_path(s, 40, &w, 5).unwrap();
            assert_eq!(t.len(), 40);
            assert!(t.replay_error(&w) <= 1e-5, "{s:?}");
        }
    }

    #[test]
    fn export_import_round_trip() {
        let t = gen_rect_path(3.0, 1.0, 8.0, 2).unwrap();
        let back = import_trajectory(&export_trajectory(&t), t.poses[0].intrinsics).unwrap();
        assert_eq!(back.timestamps, t.timestamps);
        for (a, b) in back.poses.iter().zip(&t.poses) {
            assert!((a.position - b.position).norm() <= 1e-6);
        }
        for (a, b) in back.actions.iter().zip(&t.actions) {
            assert_eq!(a.keys, b.keys);
            assert!((a.yaw_delta - b.yaw_delta).abs() <= 1e-6);
        }
    }

    #[test]
    fn import_errors() {
        let k = default_intrinsics();
        let dup = "0 0 0 0 1 0 0 0\n0 0 0 0 1 0 0 0\n";
        assert!(matches!(import_trajectory(dup, k), Err(Error::NonMonotoneTimestamp { line: 2 })));
        let bad = "# header\n0 0 0 x 1 0 0 0\n";
        assert!(matches!(import_trajectory(bad, k), Err(Error::PoseLogParse { line: 2, .. })));
    }

    #[test]
    fn collision_report_cases() {
        let mut w = WorldSpec::empty(0);
        w.pillars.insert(Cell::new(10, 10), Color::Blue);
        let k = default_intrinsics();
        let line = |x: f64| -> Trajectory {
            let poses: Vec<_> = (0..40)
                .map(|i| CameraPose::quantized(Vector3::new(x, 0.0, 6.0 + i as f64 * 0.25), 0.0, 0.0, k))
                .collect();
            let ts = (0..40).map(|i| i as f64 * 0.125).collect();
            let acts = vec![ActionState::idle(0.0); 40];
            Trajectory::new(poses, ts, acts, TrajectoryKind::Imported, vec![]).unwrap()
        };
        // passes through the pillar column: z in (9.7, 11.3) collides
        let r = check_collision(&line(10.5), &w, CLEARANCE).unwrap();
        let expected: Vec<usize> = (0..40).filter(|i| {
            let z = 6.0 + *i as f64 * 0.25;
            z > 10.0 - CLEARANCE && z < 11.0 + CLEARANCE
        }).collect();
        assert_eq!(r.frames, expected);
        let r = check_collision(&line(11.0 + CLEARANCE + 1e-6), &w, CLEARANCE).unwrap();
        assert!(r.is_clear());
    }
}
