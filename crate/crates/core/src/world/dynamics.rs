use nalgebra::Vector3;

use super::action::{ActionState, MAX_PITCH_DELTA, MAX_YAW_DELTA, PITCH_LIMIT};
use super::spec::{WorldSpec, CLEARANCE, MOVE_SPEED};
use crate::geometry::pose::CameraPose;

/// Default frame interval (8 frames per second).
pub const FRAME_DT: f64 = 0.125;

/// Ground-plane unit vectors (forward, right) for a heading.
pub fn heading_axes(yaw: f64) -> (Vector3<f64>, Vector3<f64>) {
    let (s, c) = yaw.sin_cos();
    (Vector3::new(s, 0.0, c), Vector3::new(c, 0.0, -s))
}

/// Ground-plane displacement an action produces from heading `yaw`.
///
/// Translation uses the midpoint heading `yaw + yaw_delta / 2`, which makes
/// a step followed by its inverse return exactly to the start.
pub fn displacement(yaw: f64, action: &ActionState, dt: f64) -> Vector3<f64> {
    let (fwd, strafe) = action.keys.axes();
    if fwd == 0.0 && strafe == 0.0 {
        return Vector3::zeros();
    }
    let yaw_delta = action.yaw_delta.clamp(-MAX_YAW_DELTA, MAX_YAW_DELTA);
    let (f, r) = heading_axes(yaw + 0.5 * yaw_delta);
    (f * fwd + r * strafe) * (MOVE_SPEED * dt)
}

/// Kinematic step: integrate yaw and pitch, then move unless the move would
/// bring the camera within the clearance of an occupied cell.
pub fn step_dynamics(pose: &CameraPose, action: &ActionState, dt: f64, world: &WorldSpec) -> CameraPose {
    step_with_clearance(pose, action, dt, world, CLEARANCE)
}

pub fn step_with_clearance(
    pose: &CameraPose,
    action: &ActionState,
    dt: f64,
    world: &WorldSpec,
    clearance: f64,
) -> CameraPose {
    debug_assert!(dt > 0.0, "dt must be positive");
    let yaw = pose.yaw();
    let pitch = pose.pitch();
    let yaw_delta = action.yaw_delta.clamp(-MAX_YAW_DELTA, MAX_YAW_DELTA);
    let pitch_delta = action.pitch_delta.clamp(-MAX_PITCH_DELTA, MAX_PITCH_DELTA);
    let mut position = pose.position;
    let d = displacement(yaw, action, dt);
    if d != Vector3::zeros() {
        let candidate = position + d;
        if world.is_clear(candidate.x, candidate.z, clearance) {
            position = candidate;
        }
    }
    let new_pitch = (pitch + pitch_delta).clamp(-PITCH_LIMIT, PITCH_LIMIT);
    CameraPose::quantized(position, yaw + yaw_delta, new_pitch, pose.intrinsics)
}

/// Integrate a whole action sequence; returns one pose per action.
pub fn replay(start: &CameraPose, actions: &[ActionState], dt: f64, world: &WorldSpec) -> Vec<CameraPose> {
    let mut pose = *start;
    actions
        .iter()
        .map(|a| {
            pose = step_dynamics(&pose, a, dt, world);
            pose
        })
        .collect()
}
