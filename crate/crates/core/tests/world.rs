use std::f64::consts::FRAC_PI_2;

use lbw_core::geometry::pose::{CameraPose, Intrinsics};
use lbw_core::geometry::trajectory::gen_rotation_path;
use lbw_core::world::action::{ActionState, Keys};
use lbw_core::world::dynamics::FRAME_DT;
use lbw_core::world::render::{render, rollout};
use lbw_core::world::spec::build_world;
use nalgebra::Vector3;

#[test]
fn rotation_rollout_returns_to_first_frame() {
    for seed in 0..5 {
        let world = build_world(seed);
        let t = gen_rotation_path(1, FRAC_PI_2, 8.0, seed).unwrap();
        let (frames, poses) = rollout(&world, &t.poses[0], &t.actions, 32, 32, FRAME_DT).unwrap();
        assert_eq!(frames.len(), 32);
        assert_eq!(poses, t.poses);
        assert_eq!(frames[0], frames[31]);
    }
}

#[test]
fn revisits_are_bit_identical() {
    // out-and-back with turning: every return to a pose renders identically
    let world = build_world(9);
    let k = Intrinsics::for_resolution(32, 32);
    let p0 = CameraPose::quantized(Vector3::new(16.5, 0.0, 16.5), 0.3, 0.0, k);
    let out: Vec<ActionState> = (0..12)
        .map(|i| ActionState::new(if i % 3 == 0 { Keys::W | Keys::D } else { Keys::A }, 0.07, 0.01, 0.0))
        .collect();
    let back: Vec<ActionState> = out.iter().rev().map(|a| a.inverse()).collect();
    let mut all = vec![ActionState::idle(0.0)];
    all.extend(out);
    all.extend(back);
    let (frames, poses) = rollout(&world, &p0, &all, 32, 32, FRAME_DT).unwrap();
    assert_eq!(poses.last().unwrap(), &p0);
    assert_eq!(frames.last().unwrap(), &render(&world, &p0, 32, 32).unwrap());
    for i in 0..12 {
        assert_eq!(frames[i], frames[24 - i]);
    }
}
