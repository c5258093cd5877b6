pub mod action;
pub mod dynamics;
pub mod render;
pub mod spec;

pub use action::{ActionState, Keys};
pub use dynamics::{replay, step_dynamics, FRAME_DT};
pub use render::{hit_test, psnr, render, rollout, Frame, HitClass};
pub use spec::{apply_event, build_world, Cell, Color, EventSpec, TimeOfDay, WorldSpec};
