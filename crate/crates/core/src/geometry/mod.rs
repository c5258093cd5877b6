pub mod plucker;
pub mod pose;
pub mod trajectory;

pub use plucker::{pixel_ray, plucker_embed, ray_direction, PluckerMap};
pub use pose::{wrap_angle, CameraPose, Intrinsics};
pub use trajectory::{
    check_collision, export_trajectory, gen_gameplay_path, gen_rect_path, gen_rotation_path, gen_waypoint_path,
    import_trajectory, CollisionReport, GameplayScenario, Motion, Segment, Trajectory, TrajectoryKind,
};
