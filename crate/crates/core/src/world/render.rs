//! Deterministic grid raycaster.
//!
//! Every pixel casts the same ray as its Plücker coordinate (pixel-center
//! convention), marches the 2-D occupancy grid with a DDA, and is classified
//! as sky, floor, arena wall, pillar or spawned object. Shading is a pure
//! function of that classification, the hit distance and the world's global
//! attributes.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::action::ActionState;
use super::dynamics::step_dynamics;
use super::spec::{Cell, Color, TimeOfDay, WorldSpec, ARENA_CELLS, BLOCK_TOP_Y, FLOOR_Y};
use crate::error::{Error, Result};
use crate::geometry::plucker::pixel_ray;
use crate::geometry::pose::CameraPose;

/// 8-bit RGB image, row-major, three interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width * 3] }
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Mean of `(R + G + B) / (3 · 255)` over all pixels.
    pub fn mean_luminance(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / (self.data.len() as f64 * 255.0)
    }
}

/// Peak signal-to-noise ratio in dB between two 8-bit frames.
pub fn psnr(a: &Frame, b: &Frame) -> f64 {
    assert_eq!((a.height, a.width), (b.height, b.width), "psnr on frames of different size");
    let mse = a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (255.0f64 * 255.0 / mse).log10()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HitClass {
    Sky,
    Floor,
    Wall,
    Pillar(Color),
    Object(Color),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub class: HitClass,
    /// Distance along the unit ray.
    pub distance: f64,
    /// Floor checker parity, or 1 when a block was hit on an x-facing side.
    pub parity: u8,
}

const MAX_STEPS: usize = 4 * ARENA_CELLS as usize;

/// Trace one unit-direction ray from `origin`.
pub fn trace(world: &WorldSpec, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Hit {
    let floor_t = if dir.y > 0.0 { (FLOOR_Y - origin.y) / dir.y } else { f64::INFINITY };
    let block = march(world, origin, dir);
    if let Some((t, cell, side)) = block {
        let y = origin.y + t * dir.y;
        if (BLOCK_TOP_Y..=FLOOR_Y).contains(&y) && t <= floor_t {
            let class = if let Some(c) = world.pillar_at(cell) {
                HitClass::Pillar(c)
            } else if let Some(c) = world.object_at(cell) {
                HitClass::Object(c)
            } else {
                HitClass::Wall
            };
            return Hit { class, distance: t, parity: side };
        }
    }
    if floor_t.is_finite() {
        let p = origin + dir * floor_t;
        let parity = ((p.x.floor() as i64 + p.z.floor() as i64).rem_euclid(2)) as u8;
        return Hit { class: HitClass::Floor, distance: floor_t, parity };
    }
    Hit { class: HitClass::Sky, distance: f64::INFINITY, parity: 0 }
}

/// First occupied cell along the horizontal projection of the ray:
/// `(t, cell, side)` where side is 1 for an x-facing wall.
fn march(world: &WorldSpec, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Cell, u8)> {
    let (dx, dz) = (dir.x, dir.z);
    if dx == 0.0 && dz == 0.0 {
        return None;
    }
    let mut cx = origin.x.floor() as i32;
    let mut cz = origin.z.floor() as i32;
    let step_x = if dx > 0.0 { 1 } else { -1 };
    let step_z = if dz > 0.0 { 1 } else { -1 };
    let delta_x = if dx != 0.0 { (1.0 / dx).abs() } else { f64::INFINITY };
    let delta_z = if dz != 0.0 { (1.0 / dz).abs() } else { f64::INFINITY };
    let mut next_x = if dx > 0.0 {
        (cx as f64 + 1.0 - origin.x) * delta_x
    } else if dx < 0.0 {
        (origin.x - cx as f64) * delta_x
    } else {
        f64::INFINITY
    };
    let mut next_z = if dz > 0.0 {
        (cz as f64 + 1.0 - origin.z) * delta_z
    } else if dz < 0.0 {
        (origin.z - cz as f64) * delta_z
    } else {
        f64::INFINITY
    };
    for _ in 0..MAX_STEPS {
        let (t, side) = if next_x < next_z {
            cx += step_x;
            let t = next_x;
            next_x += delta_x;
            (t, 1)
        } else {
            cz += step_z;
            let t = next_z;
            next_z += delta_z;
            (t, 0)
        };
        let cell = Cell::new(cx, cz);
        if world.is_occupied(cell) {
            return Some((t, cell, side));
        }
    }
    None
}

/// Per-pixel classification used both for shading and as a test oracle.
pub fn hit_test(world: &WorldSpec, pose: &CameraPose, height: usize, width: usize) -> Result<Vec<Hit>> {
    check_inside(pose)?;
    let mut hits = Vec::with_capacity(height * width);
    for row in 0..height {
        for col in 0..width {
            hits.push(trace(world, &pose.position, &pixel_ray(pose, row, col)));
        }
    }
    Ok(hits)
}

fn check_inside(pose: &CameraPose) -> Result<()> {
    let (x, z) = (pose.position.x, pose.position.z);
    let limit = ARENA_CELLS as f64;
    if !(x.is_finite() && z.is_finite()) || x < 0.0 || z < 0.0 || x >= limit || z >= limit {
        return Err(Error::OutOfBounds { x, z });
    }
    pose.validate()
}

const FLOOR_COLORS: [[[f64; 3]; 2]; 4] = [
    [[96.0, 96.0, 96.0], [168.0, 168.0, 168.0]],
    [[120.0, 90.0, 60.0], [180.0, 150.0, 110.0]],
    [[70.0, 110.0, 70.0], [130.0, 170.0, 120.0]],
    [[80.0, 80.0, 120.0], [150.0, 150.0, 190.0]],
];
const WALL_COLOR: [f64; 3] = [185.0, 175.0, 155.0];
const DAY_SKY: [f64; 3] = [135.0, 200.0, 240.0];
const NIGHT_SKY: [f64; 3] = [12.0, 14.0, 42.0];
const NIGHT_SCALE: f64 = 0.35;

fn shade(world: &WorldSpec, hit: &Hit) -> [u8; 3] {
    let night = world.time_of_day == TimeOfDay::Night;
    let base = match hit.class {
        HitClass::Sky => {
            let sky = if night { NIGHT_SKY } else { DAY_SKY };
            return finish(sky, world.tint);
        }
        HitClass::Floor => FLOOR_COLORS[world.floor_palette as usize % FLOOR_COLORS.len()][hit.parity as usize],
        HitClass::Wall => WALL_COLOR,
        HitClass::Pillar(c) | HitClass::Object(c) => c.rgb(),
    };
    let side = if hit.parity == 1 && !matches!(hit.class, HitClass::Floor) { 0.8 } else { 1.0 };
    let mut falloff = side / (1.0 + 0.08 * hit.distance);
    if night {
        falloff *= NIGHT_SCALE;
    }
    finish(base.map(|c| c * falloff), world.tint)
}

fn finish(rgb: [f64; 3], tint: [f64; 3]) -> [u8; 3] {
    [0, 1, 2].map(|i| (rgb[i] * tint[i]).round().clamp(0.0, 255.0) as u8)
}

pub fn render(world: &WorldSpec, pose: &CameraPose, height: usize, width: usize) -> Result<Frame> {
    let hits = hit_test(world, pose, height, width)?;
    let mut frame = Frame::new(height, width);
    for (i, hit) in hits.iter().enumerate() {
        let rgb = shade(world, hit);
        frame.data[i * 3..i * 3 + 3].copy_from_slice(&rgb);
    }
    Ok(frame)
}

/// Fold dynamics and rendering over an action sequence.
pub fn rollout(
    world: &WorldSpec,
    pose0: &CameraPose,
    actions: &[ActionState],
    height: usize,
    width: usize,
    dt: f64,
) -> Result<(Vec<Frame>, Vec<CameraPose>)> {
    if actions.is_empty() {
        return Err(Error::Precondition("rollout needs at least one action".into()));
    }
    let mut pose = *pose0;
    let mut frames = Vec::with_capacity(actions.len());
    let mut poses = Vec::with_capacity(actions.len());
    for a in actions {
        pose = step_dynamics(&pose, a, dt, world);
        frames.push(render(world, &pose, height, width)?);
        poses.push(pose);
    }
    Ok((frames, poses))
}
