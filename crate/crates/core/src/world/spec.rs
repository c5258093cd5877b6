use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Arena side length in cells.
pub const ARENA_CELLS: i32 = 32;
/// Ground-plane speed for W/A/S/D, units per second.
pub const MOVE_SPEED: f64 = 2.0;
/// Minimum distance between the camera and any occupied cell.
pub const CLEARANCE: f64 = 0.3;
/// Floor plane height (world y points down, the eye sits at y = 0).
pub const FLOOR_Y: f64 = 0.5;
/// Top of walls, pillars and spawned objects.
pub const BLOCK_TOP_Y: f64 = -1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub x: i32,
    pub z: i32,
}

impl Cell {
    pub const fn new(x: i32, z: i32) -> Self {
        Self { x, z }
    }

    pub fn in_arena(&self) -> bool {
        (0..ARENA_CELLS).contains(&self.x) && (0..ARENA_CELLS).contains(&self.z)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x as f64 + 0.5, self.z as f64 + 0.5)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
    Cyan,
    White,
}

impl Color {
    pub const ALL: [Color; 8] =
        [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Purple, Color::Orange, Color::Cyan, Color::White];

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [220.0, 40.0, 40.0],
            Color::Green => [40.0, 190.0, 60.0],
            Color::Blue => [40.0, 70.0, 220.0],
            Color::Yellow => [230.0, 210.0, 40.0],
            Color::Purple => [150.0, 60.0, 190.0],
            Color::Orange => [240.0, 140.0, 30.0],
            Color::Cyan => [40.0, 210.0, 210.0],
            Color::White => [235.0, 235.0, 235.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
            Color::Cyan => "cyan",
            Color::White => "white",
        }
    }

    pub fn index(self) -> u8 {
        Color::ALL.iter().position(|&c| c == self).expect("color in palette") as u8
    }

    pub fn from_index(i: u8) -> Option<Color> {
        Color::ALL.get(i as usize).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeOfDay {
    Day,
    Night,
}

impl TimeOfDay {
    pub fn name(self) -> &'static str {
        match self {
            TimeOfDay::Day => "day",
            TimeOfDay::Night => "night",
        }
    }
}

/// Promptable change to a world's global or local state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum EventSpec {
    SetTimeOfDay(TimeOfDay),
    SetTint([f64; 3]),
    SpawnObject { cell: Cell, color: Color },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub seed: u64,
    pub pillars: BTreeMap<Cell, Color>,
    pub floor_palette: u8,
    pub time_of_day: TimeOfDay,
    pub tint: [f64; 3],
    pub spawned: Vec<(Cell, Color)>,
}

/// Cells kept free around the arena center so a default spawn point always exists.
fn in_spawn_zone(cell: Cell) -> bool {
    (cell.x - 16).abs() <= 1 && (cell.z - 16).abs() <= 1
}

pub const FLOOR_PALETTES: usize = 4;

impl WorldSpec {
    /// Arena with no pillars.
    pub fn empty(seed: u64) -> Self {
        Self {
            seed,
            pillars: BTreeMap::new(),
            floor_palette: 0,
            time_of_day: TimeOfDay::Day,
            tint: [1.0, 1.0, 1.0],
            spawned: Vec::new(),
        }
    }

    pub fn pillar_at(&self, cell: Cell) -> Option<Color> {
        self.pillars.get(&cell).copied()
    }

    pub fn object_at(&self, cell: Cell) -> Option<Color> {
        self.spawned.iter().find(|(c, _)| *c == cell).map(|&(_, color)| color)
    }

    /// Pillars, spawned objects and everything outside the arena.
    pub fn is_occupied(&self, cell: Cell) -> bool {
        !cell.in_arena() || self.pillars.contains_key(&cell) || self.object_at(cell).is_some()
    }

    /// Distance from a ground-plane point to the nearest occupied cell, capped at `max`.
    pub fn clearance_at(&self, x: f64, z: f64, max: f64) -> f64 {
        let mut best = max;
        let (x0, x1) = ((x - max).floor() as i32, (x + max).floor() as i32);
        let (z0, z1) = ((z - max).floor() as i32, (z + max).floor() as i32);
        for cx in x0..=x1 {
            for cz in z0..=z1 {
                let cell = Cell::new(cx, cz);
                if self.is_occupied(cell) {
                    best = best.min(distance_to_cell(x, z, cell));
                }
            }
        }
        best
    }

    /// True when the point keeps at least `clearance` from every occupied cell.
    pub fn is_clear(&self, x: f64, z: f64, clearance: f64) -> bool {
        if clearance == 0.0 {
            let cell = Cell::new(x.floor() as i32, z.floor() as i32);
            return !self.is_occupied(cell);
        }
        self.clearance_at(x, z, clearance) >= clearance
    }
}

/// Euclidean distance from `(x, z)` to the unit square of `cell`.
pub fn distance_to_cell(x: f64, z: f64, cell: Cell) -> f64 {
    let (lx, hx) = (cell.x as f64, cell.x as f64 + 1.0);
    let (lz, hz) = (cell.z as f64, cell.z as f64 + 1.0);
    let dx = (lx - x).max(0.0).max(x - hx);
    let dz = (lz - z).max(0.0).max(z - hz);
    dx.hypot(dz)
}

/// Deterministic procedural arena: 8 to 16 colored pillars inside a 32×32 grid.
pub fn build_world(seed: u64) -> WorldSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4c42_5731);
    let count = rng.gen_range(8..=16);
    let mut pillars = BTreeMap::new();
    while pillars.len() < count {
        let cell = Cell::new(rng.gen_range(1..ARENA_CELLS - 1), rng.gen_range(1..ARENA_CELLS - 1));
        if in_spawn_zone(cell) || pillars.contains_key(&cell) {
            continue;
        }
        let color = Color::ALL[rng.gen_range(0..Color::ALL.len())];
        pillars.insert(cell, color);
    }
    let floor_palette = rng.gen_range(0..FLOOR_PALETTES as u8);
    WorldSpec { seed, pillars, floor_palette, time_of_day: TimeOfDay::Day, tint: [1.0, 1.0, 1.0], spawned: Vec::new() }
}

pub fn apply_event(world: &WorldSpec, event: &EventSpec) -> Result<WorldSpec> {
    let mut next = world.clone();
    match *event {
        EventSpec::SetTimeOfDay(t) => next.time_of_day = t,
        EventSpec::SetTint(tint) => {
            if tint.iter().any(|c| !c.is_finite() || *c < 0.0) {
                return Err(Error::Precondition("tint channels must be finite and non-negative".into()));
            }
            next.tint = tint;
        }
        EventSpec::SpawnObject { cell, color } => {
            if !cell.in_arena() {
                return Err(Error::Precondition(format!("spawn cell ({}, {}) outside arena", cell.x, cell.z)));
            }
            if world.pillars.contains_key(&cell) || world.object_at(cell).is_some() {
                return Err(Error::OccupiedCell(cell.x, cell.z));
            }
            next.spawned.push((cell, color));
        }
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_world_is_deterministic_and_seed_dependent() {
        assert_eq!(build_world(0), build_world(0));
        assert_ne!(build_world(0).pillars, build_world(1).pillars);
    }

    #[test]
    fn pillars_inside_arena() {
        for seed in 0..50 {
            let w = build_world(seed);
            assert!(w.pillars.len() >= 8);
            assert!(w.pillars.keys().all(|c| c.in_arena()));
        }
    }

    #[test]
    fn spawn_on_pillar_is_rejected() {
        let w = build_world(3);
        let (&cell, _) = w.pillars.iter().next().unwrap();
        let err = apply_event(&w, &EventSpec::SpawnObject { cell, color: Color::Red }).unwrap_err();
        assert!(matches!(err, Error::OccupiedCell(..)));
    }

    #[test]
    fn global_events_leave_geometry_untouched() {
        let w = build_world(5);
        let n = apply_event(&w, &EventSpec::SetTimeOfDay(TimeOfDay::Night)).unwrap();
        assert_eq!(n.pillars, w.pillars);
        assert_eq!(n.time_of_day, TimeOfDay::Night);
        let t = apply_event(&w, &EventSpec::SetTint([0.5, 1.0, 1.0])).unwrap();
        assert_eq!(t.pillars, w.pillars);
        assert_eq!(t.spawned, w.spawned);
    }

    #[test]
    fn distance_to_cell_cases() {
        let c = Cell::new(2, 2);
        assert_eq!(distance_to_cell(2.5, 2.5, c), 0.0);
        assert!((distance_to_cell(1.5, 2.5, c) - 0.5).abs() < 1e-15);
        assert!((distance_to_cell(1.0, 1.0, c) - 2f64.sqrt()).abs() < 1e-15);
    }
}
