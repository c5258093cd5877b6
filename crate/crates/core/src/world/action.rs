use std::f64::consts::{FRAC_PI_3, FRAC_PI_4, FRAC_PI_8};

use serde::{Deserialize, Serialize};

use crate::geometry::pose::quantize_toward_zero;

pub const MAX_YAW_DELTA: f64 = FRAC_PI_4;
pub const MAX_PITCH_DELTA: f64 = FRAC_PI_8;
pub const PITCH_LIMIT: f64 = FRAC_PI_3;

/// Multi-hot W/A/S/D state. Bit layout matches the wire protocol:
/// bit0 W, bit1 A, bit2 S, bit3 D.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Keys(u8);

impl Keys {
    pub const NONE: Keys = Keys(0);
    pub const W: Keys = Keys(1);
    pub const A: Keys = Keys(1 << 1);
    pub const S: Keys = Keys(1 << 2);
    pub const D: Keys = Keys(1 << 3);

    /// Keeps only the four defined bits.
    pub fn from_bits_truncate(bits: u8) -> Keys {
        Keys(bits & 0x0f)
    }

    pub fn from_bits(bits: u8) -> Option<Keys> {
        (bits & 0xf0 == 0).then_some(Keys(bits))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, other: Keys) -> bool {
        self.0 & other.0 == other.0 && other.0 != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn union(self, other: Keys) -> Keys {
        Keys(self.0 | other.0)
    }

    /// `[W, A, S, D]` as 0/1 values.
    pub fn multi_hot(self) -> [f64; 4] {
        [Keys::W, Keys::A, Keys::S, Keys::D].map(|k| if self.contains(k) { 1.0 } else { 0.0 })
    }

    /// Net (forward, strafe-right) intent in {-1, 0, 1}; opposite keys cancel.
    pub fn axes(self) -> (f64, f64) {
        let b = |k: Keys| if self.contains(k) { 1.0 } else { 0.0 };
        (b(Keys::W) - b(Keys::S), b(Keys::D) - b(Keys::A))
    }
}

impl std::ops::BitOr for Keys {
    type Output = Keys;
    fn bitor(self, rhs: Keys) -> Keys {
        self.union(rhs)
    }
}

/// One frame of user input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionState {
    pub keys: Keys,
    /// Radians per frame, positive turns right.
    pub yaw_delta: f64,
    /// Radians per frame, positive looks up.
    pub pitch_delta: f64,
    pub timestamp: f64,
}

impl ActionState {
    /// Deltas are clamped to the per-frame limits and snapped toward zero onto
    /// the pose grid, so integrating grid-aligned deltas never drifts.
    pub fn new(keys: Keys, yaw_delta: f64, pitch_delta: f64, timestamp: f64) -> Self {
        Self {
            keys,
            yaw_delta: quantize_toward_zero(yaw_delta.clamp(-MAX_YAW_DELTA, MAX_YAW_DELTA)),
            pitch_delta: quantize_toward_zero(pitch_delta.clamp(-MAX_PITCH_DELTA, MAX_PITCH_DELTA)),
            timestamp,
        }
    }

    pub fn idle(timestamp: f64) -> Self {
        Self { timestamp, ..Self::default() }
    }

    pub fn is_valid(&self) -> bool {
        self.yaw_delta.is_finite()
            && self.pitch_delta.is_finite()
            && self.yaw_delta.abs() <= MAX_YAW_DELTA
            && self.pitch_delta.abs() <= MAX_PITCH_DELTA
    }

    /// W↔S, A↔D, negated deltas.
    pub fn inverse(&self) -> Self {
        let mut keys = Keys::NONE;
        for (from, to) in [(Keys::W, Keys::S), (Keys::S, Keys::W), (Keys::A, Keys::D), (Keys::D, Keys::A)] {
            if self.keys.contains(from) {
                keys = keys | to;
            }
        }
        Self { keys, yaw_delta: -self.yaw_delta, pitch_delta: -self.pitch_delta, timestamp: self.timestamp }
    }
}
