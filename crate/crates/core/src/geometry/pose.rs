use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the quaternion norm accepted by [`CameraPose::new`].
pub const QUAT_NORM_TOL: f64 = 1e-6;

/// Grid that positions and angles snap to after every integration step.
/// Revisiting a pose through different action paths then lands on
/// bit-identical values.
pub const POSE_QUANTUM: f64 = 1.0 / (1u64 << 30) as f64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Pinhole with the principal point at the image center and a 90° horizontal field of view.
    pub fn for_resolution(height: usize, width: usize) -> Self {
        let f = width as f64 / 2.0;
        Self { fx: f, fy: f, cx: width as f64 / 2.0, cy: height as f64 / 2.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidPose("non-finite intrinsics".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidPose("focal lengths must be positive".into()));
        }
        Ok(())
    }
}

/// Camera position plus world-to-camera rotation.
///
/// Camera axes follow the pinhole convention: x right, y down, z forward.
/// The world shares the y-down convention, so the identity rotation looks
/// along world +z with world +x to the right.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
    pub intrinsics: Intrinsics,
}

impl CameraPose {
    /// Validating constructor; `orientation` must already be unit-norm.
    pub fn new(position: Vector3<f64>, orientation: Quaternion<f64>, intrinsics: Intrinsics) -> Result<Self> {
        intrinsics.validate()?;
        if !position.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidPose("non-finite position".into()));
        }
        let norm = orientation.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > QUAT_NORM_TOL {
            return Err(Error::InvalidPose(format!("quaternion norm {norm} is not 1")));
        }
        Ok(Self { position, orientation: UnitQuaternion::new_unchecked(orientation), intrinsics })
    }

    pub fn identity(intrinsics: Intrinsics) -> Self {
        Self { position: Vector3::zeros(), orientation: UnitQuaternion::identity(), intrinsics }
    }

    /// Pose from ground-plane position, heading and pitch.
    ///
    /// Positive yaw turns right (toward +x); positive pitch looks up (toward -y).
    pub fn from_yaw_pitch(position: Vector3<f64>, yaw: f64, pitch: f64, intrinsics: Intrinsics) -> Self {
        let cam_to_world = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), yaw)
            * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), pitch);
        Self { position, orientation: cam_to_world.inverse(), intrinsics }
    }

    /// Same as [`from_yaw_pitch`](Self::from_yaw_pitch) after snapping every
    /// coordinate to the pose quantum and wrapping yaw to `(-π, π]`.
    pub fn quantized(position: Vector3<f64>, yaw: f64, pitch: f64, intrinsics: Intrinsics) -> Self {
        let p = position.map(quantize);
        Self::from_yaw_pitch(p, quantize(wrap_angle(yaw)), quantize(pitch), intrinsics)
    }

    pub fn cam_to_world(&self) -> UnitQuaternion<f64> {
        self.orientation.inverse()
    }

    /// Unit viewing direction in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.cam_to_world() * Vector3::z()
    }

    pub fn yaw(&self) -> f64 {
        let f = self.forward();
        f.x.atan2(f.z)
    }

    pub fn pitch(&self) -> f64 {
        let f = self.forward();
        (-f.y).atan2(f.x.hypot(f.z))
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.position, *self.orientation.quaternion(), self.intrinsics).map(|_| ())
    }

    /// This pose expressed in the frame of `reference` (reference becomes the identity at the origin).
    pub fn relative_to(&self, reference: &CameraPose) -> CameraPose {
        let r_ref = reference.orientation;
        let position = r_ref * (self.position - reference.position);
        let orientation = self.orientation * r_ref.inverse();
        CameraPose { position, orientation, intrinsics: self.intrinsics }
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut w = a.rem_euclid(two_pi);
    if w > std::f64::consts::PI {
        w -= two_pi;
    }
    w
}

/// Nearest point of the pose grid.
#[inline]
pub fn quantize(x: f64) -> f64 {
    (x / POSE_QUANTUM).round() * POSE_QUANTUM
}

/// Grid point between `x` and zero; never increases magnitude.
#[inline]
pub fn quantize_toward_zero(x: f64) -> f64 {
    (x / POSE_QUANTUM).trunc() * POSE_QUANTUM
}

/// One full turn as seen by the quantized integrator: every yaw wrap removes exactly this.
pub fn quantized_turn() -> f64 {
    quantize(std::f64::consts::TAU)
}
