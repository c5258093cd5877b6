use nalgebra::Vector3;

use super::pose::CameraPose;
use crate::error::{Error, Result};

/// Per-pixel Plücker ray coordinates: direction `d` (unit) and moment `m = o × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct PluckerMap {
    pub height: usize,
    pub width: usize,
    /// Row-major, six channels per pixel: `d.x d.y d.z m.x m.y m.z`.
    pub data: Vec<f64>,
}

impl PluckerMap {
    pub fn at(&self, row: usize, col: usize) -> [f64; 6] {
        let i = (row * self.width + col) * 6;
        let mut out = [0.0; 6];
        out.copy_from_slice(&self.data[i..i + 6]);
        out
    }

    /// Channel-wise mean over all pixels.
    pub fn mean(&self) -> [f64; 6] {
        let mut acc = [0.0; 6];
        for px in self.data.chunks_exact(6) {
            for (a, &v) in acc.iter_mut().zip(px) {
                *a += v;
            }
        }
        let n = (self.height * self.width) as f64;
        acc.map(|a| a / n)
    }
}

/// Unit world-space direction of the ray through image point `(u, v)`.
///
/// `u`, `v` are continuous image coordinates; pixel `(col, row)` has its
/// center at `(col + 0.5, row + 0.5)`.
pub fn ray_direction(pose: &CameraPose, u: f64, v: f64) -> Vector3<f64> {
    let k = &pose.intrinsics;
    let cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
    (pose.cam_to_world() * cam).normalize()
}

pub fn pixel_ray(pose: &CameraPose, row: usize, col: usize) -> Vector3<f64> {
    ray_direction(pose, col as f64 + 0.5, row as f64 + 0.5)
}

pub fn plucker_embed(pose: &CameraPose, height: usize, width: usize) -> Result<PluckerMap> {
    pose.intrinsics.validate()?;
    if height == 0 || width == 0 {
        return Err(Error::Precondition("plucker map needs height, width >= 1".into()));
    }
    let origin = pose.position;
    let mut data = Vec::with_capacity(height * width * 6);
    for row in 0..height {
        for col in 0..width {
            let d = pixel_ray(pose, row, col);
            let m = origin.cross(&d);
            data.extend_from_slice(&[d.x, d.y, d.z, m.x, m.y, m.z]);
        }
    }
    Ok(PluckerMap { height, width, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pose::Intrinsics;
    use nalgebra::{Quaternion, UnitQuaternion};
    use proptest::prelude::*;

    fn odd_intrinsics() -> Intrinsics {
        // principal point on the center of pixel (2, 2)
        Intrinsics { fx: 4.0, fy: 4.0, cx: 2.5, cy: 2.5 }
    }

    #[test]
    fn principal_pixel_at_origin() {
        let pose = CameraPose::identity(odd_intrinsics());
        let map = plucker_embed(&pose, 5, 5).unwrap();
        assert_eq!(map.at(2, 2), [0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn origin_gives_zero_moment_everywhere() {
        let pose = CameraPose::from_yaw_pitch(Vector3::zeros(), 0.4, 0.2, odd_intrinsics());
        let map = plucker_embed(&pose, 5, 5).unwrap();
        for px in map.data.chunks_exact(6) {
            assert_eq!(&px[3..], &[0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn translated_principal_pixel_moment() {
        let mut pose = CameraPose::identity(odd_intrinsics());
        pose.position = Vector3::new(1.0, 0.0, 0.0);
        let map = plucker_embed(&pose, 5, 5).unwrap();
        assert_eq!(map.at(2, 2), [0.0, 0.0, 1.0, 0.0, -1.0, 0.0]);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let mut pose = CameraPose::identity(odd_intrinsics());
        pose.intrinsics.fy = f64::INFINITY;
        assert!(matches!(plucker_embed(&pose, 2, 2), Err(Error::InvalidPose(_))));
        let pose = CameraPose::identity(odd_intrinsics());
        assert!(plucker_embed(&pose, 0, 2).is_err());
    }

    fn arb_pose() -> impl Strategy<Value = CameraPose> {
        (
            prop::array::uniform3(-20.0f64..20.0),
            prop::array::uniform4(-1.0f64..1.0),
            1.0f64..50.0,
            1.0f64..50.0,
            -10.0f64..10.0,
            -10.0f64..10.0,
        )
            .prop_filter("non-degenerate quaternion", |(_, q, ..)| q.iter().map(|x| x * x).sum::<f64>() > 1e-3)
            .prop_map(|(p, q, fx, fy, cx, cy)| {
                let uq = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
                CameraPose {
                    position: Vector3::from(p),
                    orientation: uq,
                    intrinsics: Intrinsics { fx, fy, cx, cy },
                }
            })
    }

    proptest! {
        #[test]
        fn orthogonal_and_unit(pose in arb_pose()) {
            let map = plucker_embed(&pose, 4, 3).unwrap();
            for px in map.data.chunks_exact(6) {
                let d = Vector3::new(px[0], px[1], px[2]);
                let m = Vector3::new(px[3], px[4], px[5]);
                prop_assert!((d.norm() - 1.0).abs() <= 1e-5);
                prop_assert!(d.dot(&m).abs() <= 1e-5);
            }
        }

        #[test]
        fn moment_invariant_along_ray(pose in arb_pose(), shift in -5.0f64..5.0) {
            let k = &pose.intrinsics;
            let d = ray_direction(&pose, k.cx, k.cy);
            let m0 = pose.position.cross(&d);
            let mut moved = pose;
            moved.position += d * shift;
            let d1 = ray_direction(&moved, k.cx, k.cy);
            let m1 = moved.position.cross(&d1);
            prop_assert!((d1 - d).norm() <= 1e-6);
            prop_assert!((m1 - m0).norm() <= 1e-6);
        }
    }
}
