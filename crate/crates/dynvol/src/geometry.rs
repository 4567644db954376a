//! Pinhole cameras, ray generation, and evaluation trajectories.
//!
//! Conventions fixed here and relied on everywhere else: camera frame is
//! +x right, +y down, +z forward (image rows grow downward); pixel centers sit
//! at (index + 0.5); `world_from_camera` maps camera-frame vectors into world
//! space. No normalized device coordinates anywhere: sampling happens in world
//! units between each camera's near and far.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Calibrated pinhole camera. `world_from_camera` is row-major with an
/// orthonormal rotation block and last row [0, 0, 0, 1].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraModel {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_from_camera: [f64; 16],
    pub near: f64,
    pub far: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RaySource {
    pub view: u32,
    pub row: u32,
    pub col: u32,
    pub t: u32,
}

#[derive(Debug, Clone)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit length within 1e-6 (normalized at construction).
    pub direction: Vector3<f64>,
    pub near: f64,
    pub far: f64,
    pub source: RaySource,
}

impl Ray {
    #[inline]
    pub fn point_at(&self, s: f64) -> Vector3<f64> {
        self.origin + self.direction * s
    }
}

impl CameraModel {
    pub fn rotation(&self) -> Matrix3<f64> {
        let m = &self.world_from_camera;
        Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10])
    }

    pub fn position(&self) -> Vector3<f64> {
        let m = &self.world_from_camera;
        Vector3::new(m[3], m[7], m[11])
    }

    /// Optical axis (+z of the camera frame) in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation() * Vector3::new(0.0, 0.0, 1.0)
    }

    /// Image-down direction (+y of the camera frame) in world coordinates.
    pub fn down(&self) -> Vector3<f64> {
        self.rotation() * Vector3::new(0.0, 1.0, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 1 || self.height < 1 {
            return Err(Error::Invalid(format!(
                "camera {}: degenerate sensor {}x{}",
                self.id, self.width, self.height
            )));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Invalid(format!(
                "camera {}: focal lengths must be positive (fx={}, fy={})",
                self.id, self.fx, self.fy
            )));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::Invalid(format!(
                "camera {}: need 0 < near < far, got near={} far={}",
                self.id, self.near, self.far
            )));
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            return Err(Error::Invalid(format!(
                "camera {}: rotation block not orthonormal (max deviation {err:.2e})",
                self.id
            )));
        }
        let m = &self.world_from_camera;
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(Error::Invalid(format!(
                "camera {}: last transform row must be [0, 0, 0, 1]",
                self.id
            )));
        }
        Ok(())
    }

    /// Ray through the center of pixel (row, col), tagged with its source
    /// coordinates for later weight-map lookups.
    pub fn generate_ray(&self, view: u32, row: u32, col: u32, t: u32) -> Result<Ray> {
        if row >= self.height || col >= self.width {
            return Err(Error::PixelOutOfBounds {
                row,
                col,
                width: self.width,
                height: self.height,
            });
        }
        let dir_cam = Vector3::new(
            (col as f64 + 0.5 - self.cx) / self.fx,
            (row as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        );
        Ok(Ray {
            origin: self.position(),
            direction: (self.rotation() * dir_cam).normalize(),
            near: self.near,
            far: self.far,
            source: RaySource { view, row, col, t },
        })
    }
}

/// Row-major rigid transform positioned at `position`, with +z aimed at
/// `target` and +y as close to `down_hint` as orthogonality allows. Falls back
/// to an arbitrary perpendicular when the hint is parallel to the view axis.
pub fn look_at_pose(
    position: Vector3<f64>,
    target: Vector3<f64>,
    down_hint: Vector3<f64>,
) -> [f64; 16] {
    let forward = (target - position).normalize();
    let mut right = down_hint.cross(&forward);
    if right.norm() < 1e-9 {
        // Hint parallel to the axis: pick the world axis least aligned with it.
        let a = forward.map(f64::abs);
        let alt = if a.x <= a.y && a.x <= a.z {
            Vector3::x()
        } else if a.y <= a.z {
            Vector3::y()
        } else {
            Vector3::z()
        };
        right = alt.cross(&forward);
    }
    let right = right.normalize();
    let down = forward.cross(&right);
    [
        right.x, down.x, forward.x, position.x, //
        right.y, down.y, forward.y, position.y, //
        right.z, down.z, forward.z, position.z, //
        0.0, 0.0, 0.0, 1.0,
    ]
}

/// Novel-view evaluation path: `n` poses winding once around the mean camera
/// position, all aimed at the mean of the cameras' optical-axis targets.
/// Offsets stay strictly inside the camera-position bounding box (half the box
/// half-extents radially, a linear height ramp across the box vertically), so a
/// rig of identical poses degenerates to repeating that pose.
pub fn spiral_trajectory(cameras: &[CameraModel], n: usize) -> Result<Vec<CameraModel>> {
    if cameras.len() < 2 {
        return Err(Error::Invalid(format!(
            "spiral trajectory needs at least 2 cameras, got {}",
            cameras.len()
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let positions: Vec<Vector3<f64>> = cameras.iter().map(|c| c.position()).collect();
    let count = positions.len() as f64;
    let center = positions.iter().sum::<Vector3<f64>>() / count;
    let mut half = Vector3::<f64>::zeros();
    for p in &positions {
        let d = p - center;
        half = Vector3::new(half.x.max(d.x.abs()), half.y.max(d.y.abs()), half.z.max(d.z.abs()));
    }
    // Aim point: average of where each camera's optical axis crosses its
    // mid-depth. Down hint from the rig keeps the rendered horizon level.
    let target = cameras
        .iter()
        .map(|c| c.position() + c.forward() * (0.5 * (c.near + c.far)))
        .sum::<Vector3<f64>>()
        / count;
    let down_hint = cameras.iter().map(|c| c.down()).sum::<Vector3<f64>>() / count;

    let first = &cameras[0];
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let theta = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
        let ramp = if n > 1 {
            k as f64 / (n - 1) as f64 - 0.5
        } else {
            0.0
        };
        let pos = center
            + Vector3::new(
                0.5 * half.x * theta.cos(),
                0.5 * half.y * theta.sin(),
                half.z * ramp,
            );
        out.push(CameraModel {
            id: format!("spiral_{k:03}"),
            world_from_camera: look_at_pose(pos, target, down_hint),
            ..first.clone()
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const IDENTITY: [f64; 16] = [
        1.0, 0.0, 0.0, 0.0, //
        0.0, 1.0, 0.0, 0.0, //
        0.0, 0.0, 1.0, 0.0, //
        0.0, 0.0, 0.0, 1.0,
    ];

    fn unit_camera() -> CameraModel {
        CameraModel {
            id: "test".into(),
            width: 1,
            height: 1,
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            world_from_camera: IDENTITY,
            near: 0.1,
            far: 10.0,
        }
    }

    #[test]
    fn pinhole_direction_matches_hand_value() {
        // normalize([0.5, 0.5, 1]) = (0.5, 0.5, 1) / sqrt(1.5)
        let ray = unit_camera().generate_ray(0, 0, 0, 0).unwrap();
        let expected = 0.5 / 1.5f64.sqrt();
        assert_relative_eq!(ray.direction.x, expected, epsilon = 1e-12);
        assert_relative_eq!(ray.direction.y, expected, epsilon = 1e-12);
        assert_relative_eq!(ray.direction.z, 2.0 * expected, epsilon = 1e-12);
        assert_relative_eq!(ray.direction.x, 0.4082482904638630, epsilon = 1e-12);
    }

    #[test]
    fn principal_point_pixel_rides_the_optical_axis() {
        // Rotate the camera so forward is a nontrivial world direction.
        let rot = nalgebra::Rotation3::from_euler_angles(0.3, -1.1, 0.7);
        let mut cam = unit_camera();
        cam.width = 5;
        cam.height = 3;
        cam.cx = 2.5;
        cam.cy = 1.5;
        let r = rot.matrix();
        for i in 0..3 {
            for j in 0..3 {
                cam.world_from_camera[i * 4 + j] = r[(i, j)];
            }
        }
        let ray = cam.generate_ray(0, 1, 2, 0).unwrap();
        assert_relative_eq!((ray.direction - cam.forward()).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn out_of_range_pixel_is_rejected_by_index() {
        let cam = unit_camera();
        let err = cam.generate_ray(0, 1, 0, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(1, 0)"), "error should name the pixel: {msg}");
        assert!(cam.generate_ray(0, 0, 7, 0).is_err());
    }

    #[test]
    fn ray_directions_are_unit_for_random_cameras() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let rot = nalgebra::Rotation3::from_euler_angles(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            );
            let mut cam = unit_camera();
            cam.width = 8;
            cam.height = 6;
            cam.fx = rng.random_range(0.5..500.0);
            cam.fy = rng.random_range(0.5..500.0);
            cam.cx = rng.random_range(0.0..8.0);
            cam.cy = rng.random_range(0.0..6.0);
            let r = rot.matrix();
            for i in 0..3 {
                for j in 0..3 {
                    cam.world_from_camera[i * 4 + j] = r[(i, j)];
                }
            }
            let row = rng.random_range(0..6);
            let col = rng.random_range(0..8);
            let ray = cam.generate_ray(0, row, col, 0).unwrap();
            assert!((ray.direction.norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn look_at_reproduces_identity_pose() {
        let pose = look_at_pose(
            Vector3::zeros(),
            Vector3::new(0.0, 0.0, 5.0),
            Vector3::new(0.0, 1.0, 0.0),
        );
        for (got, want) in pose.iter().zip(IDENTITY.iter()) {
            assert_relative_eq!(got, want, epsilon = 1e-12);
        }
    }

    fn ring(count: usize, radius: f64) -> Vec<CameraModel> {
        (0..count)
            .map(|k| {
                let theta = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
                let pos = Vector3::new(radius * theta.cos(), radius * theta.sin(), 0.6);
                CameraModel {
                    id: format!("cam{k:02}"),
                    width: 16,
                    height: 16,
                    fx: 16.0,
                    fy: 16.0,
                    cx: 8.0,
                    cy: 8.0,
                    world_from_camera: look_at_pose(
                        pos,
                        Vector3::zeros(),
                        Vector3::new(0.0, 0.0, -1.0),
                    ),
                    near: radius - 2.0,
                    far: radius + 2.0,
                }
            })
            .collect()
    }

    #[test]
    fn spiral_empty_for_zero_poses() {
        assert!(spiral_trajectory(&ring(4, 4.0), 0).unwrap().is_empty());
    }

    #[test]
    fn spiral_single_pose_stays_inside_camera_bbox() {
        let cams = ring(8, 4.0);
        let poses = spiral_trajectory(&cams, 1).unwrap();
        assert_eq!(poses.len(), 1);
        let p = poses[0].position();
        for axis in 0..3 {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for c in &cams {
                lo = lo.min(c.position()[axis]);
                hi = hi.max(c.position()[axis]);
            }
            assert!(p[axis] >= lo - 1e-9 && p[axis] <= hi + 1e-9);
        }
    }

    #[test]
    fn spiral_degenerates_to_the_common_pose() {
        let one = ring(1, 4.0).pop().unwrap();
        let cams: Vec<CameraModel> = (0..3)
            .map(|k| CameraModel {
                id: format!("dup{k}"),
                ..one.clone()
            })
            .collect();
        let poses = spiral_trajectory(&cams, 5).unwrap();
        for pose in &poses {
            assert_relative_eq!((pose.position() - one.position()).norm(), 0.0, epsilon = 1e-9);
            for (a, b) in pose.world_from_camera.iter().zip(&one.world_from_camera) {
                assert_relative_eq!(a, b, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn spiral_60_poses_distinct_and_continuous() {
        let cams = ring(8, 4.0);
        let poses = spiral_trajectory(&cams, 60).unwrap();
        assert_eq!(poses.len(), 60);
        let diag = {
            let ps: Vec<_> = cams.iter().map(|c| c.position()).collect();
            let mut lo = ps[0];
            let mut hi = ps[0];
            for p in &ps {
                lo = lo.inf(p);
                hi = hi.sup(p);
            }
            (hi - lo).norm()
        };
        for i in 0..poses.len() {
            for j in (i + 1)..poses.len() {
                assert!(
                    (poses[i].position() - poses[j].position()).norm() > 1e-9,
                    "poses {i} and {j} coincide"
                );
            }
        }
        for pair in poses.windows(2) {
            let step = (pair[0].position() - pair[1].position()).norm();
            assert!(step < diag / 10.0, "step {step} too large vs diagonal {diag}");
        }
    }

    #[test]
    fn camera_validation_catches_broken_rotation() {
        let mut cam = unit_camera();
        cam.world_from_camera[0] = 2.0;
        assert!(cam.validate().is_err());
        assert!(unit_camera().validate().is_ok());
    }
}
