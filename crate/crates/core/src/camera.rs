//! Pinhole cameras with normalised intrinsics and camera-to-world extrinsics.
//!
//! Camera frame: +x right, +y down, +z along the optical axis. Pixel `(u, v)`
//! coordinates are continuous with pixel centres at `i + 0.5`.

use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math;

pub const DEFAULT_RADIUS: f64 = 2.7;
pub const DEFAULT_FOCAL: f64 = 4.26;

/// Focal lengths and principal point, normalised by image size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self { fx: DEFAULT_FOCAL, fy: DEFAULT_FOCAL, cx: 0.5, cy: 0.5 }
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let ok = fx.is_finite() && fy.is_finite() && fx > 0.0 && fy > 0.0 && (0.0..=1.0).contains(&cx) && (0.0..=1.0).contains(&cy);
        if !ok {
            return Err(invalid!("intrinsics fx={fx} fy={fy} cx={cx} cy={cy}"));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Row-major normalised `K`.
    pub fn to_matrix(&self) -> [f64; 9] {
        [self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0]
    }
}

/// Camera-to-world rigid transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Ray with unit direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let orth = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(orth <= 1e-6 && (det - 1.0).abs() <= 1e-6 && translation.iter().all(|v| v.is_finite())) {
            return Err(invalid!("rotation is not a proper orthonormal matrix (orth err {orth}, det {det})"));
        }
        Ok(Self { rotation, translation })
    }

    /// Canonical front pose: on +z at the default radius, looking at the origin.
    pub fn front() -> Self {
        pose_from_orbit(0.0, 0.0, DEFAULT_RADIUS).expect("front pose")
    }

    pub fn optical_axis(&self) -> Vector3<f64> {
        self.rotation.column(2).into_owned()
    }

    pub fn position(&self) -> Vector3<f64> {
        self.translation
    }

    /// Row-major 4×4 camera-to-world matrix.
    pub fn to_matrix(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
            0.0, 0.0, 0.0, 1.0,
        ]
    }
}

/// 25-number pose record: row-major 4×4 extrinsic followed by row-major 3×3 intrinsic.
pub fn encode_pose_record(pose: &CameraPose, intr: &CameraIntrinsics) -> [f64; 25] {
    let mut out = [0.0; 25];
    out[..16].copy_from_slice(&pose.to_matrix());
    out[16..].copy_from_slice(&intr.to_matrix());
    out
}

pub fn decode_pose_record(rec: &[f64]) -> Result<(CameraPose, CameraIntrinsics)> {
    if rec.len() != 25 {
        return Err(invalid!("pose record needs 25 numbers, got {}", rec.len()));
    }
    let rot = Matrix3::new(rec[0], rec[1], rec[2], rec[4], rec[5], rec[6], rec[8], rec[9], rec[10]);
    let pose = CameraPose::new(rot, Vector3::new(rec[3], rec[7], rec[11]))?;
    let intr = CameraIntrinsics::new(rec[16], rec[20], rec[18], rec[21])?;
    Ok((pose, intr))
}

/// Camera on a sphere around the origin looking at it. Yaw rotates about +y
/// starting from +z; positive pitch lifts the camera toward +y.
pub fn pose_from_orbit(yaw: f64, pitch: f64, radius: f64) -> Result<CameraPose> {
    if !(yaw.is_finite() && pitch.is_finite() && radius.is_finite()) {
        return Err(invalid!("non-finite orbit parameters"));
    }
    if radius <= 0.0 {
        return Err(invalid!("orbit radius must be positive, got {radius}"));
    }
    if pitch.abs() >= core::f64::consts::FRAC_PI_2 - 1e-6 {
        return Err(invalid!("pitch {pitch} is too close to a pole"));
    }
    let pos = Vector3::new(
        radius * math::sin(yaw) * math::cos(pitch),
        radius * math::sin(pitch),
        radius * math::cos(yaw) * math::cos(pitch),
    );
    let forward = (-pos).normalize();
    let up = Vector3::new(0.0, 1.0, 0.0);
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    let rotation = Matrix3::from_columns(&[right, down, forward]);
    Ok(CameraPose { rotation, translation: pos })
}

/// Reflection across the world `x = 0` plane; the camera x-axis is flipped too
/// so that the result stays a proper rotation (the image is mirrored).
pub fn mirror_pose(pose: &CameraPose) -> CameraPose {
    let s = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
    CameraPose { rotation: s * pose.rotation * s, translation: s * pose.translation }
}

fn pixel_to_camera_dir(u: f64, v: f64, intr: &CameraIntrinsics, res: usize) -> Vector3<f64> {
    let r = res as f64;
    Vector3::new((u - intr.cx * r) / (intr.fx * r), (v - intr.cy * r) / (intr.fy * r), 1.0)
}

/// One ray per pixel centre, row-major (`v` outer, `u` inner).
pub fn generate_rays(pose: &CameraPose, intr: &CameraIntrinsics, res: usize) -> Result<Vec<Ray>> {
    if res == 0 {
        return Err(invalid!("resolution must be at least 1"));
    }
    let mut rays = Vec::with_capacity(res * res);
    for row in 0..res {
        for col in 0..res {
            let d = pixel_to_camera_dir(col as f64 + 0.5, row as f64 + 0.5, intr, res);
            rays.push(Ray { origin: pose.translation, direction: (pose.rotation * d).normalize() });
        }
    }
    Ok(rays)
}

/// World point at camera-space depth `depth` through pixel `(u, v)`.
pub fn unproject(u: f64, v: f64, depth: f64, pose: &CameraPose, intr: &CameraIntrinsics, res: usize) -> Result<Vector3<f64>> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(invalid!("unproject depth must be positive, got {depth}"));
    }
    let d = pixel_to_camera_dir(u, v, intr, res);
    Ok(pose.rotation * (d * depth) + pose.translation)
}

/// Pixel coordinates and camera-space depth of a world point.
pub fn project(point: &Vector3<f64>, pose: &CameraPose, intr: &CameraIntrinsics, res: usize) -> Result<(f64, f64, f64)> {
    let pc = pose.rotation.transpose() * (point - pose.translation);
    if !(pc.z > 0.0) {
        return Err(Error::BehindCamera);
    }
    let r = res as f64;
    Ok((intr.fx * r * pc.x / pc.z + intr.cx * r, intr.fy * r * pc.y / pc.z + intr.cy * r, pc.z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::{FRAC_PI_2, PI};
    use proptest::prelude::*;

    fn close(a: &Vector3<f64>, b: &Vector3<f64>, tol: f64) -> bool {
        (a - b).abs().max() <= tol
    }

    #[test]
    fn orbit_examples() {
        let front = pose_from_orbit(0.0, 0.0, 2.7).unwrap();
        assert!(close(&front.translation, &Vector3::new(0.0, 0.0, 2.7), 1e-12));
        assert!(close(&front.optical_axis(), &Vector3::new(0.0, 0.0, -1.0), 1e-12));
        let back = pose_from_orbit(PI, 0.0, 2.7).unwrap();
        assert!(close(&back.translation, &Vector3::new(0.0, 0.0, -2.7), 1e-12));
        let side = pose_from_orbit(FRAC_PI_2, 0.0, 2.7).unwrap();
        assert!(close(&side.translation, &Vector3::new(2.7, 0.0, 0.0), 1e-12));
        assert!(close(&side.optical_axis(), &Vector3::new(-1.0, 0.0, 0.0), 1e-12));
        // explicit rotation about +y by yaw applied to the front pose
        let yaw = FRAC_PI_2;
        let ry = Matrix3::new(math::cos(yaw), 0.0, math::sin(yaw), 0.0, 1.0, 0.0, -math::sin(yaw), 0.0, math::cos(yaw));
        assert!((ry * front.rotation - side.rotation).abs().max() < 1e-12);
        assert!(close(&(ry * front.translation), &side.translation, 1e-12));
    }

    #[test]
    fn orbit_rejects_bad_input() {
        assert!(pose_from_orbit(f64::NAN, 0.0, 2.7).is_err());
        assert!(pose_from_orbit(0.0, 0.0, 0.0).is_err());
        assert!(pose_from_orbit(0.0, 0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn rays_follow_the_pinhole_model() {
        let pose = pose_from_orbit(0.4, 0.2, 2.7).unwrap();
        let intr = CameraIntrinsics::default();
        let res = 9;
        let rays = generate_rays(&pose, &intr, res).unwrap();
        assert!(rays.iter().all(|r| r.origin == pose.translation && (r.direction.norm() - 1.0).abs() < 1e-12));
        // odd resolution: the centre pixel sits on the principal point
        let centre = rays[(res / 2) * res + res / 2];
        assert!(close(&centre.direction, &pose.optical_axis(), 1e-12));
        let r = res as f64;
        let corner = rays[0];
        let d = Vector3::new((0.5 - 0.5 * r) / (intr.fx * r), (0.5 - 0.5 * r) / (intr.fy * r), 1.0);
        assert!(close(&corner.direction, &(pose.rotation * d).normalize(), 1e-12));
        assert!(generate_rays(&pose, &intr, 0).is_err());
    }

    #[test]
    fn unproject_agrees_with_rays() {
        let pose = pose_from_orbit(-0.7, 0.1, 2.7).unwrap();
        let intr = CameraIntrinsics::default();
        let res = 16;
        let rays = generate_rays(&pose, &intr, res).unwrap();
        let axis = pose.optical_axis();
        for (i, ray) in rays.iter().enumerate().step_by(7) {
            let (u, v) = ((i % res) as f64 + 0.5, (i / res) as f64 + 0.5);
            let p = unproject(u, v, 2.0, &pose, &intr, res).unwrap();
            let q = ray.origin + ray.direction * (2.0 / ray.direction.dot(&axis));
            assert!(close(&p, &q, 1e-12));
        }
        let centre = unproject(8.0, 8.0, 1.5, &pose, &intr, res).unwrap();
        assert!(close(&centre, &(pose.translation + axis * 1.5), 1e-12));
        assert!(unproject(1.0, 1.0, 0.0, &pose, &intr, res).is_err());
    }

    #[test]
    fn project_examples() {
        let pose = CameraPose::front();
        let intr = CameraIntrinsics::default();
        let (u, v, d) = project(&(pose.translation + pose.optical_axis()), &pose, &intr, 64).unwrap();
        assert!((u - 32.0).abs() < 1e-12 && (v - 32.0).abs() < 1e-12 && (d - 1.0).abs() < 1e-12);
        // hand-computed: front camera at z=2.7, point (0.3, -0.2, 0.5): camera x = 0.3, y = +0.2 (down), z = 2.2
        let (u, v, d) = project(&Vector3::new(0.3, -0.2, 0.5), &pose, &intr, 64).unwrap();
        assert!((d - 2.2).abs() < 1e-12);
        assert!((u - (4.26 * 64.0 * 0.3 / 2.2 + 32.0)).abs() < 1e-9);
        assert!((v - (4.26 * 64.0 * 0.2 / 2.2 + 32.0)).abs() < 1e-9);
        assert_eq!(project(&Vector3::new(0.0, 0.0, 2.7), &pose, &intr, 64), Err(Error::BehindCamera));
        assert_eq!(project(&Vector3::new(0.0, 0.0, 5.0), &pose, &intr, 64), Err(Error::BehindCamera));
    }

    #[test]
    fn mirror_examples() {
        let front = CameraPose::front();
        let m = mirror_pose(&front);
        assert!((m.rotation - front.rotation).abs().max() < 1e-12);
        let p30 = pose_from_orbit(PI / 6.0, 0.1, 2.7).unwrap();
        let n30 = pose_from_orbit(-PI / 6.0, 0.1, 2.7).unwrap();
        let m30 = mirror_pose(&p30);
        assert!((m30.rotation - n30.rotation).abs().max() < 1e-12);
        assert!(close(&m30.translation, &n30.translation, 1e-12));
    }

    #[test]
    fn pose_record_round_trips() {
        let pose = pose_from_orbit(0.3, -0.1, 2.7).unwrap();
        let intr = CameraIntrinsics::default();
        let rec = encode_pose_record(&pose, &intr);
        assert_eq!(rec[15], 1.0);
        assert_eq!(rec[16], 4.26);
        assert_eq!(rec[18], 0.5);
        let (p2, i2) = decode_pose_record(&rec).unwrap();
        assert_eq!(encode_pose_record(&p2, &i2), rec);
        assert!(decode_pose_record(&rec[..24]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn project_inverts_unproject(
            yaw in -PI..PI, pitch in -1.2f64..1.2, u in 0.0f64..64.0, v in 0.0f64..64.0, d in 0.1f64..6.0
        ) {
            let pose = pose_from_orbit(yaw, pitch, 2.7).unwrap();
            let intr = CameraIntrinsics::default();
            let p = unproject(u, v, d, &pose, &intr, 64).unwrap();
            let (u2, v2, d2) = project(&p, &pose, &intr, 64).unwrap();
            prop_assert!((u - u2).abs() < 1e-5 && (v - v2).abs() < 1e-5 && (d - d2).abs() < 1e-5);
        }

        #[test]
        fn orbit_poses_look_at_origin(yaw in -PI..PI, pitch in -1.4f64..1.4, r in 1.5f64..5.0) {
            let pose = pose_from_orbit(yaw, pitch, r).unwrap();
            let intr = CameraIntrinsics::default();
            let (u, v, _) = project(&Vector3::zeros(), &pose, &intr, 64).unwrap();
            prop_assert!((u - 32.0).abs() < 1e-4 && (v - 32.0).abs() < 1e-4);
        }

        #[test]
        fn mirror_is_a_proper_involution(yaw in -PI..PI, pitch in -1.4f64..1.4) {
            let pose = pose_from_orbit(yaw, pitch, 2.7).unwrap();
            let m = mirror_pose(&pose);
            prop_assert!((m.rotation.determinant() - 1.0).abs() < 1e-9);
            prop_assert!((m.rotation.transpose() * m.rotation - Matrix3::identity()).abs().max() < 1e-9);
            let mm = mirror_pose(&m);
            prop_assert!((mm.rotation - pose.rotation).abs().max() < 1e-6);
            prop_assert!((mm.translation - pose.translation).abs().max() < 1e-6);
        }
    }
}
