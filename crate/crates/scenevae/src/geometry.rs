//! Cameras, pixel-to-ray mapping, Fourier input encoding, and camera
//! trajectory interpolation.
//!
//! Conventions (shared by the dataset generator and the renderer): the world
//! is right-handed with +y up; a camera looks down its local −z axis and the
//! image y-axis points up. Pixel centers sit at half-integer offsets.

use nalgebra::{Matrix3, Vector3};

use crate::{Error, Result};

/// Tolerance for the rotation orthonormality check.
const ORTHO_TOL: f64 = 1e-6;

/// A pinhole camera: pose (camera-to-world) plus intrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub position: Vector3<f64>,
    /// Camera-to-world rotation; columns are the camera's right/up/backward
    /// axes expressed in world coordinates.
    pub rotation: Matrix3<f64>,
    /// Vertical field of view in degrees.
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        position: Vector3<f64>,
        rotation: Matrix3<f64>,
        fov_y: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let gram = rotation.transpose() * rotation;
        let dev = (gram - Matrix3::identity()).abs().max();
        if dev > ORTHO_TOL {
            return Err(Error::input(format!(
                "rotation is not orthonormal (max deviation {dev:.2e})"
            )));
        }
        if !(fov_y > 0.0 && fov_y < 180.0) {
            return Err(Error::input(format!("fov_y {fov_y} outside (0, 180)")));
        }
        if width == 0 || height == 0 {
            return Err(Error::input("image dimensions must be >= 1"));
        }
        Ok(Camera {
            position,
            rotation,
            fov_y,
            width,
            height,
        })
    }

    /// Camera at `position` looking at `target` with +y as the up hint.
    pub fn look_at(
        position: Vector3<f64>,
        target: Vector3<f64>,
        fov_y: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let backward = (position - target)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::input("look_at: position coincides with target"))?;
        let up_hint = Vector3::y();
        let right = up_hint
            .cross(&backward)
            .try_normalize(1e-9)
            .unwrap_or_else(|| Vector3::x());
        let up = backward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, up, backward]);
        Camera::new(position, rotation, fov_y, width, height)
    }

    /// World-space forward axis (the direction of the central view ray).
    pub fn forward(&self) -> Vector3<f64> {
        -self.rotation.column(2)
    }

    /// Serializes to 13 little-endian f32: row-major rotation, position, fov_y.
    pub fn to_le_bytes(&self) -> [u8; 52] {
        let mut out = [0u8; 52];
        let mut k = 0;
        for r in 0..3 {
            for c in 0..3 {
                out[k..k + 4].copy_from_slice(&(self.rotation[(r, c)] as f32).to_le_bytes());
                k += 4;
            }
        }
        for c in 0..3 {
            out[k..k + 4].copy_from_slice(&(self.position[c] as f32).to_le_bytes());
            k += 4;
        }
        out[k..k + 4].copy_from_slice(&(self.fov_y as f32).to_le_bytes());
        out
    }

    /// Inverse of [`Camera::to_le_bytes`]; image dimensions are carried by the
    /// surrounding container, not the camera record.
    pub fn from_le_bytes(bytes: &[u8; 52], width: usize, height: usize) -> Result<Self> {
        let mut vals = [0f32; 13];
        for (i, v) in vals.iter_mut().enumerate() {
            *v = f32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        }
        let rotation = Matrix3::new(
            vals[0] as f64,
            vals[1] as f64,
            vals[2] as f64,
            vals[3] as f64,
            vals[4] as f64,
            vals[5] as f64,
            vals[6] as f64,
            vals[7] as f64,
            vals[8] as f64,
        );
        let position = Vector3::new(vals[9] as f64, vals[10] as f64, vals[11] as f64);
        // f32 rounding perturbs orthonormality by ~1e-7, within tolerance;
        // keeping the rounded values makes load/save round trips bit-exact.
        Camera::new(position, rotation, vals[12] as f64, width, height)
    }
}

/// A world-space ray with unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

/// Fourier component counts for positions and directions. A count of 0 means
/// the raw value passes through unencoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncodingConfig {
    pub l_position: usize,
    pub l_direction: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig {
            l_position: 10,
            l_direction: 4,
        }
    }
}

impl EncodingConfig {
    /// Encoded width of an `n`-vector under component count `l`.
    pub fn encoded_len(l: usize, n: usize) -> usize {
        if l == 0 {
            n
        } else {
            2 * l * n
        }
    }

    pub fn position_len(&self) -> usize {
        Self::encoded_len(self.l_position, 3)
    }

    pub fn direction_len(&self) -> usize {
        Self::encoded_len(self.l_direction, 3)
    }
}

/// The ray through the center of pixel `(i, j)` (row `i`, column `j`).
pub fn pixel_to_ray(camera: &Camera, i: usize, j: usize) -> Result<Ray> {
    if i >= camera.height || j >= camera.width {
        return Err(Error::input(format!(
            "pixel ({i}, {j}) outside {}x{} image",
            camera.height, camera.width
        )));
    }
    let half_h = (camera.fov_y.to_radians() / 2.0).tan();
    let pix = 2.0 * half_h / camera.height as f64;
    let x = (j as f64 + 0.5 - camera.width as f64 / 2.0) * pix;
    let y = (camera.height as f64 / 2.0 - i as f64 - 0.5) * pix;
    let dir_cam = Vector3::new(x, y, -1.0);
    let direction = (camera.rotation * dir_cam).normalize();
    Ok(Ray {
        origin: camera.position,
        direction,
    })
}

/// Interleaved sin/cos features at frequencies `2^0 π .. 2^(L-1) π`,
/// per coordinate, coordinates concatenated in input order.
///
/// Higher octaves come from angle doubling, so each coordinate costs one
/// `sin_cos` call regardless of `L`; this sits on the renderer's hot path.
pub fn fourier_encode(v: &[f64], l: usize) -> Vec<f64> {
    assert!(l >= 1, "fourier_encode requires L >= 1");
    let mut out = Vec::with_capacity(2 * l * v.len());
    for &x in v {
        let (mut s, mut c) = (std::f64::consts::PI * x).sin_cos();
        out.push(s);
        out.push(c);
        for _ in 1..l {
            // Doubling drifts by ~1e-16 per octave; clamp to keep the
            // [-1, 1] output contract exact.
            let s2 = (2.0 * s * c).clamp(-1.0, 1.0);
            let c2 = (c * c - s * s).clamp(-1.0, 1.0);
            out.push(s2);
            out.push(c2);
            s = s2;
            c = c2;
        }
    }
    out
}

/// Input transform used by the scene functions: raw passthrough when `l` is 0,
/// otherwise the Fourier features.
pub fn encode_input(v: &[f64], l: usize) -> Vec<f64> {
    if l == 0 {
        v.to_vec()
    } else {
        fourier_encode(v, l)
    }
}

/// Trajectory flavor for evaluation camera paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryMode {
    /// Within-distribution: positions and yaw interpolate linearly.
    WithinDistribution,
    /// Out-of-distribution: positions additionally lift along a quadratic
    /// height profile while the camera pitches down toward the scene.
    OutOfDistribution,
}

/// Out-of-distribution lift configuration.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryConfig {
    /// Peak lift height. `None` defaults to 2x the mean endpoint height.
    pub lift_height: Option<f64>,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig { lift_height: None }
    }
}

fn yaw_pitch(camera: &Camera) -> (f64, f64) {
    let f = camera.forward();
    let pitch = f.y.clamp(-1.0, 1.0).asin();
    let yaw = (-f.x).atan2(-f.z);
    (yaw, pitch)
}

fn rotation_from_yaw_pitch(yaw: f64, pitch: f64) -> Matrix3<f64> {
    let ry = Matrix3::new(
        yaw.cos(),
        0.0,
        yaw.sin(),
        0.0,
        1.0,
        0.0,
        -yaw.sin(),
        0.0,
        yaw.cos(),
    );
    let rx = Matrix3::new(
        1.0,
        0.0,
        0.0,
        0.0,
        pitch.cos(),
        -pitch.sin(),
        0.0,
        pitch.sin(),
        pitch.cos(),
    );
    ry * rx
}

/// Shortest-arc interpolation between two angles.
fn lerp_angle(a: f64, b: f64, s: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let mut d = (b - a) % tau;
    if d > std::f64::consts::PI {
        d -= tau;
    } else if d < -std::f64::consts::PI {
        d += tau;
    }
    a + d * s
}

/// Interpolates `n >= 2` cameras between `c_a` and `c_b`.
///
/// Endpoints are returned exactly. Interior orientations are rebuilt from
/// interpolated yaw and pitch, so endpoint cameras are assumed roll-free
/// (look-at cameras are). The OOD lift follows `h_max * 4s(1-s)`, zero at the
/// endpoints and peaking mid-trajectory, with the camera pitched down toward
/// the ground target it lifted away from.
pub fn interpolate_trajectory(
    c_a: &Camera,
    c_b: &Camera,
    n: usize,
    mode: TrajectoryMode,
    cfg: &TrajectoryConfig,
) -> Vec<Camera> {
    assert!(n >= 2, "a trajectory needs at least its two endpoints");
    let (yaw_a, pitch_a) = yaw_pitch(c_a);
    let (yaw_b, pitch_b) = yaw_pitch(c_b);
    let h_max = cfg
        .lift_height
        .unwrap_or_else(|| (c_a.position.y + c_b.position.y).max(0.0));

    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        if k == 0 {
            out.push(c_a.clone());
            continue;
        }
        if k == n - 1 {
            out.push(c_b.clone());
            continue;
        }
        let s = k as f64 / (n - 1) as f64;
        let mut position = c_a.position.lerp(&c_b.position, s);
        let yaw = lerp_angle(yaw_a, yaw_b, s);
        let mut pitch = pitch_a + (pitch_b - pitch_a) * s;
        if mode == TrajectoryMode::OutOfDistribution {
            let lift = h_max * 4.0 * s * (1.0 - s);
            // Pitch down so the camera keeps facing the ground region it was
            // looking at before lifting.
            let ground_range = position.y / pitch.sin().abs().max(1e-6);
            let horiz = ground_range * pitch.cos().max(1e-6);
            position.y += lift;
            pitch = -(position.y / horiz.max(1e-6)).atan();
        }
        let rotation = rotation_from_yaw_pitch(yaw, pitch);
        out.push(
            Camera::new(position, rotation, c_a.fov_y, c_a.width, c_a.height)
                .expect("interpolated rotation is orthonormal"),
        );
    }
    out
}
