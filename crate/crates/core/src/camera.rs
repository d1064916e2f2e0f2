//! Pinhole cameras on a sphere around the origin and their 25-number labels.
//!
//! Conventions: OpenCV-style camera axes (x right, y down, z forward),
//! world y up. A label is the row-major `cam_to_world` matrix (16 numbers)
//! followed by the row-major intrinsics normalized by image size (9 numbers).

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scene::{mat3_det, Mat3};

pub const DEFAULT_FOV_DEG: f64 = 12.0;
pub const DEFAULT_RADIUS: f64 = 2.7;
pub const LABEL_LEN: usize = 25;

pub type Label = [f64; LABEL_LEN];

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub cam_to_world: [[f64; 4]; 4],
    /// `[[fx/W, 0, cx/W], [0, fy/H, cy/H], [0, 0, 1]]`.
    pub intrinsics: Mat3,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Camera at `(yaw, pitch)` radians on a sphere of `radius`, looking at
    /// the origin. Yaw 0, pitch 0 sits on the +z axis.
    pub fn orbit(yaw: f64, pitch: f64, radius: f64, fov_deg: f64, width: usize, height: usize) -> Self {
        let pos = [radius * yaw.sin() * pitch.cos(), radius * pitch.sin(), radius * yaw.cos() * pitch.cos()];
        let fwd = normalize3([-pos[0], -pos[1], -pos[2]]);
        let right = normalize3(cross(&fwd, &[0.0, 1.0, 0.0]));
        let down = cross(&fwd, &right);
        let mut c2w = [[0.0; 4]; 4];
        for r in 0..3 {
            c2w[r][0] = right[r];
            c2w[r][1] = down[r];
            c2w[r][2] = fwd[r];
            c2w[r][3] = pos[r];
        }
        c2w[3][3] = 1.0;
        let f = 0.5 / (fov_deg.to_radians() * 0.5).tan();
        let intrinsics = [[f, 0.0, 0.5], [0.0, f, 0.5], [0.0, 0.0, 1.0]];
        Self { cam_to_world: c2w, intrinsics, width, height }
    }

    pub fn from_label(label: &[f64], width: usize, height: usize) -> Result<Self> {
        if label.len() != LABEL_LEN {
            return Err(Error::Validation(format!("camera label has {} numbers, expected {LABEL_LEN}", label.len())));
        }
        let mut c2w = [[0.0; 4]; 4];
        let mut k = [[0.0; 3]; 3];
        for r in 0..4 {
            for c in 0..4 {
                c2w[r][c] = label[r * 4 + c];
            }
        }
        for r in 0..3 {
            for c in 0..3 {
                k[r][c] = label[16 + r * 3 + c];
            }
        }
        let cam = Self { cam_to_world: c2w, intrinsics: k, width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn label(&self) -> Label {
        let mut out = [0.0; LABEL_LEN];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.cam_to_world[r][c];
            }
        }
        for r in 0..3 {
            for c in 0..3 {
                out[16 + r * 3 + c] = self.intrinsics[r][c];
            }
        }
        out
    }

    /// Same pose and intrinsics, different image size.
    pub fn with_resolution(&self, width: usize, height: usize) -> Self {
        Self { width, height, ..self.clone() }
    }

    /// Rotation block must be orthonormal with determinant +1.
    pub fn validate(&self) -> Result<()> {
        if self.cam_to_world.iter().flatten().chain(self.intrinsics.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::Validation("camera has non-finite entries".into()));
        }
        let r = self.rotation_c2w();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let e = if i == j { 1.0 } else { 0.0 };
                if (dot - e).abs() > 1e-6 {
                    return Err(Error::Validation("camera rotation is not orthonormal".into()));
                }
            }
        }
        if (mat3_det(&r) - 1.0).abs() > 1e-6 {
            return Err(Error::Validation("camera rotation has determinant != +1".into()));
        }
        if self.intrinsics[0][0] <= 0.0 || self.intrinsics[1][1] <= 0.0 {
            return Err(Error::Validation("camera focal length must be positive".into()));
        }
        Ok(())
    }

    pub fn rotation_c2w(&self) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = self.cam_to_world[i][j];
            }
        }
        r
    }

    /// World-to-camera rotation (transpose of the camera-to-world block).
    pub fn rotation_w2c(&self) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = self.cam_to_world[j][i];
            }
        }
        r
    }

    pub fn position(&self) -> [f64; 3] {
        [self.cam_to_world[0][3], self.cam_to_world[1][3], self.cam_to_world[2][3]]
    }

    /// Unit viewing direction in world space.
    pub fn forward(&self) -> [f64; 3] {
        [self.cam_to_world[0][2], self.cam_to_world[1][2], self.cam_to_world[2][2]]
    }

    /// `(fx, fy, cx, cy)` in pixels.
    pub fn pixel_intrinsics(&self) -> (f64, f64, f64, f64) {
        let (w, h) = (self.width as f64, self.height as f64);
        (self.intrinsics[0][0] * w, self.intrinsics[1][1] * h, self.intrinsics[0][2] * w, self.intrinsics[1][2] * h)
    }

    /// Horizontal field of view in degrees.
    pub fn fov_deg(&self) -> f64 {
        (2.0 * (0.5 / self.intrinsics[0][0]).atan()).to_degrees()
    }

    /// World point to camera coordinates.
    pub fn world_to_camera(&self, p: &[f64; 3]) -> [f64; 3] {
        let c = self.position();
        let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
        let r = self.rotation_w2c();
        [0, 1, 2].map(|i| r[i][0] * d[0] + r[i][1] * d[1] + r[i][2] * d[2])
    }
}

/// Where camera poses are drawn from.
#[derive(Clone, Debug)]
pub enum PoseDistribution {
    /// Uniform over dataset labels.
    Empirical(Vec<Label>),
    /// Gaussian yaw/pitch (radians) on a fixed-radius sphere; pitch is clamped.
    Parametric { yaw_std: f64, pitch_std: f64, pitch_limit: f64, radius: f64, fov_deg: f64 },
}

impl PoseDistribution {
    pub fn parametric_default() -> Self {
        PoseDistribution::Parametric {
            yaw_std: 0.3,
            pitch_std: 0.15,
            pitch_limit: 0.5,
            radius: DEFAULT_RADIUS,
            fov_deg: DEFAULT_FOV_DEG,
        }
    }
}

pub fn sample_camera_pose(rng: &mut impl Rng, dist: &PoseDistribution, width: usize, height: usize) -> Result<Camera> {
    match dist {
        PoseDistribution::Empirical(pool) => {
            if pool.is_empty() {
                return Err(Error::Config("empirical pose pool is empty".into()));
            }
            let label = &pool[rng.random_range(0..pool.len())];
            Camera::from_label(label, width, height)
        }
        PoseDistribution::Parametric { yaw_std, pitch_std, pitch_limit, radius, fov_deg } => {
            let yaw = sample_normal(rng, *yaw_std)?;
            let pitch = sample_normal(rng, *pitch_std)?.clamp(-pitch_limit, *pitch_limit);
            Ok(Camera::orbit(yaw, pitch, *radius, *fov_deg, width, height))
        }
    }
}

fn sample_normal(rng: &mut impl Rng, std: f64) -> Result<f64> {
    if std == 0.0 {
        return Ok(0.0);
    }
    let n = Normal::new(0.0, std).map_err(|e| Error::Config(format!("pose std {std}: {e}")))?;
    Ok(n.sample(rng))
}

pub(crate) fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|x| x / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn canonical_pose_is_on_positive_z() {
        let cam = Camera::orbit(0.0, 0.0, DEFAULT_RADIUS, 12.0, 64, 64);
        let p = cam.position();
        assert!(p[0].abs() < 1e-15 && p[1].abs() < 1e-15 && (p[2] - DEFAULT_RADIUS).abs() < 1e-15);
        let f = cam.forward();
        assert!((f[2] + 1.0).abs() < 1e-15);
        cam.validate().unwrap();
        assert!((cam.fov_deg() - 12.0).abs() < 1e-12);
    }

    #[test]
    fn samples_sit_on_sphere_and_look_at_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dist =
            PoseDistribution::Parametric { yaw_std: 0.8, pitch_std: 0.4, pitch_limit: 1.2, radius: 2.7, fov_deg: 12.0 };
        for _ in 0..500 {
            let cam = sample_camera_pose(&mut rng, &dist, 32, 32).unwrap();
            let p = cam.position();
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 2.7).abs() < 1e-9);
            // Origin in camera coordinates lies on the optical axis.
            let o = cam.world_to_camera(&[0.0; 3]);
            assert!(o[0].abs() < 1e-9 && o[1].abs() < 1e-9 && o[2] > 0.0);
            cam.validate().unwrap();
        }
    }

    #[test]
    fn label_round_trip_is_bit_exact() {
        let cam = Camera::orbit(0.3, -0.2, 2.7, 12.0, 64, 64);
        let back = Camera::from_label(&cam.label(), 64, 64).unwrap();
        assert_eq!(cam, back);
    }

    #[test]
    fn empirical_pool_of_one_always_returns_it() {
        let cam = Camera::orbit(0.7, 0.1, 2.7, 12.0, 16, 16);
        let dist = PoseDistribution::Empirical(vec![cam.label()]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            assert_eq!(sample_camera_pose(&mut rng, &dist, 16, 16).unwrap().label(), cam.label());
        }
        let empty = PoseDistribution::Empirical(vec![]);
        assert!(matches!(sample_camera_pose(&mut rng, &empty, 16, 16), Err(Error::Config(_))));
    }

    #[test]
    fn malformed_label_rejected() {
        assert!(matches!(Camera::from_label(&[0.0; 24], 8, 8), Err(Error::Validation(_))));
        let mut l = Camera::orbit(0.0, 0.0, 2.7, 12.0, 8, 8).label();
        l[0] = 2.0;
        assert!(Camera::from_label(&l, 8, 8).is_err());
    }
}
