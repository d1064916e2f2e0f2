//! Explicit Gaussian scenes, quaternion helpers and hierarchy composition.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Half extent of the scene cube `[-0.5, 0.5]^3`.
pub const CUBE_HALF: f64 = 0.5;

pub type Mat3 = [[f64; 3]; 3];

/// Flat per-primitive arrays. Scales are kept as natural logs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianScene {
    pub positions: Vec<[f64; 3]>,
    /// Unit quaternions `(w, x, y, z)`.
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
}

impl GaussianScene {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            positions: Vec::with_capacity(n),
            rotations: Vec::with_capacity(n),
            log_scales: Vec::with_capacity(n),
            colors: Vec::with_capacity(n),
            opacities: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, position: [f64; 3], rotation: [f64; 4], log_scale: [f64; 3], color: [f64; 3], opacity: f64) {
        self.positions.push(position);
        self.rotations.push(rotation);
        self.log_scales.push(log_scale);
        self.colors.push(color);
        self.opacities.push(opacity);
    }

    pub fn scale(&self, i: usize) -> [f64; 3] {
        self.log_scales[i].map(f64::exp)
    }

    pub fn extend_from(&mut self, other: &GaussianScene) {
        self.positions.extend_from_slice(&other.positions);
        self.rotations.extend_from_slice(&other.rotations);
        self.log_scales.extend_from_slice(&other.log_scales);
        self.colors.extend_from_slice(&other.colors);
        self.opacities.extend_from_slice(&other.opacities);
    }

    pub(crate) fn check_lengths(&self) -> Result<()> {
        let n = self.len();
        if self.rotations.len() != n
            || self.log_scales.len() != n
            || self.colors.len() != n
            || self.opacities.len() != n
        {
            return Err(Error::Shape(format!(
                "attribute arrays disagree: {} positions, {} rotations, {} scales, {} colors, {} opacities",
                n,
                self.rotations.len(),
                self.log_scales.len(),
                self.colors.len(),
                self.opacities.len()
            )));
        }
        Ok(())
    }

    /// Checks every scene invariant: finite values, unit quaternions,
    /// positions inside the cube, opacities in `[0, 1)`, colors in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        self.check_lengths()?;
        for i in 0..self.len() {
            let vals = self.positions[i]
                .iter()
                .chain(&self.rotations[i])
                .chain(&self.log_scales[i])
                .chain(&self.colors[i])
                .chain(std::iter::once(&self.opacities[i]));
            for v in vals {
                if !v.is_finite() {
                    return Err(Error::Validation(format!("primitive {i} has non-finite attribute")));
                }
            }
            let qn = norm4(&self.rotations[i]);
            if (qn - 1.0).abs() > 1e-6 {
                return Err(Error::Validation(format!("primitive {i}: quaternion norm {qn}")));
            }
            if self.positions[i].iter().any(|p| p.abs() > CUBE_HALF) {
                return Err(Error::Validation(format!("primitive {i}: position outside scene cube")));
            }
            let o = self.opacities[i];
            if !(0.0..1.0).contains(&o) {
                return Err(Error::Validation(format!("primitive {i}: opacity {o} not in [0, 1)")));
            }
            if self.colors[i].iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::Validation(format!("primitive {i}: color outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// SHA-256 over every attribute in storage order, as lowercase hex.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        for i in 0..self.len() {
            for v in self.positions[i]
                .iter()
                .chain(&self.rotations[i])
                .chain(&self.log_scales[i])
                .chain(&self.colors[i])
                .chain(std::iter::once(&self.opacities[i]))
            {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One level of the generator hierarchy.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneLevel {
    pub rendered: GaussianScene,
    /// Non-rendered primitives that place the next level's children.
    pub anchors: GaussianScene,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayeredScene {
    pub levels: Vec<SceneLevel>,
}

impl LayeredScene {
    /// Anchor count of each level times the next level's fan-out must equal
    /// that level's primitive count.
    pub fn validate_structure(&self) -> Result<()> {
        for k in 1..self.levels.len() {
            let parents = self.levels[k - 1].anchors.len();
            let children = self.levels[k].rendered.len();
            if parents == 0 || children % parents != 0 {
                return Err(Error::Shape(format!(
                    "level {k}: {children} primitives cannot hang off {parents} anchors"
                )));
            }
        }
        Ok(())
    }

    pub fn total_primitives(&self) -> usize {
        self.levels.iter().map(|l| l.rendered.len()).sum()
    }
}

/// Concatenates the rendered primitives of every level in level order.
pub fn flatten_layers(layers: &LayeredScene) -> GaussianScene {
    let mut out = GaussianScene::with_capacity(layers.total_primitives());
    for level in &layers.levels {
        out.extend_from(&level.rendered);
    }
    out
}

pub fn norm4(q: &[f64; 4]) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn quat_normalize(q: &[f64; 4]) -> Result<[f64; 4]> {
    let n = norm4(q);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::InvalidInput(format!("quaternion {q:?} has zero or non-finite norm")));
    }
    Ok(q.map(|v| v / n))
}

/// Hamilton product `a ⊗ b` of `(w, x, y, z)` quaternions.
pub fn quat_mul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = *a;
    let [bw, bx, by, bz] = *b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// Rotation matrix of a unit quaternion (no normalization).
pub(crate) fn rotation_of_unit(q: &[f64; 4]) -> Mat3 {
    let [w, x, y, z] = *q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Rotation matrix of `q` after normalization. `q` and `-q` give the same matrix.
pub fn quaternion_to_rotation(q: &[f64; 4]) -> Result<Mat3> {
    Ok(rotation_of_unit(&quat_normalize(q)?))
}

pub fn mat3_mul_vec(m: &Mat3, v: &[f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat3_transpose(m: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = m[j][i];
        }
    }
    t
}

pub fn mat3_det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Places level-local children into world space through their anchors.
///
/// Child `i` belongs to anchor `i / fan_out`. Offsets are rotated by the
/// anchor orientation and translated by the anchor position, then clamped
/// to the scene cube; rotations compose as `anchor ⊗ child`. Color, scale
/// and opacity are copied unchanged.
pub fn compose_hierarchy(child_local: &GaussianScene, anchors: &GaussianScene) -> Result<GaussianScene> {
    child_local.check_lengths()?;
    anchors.check_lengths()?;
    let (n, a) = (child_local.len(), anchors.len());
    if a == 0 || n % a != 0 || n == 0 {
        return Err(Error::Shape(format!("{n} children do not divide evenly over {a} anchors")));
    }
    let fan_out = n / a;
    let mut out = child_local.clone();
    for i in 0..n {
        let k = i / fan_out;
        let aq = quat_normalize(&anchors.rotations[k])?;
        let rot = rotation_of_unit(&aq);
        let off = mat3_mul_vec(&rot, &child_local.positions[i]);
        let ap = anchors.positions[k];
        out.positions[i] = [0, 1, 2].map(|d| (ap[d] + off[d]).clamp(-CUBE_HALF, CUBE_HALF));
        out.rotations[i] = quat_normalize(&quat_mul(&aq, &child_local.rotations[i]))?;
    }
    Ok(out)
}
