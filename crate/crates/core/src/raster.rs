//! Differentiable tile-binned Gaussian splatting.
//!
//! Forward: every primitive is projected to a 2D Gaussian (EWA splatting),
//! all visible primitives are sorted once by depth (ties broken by index),
//! binned into 16×16 pixel tiles, and each pixel composites its
//! contributors front to back. Which primitives a pixel considers depends
//! only on the primitive's own 3σ rectangle, so results do not depend on
//! the tile size.
//!
//! Backward: each pixel's ordered `(index, alpha)` records are replayed back
//! to front, and the 2D gradients are pulled through the projection chain
//! to positions, quaternions, log-scales, colors, opacities and the
//! background.

use std::rc::Rc;

use cgs_autodiff::{Tensor, Var};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::scene::{norm4, rotation_of_unit, GaussianScene, Mat3};

pub const NEAR_PLANE: f64 = 0.01;
pub const DILATION: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
pub const TILE: usize = 16;

/// Camera quantities shared by every primitive.
#[derive(Clone, Copy, Debug)]
struct View {
    w2c: Mat3,
    origin: [f64; 3],
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

impl View {
    fn new(cam: &Camera) -> Self {
        let (fx, fy, cx, cy) = cam.pixel_intrinsics();
        Self { w2c: cam.rotation_w2c(), origin: cam.position(), fx, fy, cx, cy, width: cam.width, height: cam.height }
    }
}

/// Screen-space footprint of one primitive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    /// Pixel coordinates; pixel `(i, j)` has its center at `(i + 0.5, j + 0.5)`.
    pub mean2d: [f64; 2],
    /// Covariance in px², dilation included.
    pub cov2d: [[f64; 2]; 2],
    /// Inverse covariance as `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    /// Camera-space z.
    pub depth: f64,
    /// `ceil(3 sqrt(largest eigenvalue))` in pixels.
    pub radius: f64,
    pub cull: bool,
    /// Covariance could not be inverted; the primitive is skipped.
    pub singular: bool,
}

/// Everything the backward pass needs about one primitive's projection.
#[derive(Clone, Copy, Debug)]
struct Footprint {
    proj: Projection,
    t: [f64; 3],
    qhat: [f64; 4],
    qnorm: f64,
    rot: Mat3,
    scale: [f64; 3],
    sigma3: Mat3,
    jw: [[f64; 3]; 2],
    /// Inclusive pixel rectangle `[x0, x1] × [y0, y1]`; empty when culled.
    rect: [i64; 4],
}

fn footprint(pos: &[f64; 3], q: &[f64; 4], log_scale: &[f64; 3], v: &View) -> Footprint {
    let d = [pos[0] - v.origin[0], pos[1] - v.origin[1], pos[2] - v.origin[2]];
    let t = [0, 1, 2].map(|i| v.w2c[i][0] * d[0] + v.w2c[i][1] * d[1] + v.w2c[i][2] * d[2]);
    let qnorm = norm4(q);
    let qhat = if qnorm > 0.0 { q.map(|c| c / qnorm) } else { [1.0, 0.0, 0.0, 0.0] };
    let rot = rotation_of_unit(&qhat);
    let scale = log_scale.map(f64::exp);
    let mut sigma3 = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            sigma3[i][j] = (0..3).map(|k| rot[i][k] * scale[k] * scale[k] * rot[j][k]).sum();
        }
    }
    let z = t[2];
    let mut proj = Projection {
        mean2d: [0.0; 2],
        cov2d: [[0.0; 2]; 2],
        conic: [0.0; 3],
        depth: z,
        radius: 0.0,
        cull: true,
        singular: false,
    };
    let mut fp = Footprint { proj, t, qhat, qnorm, rot, scale, sigma3, jw: [[0.0; 3]; 2], rect: [0, -1, 0, -1] };
    if !(z > NEAR_PLANE) {
        return fp;
    }
    let u = v.fx * t[0] / z + v.cx;
    let w = v.fy * t[1] / z + v.cy;
    let j = [[v.fx / z, 0.0, -v.fx * t[0] / (z * z)], [0.0, v.fy / z, -v.fy * t[1] / (z * z)]];
    let mut jw = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            jw[r][c] = (0..3).map(|k| j[r][k] * v.w2c[k][c]).sum();
        }
    }
    let mut cov = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            let mut acc = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    acc += jw[r][a] * sigma3[a][b] * jw[c][b];
                }
            }
            cov[r][c] = acc;
        }
    }
    cov[0][0] += DILATION;
    cov[1][1] += DILATION;
    // The two off-diagonal sums differ only by rounding; use one.
    cov[1][0] = cov[0][1];
    proj.mean2d = [u, w];
    proj.cov2d = cov;
    fp.jw = jw;
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[0][1];
    if !(det > 0.0) || !det.is_finite() || qnorm == 0.0 {
        proj.singular = true;
        fp.proj = proj;
        return fp;
    }
    proj.conic = [cov[1][1] / det, -cov[0][1] / det, cov[0][0] / det];
    let mid = 0.5 * (cov[0][0] + cov[1][1]);
    let lambda = mid + (mid * mid - det).max(0.0).sqrt();
    let r = (3.0 * lambda.sqrt()).ceil();
    proj.radius = r;
    // Pixel i is inside when |i + 0.5 - u| <= r.
    let x0 = ceil_i64(u - r - 0.5).max(0);
    let x1 = floor_i64(u + r - 0.5).min(v.width as i64 - 1);
    let y0 = ceil_i64(w - r - 0.5).max(0);
    let y1 = floor_i64(w + r - 0.5).min(v.height as i64 - 1);
    proj.cull = x0 > x1 || y0 > y1;
    if !proj.cull {
        fp.rect = [x0, x1, y0, y1];
    }
    fp.proj = proj;
    fp
}

// `f64::floor`/`ceil` are library calls on baseline x86-64; these saturate
// like `as` casts and are exact for the magnitudes used here.
#[inline]
fn floor_i64(x: f64) -> i64 {
    let i = x as i64;
    if (i as f64) > x {
        i - 1
    } else {
        i
    }
}

#[inline]
fn ceil_i64(x: f64) -> i64 {
    let i = x as i64;
    if (i as f64) < x {
        i + 1
    } else {
        i
    }
}

/// Projects one primitive. `rotation` need not be normalized.
pub fn project_gaussian(mean: &[f64; 3], rotation: &[f64; 4], scale: &[f64; 3], camera: &Camera) -> Projection {
    footprint(mean, rotation, &scale.map(f64::ln), &View::new(camera)).proj
}

/// One entry in a pixel's front-to-back contributor list.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution {
    pub index: u32,
    pub alpha: f64,
    /// Alpha hit the 0.99 ceiling, so it carries no gradient.
    pub clamped: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RenderStats {
    pub visible: usize,
    pub culled: usize,
    pub singular: usize,
    pub contributions: usize,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    /// H×W×3.
    pub image: Image,
    /// H×W, product of `(1 - alpha)` over each pixel's contributors.
    pub final_transmittance: Vec<f64>,
    /// Per pixel `(start, len)` into `records`.
    pub ranges: Vec<(u32, u32)>,
    pub records: Vec<Contribution>,
    pub stats: RenderStats,
    pub num_primitives: usize,
}

impl RenderOutput {
    pub fn contributors(&self, pixel: usize) -> &[Contribution] {
        let (s, n) = self.ranges[pixel];
        &self.records[s as usize..(s + n) as usize]
    }

    /// Ordered contributor indices and clamp flags of every pixel; equal
    /// across two renders iff both took the same discrete branches.
    pub fn contributor_signature(&self) -> Vec<(u32, bool)> {
        (0..self.ranges.len())
            .flat_map(|p| self.contributors(p).iter().map(|c| (c.index, c.clamped)).chain([(u32::MAX, false)]))
            .collect()
    }
}

/// A visible primitive as the pixel loop sees it.
struct Splat {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    /// Powers below this give alpha under the cutoff (with a little slack,
    /// so the exact test below still decides borderline cases).
    min_power: f64,
    color: [f64; 3],
    rect: [i64; 4],
    index: u32,
}

#[inline]
fn gaussian_power(conic: &[f64; 3], dx: f64, dy: f64) -> f64 {
    -0.5 * (conic[0] * dx * dx + conic[2] * dy * dy) - conic[1] * dx * dy
}

pub fn render_forward(scene: &GaussianScene, camera: &Camera, bg: [f64; 3]) -> Result<RenderOutput> {
    scene.check_lengths()?;
    let view = View::new(camera);
    let (w, h) = (view.width, view.height);
    let n = scene.len();
    let mut stats = RenderStats::default();
    let mut fps = Vec::with_capacity(n);
    let mut order: Vec<u32> = Vec::new();
    for i in 0..n {
        let fp = footprint(&scene.positions[i], &scene.rotations[i], &scene.log_scales[i], &view);
        if fp.proj.singular {
            stats.singular += 1;
        } else if fp.proj.cull {
            stats.culled += 1;
        } else {
            order.push(i as u32);
        }
        fps.push(fp);
    }
    let mut keyed: Vec<(f64, u32)> = order.iter().map(|&i| (fps[i as usize].proj.depth, i)).collect();
    keyed.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let order: Vec<u32> = keyed.into_iter().map(|(_, i)| i).collect();
    // Depth-ordered compact copies for the pixel loop. The pixel rectangle
    // is shrunk to where alpha can still reach the 1/255 cutoff; every pixel
    // removed this way would have been skipped anyway.
    let mut splats = Vec::with_capacity(order.len());
    for &i in &order {
        let fp = &fps[i as usize];
        let o = scene.opacities[i as usize];
        if !(o * 255.0 > 1.0) {
            continue;
        }
        let cov = fp.proj.cov2d;
        let mid = 0.5 * (cov[0][0] + cov[1][1]);
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[0][1];
        let lambda = mid + (mid * mid - det).max(0.0).sqrt();
        let reach = (2.0 * lambda * (255.0 * o).ln()).sqrt() * (1.0 + 1e-9) + 1e-9;
        let r = reach.min(fp.proj.radius);
        let [u, v] = fp.proj.mean2d;
        let rect = [
            ceil_i64(u - r - 0.5).max(fp.rect[0]),
            floor_i64(u + r - 0.5).min(fp.rect[1]),
            ceil_i64(v - r - 0.5).max(fp.rect[2]),
            floor_i64(v + r - 0.5).min(fp.rect[3]),
        ];
        if rect[0] > rect[1] || rect[2] > rect[3] {
            continue;
        }
        splats.push(Splat {
            mean: fp.proj.mean2d,
            conic: fp.proj.conic,
            opacity: o,
            min_power: (ALPHA_MIN / o).ln() - 1e-9,
            color: scene.colors[i as usize],
            rect,
            index: i,
        });
    }
    stats.visible = order.len();

    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (k, sp) in splats.iter().enumerate() {
        let [x0, x1, y0, y1] = sp.rect;
        for ty in (y0 as usize / TILE)..=(y1 as usize / TILE) {
            for tx in (x0 as usize / TILE)..=(x1 as usize / TILE) {
                bins[ty * tiles_x + tx].push(k as u32);
            }
        }
    }

    let mut image = vec![0.0; w * h * 3];
    let mut final_t = vec![1.0; w * h];
    let mut ranges = vec![(0u32, 0u32); w * h];
    let mut records = Vec::with_capacity(w * h * 8);
    // Each tile row walks its bin in depth order. For every splat the pixel
    // span where alpha can reach the cutoff on this row is solved in closed
    // form (with a small safety margin); pixels outside it would fail the
    // alpha test anyway, so they are never visited.
    let mut row_t = [1.0f64; TILE];
    let mut row_c = [[0.0f64; 3]; TILE];
    let mut row_recs: Vec<Vec<Contribution>> = vec![Vec::new(); TILE];
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let bin = &bins[ty * tiles_x + tx];
            let tile_x0 = (tx * TILE) as i64;
            let tile_x1 = (((tx + 1) * TILE).min(w) - 1) as i64;
            for py in ty * TILE..((ty + 1) * TILE).min(h) {
                let pyi = py as i64;
                let cyp = py as f64 + 0.5;
                row_t.fill(1.0);
                row_c.fill([0.0; 3]);
                row_recs.iter_mut().for_each(Vec::clear);
                let mut open = (tile_x1 - tile_x0 + 1) as usize;
                for &k in bin {
                    let sp = &splats[k as usize];
                    if pyi < sp.rect[2] || pyi > sp.rect[3] {
                        continue;
                    }
                    let [a, b, c] = sp.conic;
                    let dy = cyp - sp.mean[1];
                    let p0 = -0.5 * c * dy * dy;
                    let p1 = -b * dy;
                    let disc = p1 * p1 + 2.0 * a * (p0 - sp.min_power);
                    if disc < 0.0 {
                        continue;
                    }
                    let sq = disc.sqrt();
                    let lo = sp.mean[0] + (p1 - sq) / a;
                    let hi = sp.mean[0] + (p1 + sq) / a;
                    let x0 = ceil_i64(lo - 0.5 - 1e-6).max(sp.rect[0]).max(tile_x0);
                    let x1 = floor_i64(hi - 0.5 + 1e-6).min(sp.rect[1]).min(tile_x1);
                    for pxi in x0..=x1 {
                        let j = (pxi - tile_x0) as usize;
                        let t = row_t[j];
                        if t < TRANSMITTANCE_MIN {
                            continue;
                        }
                        let pw = gaussian_power(&sp.conic, pxi as f64 + 0.5 - sp.mean[0], dy);
                        if pw > 0.0 || pw < sp.min_power {
                            continue;
                        }
                        let raw = sp.opacity * pw.exp();
                        let clamped = raw > ALPHA_MAX;
                        let alpha = if clamped { ALPHA_MAX } else { raw };
                        if alpha < ALPHA_MIN {
                            continue;
                        }
                        for ch in 0..3 {
                            row_c[j][ch] += sp.color[ch] * alpha * t;
                        }
                        row_recs[j].push(Contribution { index: sp.index, alpha, clamped });
                        let t = t * (1.0 - alpha);
                        row_t[j] = t;
                        if t < TRANSMITTANCE_MIN {
                            open -= 1;
                        }
                    }
                    if open == 0 {
                        break;
                    }
                }
                for px in tx * TILE..((tx + 1) * TILE).min(w) {
                    let j = px - tx * TILE;
                    let p = py * w + px;
                    let t = row_t[j];
                    for k in 0..3 {
                        image[p * 3 + k] = row_c[j][k] + t * bg[k];
                    }
                    final_t[p] = t;
                    ranges[p] = (records.len() as u32, row_recs[j].len() as u32);
                    records.extend_from_slice(&row_recs[j]);
                }
            }
        }
    }
    stats.contributions = records.len();
    Ok(RenderOutput {
        image: Image::new(w, h, 3, image)?,
        final_transmittance: final_t,
        ranges,
        records,
        stats,
        num_primitives: n,
    })
}

/// Gradients laid out like [`GaussianScene`], plus the background.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RenderGrads {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
    pub bg: [f64; 3],
}

impl RenderGrads {
    fn zeros(n: usize) -> Self {
        Self {
            positions: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            log_scales: vec![[0.0; 3]; n],
            colors: vec![[0.0; 3]; n],
            opacities: vec![0.0; n],
            bg: [0.0; 3],
        }
    }
}

pub fn render_backward(
    grad_image: &[f64],
    out: &RenderOutput,
    scene: &GaussianScene,
    camera: &Camera,
    bg: [f64; 3],
) -> Result<RenderGrads> {
    let view = View::new(camera);
    let (w, h) = (view.width, view.height);
    let n = scene.len();
    if out.num_primitives != n || out.image.width != w || out.image.height != h || out.ranges.len() != w * h {
        return Err(Error::Contract("render output does not belong to this scene/camera".into()));
    }
    if grad_image.len() != w * h * 3 {
        return Err(Error::Shape(format!("grad_image has {} values, expected {}", grad_image.len(), w * h * 3)));
    }
    let mut g = RenderGrads::zeros(n);
    // Screen-space accumulators: mean2d (2), conic (3).
    let mut g_mean = vec![[0.0; 2]; n];
    let mut g_conic = vec![[0.0; 3]; n];
    let mut fps: Vec<Option<Footprint>> = vec![None; n];
    let mut ts: Vec<f64> = Vec::new();

    for p in 0..w * h {
        let gp = &grad_image[p * 3..p * 3 + 3];
        let tf = out.final_transmittance[p];
        for k in 0..3 {
            g.bg[k] += gp[k] * tf;
        }
        let recs = out.contributors(p);
        if recs.is_empty() || gp.iter().all(|&v| v == 0.0) {
            continue;
        }
        ts.clear();
        let mut t = 1.0;
        for r in recs {
            ts.push(t);
            t *= 1.0 - r.alpha;
        }
        let (px, py) = ((p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
        // Color seen behind the current contributor, background included.
        let mut behind = bg;
        for (r, &ti) in recs.iter().zip(&ts).rev() {
            let i = r.index as usize;
            if i >= n {
                return Err(Error::Contract(format!("contributor index {i} out of range")));
            }
            let col = scene.colors[i];
            let mut g_alpha = 0.0;
            for k in 0..3 {
                g.colors[i][k] += gp[k] * r.alpha * ti;
                g_alpha += gp[k] * ti * (col[k] - behind[k]);
            }
            for k in 0..3 {
                behind[k] = r.alpha * col[k] + (1.0 - r.alpha) * behind[k];
            }
            if r.clamped {
                continue;
            }
            let fp = fps[i].get_or_insert_with(|| {
                footprint(&scene.positions[i], &scene.rotations[i], &scene.log_scales[i], &view)
            });
            let dx = px - fp.proj.mean2d[0];
            let dy = py - fp.proj.mean2d[1];
            let conic = fp.proj.conic;
            let e = gaussian_power(&conic, dx, dy).exp();
            g.opacities[i] += g_alpha * e;
            let g_pow = g_alpha * r.alpha;
            // d power / d mean = (a dx + b dy, b dx + c dy).
            g_mean[i][0] += g_pow * (conic[0] * dx + conic[1] * dy);
            g_mean[i][1] += g_pow * (conic[1] * dx + conic[2] * dy);
            g_conic[i][0] += g_pow * (-0.5 * dx * dx);
            g_conic[i][1] += g_pow * (-dx * dy);
            g_conic[i][2] += g_pow * (-0.5 * dy * dy);
        }
    }

    for i in 0..n {
        let Some(fp) = fps[i] else { continue };
        projection_backward(&fp, &view, g_mean[i], g_conic[i], &mut g, i);
    }
    Ok(g)
}

/// Pulls screen-space gradients back to the primitive's 3D attributes.
fn projection_backward(fp: &Footprint, v: &View, g_mean: [f64; 2], g_conic: [f64; 3], g: &mut RenderGrads, i: usize) {
    let [a, b, c] = fp.proj.conic;
    // Conic as a symmetric matrix M; the off-diagonal entry appears twice.
    let m = [[a, b], [b, c]];
    let gm = [[g_conic[0], 0.5 * g_conic[1]], [0.5 * g_conic[1], g_conic[2]]];
    // G_cov = -M G_M M.
    let mut g_cov = [[0.0; 2]; 2];
    for r in 0..2 {
        for s in 0..2 {
            let mut acc = 0.0;
            for k in 0..2 {
                for l in 0..2 {
                    acc += m[r][k] * gm[k][l] * m[l][s];
                }
            }
            g_cov[r][s] = -acc;
        }
    }
    let jw = &fp.jw;
    // cov = JW Σ3 (JW)ᵀ: G_Σ3 = (JW)ᵀ G_cov JW, G_JW = 2 G_cov JW Σ3.
    let mut g_sigma = [[0.0; 3]; 3];
    for r in 0..3 {
        for s in 0..3 {
            let mut acc = 0.0;
            for k in 0..2 {
                for l in 0..2 {
                    acc += jw[k][r] * g_cov[k][l] * jw[l][s];
                }
            }
            g_sigma[r][s] = acc;
        }
    }
    let mut g_jw = [[0.0; 3]; 2];
    for r in 0..2 {
        for s in 0..3 {
            let mut acc = 0.0;
            for k in 0..2 {
                for l in 0..3 {
                    acc += g_cov[r][k] * jw[k][l] * fp.sigma3[l][s];
                }
            }
            g_jw[r][s] = 2.0 * acc;
        }
    }
    // G_J = G_JW Wᵀ.
    let mut g_j = [[0.0; 3]; 2];
    for r in 0..2 {
        for s in 0..3 {
            g_j[r][s] = (0..3).map(|k| g_jw[r][k] * v.w2c[s][k]).sum();
        }
    }
    let [tx, ty, tz] = fp.t;
    let (z2, z3) = (tz * tz, tz * tz * tz);
    let mut g_t =
        [g_mean[0] * v.fx / tz, g_mean[1] * v.fy / tz, -g_mean[0] * v.fx * tx / z2 - g_mean[1] * v.fy * ty / z2];
    g_t[2] += g_j[0][0] * (-v.fx / z2) + g_j[1][1] * (-v.fy / z2);
    g_t[0] += g_j[0][2] * (-v.fx / z2);
    g_t[1] += g_j[1][2] * (-v.fy / z2);
    g_t[2] += g_j[0][2] * (2.0 * v.fx * tx / z3) + g_j[1][2] * (2.0 * v.fy * ty / z3);
    for k in 0..3 {
        g.positions[i][k] += (0..3).map(|r| v.w2c[r][k] * g_t[r]).sum::<f64>();
    }

    // Σ3 = (R S)(R S)ᵀ: G_RS = 2 G_Σ3 R S.
    let rot = &fp.rot;
    let s = fp.scale;
    let mut g_rs = [[0.0; 3]; 3];
    for r in 0..3 {
        for col in 0..3 {
            g_rs[r][col] = 2.0 * (0..3).map(|k| g_sigma[r][k] * rot[k][col] * s[col]).sum::<f64>();
        }
    }
    let mut g_r = [[0.0; 3]; 3];
    for r in 0..3 {
        for col in 0..3 {
            g_r[r][col] = g_rs[r][col] * s[col];
        }
    }
    for col in 0..3 {
        let g_s: f64 = (0..3).map(|r| g_rs[r][col] * rot[r][col]).sum();
        g.log_scales[i][col] += g_s * s[col];
    }
    let gq = rotation_backward(&fp.qhat, &g_r);
    let dot: f64 = (0..4).map(|k| gq[k] * fp.qhat[k]).sum();
    for k in 0..4 {
        g.rotations[i][k] += (gq[k] - fp.qhat[k] * dot) / fp.qnorm;
    }
}

/// Gradient of a unit quaternion given the gradient of its rotation matrix.
fn rotation_backward(q: &[f64; 4], gr: &Mat3) -> [f64; 4] {
    let [w, x, y, z] = *q;
    [
        2.0 * (-z * gr[0][1] + y * gr[0][2] + z * gr[1][0] - x * gr[1][2] - y * gr[2][0] + x * gr[2][1]),
        2.0 * (y * gr[0][1] + z * gr[0][2] + y * gr[1][0] - 2.0 * x * gr[1][1] - w * gr[1][2]
            + z * gr[2][0]
            + w * gr[2][1]
            - 2.0 * x * gr[2][2]),
        2.0 * (-2.0 * y * gr[0][0] + x * gr[0][1] + w * gr[0][2] + x * gr[1][0] + z * gr[1][2] - w * gr[2][0]
            + z * gr[2][1]
            - 2.0 * y * gr[2][2]),
        2.0 * (-2.0 * z * gr[0][0] - w * gr[0][1] + x * gr[0][2] + w * gr[1][0] - 2.0 * z * gr[1][1]
            + y * gr[1][2]
            + x * gr[2][0]
            + y * gr[2][1]),
    ]
}

/// Scene attributes as graph nodes, in [`GaussianScene`] layout:
/// positions `[N,3]`, rotations `[N,4]`, log-scales `[N,3]`, colors `[N,3]`,
/// opacities `[N]`.
#[derive(Clone)]
pub struct SceneVars {
    pub positions: Var,
    pub rotations: Var,
    pub log_scales: Var,
    pub colors: Var,
    pub opacities: Var,
}

impl SceneVars {
    pub fn len(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(scene: &GaussianScene) -> Self {
        let n = scene.len();
        let flat3 = |v: &[[f64; 3]]| Tensor::new(&[n, 3], v.iter().flatten().copied().collect()).unwrap();
        Self {
            positions: Var::constant(flat3(&scene.positions)),
            rotations: Var::constant(
                Tensor::new(&[n, 4], scene.rotations.iter().flatten().copied().collect()).unwrap(),
            ),
            log_scales: Var::constant(flat3(&scene.log_scales)),
            colors: Var::constant(flat3(&scene.colors)),
            opacities: Var::constant(Tensor::new(&[n], scene.opacities.clone()).unwrap()),
        }
    }

    /// Current values as a plain scene.
    pub fn to_scene(&self) -> GaussianScene {
        let n = self.len();
        let rows3 = |t: &Tensor| (0..n).map(|i| [0, 1, 2].map(|k| t.data()[i * 3 + k])).collect::<Vec<_>>();
        GaussianScene {
            positions: rows3(self.positions.value()),
            rotations: (0..n).map(|i| [0, 1, 2, 3].map(|k| self.rotations.value().data()[i * 4 + k])).collect(),
            log_scales: rows3(self.log_scales.value()),
            colors: rows3(self.colors.value()),
            opacities: self.opacities.value().data().to_vec(),
        }
    }

    pub fn concat(parts: &[SceneVars]) -> Self {
        let pick = |f: fn(&SceneVars) -> &Var| Var::concat(&parts.iter().map(|p| f(p).clone()).collect::<Vec<_>>(), 0);
        Self {
            positions: pick(|s| &s.positions),
            rotations: pick(|s| &s.rotations),
            log_scales: pick(|s| &s.log_scales),
            colors: pick(|s| &s.colors),
            opacities: pick(|s| &s.opacities),
        }
    }
}

/// Renders inside the autodiff graph. Returns an `[H, W, 3]` image node
/// and the scene that was rendered. The rasterizer's backward is
/// first-order only: gradients flowing out of it are constants.
pub fn render_var(scene: &SceneVars, camera: &Camera, bg: &Var) -> Result<(Var, Rc<GaussianScene>)> {
    let plain = Rc::new(scene.to_scene());
    let bg_val: [f64; 3] =
        bg.value().data().try_into().map_err(|_| Error::Shape("background must have 3 values".into()))?;
    let out = render_forward(&plain, camera, bg_val)?;
    let (w, h) = (camera.width, camera.height);
    let value = Tensor::new(&[h, w, 3], out.image.data.clone())?;
    let n = plain.len();
    let out = Rc::new(out);
    let cam = camera.clone();
    let captured = plain.clone();
    let parents = vec![
        scene.positions.clone(),
        scene.rotations.clone(),
        scene.log_scales.clone(),
        scene.colors.clone(),
        scene.opacities.clone(),
        bg.clone(),
    ];
    let node = Var::from_op(value, parents, move |gy| {
        let gr = render_backward(gy.value().data(), &out, &captured, &cam, bg_val)
            .expect("render output captured with its own scene");
        let t3 = |v: &[[f64; 3]]| Var::constant(Tensor::new(&[n, 3], v.iter().flatten().copied().collect()).unwrap());
        vec![
            Some(t3(&gr.positions)),
            Some(Var::constant(Tensor::new(&[n, 4], gr.rotations.iter().flatten().copied().collect()).unwrap())),
            Some(t3(&gr.log_scales)),
            Some(t3(&gr.colors)),
            Some(Var::constant(Tensor::new(&[n], gr.opacities.clone()).unwrap())),
            Some(Var::constant(Tensor::new(&[3], gr.bg.to_vec()).unwrap())),
        ]
    });
    Ok((node, plain))
}
