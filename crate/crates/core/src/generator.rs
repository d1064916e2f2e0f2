//! Latent-to-scene generator.
//!
//! A mapping MLP turns `z` into a style vector `w`. A constant learnable
//! point cloud is positionally encoded and refined by one adaptive
//! transformer block per hierarchy level; the backbone keeps `base_points`
//! points throughout. Each level upsamples its features only inside its
//! own decode path, decodes rendered primitives and anchors, and places
//! both relative to the previous level's anchors. No camera enters anywhere.

use std::cell::Cell;
use std::collections::BTreeMap;

use cgs_autodiff::nn::{Bound, Linear, LinearInit, ParamStore};
use cgs_autodiff::{no_grad, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::raster::SceneVars;
use crate::scene::{GaussianScene, LayeredScene, SceneLevel};

pub const W_AVG_DECAY: f64 = 0.995;
pub const LRELU_SLOPE: f64 = 0.2;
pub const MAPPING_LR_MULT: f64 = 0.01;
/// Raw head outputs pass `y = 20·tanh(x/20)` before the attribute maps.
pub const WEAK_TANH_BOUND: f64 = 20.0;
pub const HEAD_CHANNELS: usize = 14;
pub const OPACITY_EPS: f64 = 1e-4;
pub const ADAIN_EPS: f64 = 1e-8;
/// Initial weight gain of the attribute heads. With unit-gain heads the raw
/// outputs start in tanh saturation, which pins positions to the cube faces
/// (outside a 12° view) and leaves them without gradient.
pub const HEAD_INIT_SCALE: f64 = 0.25;
pub const PRESETS: [&str; 5] = ["desk", "paper-256", "paper-512", "paper-1024", "paper-2048"];

pub fn log_scale_min() -> f64 {
    1e-4f64.ln()
}

pub fn log_scale_max() -> f64 {
    0.1f64.ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub preset: String,
    pub z_dim: usize,
    pub w_dim: usize,
    pub mapping_layers: usize,
    pub base_points: usize,
    pub feature_dim: usize,
    pub attention_heads: usize,
    pub encode_frequencies: usize,
    /// Upsampling factor of level `k + 1` relative to level `k`.
    pub upsample_schedule: Vec<usize>,
    /// Scale applied to the local offsets of level `k + 1`.
    pub offset_scale: Vec<f64>,
}

impl GeneratorConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (schedule, dim): (Vec<usize>, usize) = match name {
            "desk" => (vec![4, 4], 64),
            "paper-256" => (vec![4, 4, 4, 2], 512),
            "paper-512" => (vec![4, 4, 4, 2, 2], 512),
            "paper-1024" => (vec![4, 4, 4, 2, 2, 2], 512),
            "paper-2048" => (vec![4, 4, 4, 2, 2, 2, 2], 512),
            other => {
                return Err(Error::Config(format!("unknown generator preset `{other}` (expected one of {PRESETS:?})")))
            }
        };
        let offset_scale = (1..=schedule.len()).map(|k| 0.25 * 0.5f64.powi(k as i32)).collect();
        Ok(Self {
            preset: name.to_string(),
            z_dim: 512,
            w_dim: 512,
            mapping_layers: 8,
            base_points: 512,
            feature_dim: dim,
            attention_heads: 8,
            encode_frequencies: 10,
            upsample_schedule: schedule,
            offset_scale,
        })
    }

    /// Same level structure with every width shrunk, for tests that only
    /// care about shapes and counts.
    pub fn tiny(mut self, dim: usize) -> Self {
        self.z_dim = dim;
        self.w_dim = dim;
        self.feature_dim = dim;
        self.attention_heads = 1;
        self.mapping_layers = 2;
        self
    }

    pub fn num_levels(&self) -> usize {
        self.upsample_schedule.len() + 1
    }

    /// Rendered primitives per level.
    pub fn level_counts(&self) -> Vec<usize> {
        let mut counts = vec![self.base_points];
        for &u in &self.upsample_schedule {
            counts.push(counts.last().unwrap() * u);
        }
        counts
    }

    pub fn total_primitives(&self) -> usize {
        self.level_counts().iter().sum()
    }

    pub fn encoding_width(&self) -> usize {
        3 + 3 * 2 * self.encode_frequencies
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.base_points == 0 {
            return bad("base_points must be at least 1".into());
        }
        if self.z_dim == 0 || self.w_dim == 0 || self.mapping_layers == 0 {
            return bad("mapping network needs nonzero z_dim, w_dim and depth".into());
        }
        if self.attention_heads == 0 || self.feature_dim % self.attention_heads != 0 {
            return bad(format!(
                "feature_dim {} is not divisible by {} attention heads",
                self.feature_dim, self.attention_heads
            ));
        }
        if let Some(u) = self.upsample_schedule.iter().find(|&&u| u != 2 && u != 4) {
            return bad(format!("unsupported upsampling factor {u} (expected 2 or 4)"));
        }
        if self.offset_scale.len() != self.upsample_schedule.len() {
            return bad(format!(
                "{} offset scales for {} upsampled levels",
                self.offset_scale.len(),
                self.upsample_schedule.len()
            ));
        }
        if self.offset_scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("offset scales must be positive".into());
        }
        Ok(())
    }
}

/// `z ~ N(0, I)` drawn from a seed.
pub fn latent_from_seed(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// `w' = w_avg + ψ (w − w_avg)`.
pub fn truncate(w: &[f64], w_avg: &[f64], psi: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&psi) {
        return Err(Error::InvalidInput(format!("truncation psi {psi} outside [0, 1]")));
    }
    if w.len() != w_avg.len() {
        return Err(Error::Shape(format!("w has {} entries, w_avg {}", w.len(), w_avg.len())));
    }
    if psi == 1.0 {
        return Ok(w.to_vec());
    }
    Ok(w.iter().zip(w_avg).map(|(w, a)| a + psi * (w - a)).collect())
}

/// `[p, sin(2^k π p) for all k, cos(2^k π p) for all k]` along the last axis.
pub fn positional_encoding(points: &Var, frequencies: usize) -> Var {
    if frequencies == 0 {
        return points.clone();
    }
    let scaled: Vec<Var> =
        (0..frequencies).map(|k| points.mul_scalar(2f64.powi(k as i32) * std::f64::consts::PI)).collect();
    let scaled = Var::concat(&scaled, 1);
    Var::concat(&[points.clone(), scaled.sin(), scaled.cos()], 1)
}

/// Standardizes every channel over the point axis (population statistics),
/// then applies `scale` and `offset` (each `[1, D]`).
pub fn adaptive_instance_norm(x: &Var, scale: &Var, offset: &Var) -> Var {
    let centered = x.sub(&x.mean_axis(0));
    let var = centered.square().mean_axis(0);
    let normed = centered.div(&var.add_scalar(ADAIN_EPS).sqrt());
    normed.mul(scale).add(offset)
}

/// AdaIN, multi-head self-attention and an MLP, with residuals around the
/// latter two.
#[derive(Clone, Debug)]
pub struct AdaptiveBlock {
    style_scale: Linear,
    style_offset: Linear,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    mlp_in: Linear,
    mlp_out: Linear,
    heads: usize,
    dim: usize,
}

impl AdaptiveBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, w_dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let lin = |store: &mut ParamStore, rng: &mut _, n: &str, i, o, init| {
            Linear::new(store, &format!("{name}.{n}"), i, o, init, rng)
        };
        let d = LinearInit::default();
        Self {
            style_scale: lin(store, rng, "style_scale", w_dim, dim, LinearInit { bias_init: 1.0, ..d }),
            style_offset: lin(store, rng, "style_offset", w_dim, dim, d),
            query: lin(store, rng, "query", dim, dim, d),
            key: lin(store, rng, "key", dim, dim, d),
            value: lin(store, rng, "value", dim, dim, d),
            out: lin(store, rng, "out", dim, dim, d),
            mlp_in: lin(store, rng, "mlp_in", dim, 2 * dim, d),
            mlp_out: lin(store, rng, "mlp_out", 2 * dim, dim, d),
            heads,
            dim,
        }
    }

    /// `x` is `[P, D]`, `w` is `[1, w_dim]`.
    pub fn forward(&self, p: &Bound, x: &Var, w: &Var) -> Result<Var> {
        let s = x.shape();
        if s.len() != 2 || s[0] == 0 || s[1] != self.dim {
            return Err(Error::Shape(format!("adaptive block expects [P >= 1, {}], got {s:?}", self.dim)));
        }
        let n = s[0];
        let dh = self.dim / self.heads;
        let h = adaptive_instance_norm(x, &self.style_scale.forward(p, w), &self.style_offset.forward(p, w));
        let split = |t: Var| t.reshape(&[n, self.heads, dh]).permute(&[1, 0, 2]);
        let q = split(self.query.forward(p, &h));
        let k = split(self.key.forward(p, &h));
        let v = split(self.value.forward(p, &h));
        let attn = q.matmul(&k.transpose()).mul_scalar(1.0 / (dh as f64).sqrt()).softmax_last();
        let mixed = attn.matmul(&v).permute(&[1, 0, 2]).reshape(&[n, self.dim]);
        let h = h.add(&self.out.forward(p, &mixed));
        let m = self.mlp_out.forward(p, &self.mlp_in.forward(p, &h).leaky_relu(LRELU_SLOPE));
        Ok(h.add(&m))
    }
}

/// `repeat(x, u) + reshape(linear(x))` with the linear branch zero-initialized.
#[derive(Clone, Debug)]
pub struct PointUpsample {
    pub factor: usize,
    linear: Linear,
}

impl PointUpsample {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, factor: usize, rng: &mut impl Rng) -> Result<Self> {
        if factor != 2 && factor != 4 {
            return Err(Error::Config(format!("unsupported upsampling factor {factor} (expected 2 or 4)")));
        }
        let init = LinearInit { zero_weight: true, ..Default::default() };
        let linear = Linear::new(store, name, dim, factor * dim, init, rng);
        Ok(Self { factor, linear })
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let u = self.factor;
        let repeated = x.reshape(&[n, 1, d]).broadcast_to(&[n, u, d]).reshape(&[n * u, d]);
        repeated.add(&self.linear.forward(p, x).reshape(&[n * u, d]))
    }
}

fn columns(x: &Var, start: usize, len: usize) -> Var {
    x.narrow(1, start, len)
}

/// Maps raw head outputs `[N, 14]` (position 3, color 3, log-scale 3,
/// rotation 4, opacity 1) to bounded attributes. Positions land in the
/// scene cube.
pub fn decode_attributes(raw: &Var) -> SceneVars {
    assert_eq!(raw.shape().len(), 2);
    assert_eq!(raw.shape()[1], HEAD_CHANNELS, "head output must have 14 channels");
    let n = raw.shape()[0];
    let y = raw.mul_scalar(1.0 / WEAK_TANH_BOUND).tanh().mul_scalar(WEAK_TANH_BOUND);
    let unit = |t: Var| t.tanh().add_scalar(1.0).mul_scalar(0.5);
    let (lo, hi) = (log_scale_min(), log_scale_max());
    // Offsetting the real part makes a zero output the identity rotation.
    let identity = Var::constant(Tensor::new(&[1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
    let q = columns(&y, 9, 4).add(&identity);
    SceneVars {
        positions: columns(&y, 0, 3).tanh().mul_scalar(0.5),
        colors: unit(columns(&y, 3, 3)),
        log_scales: unit(columns(&y, 6, 3)).mul_scalar(hi - lo).add_scalar(lo),
        rotations: normalize_quaternions(&q),
        opacities: columns(&y, 13, 1).sigmoid().clamp(OPACITY_EPS, 1.0 - OPACITY_EPS).reshape(&[n]),
    }
}

fn normalize_quaternions(q: &Var) -> Var {
    q.div(&q.square().sum_axis(1).add_scalar(1e-24).sqrt())
}

fn cross(a: &Var, b: &Var) -> Var {
    let c = |x: &Var, i| columns(x, i, 1);
    Var::concat(
        &[
            c(a, 1).mul(&c(b, 2)).sub(&c(a, 2).mul(&c(b, 1))),
            c(a, 2).mul(&c(b, 0)).sub(&c(a, 0).mul(&c(b, 2))),
            c(a, 0).mul(&c(b, 1)).sub(&c(a, 1).mul(&c(b, 0))),
        ],
        1,
    )
}

/// Hamilton product of `[N, 4]` quaternion rows.
fn quat_mul(a: &Var, b: &Var) -> Var {
    let c = |x: &Var, i| columns(x, i, 1);
    let (aw, ax, ay, az) = (c(a, 0), c(a, 1), c(a, 2), c(a, 3));
    let (bw, bx, by, bz) = (c(b, 0), c(b, 1), c(b, 2), c(b, 3));
    let w = aw.mul(&bw).sub(&ax.mul(&bx)).sub(&ay.mul(&by)).sub(&az.mul(&bz));
    let x = aw.mul(&bx).add(&ax.mul(&bw)).add(&ay.mul(&bz)).sub(&az.mul(&by));
    let y = aw.mul(&by).sub(&ax.mul(&bz)).add(&ay.mul(&bw)).add(&az.mul(&bx));
    let z = aw.mul(&bz).add(&ax.mul(&by)).sub(&ay.mul(&bx)).add(&az.mul(&bw));
    Var::concat(&[w, x, y, z], 1)
}

fn repeat_rows(x: &Var, fan_out: usize) -> Var {
    let (a, c) = (x.shape()[0], x.shape()[1]);
    x.reshape(&[a, 1, c]).broadcast_to(&[a, fan_out, c]).reshape(&[a * fan_out, c])
}

/// Graph version of [`crate::scene::compose_hierarchy`]: child `i` hangs
/// off anchor `i / fan_out`.
pub fn compose_vars(child: &SceneVars, anchors: &SceneVars) -> Result<SceneVars> {
    let (n, a) = (child.len(), anchors.len());
    if a == 0 || n == 0 || n % a != 0 {
        return Err(Error::Shape(format!("{n} children do not divide evenly over {a} anchors")));
    }
    let fan = n / a;
    let aq = repeat_rows(&normalize_quaternions(&anchors.rotations), fan);
    let ap = repeat_rows(&anchors.positions, fan);
    // Rotate offsets by the unit quaternion (w, u): v + w t + u × t, t = 2 u × v.
    let u = columns(&aq, 1, 3);
    let t = cross(&u, &child.positions).mul_scalar(2.0);
    let rotated = child.positions.add(&t.mul(&columns(&aq, 0, 1))).add(&cross(&u, &t));
    Ok(SceneVars {
        positions: ap.add(&rotated).clamp(-crate::scene::CUBE_HALF, crate::scene::CUBE_HALF),
        rotations: normalize_quaternions(&quat_mul(&aq, &child.rotations)),
        log_scales: child.log_scales.clone(),
        colors: child.colors.clone(),
        opacities: child.opacities.clone(),
    })
}

/// Per-level output of a synthesis inside the autodiff graph.
#[derive(Clone)]
pub struct LevelVars {
    pub rendered: SceneVars,
    pub anchors: SceneVars,
}

#[derive(Clone)]
pub struct LayeredVars {
    pub levels: Vec<LevelVars>,
}

impl LayeredVars {
    /// Rendered primitives of every level, in level order.
    pub fn flatten(&self) -> SceneVars {
        let parts: Vec<SceneVars> = self.levels.iter().map(|l| l.rendered.clone()).collect();
        SceneVars::concat(&parts)
    }

    pub fn to_layered(&self) -> LayeredScene {
        LayeredScene {
            levels: self
                .levels
                .iter()
                .map(|l| SceneLevel { rendered: l.rendered.to_scene(), anchors: l.anchors.to_scene() })
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
struct LevelDecoder {
    upsample: Vec<PointUpsample>,
    render_head: Linear,
    anchor_head: Linear,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParamStore,
    /// Running mean of mapped latents, updated by training only.
    pub w_avg: Vec<f64>,
    mapping: Vec<Linear>,
    encode: Linear,
    blocks: Vec<AdaptiveBlock>,
    decoders: Vec<LevelDecoder>,
    syntheses: Cell<u64>,
}

pub const CONST_POINTS: &str = "const_points";

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let mapping = (0..c.mapping_layers)
            .map(|i| {
                let input = if i == 0 { c.z_dim } else { c.w_dim };
                let init = LinearInit { lr_mult: MAPPING_LR_MULT, ..Default::default() };
                Linear::new(&mut store, &format!("mapping.{i}"), input, c.w_dim, init, &mut rng)
            })
            .collect();
        let pts: Vec<f64> = (0..c.base_points * 3).map(|_| rng.random_range(-0.5..0.5)).collect();
        store.insert(CONST_POINTS, Tensor::new(&[c.base_points, 3], pts)?);
        let encode =
            Linear::new(&mut store, "encode", c.encoding_width(), c.feature_dim, LinearInit::default(), &mut rng);
        let mut blocks = Vec::new();
        let mut decoders = Vec::new();
        for k in 0..c.num_levels() {
            blocks.push(AdaptiveBlock::new(
                &mut store,
                &format!("block{k}"),
                c.feature_dim,
                c.w_dim,
                c.attention_heads,
                &mut rng,
            ));
            let mut upsample = Vec::new();
            for (j, &u) in c.upsample_schedule[..k].iter().enumerate() {
                upsample.push(PointUpsample::new(&mut store, &format!("level{k}.up{j}"), c.feature_dim, u, &mut rng)?);
            }
            let head = |store: &mut ParamStore, rng: &mut ChaCha8Rng, role: &str| {
                let init = LinearInit { init_scale: HEAD_INIT_SCALE, ..Default::default() };
                Linear::new(store, &format!("level{k}.{role}"), c.feature_dim, HEAD_CHANNELS, init, rng)
            };
            decoders.push(LevelDecoder {
                upsample,
                render_head: head(&mut store, &mut rng, "render"),
                anchor_head: head(&mut store, &mut rng, "anchor"),
            });
        }
        Ok(Self {
            w_avg: vec![0.0; c.w_dim],
            config,
            params: store,
            mapping,
            encode,
            blocks,
            decoders,
            syntheses: Cell::new(0),
        })
    }

    /// `z` is `[B, z_dim]`; returns `[B, w_dim]`. Leaky ReLU after every
    /// layer but the last.
    pub fn map_latent(&self, p: &Bound, z: &Var) -> Var {
        let mut h = z.clone();
        let last = self.mapping.len() - 1;
        for (i, layer) in self.mapping.iter().enumerate() {
            h = layer.forward(p, &h);
            if i < last {
                h = h.leaky_relu(LRELU_SLOPE);
            }
        }
        h
    }

    /// Maps a single latent outside any graph.
    pub fn map_one(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.config.z_dim {
            return Err(Error::Shape(format!("latent has {} entries, expected {}", z.len(), self.config.z_dim)));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("latent contains non-finite values".into()));
        }
        no_grad(|| {
            let p = self.params.bind(false);
            let zt = Var::constant(Tensor::new(&[1, z.len()], z.to_vec())?);
            Ok(self.map_latent(&p, &zt).value().data().to_vec())
        })
    }

    /// `w_avg ← mean(ws) + β (w_avg − mean(ws))` over a `[B, w_dim]` batch.
    pub fn update_w_avg(&mut self, ws: &Tensor) {
        let d = self.config.w_dim;
        let b = ws.numel() / d;
        for j in 0..d {
            let mean = (0..b).map(|i| ws.data()[i * d + j]).sum::<f64>() / b as f64;
            self.w_avg[j] = mean + W_AVG_DECAY * (self.w_avg[j] - mean);
        }
    }

    /// Number of [`Generator::synthesize_graph`] calls so far.
    pub fn synthesis_count(&self) -> u64 {
        self.syntheses.get()
    }

    /// Synthesizes one scene from `w` (`[w_dim]` or `[1, w_dim]`).
    pub fn synthesize_graph(&self, p: &Bound, w: &Var) -> Result<LayeredVars> {
        let c = &self.config;
        if w.value().numel() != c.w_dim {
            return Err(Error::Shape(format!("style vector has shape {:?}, expected [{}]", w.shape(), c.w_dim)));
        }
        if !w.value().all_finite() {
            return Err(Error::InvalidInput("style vector contains non-finite values".into()));
        }
        self.syntheses.set(self.syntheses.get() + 1);
        let w = w.reshape(&[1, c.w_dim]);
        let encoded = positional_encoding(p.get(CONST_POINTS), c.encode_frequencies);
        let mut features = self.encode.forward(p, &encoded);
        let mut levels: Vec<LevelVars> = Vec::with_capacity(c.num_levels());
        for (k, (block, dec)) in self.blocks.iter().zip(&self.decoders).enumerate() {
            features = block.forward(p, &features, &w)?;
            let mut f = features.clone();
            for up in &dec.upsample {
                f = up.forward(p, &f);
            }
            let mut rendered = decode_attributes(&dec.render_head.forward(p, &f));
            let mut anchors = decode_attributes(&dec.anchor_head.forward(p, &f));
            if k > 0 {
                let s = c.offset_scale[k - 1];
                rendered.positions = rendered.positions.mul_scalar(s);
                anchors.positions = anchors.positions.mul_scalar(s);
                let parent = &levels[k - 1].anchors;
                rendered = compose_vars(&rendered, parent)?;
                anchors = compose_vars(&anchors, parent)?;
            }
            levels.push(LevelVars { rendered, anchors });
        }
        Ok(LayeredVars { levels })
    }

    pub fn synthesize(&self, w: &[f64]) -> Result<LayeredScene> {
        no_grad(|| {
            let p = self.params.bind(false);
            let wv = Var::constant(Tensor::new(&[w.len()], w.to_vec())?);
            Ok(self.synthesize_graph(&p, &wv)?.to_layered())
        })
    }

    /// Seed → z → w → truncation → flattened scene.
    pub fn generate(&self, seed: u64, psi: f64) -> Result<GaussianScene> {
        let w = self.map_one(&latent_from_seed(seed, self.config.z_dim))?;
        let w = truncate(&w, &self.w_avg, psi)?;
        Ok(crate::scene::flatten_layers(&self.synthesize(&w)?))
    }

    /// Copies weights and `w_avg` from another generator of identical shape.
    pub fn load_state(&mut self, params: &BTreeMap<String, Tensor>, w_avg: &[f64]) -> Result<()> {
        if w_avg.len() != self.config.w_dim {
            return Err(Error::Shape(format!("w_avg has {} entries, expected {}", w_avg.len(), self.config.w_dim)));
        }
        self.params.load_from(params)?;
        self.w_avg = w_avg.to_vec();
        Ok(())
    }

    /// Stores parameters under `prefix.`, `w_avg` as `prefix/w_avg` and the
    /// config in the metadata under `prefix`.
    pub fn save_to(&self, ckpt: &mut Checkpoint, prefix: &str) -> Result<()> {
        ckpt.insert_group(prefix, self.params.iter());
        ckpt.tensors.insert(format!("{prefix}/w_avg"), Tensor::new(&[self.w_avg.len()], self.w_avg.clone())?);
        if !ckpt.meta.is_object() {
            ckpt.meta = serde_json::json!({});
        }
        ckpt.meta[prefix] = serde_json::to_value(&self.config)?;
        Ok(())
    }

    pub fn load_from(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let cfg =
            ckpt.meta.get(prefix).ok_or_else(|| Error::Format(format!("checkpoint has no generator `{prefix}`")))?;
        let config: GeneratorConfig = serde_json::from_value(cfg.clone())?;
        let mut g = Generator::new(config, 0)?;
        let w_avg = ckpt.tensor(&format!("{prefix}/w_avg"))?.data().to_vec();
        g.load_state(&ckpt.group(prefix), &w_avg)?;
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{compose_hierarchy, quat_normalize};

    fn tiny() -> GeneratorConfig {
        let mut c = GeneratorConfig::preset("desk").unwrap().tiny(8);
        c.base_points = 16;
        c
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn truncation_endpoints_and_blend() {
        let w = [1.0, -2.0, 3.0];
        let avg = [0.5, 0.5, 0.5];
        assert_eq!(truncate(&w, &avg, 1.0).unwrap(), w.to_vec());
        assert_eq!(truncate(&w, &avg, 0.0).unwrap(), avg.to_vec());
        let t = truncate(&w, &avg, 0.8).unwrap();
        for i in 0..3 {
            assert!((t[i] - (0.8 * w[i] + 0.2 * avg[i])).abs() < 1e-12);
        }
        assert!(truncate(&w, &avg, 1.5).is_err());
    }

    #[test]
    fn mapping_is_deterministic_and_zero_final_layer_gives_bias() {
        let mut g = Generator::new(tiny(), 1).unwrap();
        let z = latent_from_seed(5, 8);
        assert_eq!(g.map_one(&z).unwrap(), g.map_one(&z).unwrap());
        let last = g.config.mapping_layers - 1;
        g.params.get_mut(&format!("mapping.{last}.weight")).unwrap().data_mut().fill(0.0);
        let bias: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        // Stored bias is divided by the lr multiplier at runtime.
        g.params
            .get_mut(&format!("mapping.{last}.bias"))
            .unwrap()
            .data_mut()
            .iter_mut()
            .zip(&bias)
            .for_each(|(b, v)| *b = v / MAPPING_LR_MULT);
        for seed in 0..3 {
            let w = g.map_one(&latent_from_seed(seed, 8)).unwrap();
            for (a, b) in w.iter().zip(&bias) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn w_avg_follows_streaming_average() {
        let mut g = Generator::new(tiny(), 2).unwrap();
        let mut oracle = vec![0.0; 8];
        let mut all = vec![0.0; 8];
        let steps = 2000;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..steps {
            let z = Tensor::randn(&[256, 8], &mut rng);
            let ws = no_grad(|| g.map_latent(&g.params.bind(false), &Var::constant(z))).value().clone();
            g.update_w_avg(&ws);
            for j in 0..8 {
                let m = (0..256).map(|i| ws.data()[i * 8 + j]).sum::<f64>() / 256.0;
                oracle[j] = W_AVG_DECAY * oracle[j] + (1.0 - W_AVG_DECAY) * m;
                all[j] += m / steps as f64;
            }
        }
        for j in 0..8 {
            assert!((g.w_avg[j] - oracle[j]).abs() < 1e-12);
            assert!((g.w_avg[j] - all[j]).abs() < 1e-2, "{} vs {}", g.w_avg[j], all[j]);
        }
    }

    #[test]
    fn encoding_of_zeros_and_width() {
        let e = positional_encoding(&Var::constant(Tensor::zeros(&[4, 3])), 10);
        assert_eq!(e.shape(), &[4, 63]);
        let d = e.value().data();
        for r in 0..4 {
            let row = &d[r * 63..(r + 1) * 63];
            assert!(row[..33].iter().all(|&v| v == 0.0));
            assert!(row[33..].iter().all(|&v| v == 1.0));
        }
        assert_eq!(GeneratorConfig::preset("paper-256").unwrap().encoding_width(), 63);
    }

    #[test]
    fn encoding_projects_to_feature_width() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut store, "encode", 63, 512, LinearInit::default(), &mut rng);
        let pts = Var::constant(randn(&[512, 3], 1));
        let out = lin.forward(&store.bind(false), &positional_encoding(&pts, 10));
        assert_eq!(out.shape(), &[512, 512]);
    }

    #[test]
    fn adain_moments() {
        let x = Var::constant(randn(&[50, 4], 3));
        let check = |a: f64, b: f64| {
            let s = Var::constant(Tensor::full(&[1, 4], a));
            let o = Var::constant(Tensor::full(&[1, 4], b));
            let y = adaptive_instance_norm(&x, &s, &o);
            for c in 0..4 {
                let col: Vec<f64> = (0..50).map(|i| y.value().data()[i * 4 + c]).collect();
                let mean = col.iter().sum::<f64>() / 50.0;
                let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0).sqrt();
                assert!((mean - b).abs() < 1e-6 && (std - a.abs()).abs() < 1e-6, "{mean} {std}");
            }
        };
        check(1.0, 0.0);
        check(-2.5, 0.7);
    }

    #[test]
    fn block_is_permutation_equivariant() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = AdaptiveBlock::new(&mut store, "b", 8, 6, 2, &mut rng);
        let p = store.bind(false);
        let x = randn(&[10, 8], 5);
        let w = Var::constant(randn(&[1, 6], 6));
        let perm = [3, 7, 0, 9, 1, 2, 8, 4, 6, 5];
        let xp =
            Tensor::new(&[10, 8], perm.iter().flat_map(|&i| x.data()[i * 8..(i + 1) * 8].to_vec()).collect()).unwrap();
        let y = block.forward(&p, &Var::constant(x), &w).unwrap();
        let yp = block.forward(&p, &Var::constant(xp), &w).unwrap();
        for (r, &i) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((yp.value().data()[r * 8 + c] - y.value().data()[i * 8 + c]).abs() < 1e-10);
            }
        }
        let empty = Var::constant(Tensor::zeros(&[0, 8]));
        assert!(matches!(block.forward(&p, &empty, &w), Err(Error::Shape(_))));
    }

    #[test]
    fn upsample_starts_as_repeat_and_trains_both_branches() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(PointUpsample::new(&mut store, "bad", 4, 3, &mut rng), Err(Error::Config(_))));
        let up = PointUpsample::new(&mut store, "up", 4, 4, &mut rng).unwrap();
        let x = Var::leaf(randn(&[512, 4], 1));
        let p = store.bind(true);
        let y = up.forward(&p, &x);
        assert_eq!(y.shape(), &[2048, 4]);
        for i in 0..2048 {
            for c in 0..4 {
                assert_eq!(y.value().data()[i * 4 + c], x.value().data()[(i / 4) * 4 + c]);
            }
        }
        let loss = y.mul(&Var::constant(randn(&[2048, 4], 2))).sum_all();
        let grads = p.grads(&loss);
        assert!(grads["up.weight"].max_abs() > 0.0);
        let gx = cgs_autodiff::grad(&loss, &[x], false).remove(0).unwrap();
        assert!(gx.value().max_abs() > 0.0);
    }

    #[test]
    fn decode_of_zero_is_neutral() {
        let s = decode_attributes(&Var::constant(Tensor::zeros(&[3, 14]))).to_scene();
        for i in 0..3 {
            assert_eq!(s.positions[i], [0.0; 3]);
            assert_eq!(s.colors[i], [0.5; 3]);
            assert_eq!(s.opacities[i], 0.5);
            assert_eq!(s.rotations[i], [1.0, 0.0, 0.0, 0.0]);
            let mid = 0.5 * (log_scale_min() + log_scale_max());
            assert!(s.log_scales[i].iter().all(|v| (v - mid).abs() < 1e-12));
        }
    }

    #[test]
    fn decode_bounds_hold_for_wild_inputs() {
        let raw = randn(&[200, 14], 9).map(|v| v * 300.0);
        let s = decode_attributes(&Var::constant(raw)).to_scene();
        s.validate().unwrap();
        assert!(s.opacities.iter().all(|&o| o > 0.0 && o < 1.0));
        let y =
            Var::constant(Tensor::scalar(1000.0)).mul_scalar(1.0 / WEAK_TANH_BOUND).tanh().mul_scalar(WEAK_TANH_BOUND);
        // tanh(50) rounds to exactly 1 in f64, so the bound is reached, not exceeded.
        assert!(y.item() <= WEAK_TANH_BOUND && y.item() > 19.99);
    }

    #[test]
    fn compose_vars_matches_plain_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mk = |n: usize, r: f64, rng: &mut ChaCha8Rng| {
            let mut s = GaussianScene::default();
            for _ in 0..n {
                let q = quat_normalize(&[0; 4].map(|_| rng.random_range(-1.0..1.0))).unwrap();
                s.push(
                    [0; 3].map(|_| rng.random_range(-r..r)),
                    q,
                    [0; 3].map(|_| rng.random_range(-5.0..-2.0)),
                    [0; 3].map(|_| rng.random_range(0.0..1.0)),
                    rng.random_range(0.0..0.99),
                );
            }
            s
        };
        let anchors = mk(5, 0.45, &mut rng);
        let child = mk(20, 0.1, &mut rng);
        let oracle = compose_hierarchy(&child, &anchors).unwrap();
        let got = compose_vars(&SceneVars::constant(&child), &SceneVars::constant(&anchors)).unwrap().to_scene();
        for i in 0..20 {
            for k in 0..3 {
                assert!((got.positions[i][k] - oracle.positions[i][k]).abs() < 1e-12);
            }
            for k in 0..4 {
                assert!((got.rotations[i][k] - oracle.rotations[i][k]).abs() < 1e-12);
            }
        }
        assert_eq!(got.colors, oracle.colors);
    }

    #[test]
    fn preset_counts() {
        let counts: Vec<usize> = ["paper-256", "paper-512", "paper-1024", "paper-2048", "desk"]
            .iter()
            .map(|p| GeneratorConfig::preset(p).unwrap().total_primitives())
            .collect();
        assert_eq!(counts, vec![109_056, 240_128, 502_272, 1_026_560, 10_752]);
        assert_eq!(GeneratorConfig::preset("paper-256").unwrap().level_counts(), vec![512, 2048, 8192, 32768, 65536]);
        assert!(matches!(GeneratorConfig::preset("huge"), Err(Error::Config(_))));
    }

    #[test]
    fn synthesis_is_deterministic_and_valid() {
        let g = Generator::new(tiny(), 3).unwrap();
        let w = g.map_one(&latent_from_seed(1, 8)).unwrap();
        let a = g.synthesize(&w).unwrap();
        let b = g.synthesize(&w).unwrap();
        assert_eq!(a, b);
        a.validate_structure().unwrap();
        let counts: Vec<usize> = a.levels.iter().map(|l| l.rendered.len()).collect();
        assert_eq!(counts, vec![16, 64, 256]);
        for l in &a.levels {
            l.rendered.validate().unwrap();
            l.anchors.validate().unwrap();
        }
        assert_eq!(g.synthesis_count(), 2);
    }

    #[test]
    fn schedule_mismatch_is_config_error() {
        let mut c = tiny();
        c.offset_scale.pop();
        assert!(matches!(Generator::new(c, 0), Err(Error::Config(_))));
        let mut c = tiny();
        c.upsample_schedule[0] = 8;
        assert!(matches!(Generator::new(c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut g = Generator::new(tiny(), 3).unwrap();
        g.w_avg = (0..8).map(|i| i as f64).collect();
        let mut ck = Checkpoint::default();
        g.save_to(&mut ck, "g_ema").unwrap();
        let back = Generator::load_from(&ck, "g_ema").unwrap();
        assert_eq!(back.params, g.params);
        assert_eq!(back.w_avg, g.w_avg);
        assert_eq!(back.config, g.config);
    }
}
