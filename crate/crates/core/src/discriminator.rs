//! Camera-conditioned convolutional critic.
//!
//! A residual conv trunk halves the resolution down to 4×4, appends a
//! minibatch standard deviation channel, and ends in a feature vector φ.
//! The score is `head(φ) + ⟨embed(label), φ⟩ / √dim`; the label embedding
//! starts at zero so conditioning fades in during training.

use cgs_autodiff::nn::{avg_pool2, Bound, Conv2d, Linear, LinearInit, ParamStore};
use cgs_autodiff::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::LABEL_LEN;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

pub const MBSTD_GROUP: usize = 4;
/// Added under the square root of the group variance; subtracting its
/// square root again makes identical samples give exactly zero.
pub const MBSTD_EPS: f64 = 1e-8;
pub const BLUR_SIGMA0: f64 = 10.0;
pub const BLUR_HORIZON_IMAGES: u64 = 200_000;
const LRELU: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub resolution: usize,
    /// Channels at resolution `r` are `min(channel_base / r, channel_max)`.
    pub channel_base: usize,
    pub channel_max: usize,
    pub mbstd_group: usize,
}

impl DiscriminatorConfig {
    pub fn paper(resolution: usize) -> Self {
        Self { resolution, channel_base: 32768, channel_max: 512, mbstd_group: MBSTD_GROUP }
    }

    pub fn desk(resolution: usize) -> Self {
        Self { resolution, channel_base: 1024, channel_max: 64, mbstd_group: MBSTD_GROUP }
    }

    pub fn channels_at(&self, res: usize) -> usize {
        (self.channel_base / res).clamp(1, self.channel_max)
    }

    /// Dimension of the final feature vector φ and of the label embedding.
    pub fn feature_dim(&self) -> usize {
        self.channels_at(4)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.resolution.is_power_of_two() || self.resolution < 4 {
            return Err(Error::Config(format!(
                "discriminator resolution {} must be a power of two >= 4",
                self.resolution
            )));
        }
        if self.mbstd_group == 0 || self.channel_base == 0 || self.channel_max == 0 {
            return Err(Error::Config("discriminator group size and channels must be nonzero".into()));
        }
        Ok(())
    }
}

/// Appends one channel holding, per group of up to `group` consecutive
/// samples, the mean over all features of the within-group standard
/// deviation. A trailing partial group uses its own (smaller) statistics.
pub fn minibatch_stddev(x: &Var, group: usize) -> Result<Var> {
    let s = x.shape().to_vec();
    if s.len() != 4 || s[0] == 0 {
        return Err(Error::Shape(format!("minibatch stddev needs a nonempty [B, H, W, C] batch, got {s:?}")));
    }
    let (b, h, w) = (s[0], s[1], s[2]);
    let group = group.max(1);
    let mut parts = Vec::new();
    let mut start = 0;
    while start < b {
        let n = group.min(b - start);
        let g = x.narrow(0, start, n);
        let centered = g.sub(&g.mean_axis(0));
        let var = centered.square().mean_axis(0);
        let std = var.add_scalar(MBSTD_EPS).sqrt().add_scalar(-MBSTD_EPS.sqrt());
        let stat = std.mean_all().reshape(&[1, 1, 1, 1]).broadcast_to(&[n, h, w, 1]);
        parts.push(stat);
        start += n;
    }
    let stat = if parts.len() == 1 { parts.pop().unwrap() } else { Var::concat(&parts, 0) };
    Ok(Var::concat(&[x.clone(), stat], 3))
}

/// Warm-up blur width after `images_seen` training images.
pub fn blur_sigma(images_seen: u64) -> f64 {
    BLUR_SIGMA0 * (1.0 - images_seen as f64 / BLUR_HORIZON_IMAGES as f64).max(0.0)
}

/// `n × n` Gaussian smoothing matrix truncated at `3σ`, with edge pixels
/// replicated so constants are preserved.
fn blur_matrix(n: usize, sigma: f64) -> Tensor {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|d| (-0.5 * (d as f64 / sigma).powi(2)).exp()).collect();
    let total: f64 = taps.iter().sum();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for (t, d) in (-r..=r).enumerate() {
            let j = (i as isize + d).clamp(0, n as isize - 1) as usize;
            m[i * n + j] += taps[t] / total;
        }
    }
    Tensor::new(&[n, n], m).unwrap()
}

/// Separable Gaussian blur of an `[B, H, W, C]` batch; `sigma = 0` returns
/// the input untouched.
pub fn blur_images(images: &Var, sigma: f64) -> Var {
    if sigma <= 0.0 {
        return images.clone();
    }
    let (h, w) = (images.shape()[1], images.shape()[2]);
    let mh = Var::constant(blur_matrix(h, sigma).transpose_last2().unwrap());
    let mw = Var::constant(blur_matrix(w, sigma).transpose_last2().unwrap());
    // Blur along W (last axis after permute), then along H.
    let x = images.permute(&[0, 1, 3, 2]).matmul(&mw).permute(&[0, 1, 3, 2]);
    x.permute(&[0, 2, 3, 1]).matmul(&mh).permute(&[0, 3, 1, 2])
}

/// Turns per-image labels into a `[B, 25]` tensor, rejecting malformed ones.
pub fn label_tensor(labels: &[Vec<f64>]) -> Result<Tensor> {
    for (i, l) in labels.iter().enumerate() {
        if l.len() != LABEL_LEN {
            return Err(Error::Validation(format!("label {i} has {} numbers, expected {LABEL_LEN}", l.len())));
        }
        if l.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("label {i} contains non-finite values")));
        }
    }
    Ok(Tensor::new(&[labels.len(), LABEL_LEN], labels.iter().flatten().copied().collect())?)
}

#[derive(Clone, Debug)]
struct Stage {
    conv0: Conv2d,
    conv1: Conv2d,
    skip: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: ParamStore,
    from_rgb: Conv2d,
    stages: Vec<Stage>,
    final_conv: Conv2d,
    final_fc: Linear,
    head: Linear,
    embed: Linear,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let from_rgb = Conv2d::new(&mut store, "from_rgb", 3, c.channels_at(c.resolution), 1, true, &mut rng);
        let mut stages = Vec::new();
        let mut res = c.resolution;
        while res > 4 {
            let (cin, cout) = (c.channels_at(res), c.channels_at(res / 2));
            let name = format!("b{res}");
            stages.push(Stage {
                conv0: Conv2d::new(&mut store, &format!("{name}.conv0"), cin, cin, 3, true, &mut rng),
                conv1: Conv2d::new(&mut store, &format!("{name}.conv1"), cin, cout, 3, true, &mut rng),
                skip: Conv2d::new(&mut store, &format!("{name}.skip"), cin, cout, 1, false, &mut rng),
            });
            res /= 2;
        }
        let c4 = c.channels_at(4);
        let final_conv = Conv2d::new(&mut store, "b4.conv", c4 + 1, c4, 3, true, &mut rng);
        let final_fc = Linear::new(&mut store, "b4.fc", 16 * c4, c4, LinearInit::default(), &mut rng);
        let head = Linear::new(&mut store, "head", c4, 1, LinearInit::default(), &mut rng);
        let zero = LinearInit { zero_weight: true, ..Default::default() };
        let embed = Linear::new(&mut store, "embed", LABEL_LEN, c4, zero, &mut rng);
        Ok(Self { config, params: store, from_rgb, stages, final_conv, final_fc, head, embed })
    }

    /// Feature vector φ `[B, dim]` of an `[B, H, W, 3]` image batch.
    pub fn features(&self, p: &Bound, images: &Var) -> Result<Var> {
        let s = images.shape();
        let r = self.config.resolution;
        if s.len() != 4 || s[1] != r || s[2] != r || s[3] != 3 {
            return Err(Error::Shape(format!("discriminator expects [B, {r}, {r}, 3] images, got {s:?}")));
        }
        let b = s[0];
        let mut x = self.from_rgb.forward(p, images).leaky_relu(LRELU);
        let sqrt_half = std::f64::consts::FRAC_1_SQRT_2;
        for st in &self.stages {
            let skip = st.skip.forward(p, &avg_pool2(&x));
            let main = st.conv0.forward(p, &x).leaky_relu(LRELU);
            let main = avg_pool2(&st.conv1.forward(p, &main).leaky_relu(LRELU));
            x = main.add(&skip).mul_scalar(sqrt_half);
        }
        let x = minibatch_stddev(&x, self.config.mbstd_group)?;
        let x = self.final_conv.forward(p, &x).leaky_relu(LRELU);
        let c4 = self.config.feature_dim();
        Ok(self.final_fc.forward(p, &x.reshape(&[b, 16 * c4])).leaky_relu(LRELU))
    }

    /// Scores `[B]` for images `[B, H, W, 3]` and labels `[B, 25]`.
    pub fn forward(&self, p: &Bound, images: &Var, labels: &Var) -> Result<Var> {
        let b = images.shape()[0];
        if labels.shape() != [b, LABEL_LEN] {
            return Err(Error::Validation(format!(
                "labels have shape {:?}, expected [{b}, {LABEL_LEN}]",
                labels.shape()
            )));
        }
        let phi = self.features(p, images)?;
        Ok(self.score_features(p, &phi, labels))
    }

    /// Unconditional head plus the label projection term on features `[B, dim]`.
    pub fn score_features(&self, p: &Bound, phi: &Var, labels: &Var) -> Var {
        let b = phi.shape()[0];
        let base = self.head.forward(p, phi).reshape(&[b]);
        let dim = phi.shape()[1] as f64;
        let proj = self.embed.forward(p, labels).mul(phi).sum_axis(1).reshape(&[b]).mul_scalar(1.0 / dim.sqrt());
        base.add(&proj)
    }

    /// Single-image convenience wrapper (the batch statistic sees one sample).
    pub fn discriminate(&self, image: &Tensor, label: &[f64]) -> Result<f64> {
        let labels = label_tensor(&[label.to_vec()])?;
        let r = self.config.resolution;
        let img = image
            .reshape(&[1, r, r, 3])
            .map_err(|_| Error::Shape(format!("image has shape {:?}, expected [{r}, {r}, 3]", image.shape())))?;
        cgs_autodiff::no_grad(|| {
            let p = self.params.bind(false);
            Ok(self.forward(&p, &Var::constant(img), &Var::constant(labels))?.item())
        })
    }

    pub fn save_to(&self, ckpt: &mut Checkpoint, prefix: &str) -> Result<()> {
        ckpt.insert_group(prefix, self.params.iter());
        if !ckpt.meta.is_object() {
            ckpt.meta = serde_json::json!({});
        }
        ckpt.meta[prefix] = serde_json::to_value(&self.config)?;
        Ok(())
    }

    pub fn load_from(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let cfg = ckpt
            .meta
            .get(prefix)
            .ok_or_else(|| Error::Format(format!("checkpoint has no discriminator `{prefix}`")))?;
        let mut d = Discriminator::new(serde_json::from_value(cfg.clone())?, 0)?;
        d.params.load_from(&ckpt.group(prefix))?;
        Ok(d)
    }
}
