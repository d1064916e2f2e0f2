//! Adversarial training: non-saturating losses, lazy R1, multi-view fake
//! batches collated so no identity repeats inside a discriminator batch,
//! scene regularizers, the optional contrastive pose ablation, the EMA
//! generator, resumable checkpoints and the outer run loop.

use std::collections::BTreeSet;
use std::fmt::Debug;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use cgs_autodiff::nn::{Bound, Linear, LinearInit, ParamStore};
use cgs_autodiff::optim::Adam;
use cgs_autodiff::{grad, no_grad, Tensor, Var};

use crate::camera::{sample_camera_pose, Camera, PoseDistribution, LABEL_LEN};
use crate::checkpoint::Checkpoint;
use crate::data::{composite_over, random_background, Dataset};
use crate::discriminator::{blur_images, Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig, LayeredVars};
use crate::metrics::{compute_fid, real_stats, DeskExtractor, FeatureStats, FidMode, GeneratorSource};
use crate::raster::render_var;

/// Radius beyond which the center regularizer starts to bite; just inside
/// the sphere inscribed in the unit scene cube.
pub const CENTER_RADIUS: f64 = 0.45;
pub const KNN_K: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub g_lr: f64,
    pub d_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub r1_gamma: f64,
    /// R1 runs every this many discriminator steps, scaled by the interval.
    pub r1_interval: u64,
    /// Rendered images per discriminator step.
    pub batch: usize,
    /// Images per discriminator forward pass (the minibatch-stddev population).
    pub device_batch: usize,
    /// Views rendered per synthesized scene.
    pub views: usize,
    /// Render the generator step from `views` cameras too (otherwise one).
    pub multiview_generator: bool,
    pub ema_halflife_images: f64,
    pub blur_sigma0: f64,
    pub blur_horizon_images: f64,
    pub lambda_center: f64,
    pub lambda_knn: f64,
    pub center_radius: f64,
    pub knn_k: usize,
    pub contrastive: bool,
    pub contrastive_tau: f64,
    pub contrastive_weight: f64,
    pub contrastive_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            g_lr: 0.0025,
            d_lr: 0.002,
            adam_beta1: 0.0,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
            r1_gamma: 1.0,
            r1_interval: 16,
            batch: 32,
            device_batch: 8,
            views: 4,
            multiview_generator: true,
            ema_halflife_images: 500_000.0,
            blur_sigma0: 10.0,
            blur_horizon_images: 200_000.0,
            lambda_center: 1.0,
            lambda_knn: 1.0,
            center_radius: CENTER_RADIUS,
            knn_k: KNN_K,
            contrastive: false,
            contrastive_tau: 0.1,
            contrastive_weight: 1.0,
            contrastive_dim: 32,
        }
    }
}

impl TrainConfig {
    /// Smaller batches for CPU runs: 4 identities × 4 views per step.
    pub fn desk() -> Self {
        Self { batch: 16, device_batch: 4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.views == 0 {
            return err("views must be at least 1".into());
        }
        if self.device_batch == 0 || self.batch % self.device_batch != 0 {
            return err(format!("batch {} is not a multiple of device_batch {}", self.batch, self.device_batch));
        }
        if self.batch % (self.views * self.device_batch) != 0 {
            return err(format!(
                "batch {} must be a multiple of views × device_batch = {} so each view-batch holds distinct identities",
                self.batch,
                self.views * self.device_batch
            ));
        }
        for (name, v) in [("g_lr", self.g_lr), ("d_lr", self.d_lr), ("adam_eps", self.adam_eps)] {
            if !(v.is_finite() && v > 0.0) {
                return err(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return err(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        for (name, v) in [
            ("r1_gamma", self.r1_gamma),
            ("ema_halflife_images", self.ema_halflife_images),
            ("blur_sigma0", self.blur_sigma0),
            ("blur_horizon_images", self.blur_horizon_images),
            ("lambda_center", self.lambda_center),
            ("lambda_knn", self.lambda_knn),
            ("center_radius", self.center_radius),
            ("contrastive_weight", self.contrastive_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return err(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.r1_interval == 0 || self.knn_k == 0 || self.contrastive_dim == 0 {
            return err("r1_interval, knn_k and contrastive_dim must be positive".into());
        }
        if self.contrastive && self.contrastive_tau <= 0.0 {
            return err(format!("contrastive_tau must be positive, got {}", self.contrastive_tau));
        }
        Ok(())
    }

    /// Scenes synthesized per discriminator step.
    pub fn identities_per_step(&self) -> usize {
        self.batch / self.views
    }

    /// `(identities, views)` rendered in the generator step.
    pub fn generator_layout(&self) -> (usize, usize) {
        if self.multiview_generator {
            (self.identities_per_step(), self.views)
        } else {
            (self.batch, 1)
        }
    }

    pub fn blur_sigma(&self, images_seen: u64) -> f64 {
        if self.blur_horizon_images == 0.0 {
            return 0.0;
        }
        self.blur_sigma0 * (1.0 - images_seen as f64 / self.blur_horizon_images).max(0.0)
    }
}

/// Generator loss: mean `softplus(−fake)`.
pub fn g_loss(fake_scores: &Var) -> Var {
    fake_scores.neg().softplus().mean_all()
}

/// Discriminator loss: mean `softplus(−real)` + mean `softplus(fake)`.
pub fn d_loss(real_scores: &Var, fake_scores: &Var) -> Var {
    real_scores.neg().softplus().mean_all().add(&fake_scores.softplus().mean_all())
}

/// `(γ/2)·E‖∇ₓ critic(x)‖²` over the batch, differentiable with respect to
/// the critic's parameters.
pub fn r1_penalty_with(images: &Tensor, gamma: f64, critic: impl FnOnce(&Var) -> Result<Var>) -> Result<Var> {
    let b = images.shape().first().copied().unwrap_or(0);
    if b == 0 {
        return Err(Error::Shape("R1 penalty of an empty batch".into()));
    }
    let x = Var::leaf(images.clone());
    let scores = critic(&x)?;
    let gx = grad(&scores.sum_all(), &[x], true).pop().flatten();
    Ok(match gx {
        Some(g) => g.square().sum_all().mul_scalar(gamma / (2.0 * b as f64)),
        None => Var::scalar(0.0),
    })
}

/// R1 of the real discriminator on `[B, H, W, 3]` images; `sigma` blurs
/// inside the critic so the gradient is taken with respect to sharp pixels.
pub fn r1_penalty(
    d: &Discriminator,
    p: &Bound,
    images: &Tensor,
    labels: &Tensor,
    gamma: f64,
    sigma: f64,
) -> Result<Var> {
    let labels = Var::constant(labels.clone());
    r1_penalty_with(images, gamma, |x| d.forward(p, &blur_images(x, sigma), &labels))
}

/// `√s` that is exactly 0 with zero gradient where `s == 0`.
fn safe_sqrt(s: &Var) -> Var {
    let zero_mask = s.value().map(|v| if v == 0.0 { 1.0 } else { 0.0 });
    let keep = Var::constant(zero_mask.map(|m| 1.0 - m));
    s.add(&Var::constant(zero_mask)).sqrt().mul(&keep)
}

/// Mean over primitives of `max(0, ‖p‖ − r₀)²`; `positions` is `[N, 3]`.
pub fn center_regularizer(positions: &Var, r0: f64) -> Var {
    if positions.shape()[0] == 0 {
        return Var::scalar(0.0);
    }
    let norm = safe_sqrt(&positions.square().sum_axis(1));
    norm.add_scalar(-r0).clamp(0.0, f64::INFINITY).square().mean_all()
}

/// Index of the `k`-th nearest other point of every point. Ties break by
/// index, which does not change the distance.
pub fn kth_neighbors(points: &[f64], k: usize) -> Result<Vec<usize>> {
    let n = points.len() / 3;
    if n <= k {
        return Err(Error::Config(format!("k-NN regularizer needs more than {k} anchors, got {n}")));
    }
    let mut out = Vec::with_capacity(n);
    let mut d2: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        d2.clear();
        for j in (0..n).filter(|&j| j != i) {
            let d: f64 = (0..3).map(|c| (points[i * 3 + c] - points[j * 3 + c]).powi(2)).sum();
            d2.push((d, j));
        }
        d2.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.push(d2[k - 1].1);
    }
    Ok(out)
}

/// Mean distance from every anchor (`[N, 3]`) to its `k`-th nearest neighbor.
pub fn knn_cluster_regularizer(anchors: &Var, k: usize) -> Result<Var> {
    let n = anchors.shape()[0];
    let nbr = kth_neighbors(anchors.value().data(), k)?;
    let map: Vec<u32> = nbr.iter().flat_map(|&j| (0..3).map(move |c| (j * 3 + c) as u32)).collect();
    let diff = anchors.sub(&anchors.gather(&Rc::new(map), &[n, 3]));
    Ok(safe_sqrt(&diff.square().sum_axis(1)).mean_all())
}

/// Scales every row of `[B, D]` to unit length.
pub fn normalize_rows(x: &Var) -> Var {
    x.div(&x.square().sum_axis(1).add_scalar(1e-24).sqrt())
}

/// Row-wise InfoNCE: `−log softmax(sim(p_I, p_θ)/τ)` at the matched index,
/// averaged over the batch. Embeddings are normalized here.
pub fn contrastive_pose_loss(image_emb: &Var, camera_emb: &Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("contrastive temperature must be positive, got {tau}")));
    }
    let (si, sc) = (image_emb.shape(), camera_emb.shape());
    if si.len() != 2 || si != sc {
        return Err(Error::Shape(format!("embedding shapes {si:?} and {sc:?} do not pair up")));
    }
    let b = si[0];
    let logits = normalize_rows(image_emb).matmul(&normalize_rows(camera_emb).transpose()).mul_scalar(1.0 / tau);
    let maxes: Vec<f64> = logits.value().data().chunks(b).map(|r| r.iter().copied().fold(f64::MIN, f64::max)).collect();
    let shift = Var::constant(Tensor::new(&[b, 1], maxes)?);
    let lse = logits.sub(&shift).exp().sum_axis(1).ln().add(&shift);
    let mut eye = Tensor::zeros(&[b, b]);
    for i in 0..b {
        eye.data_mut()[i * b + i] = 1.0;
    }
    let matched = logits.mul(&Var::constant(eye)).sum_axis(1);
    Ok(lse.sub(&matched).mean_all())
}

/// Projection heads mapping discriminator features and camera labels into
/// a shared embedding space (contrastive ablation only).
#[derive(Clone, Debug)]
pub struct PoseHead {
    pub params: ParamStore,
    image: Linear,
    camera: Linear,
}

impl PoseHead {
    pub fn new(feature_dim: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let image = Linear::new(&mut params, "image", feature_dim, dim, LinearInit::default(), &mut rng);
        let camera = Linear::new(&mut params, "camera", LABEL_LEN, dim, LinearInit::default(), &mut rng);
        Self { params, image, camera }
    }

    pub fn loss(&self, p: &Bound, features: &Var, labels: &Var, tau: f64) -> Result<Var> {
        contrastive_pose_loss(&self.image.forward(p, features), &self.camera.forward(p, labels), tau)
    }
}

/// `0.5^(batch / halflife)`.
pub fn ema_beta(batch: usize, halflife_images: f64) -> f64 {
    if halflife_images <= 0.0 {
        return 0.0;
    }
    0.5f64.powf(batch as f64 / halflife_images)
}

/// `ema ← β·ema + (1−β)·live` for every parameter.
pub fn ema_update(ema: &mut ParamStore, live: &ParamStore, beta: f64) -> Result<()> {
    if ema.len() != live.len() {
        return Err(Error::Contract(format!("EMA has {} parameters, live model {}", ema.len(), live.len())));
    }
    for (name, e) in ema.iter_mut() {
        let l = live.get(name).ok_or_else(|| Error::Contract(format!("live model has no parameter `{name}`")))?;
        if l.shape() != e.shape() {
            return Err(Error::Contract(format!("parameter `{name}`: EMA {:?} vs live {:?}", e.shape(), l.shape())));
        }
        for (a, &b) in e.data_mut().iter_mut().zip(l.data()) {
            *a = beta * *a + (1.0 - beta) * b;
        }
    }
    Ok(())
}

/// Errors unless every identity in one discriminator batch is distinct.
pub fn assert_distinct_identities<T: Ord + Debug>(ids: &[T]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::Contract(format!("identity {id:?} appears twice in one discriminator batch")));
        }
    }
    Ok(())
}

/// One rendered image: which scene, which of its views.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub identity: usize,
    pub view: usize,
}

/// Splits `identities × views` renders into discriminator batches of
/// `device_batch`, view-major, so every batch shows each scene at most once.
pub fn collation_plan(identities: usize, views: usize, device_batch: usize) -> Result<Vec<Vec<Slot>>> {
    if device_batch == 0 || (identities * views) % device_batch != 0 {
        return Err(Error::Config(format!(
            "{identities} scenes × {views} views do not split into batches of {device_batch}"
        )));
    }
    let slots: Vec<Slot> =
        (0..views).flat_map(|view| (0..identities).map(move |identity| Slot { identity, view })).collect();
    let groups: Vec<Vec<Slot>> = slots.chunks(device_batch).map(<[Slot]>::to_vec).collect();
    for g in &groups {
        assert_distinct_identities(&g.iter().map(|s| s.identity).collect::<Vec<_>>())?;
    }
    Ok(groups)
}

/// Draws real images so that no identity repeats within a batch.
#[derive(Clone, Debug)]
pub struct RealSampler {
    by_identity: Vec<Vec<usize>>,
    identity_of: Vec<usize>,
}

impl RealSampler {
    pub fn new(dataset: &Dataset) -> Self {
        let mut keys: Vec<&str> = dataset.identities().into_iter().collect();
        keys.sort_unstable();
        let mut by_identity = vec![Vec::new(); keys.len()];
        let mut identity_of = Vec::with_capacity(dataset.len());
        for (i, e) in dataset.entries.iter().enumerate() {
            let k = keys.binary_search(&e.identity()).unwrap();
            by_identity[k].push(i);
            identity_of.push(k);
        }
        Self { by_identity, identity_of }
    }

    pub fn identities(&self) -> usize {
        self.by_identity.len()
    }

    pub fn identity_of(&self, entry: usize) -> usize {
        self.identity_of[entry]
    }

    /// Entry indices of `size` distinct identities.
    pub fn sample(&self, rng: &mut impl Rng, size: usize) -> Result<Vec<usize>> {
        if size > self.identities() {
            return Err(Error::Config(format!(
                "a batch of {size} distinct identities needs at least that many, dataset has {}",
                self.identities()
            )));
        }
        let ids = rand::seq::index::sample(rng, self.identities(), size);
        Ok(ids
            .iter()
            .map(|k| {
                let pool = &self.by_identity[k];
                pool[rng.random_range(0..pool.len())]
            })
            .collect())
    }
}

/// One discriminator batch: images `[B, r, r, 3]` with their labels.
#[derive(Clone)]
pub struct ImageBatch {
    pub images: Var,
    pub labels: Tensor,
    pub identities: Vec<usize>,
}

pub struct MultiviewRender {
    pub batches: Vec<ImageBatch>,
    pub scenes: Vec<LayeredVars>,
    /// Content hash of the flattened scene behind every view, `[identity][view]`.
    pub view_hashes: Vec<Vec<String>>,
}

/// Synthesizes each style vector once and renders it from every camera in
/// `cameras[identity]` over the matching background, then collates the
/// renders into batches of `device_batch`.
pub fn render_multiview(
    g: &Generator,
    p: &Bound,
    ws: &[Var],
    cameras: &[Vec<Camera>],
    backgrounds: &[Vec<[f64; 3]>],
    device_batch: usize,
) -> Result<MultiviewRender> {
    let n = ws.len();
    let views = cameras.first().map_or(0, Vec::len);
    if cameras.len() != n || backgrounds.len() != n {
        return Err(Error::Shape(format!(
            "{n} latents, {} camera sets, {} background sets",
            cameras.len(),
            backgrounds.len()
        )));
    }
    if cameras.iter().zip(backgrounds).any(|(c, b)| c.len() != views || b.len() != views) {
        return Err(Error::Shape(format!("every scene needs exactly {views} cameras and backgrounds")));
    }
    let mut scenes = Vec::with_capacity(n);
    let mut renders: Vec<Vec<Var>> = Vec::with_capacity(n);
    let mut view_hashes = Vec::with_capacity(n);
    for i in 0..n {
        let layered = g.synthesize_graph(p, &ws[i])?;
        let flat = layered.flatten();
        let mut imgs = Vec::with_capacity(views);
        let mut hashes: Vec<String> = Vec::with_capacity(views);
        for (cam, bg) in cameras[i].iter().zip(&backgrounds[i]) {
            let bg = Var::constant(Tensor::new(&[3], bg.to_vec())?);
            let (img, scene) = render_var(&flat, cam, &bg)?;
            let h = scene.content_hash();
            if let Some(first) = hashes.first() {
                if *first != h {
                    return Err(Error::Contract(format!("scene {i} changed between views ({first} vs {h})")));
                }
            }
            hashes.push(h);
            imgs.push(img.reshape(&[1, cam.height, cam.width, 3]));
        }
        scenes.push(layered);
        renders.push(imgs);
        view_hashes.push(hashes);
    }
    let mut batches = Vec::new();
    for group in collation_plan(n, views, device_batch)? {
        let images = Var::concat(&group.iter().map(|s| renders[s.identity][s.view].clone()).collect::<Vec<_>>(), 0);
        let labels: Vec<f64> = group.iter().flat_map(|s| cameras[s.identity][s.view].label()).collect();
        batches.push(ImageBatch {
            images,
            labels: Tensor::new(&[group.len(), LABEL_LEN], labels)?,
            identities: group.iter().map(|s| s.identity).collect(),
        });
    }
    Ok(MultiviewRender { batches, scenes, view_hashes })
}

/// Mean over batches of the non-saturating generator loss; with one batch
/// per view this is `(1/V)·Σᵥ lossᵥ`.
pub fn multiview_generator_loss(d: &Discriminator, pd: &Bound, render: &MultiviewRender, sigma: f64) -> Result<Var> {
    let mut total = Var::scalar(0.0);
    for b in &render.batches {
        assert_distinct_identities(&b.identities)?;
        let scores = d.forward(pd, &blur_images(&b.images, sigma), &Var::constant(b.labels.clone()))?;
        total = total.add(&g_loss(&scores));
    }
    Ok(total.mul_scalar(1.0 / render.batches.len() as f64))
}

/// Loss values and diagnostics of one training step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub images_seen: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r1: Option<f64>,
    pub center: f64,
    pub knn: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contrastive: Option<f64>,
    pub real_score: f64,
    pub fake_score: f64,
    pub blur_sigma: f64,
}

/// Dataset-derived inputs of the loop.
pub struct TrainData<'a> {
    pub dataset: &'a Dataset,
    pub sampler: RealSampler,
    pub poses: PoseDistribution,
    pub resolution: usize,
}

impl<'a> TrainData<'a> {
    pub fn new(dataset: &'a Dataset, config: &TrainConfig) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Validation("dataset is empty; refusing to train".into()));
        }
        let sampler = RealSampler::new(dataset);
        if sampler.identities() < config.device_batch {
            return Err(Error::Config(format!(
                "device_batch {} exceeds the {} distinct identities in the dataset",
                config.device_batch,
                sampler.identities()
            )));
        }
        Ok(Self { dataset, sampler, poses: dataset.pose_distribution(), resolution: dataset.resolution()? })
    }
}

fn check_finite(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("{what} became {v}")))
    }
}

fn mean(v: &Var) -> f64 {
    v.value().data().iter().sum::<f64>() / v.value().numel().max(1) as f64
}

/// Everything a training run mutates.
pub struct Trainer {
    pub config: TrainConfig,
    pub g: Generator,
    pub g_ema: Generator,
    pub d: Discriminator,
    pub pose_head: Option<PoseHead>,
    pub g_opt: Adam,
    pub d_opt: Adam,
    pub pose_opt: Adam,
    pub rng: ChaCha8Rng,
    pub seed: u64,
    pub step: u64,
    pub images_seen: u64,
}

impl Trainer {
    pub fn new(gcfg: GeneratorConfig, dcfg: DiscriminatorConfig, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let g = Generator::new(gcfg, seed)?;
        let d = Discriminator::new(dcfg, seed.wrapping_add(1))?;
        let pose_head = config
            .contrastive
            .then(|| PoseHead::new(d.config.feature_dim(), config.contrastive_dim, seed.wrapping_add(2)));
        let adam = |lr| Adam::new(lr, config.adam_beta1, config.adam_beta2, config.adam_eps);
        Ok(Self {
            g_ema: g.clone(),
            g_opt: adam(config.g_lr),
            d_opt: adam(config.d_lr),
            pose_opt: adam(config.d_lr),
            config,
            g,
            d,
            pose_head,
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            step: 0,
            images_seen: 0,
        })
    }

    fn sample_views(
        &mut self,
        data: &TrainData,
        n: usize,
        views: usize,
    ) -> Result<(Tensor, Vec<Vec<Camera>>, Vec<Vec<[f64; 3]>>)> {
        let z = Tensor::randn(&[n, self.g.config.z_dim], &mut self.rng);
        let r = data.resolution;
        let mut cams = Vec::with_capacity(n);
        let mut bgs = Vec::with_capacity(n);
        for _ in 0..n {
            let mut c = Vec::with_capacity(views);
            let mut b = Vec::with_capacity(views);
            for _ in 0..views {
                c.push(sample_camera_pose(&mut self.rng, &data.poses, r, r)?);
                b.push(random_background(&mut self.rng));
            }
            cams.push(c);
            bgs.push(b);
        }
        Ok((z, cams, bgs))
    }

    fn real_batches(&mut self, data: &TrainData) -> Result<Vec<(Tensor, Tensor)>> {
        let r = data.resolution;
        let groups = self.config.batch / self.config.device_batch;
        let mut out = Vec::with_capacity(groups);
        for _ in 0..groups {
            let idx = data.sampler.sample(&mut self.rng, self.config.device_batch)?;
            assert_distinct_identities(&idx.iter().map(|&i| data.sampler.identity_of(i)).collect::<Vec<_>>())?;
            let mut px = Vec::with_capacity(idx.len() * r * r * 3);
            let mut labels = Vec::with_capacity(idx.len() * LABEL_LEN);
            for &i in &idx {
                let e = &data.dataset.entries[i];
                px.extend(composite_over(&e.image, random_background(&mut self.rng))?.data);
                labels.extend_from_slice(&e.label);
            }
            out.push((Tensor::new(&[idx.len(), r, r, 3], px)?, Tensor::new(&[idx.len(), LABEL_LEN], labels)?));
        }
        Ok(out)
    }

    fn style_vectors(&self, p: &Bound, z: &Tensor) -> (Var, Vec<Var>) {
        let w = self.g.map_latent(p, &Var::constant(z.clone()));
        let ws = (0..z.shape()[0]).map(|i| w.narrow(0, i, 1)).collect();
        (w, ws)
    }

    /// One discriminator step (with lazy R1 when due) followed by one
    /// generator step and the EMA update. Parameters are only modified
    /// after the corresponding loss was checked to be finite.
    pub fn step(&mut self, data: &TrainData) -> Result<StepStats> {
        let cfg = self.config.clone();
        let sigma = cfg.blur_sigma(self.images_seen);
        let mut stats = StepStats { blur_sigma: sigma, ..Default::default() };

        // Discriminator.
        let (z, cams, bgs) = self.sample_views(data, cfg.identities_per_step(), cfg.views)?;
        let fakes = no_grad(|| {
            let pg = self.g.params.bind(false);
            let (_, ws) = self.style_vectors(&pg, &z);
            render_multiview(&self.g, &pg, &ws, &cams, &bgs, cfg.device_batch)
        })?;
        let reals = self.real_batches(data)?;
        let pd = self.d.params.bind(true);
        let pp = self.pose_head.as_ref().map(|h| h.params.bind(true));
        let mut d_total = Var::scalar(0.0);
        let mut contrastive = Var::scalar(0.0);
        let (mut real_sum, mut fake_sum) = (0.0, 0.0);
        for ((real, labels), fake) in reals.iter().zip(&fakes.batches) {
            assert_distinct_identities(&fake.identities)?;
            let labels_v = Var::constant(labels.clone());
            let phi = self.d.features(&pd, &blur_images(&Var::constant(real.clone()), sigma))?;
            let real_scores = self.d.score_features(&pd, &phi, &labels_v);
            let fake_scores =
                self.d.forward(&pd, &blur_images(&fake.images, sigma), &Var::constant(fake.labels.clone()))?;
            real_sum += mean(&real_scores);
            fake_sum += mean(&fake_scores);
            d_total = d_total.add(&d_loss(&real_scores, &fake_scores));
            if let (Some(head), Some(pp)) = (&self.pose_head, &pp) {
                contrastive = contrastive.add(&head.loss(pp, &phi, &labels_v, cfg.contrastive_tau)?);
            }
        }
        let groups = reals.len() as f64;
        stats.real_score = real_sum / groups;
        stats.fake_score = fake_sum / groups;
        let mut d_obj = d_total.mul_scalar(1.0 / groups);
        stats.d_loss = check_finite("discriminator loss", d_obj.item())?;
        if let Some(pp) = &pp {
            let c = contrastive.mul_scalar(1.0 / groups);
            stats.contrastive = Some(check_finite("contrastive loss", c.item())?);
            d_obj = d_obj.add(&c.mul_scalar(cfg.contrastive_weight));
            let head_grads = pp.grads(&d_obj);
            self.pose_opt.update(&mut self.pose_head.as_mut().unwrap().params, &head_grads);
        }
        let d_grads = pd.grads(&d_obj);
        self.d_opt.update(&mut self.d.params, &d_grads);

        if cfg.r1_gamma > 0.0 && self.step % cfg.r1_interval == 0 {
            let pd = self.d.params.bind(true);
            let mut pen = Var::scalar(0.0);
            for (real, labels) in &reals {
                pen = pen.add(&r1_penalty(&self.d, &pd, real, labels, cfg.r1_gamma, sigma)?);
            }
            let pen = pen.mul_scalar(1.0 / groups);
            stats.r1 = Some(check_finite("R1 penalty", pen.item())?);
            let grads = pd.grads(&pen.mul_scalar(cfg.r1_interval as f64));
            self.d_opt.update(&mut self.d.params, &grads);
        }

        // Generator.
        let (n, views) = cfg.generator_layout();
        let (z, cams, bgs) = self.sample_views(data, n, views)?;
        let pg = self.g.params.bind(true);
        let pd = self.d.params.bind(false);
        let (w, ws) = self.style_vectors(&pg, &z);
        let render = render_multiview(&self.g, &pg, &ws, &cams, &bgs, cfg.device_batch)?;
        let adv = multiview_generator_loss(&self.d, &pd, &render, sigma)?;
        let mut center = Var::scalar(0.0);
        let mut knn = Var::scalar(0.0);
        for s in &render.scenes {
            center = center.add(&center_regularizer(&s.flatten().positions, cfg.center_radius));
            knn = knn.add(&knn_cluster_regularizer(&s.levels[0].anchors.positions, cfg.knn_k)?);
        }
        let center = center.mul_scalar(1.0 / n as f64);
        let knn = knn.mul_scalar(1.0 / n as f64);
        let mut g_obj = adv.add(&center.mul_scalar(cfg.lambda_center)).add(&knn.mul_scalar(cfg.lambda_knn));
        if let Some(head) = &self.pose_head {
            let pp = head.params.bind(false);
            let mut c = Var::scalar(0.0);
            for b in &render.batches {
                let phi = self.d.features(&pd, &blur_images(&b.images, sigma))?;
                c = c.add(&head.loss(&pp, &phi, &Var::constant(b.labels.clone()), cfg.contrastive_tau)?);
            }
            g_obj = g_obj.add(&c.mul_scalar(cfg.contrastive_weight / render.batches.len() as f64));
        }
        stats.g_loss = check_finite("generator loss", adv.item())?;
        stats.center = check_finite("center regularizer", center.item())?;
        stats.knn = check_finite("k-NN regularizer", knn.item())?;
        check_finite("generator objective", g_obj.item())?;
        let g_grads = pg.grads(&g_obj);
        self.g_opt.update(&mut self.g.params, &g_grads);
        self.g.update_w_avg(w.value());

        ema_update(&mut self.g_ema.params, &self.g.params, ema_beta(cfg.batch, cfg.ema_halflife_images))?;
        self.g_ema.w_avg = self.g.w_avg.clone();

        self.step += 1;
        self.images_seen += cfg.batch as u64;
        stats.step = self.step;
        stats.images_seen = self.images_seen;
        Ok(stats)
    }

    /// Full training state, including optimizer moments and the RNG position.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(serde_json::json!({}));
        self.g.save_to(&mut ck, "g")?;
        self.g_ema.save_to(&mut ck, "g_ema")?;
        self.d.save_to(&mut ck, "d")?;
        if let Some(h) = &self.pose_head {
            ck.insert_group("pose", h.params.iter());
        }
        for (name, opt) in [("opt_g", &self.g_opt), ("opt_d", &self.d_opt), ("opt_pose", &self.pose_opt)] {
            ck.insert_group(&format!("{name}.m"), opt.m.iter());
            ck.insert_group(&format!("{name}.v"), opt.v.iter());
        }
        ck.meta["train"] = serde_json::to_value(&self.config)?;
        ck.meta["state"] = serde_json::json!({
            "seed": self.seed,
            "step": self.step,
            "images_seen": self.images_seen,
            "opt_steps": [self.g_opt.step, self.d_opt.step, self.pose_opt.step],
            "rng_seed": self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect::<String>(),
            "rng_stream": self.rng.get_stream(),
            "rng_word_pos": self.rng.get_word_pos().to_string(),
        });
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint state: {m}"));
        let config: TrainConfig =
            serde_json::from_value(ck.meta.get("train").cloned().ok_or_else(|| bad("missing training config"))?)?;
        config.validate()?;
        let st = ck.meta.get("state").ok_or_else(|| bad("missing state"))?;
        let num = |k: &str| st.get(k).and_then(serde_json::Value::as_u64).ok_or_else(|| bad(k));
        let g = Generator::load_from(ck, "g")?;
        let g_ema = Generator::load_from(ck, "g_ema")?;
        let d = Discriminator::load_from(ck, "d")?;
        let mut pose_head = None;
        if config.contrastive {
            let mut h = PoseHead::new(d.config.feature_dim(), config.contrastive_dim, 0);
            h.params.load_from(&ck.group("pose"))?;
            pose_head = Some(h);
        }
        let steps: Vec<u64> = st
            .get("opt_steps")
            .and_then(|v| v.as_array())
            .map(|a| a.iter().filter_map(serde_json::Value::as_u64).collect())
            .ok_or_else(|| bad("opt_steps"))?;
        if steps.len() != 3 {
            return Err(bad("opt_steps must have 3 entries"));
        }
        let adam = |lr, name: &str, step| {
            let mut a = Adam::new(lr, config.adam_beta1, config.adam_beta2, config.adam_eps);
            a.m = ck.group(&format!("{name}.m"));
            a.v = ck.group(&format!("{name}.v"));
            a.step = step;
            a
        };
        let hex = st.get("rng_seed").and_then(|v| v.as_str()).ok_or_else(|| bad("rng_seed"))?;
        if hex.len() != 64 {
            return Err(bad("rng_seed must be 64 hex digits"));
        }
        let mut seed_bytes = [0u8; 32];
        for (i, b) in seed_bytes.iter_mut().enumerate() {
            *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad("rng_seed is not hex"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed_bytes);
        rng.set_stream(num("rng_stream")?);
        let pos = st.get("rng_word_pos").and_then(|v| v.as_str()).ok_or_else(|| bad("rng_word_pos"))?;
        rng.set_word_pos(pos.parse::<u128>().map_err(|_| bad("rng_word_pos"))?);
        Ok(Self {
            g_opt: adam(config.g_lr, "opt_g", steps[0]),
            d_opt: adam(config.d_lr, "opt_d", steps[1]),
            pose_opt: adam(config.d_lr, "opt_pose", steps[2]),
            config,
            g,
            g_ema,
            d,
            pose_head,
            rng,
            seed: num("seed")?,
            step: num("step")?,
            images_seen: num("images_seen")?,
        })
    }
}

/// Length and bookkeeping of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOptions {
    pub total_images: u64,
    /// 0 writes only the final snapshot.
    pub snapshot_every_images: u64,
    /// 0 disables FID tracking.
    pub fid_every_images: u64,
    pub fid_samples: usize,
    pub fid_seed: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            total_images: 200_000,
            snapshot_every_images: 10_000,
            fid_every_images: 0,
            fid_samples: 256,
            fid_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub steps: u64,
    pub images_seen: u64,
    pub fid: Vec<(u64, f64)>,
    pub best_fid: Option<f64>,
    pub last: Option<StepStats>,
}

pub const METRICS_LOG: &str = "metrics.jsonl";
pub const LATEST_CKPT: &str = "latest.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const NAN_SNAPSHOT: &str = "nan-snapshot.ckpt";

fn append_row(path: &Path, row: &serde_json::Value) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{row}")?;
    Ok(())
}

fn crossed(before: u64, after: u64, every: u64) -> bool {
    every > 0 && after / every > before / every
}

/// Runs `trainer` until `total_images` have been seen, writing snapshots,
/// `best.ckpt` (by desk-FID of the EMA generator) and an append-only
/// metrics log into `out_dir`. A non-finite loss stops the run after
/// saving `nan-snapshot.ckpt`.
pub fn train(
    trainer: &mut Trainer,
    dataset: &Dataset,
    opts: &RunOptions,
    out_dir: &Path,
    mut on_step: impl FnMut(&StepStats),
) -> Result<RunSummary> {
    let data = TrainData::new(dataset, &trainer.config)?;
    if data.resolution != trainer.d.config.resolution {
        return Err(Error::Config(format!(
            "dataset resolution {} differs from discriminator resolution {}",
            data.resolution, trainer.d.config.resolution
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let log = out_dir.join(METRICS_LOG);
    let extractor = DeskExtractor::new(opts.fid_seed);
    let reals: Option<FeatureStats> =
        if opts.fid_every_images > 0 { Some(real_stats(dataset, &extractor, opts.fid_seed)?) } else { None };
    let mut summary =
        RunSummary { steps: 0, images_seen: trainer.images_seen, fid: Vec::new(), best_fid: None, last: None };

    let evaluate = |trainer: &Trainer, summary: &mut RunSummary| -> Result<()> {
        let Some(reals) = &reals else { return Ok(()) };
        let source = GeneratorSource { generator: &trainer.g_ema, psi: 1.0, seed: opts.fid_seed };
        let rep = compute_fid(&source, dataset, reals, &extractor, opts.fid_samples, FidMode::Standard, opts.fid_seed)?;
        log::info!("images {}: desk-FID {:.4}", trainer.images_seen, rep.value);
        append_row(
            &log,
            &serde_json::json!({"images_seen": trainer.images_seen, "fid": rep.value, "extractor": rep.extractor_id}),
        )?;
        summary.fid.push((trainer.images_seen, rep.value));
        if summary.best_fid.is_none_or(|b| rep.value < b) {
            summary.best_fid = Some(rep.value);
            trainer.checkpoint()?.save(&out_dir.join(BEST_CKPT))?;
        }
        Ok(())
    };

    if trainer.images_seen == 0 {
        evaluate(trainer, &mut summary)?;
    }
    while trainer.images_seen < opts.total_images {
        let before = trainer.images_seen;
        let stats = match trainer.step(&data) {
            Ok(s) => s,
            Err(Error::Numerical(msg)) => {
                let snap = out_dir.join(NAN_SNAPSHOT);
                trainer.checkpoint()?.save(&snap)?;
                return Err(Error::Numerical(format!(
                    "{msg} at step {} ({} images); state saved to {}",
                    trainer.step,
                    trainer.images_seen,
                    snap.display()
                )));
            }
            Err(e) => return Err(e),
        };
        append_row(&log, &serde_json::to_value(&stats)?)?;
        on_step(&stats);
        summary.steps += 1;
        summary.images_seen = trainer.images_seen;
        summary.last = Some(stats);
        let done = trainer.images_seen >= opts.total_images;
        if crossed(before, trainer.images_seen, opts.fid_every_images) || (done && reals.is_some()) {
            evaluate(trainer, &mut summary)?;
        }
        if crossed(before, trainer.images_seen, opts.snapshot_every_images) || done {
            let ck = trainer.checkpoint()?;
            ck.save(&snapshot_path(out_dir, trainer.images_seen))?;
            ck.save(&out_dir.join(LATEST_CKPT))?;
        }
    }
    Ok(summary)
}

pub fn snapshot_path(out_dir: &Path, images_seen: u64) -> PathBuf {
    out_dir.join(format!("snapshot-{images_seen:09}.ckpt"))
}
