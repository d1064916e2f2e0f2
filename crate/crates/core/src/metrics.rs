//! Fréchet distance between image feature statistics (FID and its 3D
//! variant) behind a pluggable feature extractor, plus PSNR.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use cgs_autodiff::nn::{avg_pool2, Conv2d, ParamStore};
use cgs_autodiff::{no_grad, Tensor, Var};

use crate::camera::{sample_camera_pose, Camera, PoseDistribution};
use crate::data::{composite_over, random_background, Dataset};
use crate::error::{Error, Result};
use crate::generator::{latent_from_seed, truncate, Generator};
use crate::imaging::Image;
use crate::raster::render_forward;
use crate::scene::flatten_layers;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
/// Eigenvalues of the covariance product below this are treated as a
/// numerical failure rather than rounding noise.
pub const NEGATIVE_EIGEN_TOL: f64 = 1e-6;

/// Sample mean and unbiased covariance of a feature set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub dim: usize,
    pub n: usize,
    pub mean: Vec<f64>,
    /// Row-major `dim × dim`.
    pub cov: Vec<f64>,
}

impl FeatureStats {
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::Validation(format!("feature statistics need at least 2 samples, got {n}")));
        }
        let dim = features[0].len();
        if let Some(f) = features.iter().find(|f| f.len() != dim) {
            return Err(Error::Shape(format!("feature vectors of length {} and {dim} mixed", f.len())));
        }
        let mut mean = vec![0.0; dim];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; dim * dim];
        for f in features {
            for i in 0..dim {
                let di = f[i] - mean[i];
                for j in i..dim {
                    cov[i * dim + j] += di * (f[j] - mean[j]);
                }
            }
        }
        for i in 0..dim {
            for j in i..dim {
                let c = cov[i * dim + j] / (n - 1) as f64;
                cov[i * dim + j] = c;
                cov[j * dim + i] = c;
            }
        }
        Ok(Self { dim, n, mean, cov })
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.cov)
    }
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`.
///
/// The trace of the product root is taken as `Σ √λ` over the eigenvalues of
/// the symmetric matrix `Σ₁^{1/2} Σ₂ Σ₁^{1/2}`, which has the same spectrum
/// as `Σ₁Σ₂`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::Shape(format!("feature dimensions differ: {} vs {}", a.dim, b.dim)));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let (s1, s2) = (a.cov_matrix(), b.cov_matrix());
    let root1 = psd_sqrt(&s1, "first covariance")?;
    let m = &root1 * &s2 * &root1;
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m).eigenvalues;
    let scale = eig.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    let mut tr_root = 0.0;
    for &l in eig.iter() {
        if l < -NEGATIVE_EIGEN_TOL * scale {
            return Err(Error::Numerical(format!(
                "covariance product has eigenvalue {l:e}; not positive semidefinite"
            )));
        }
        tr_root += l.max(0.0).sqrt();
    }
    let d2 = mean_term + s1.trace() + s2.trace() - 2.0 * tr_root;
    Ok(d2.max(0.0))
}

fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    let mut roots = eig.eigenvalues.clone();
    for l in roots.iter_mut() {
        if *l < -NEGATIVE_EIGEN_TOL * scale {
            return Err(Error::Numerical(format!("{what} has eigenvalue {l:e}; not positive semidefinite")));
        }
        *l = l.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// Maps RGB images to fixed-length feature vectors.
pub trait FeatureExtractor {
    /// Pins the weights; equal identifiers give bit-identical features.
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn extract(&self, images: &[Image]) -> Result<Vec<Vec<f64>>>;
}

/// Frozen random-weight convolutional features for desk-scale evaluation.
///
/// Images are resampled to 32×32, passed through two 3×3 conv + leaky ReLU +
/// average-pool stages (16 then 32 channels), and summarized by per-channel
/// spatial mean and standard deviation plus a 4×4 color thumbnail.
pub struct DeskExtractor {
    seed: u64,
    params: ParamStore,
    conv1: Conv2d,
    conv2: Conv2d,
}

const DESK_INPUT: usize = 32;
const DESK_BATCH: usize = 32;

impl DeskExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let conv1 = Conv2d::new(&mut params, "conv1", 3, 16, 3, true, &mut rng);
        let conv2 = Conv2d::new(&mut params, "conv2", 16, 32, 3, true, &mut rng);
        Self { seed, params, conv1, conv2 }
    }

    fn features_batch(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        let b = images.len();
        let mut data = Vec::with_capacity(b * DESK_INPUT * DESK_INPUT * 3);
        for img in images {
            data.extend(resample_rgb(img, DESK_INPUT)?.data);
        }
        let x = Tensor::new(&[b, DESK_INPUT, DESK_INPUT, 3], data)?;
        let fmap = no_grad(|| {
            let p = self.params.bind(false);
            let h = avg_pool2(&self.conv1.forward(&p, &Var::constant(x.clone())).leaky_relu(0.2));
            avg_pool2(&self.conv2.forward(&p, &h).leaky_relu(0.2)).value().clone()
        });
        let (s, c) = (DESK_INPUT / 4, 32);
        let thumb = DESK_INPUT / 4;
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            let f = &fmap.data()[i * s * s * c..(i + 1) * s * s * c];
            let mut v = Vec::with_capacity(self.dim());
            for ch in 0..c {
                let vals = f.iter().skip(ch).step_by(c);
                let mean = vals.clone().sum::<f64>() / (s * s) as f64;
                v.push(mean);
                let var = vals.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (s * s) as f64;
                v.push(var.sqrt());
            }
            let img = &x.data()[i * DESK_INPUT * DESK_INPUT * 3..(i + 1) * DESK_INPUT * DESK_INPUT * 3];
            for ty in 0..4 {
                for tx in 0..4 {
                    for ch in 0..3 {
                        let mut acc = 0.0;
                        for y in ty * thumb..(ty + 1) * thumb {
                            for xx in tx * thumb..(tx + 1) * thumb {
                                acc += img[(y * DESK_INPUT + xx) * 3 + ch];
                            }
                        }
                        v.push(acc / (thumb * thumb) as f64);
                    }
                }
            }
            out.push(v);
        }
        Ok(out)
    }
}

impl FeatureExtractor for DeskExtractor {
    fn id(&self) -> String {
        format!("desk-randconv-v1-seed{}", self.seed)
    }

    fn dim(&self) -> usize {
        2 * 32 + 4 * 4 * 3
    }

    fn extract(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(DESK_BATCH) {
            out.extend(self.features_batch(chunk)?);
        }
        Ok(out)
    }
}

/// Bilinear resampling of the RGB channels to `size × size` with pixel
/// centers aligned (a factor-2 reduction is an exact 2×2 box average).
pub fn resample_rgb(img: &Image, size: usize) -> Result<Image> {
    if img.channels < 3 || img.width == 0 || img.height == 0 {
        return Err(Error::Shape(format!(
            "expected a non-empty RGB image, got {}x{}x{}",
            img.width, img.height, img.channels
        )));
    }
    let (w, h) = (img.width, img.height);
    let mut out = Vec::with_capacity(size * size * 3);
    let coord = |o: usize, n: usize| {
        let c = ((o as f64 + 0.5) * n as f64 / size as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = c.floor() as usize;
        (i0, (i0 + 1).min(n - 1), c - i0 as f64)
    };
    for oy in 0..size {
        let (y0, y1, fy) = coord(oy, h);
        for ox in 0..size {
            let (x0, x1, fx) = coord(ox, w);
            for ch in 0..3 {
                let p = |x: usize, y: usize| img.pixel(x, y)[ch];
                let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                let bot = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Image::new(size, size, 3, out)
}

pub fn feature_stats(images: &[Image], extractor: &dyn FeatureExtractor) -> Result<FeatureStats> {
    if images.len() < 2 {
        return Err(Error::Validation(format!("feature statistics need at least 2 images, got {}", images.len())));
    }
    FeatureStats::from_features(&extractor.extract(images)?)
}

/// Both modes run the same procedure: an unconditioned generator has no
/// frontal-view conditioning to remove, so the 3D variant coincides with
/// the standard one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FidMode {
    Standard,
    Fid3d,
}

impl std::str::FromStr for FidMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(FidMode::Standard),
            "fid3d" => Ok(FidMode::Fid3d),
            other => Err(Error::Config(format!("unknown FID mode `{other}` (expected standard or fid3d)"))),
        }
    }
}

/// Produces the `index`-th evaluation image for a given camera and background.
pub trait ImageSource {
    fn sample(&self, index: usize, camera: &Camera, background: [f64; 3]) -> Result<Image>;
}

/// Seed-derived latents through a (normally EMA) generator.
pub struct GeneratorSource<'a> {
    pub generator: &'a Generator,
    pub psi: f64,
    pub seed: u64,
}

impl ImageSource for GeneratorSource<'_> {
    fn sample(&self, index: usize, camera: &Camera, background: [f64; 3]) -> Result<Image> {
        let g = self.generator;
        let z = latent_from_seed(self.seed.wrapping_mul(1_000_003).wrapping_add(index as u64), g.config.z_dim);
        let w = truncate(&g.map_one(&z)?, &g.w_avg, self.psi)?;
        let scene = flatten_layers(&g.synthesize(&w)?);
        Ok(render_forward(&scene, camera, background)?.image)
    }
}

/// Replays dataset images in order; the self-distance oracle.
pub struct ReplaySource<'a> {
    pub dataset: &'a Dataset,
}

impl ImageSource for ReplaySource<'_> {
    fn sample(&self, index: usize, _camera: &Camera, background: [f64; 3]) -> Result<Image> {
        let e = &self.dataset.entries[index % self.dataset.len()];
        composite_over(&e.image, background)
    }
}

/// Background for evaluation sample `index`; reals and fakes share the stream.
pub fn eval_background(seed: u64, index: usize) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB6D0_u64.wrapping_mul(index as u64 + 1));
    random_background(&mut rng)
}

/// Statistics of every dataset image composited over its evaluation background.
pub fn real_stats(dataset: &Dataset, extractor: &dyn FeatureExtractor, seed: u64) -> Result<FeatureStats> {
    let images = dataset
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| composite_over(&e.image, eval_background(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    feature_stats(&images, extractor)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub extractor_id: String,
    pub n_samples: usize,
    pub mode: FidMode,
    pub value: f64,
}

/// Renders `n_samples` images from dataset-sampled poses over random
/// backgrounds and measures their distance to `reals`.
pub fn compute_fid(
    source: &dyn ImageSource,
    dataset: &Dataset,
    reals: &FeatureStats,
    extractor: &dyn FeatureExtractor,
    n_samples: usize,
    mode: FidMode,
    seed: u64,
) -> Result<FidReport> {
    if n_samples < 2 {
        return Err(Error::Validation(format!("FID needs at least 2 samples, got {n_samples}")));
    }
    let res = dataset.resolution()?;
    let poses = PoseDistribution::Empirical(dataset.labels());
    let mut pose_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let cam = sample_camera_pose(&mut pose_rng, &poses, res, res)?;
        images.push(source.sample(i, &cam, eval_background(seed, i))?);
    }
    let fakes = feature_stats(&images, extractor)?;
    let value = frechet_distance(&fakes, reals)?;
    Ok(FidReport { extractor_id: extractor.id(), n_samples, mode, value })
}

/// `10·log₁₀(1/MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if (a.width, a.height, a.channels) != (b.width, b.height, b.channels) {
        return Err(Error::Shape(format!(
            "PSNR of {}x{}x{} and {}x{}x{} images",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::Rng;

    fn random_features(rng: &mut impl Rng, n: usize, dim: usize, shift: f64) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0) + shift).collect()).collect()
    }

    fn stats_1d(mean: f64, var: f64) -> FeatureStats {
        FeatureStats { dim: 1, n: 2, mean: vec![mean], cov: vec![var] }
    }

    #[test]
    fn textbook_mean_and_covariance() {
        let f = vec![vec![1.0, 2.0, 3.0], vec![3.0, 2.0, 1.0], vec![2.0, 5.0, 2.0]];
        let s = FeatureStats::from_features(&f).unwrap();
        assert_eq!(s.mean, vec![2.0, 3.0, 2.0]);
        // Deviations: (-1,-1,1), (1,-1,-1), (0,2,0); divide by n-1 = 2.
        let expect = [1.0, 0.0, -1.0, 0.0, 3.0, 0.0, -1.0, 0.0, 1.0];
        for (a, b) in s.cov.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let dup = FeatureStats::from_features(&[vec![0.3, 0.1], vec![0.3, 0.1]]).unwrap();
        assert!(dup.cov.iter().all(|&c| c == 0.0));
        assert!(matches!(FeatureStats::from_features(&f[..1]), Err(Error::Validation(_))));
    }

    #[test]
    fn closed_form_gaussian_distances() {
        assert_eq!(frechet_distance(&stats_1d(0.0, 1.0), &stats_1d(1.0, 1.0)).unwrap(), 1.0);
        // Different variances: (σ₁ − σ₂)² in one dimension.
        let d = frechet_distance(&stats_1d(0.0, 4.0), &stats_1d(0.0, 1.0)).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = FeatureStats::from_features(&random_features(&mut rng, 50, 6, 0.0)).unwrap();
        let mut b = a.clone();
        let v = [0.5, -1.0, 0.0, 2.0, 0.25, 0.1];
        b.mean.iter_mut().zip(v).for_each(|(m, d)| *m += d);
        let expect: f64 = v.iter().map(|x| x * x).sum();
        assert!((frechet_distance(&a, &b).unwrap() - expect).abs() < 1e-9);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-9);
    }

    #[test]
    fn mismatched_and_indefinite_inputs_fail() {
        let two = FeatureStats { dim: 2, n: 2, mean: vec![0.0; 2], cov: vec![1.0, 0.0, 0.0, 1.0] };
        assert!(matches!(frechet_distance(&stats_1d(0.0, 1.0), &two), Err(Error::Shape(_))));
        let bad = FeatureStats { dim: 2, n: 2, mean: vec![0.0; 2], cov: vec![1.0, 0.0, 0.0, -1.0] };
        assert!(matches!(frechet_distance(&bad, &two), Err(Error::Numerical(_))));
    }

    #[test]
    fn psnr_examples() {
        let a = Image::filled(4, 4, &[0.2, 0.3, 0.4]);
        let b = Image::filled(4, 4, &[0.3, 0.4, 0.5]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &Image::filled(2, 2, &[0.0; 3])).is_err());
    }

    #[test]
    fn desk_extractor_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let imgs: Vec<Image> = (0..3)
            .map(|_| Image::new(20, 20, 3, (0..1200).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap())
            .collect();
        let a = DeskExtractor::new(0).extract(&imgs).unwrap();
        let b = DeskExtractor::new(0).extract(&imgs).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].len(), DeskExtractor::new(0).dim());
        assert_ne!(DeskExtractor::new(1).extract(&imgs).unwrap(), a);
    }

    #[test]
    fn resample_halving_is_box_average() {
        let img = Image::new(2, 2, 3, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let r = resample_rgb(&img, 1).unwrap();
        assert!(r.data.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn frechet_is_symmetric_and_nonnegative(seed in 0u64..1000, shift in -1.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = FeatureStats::from_features(&random_features(&mut rng, 12, 4, 0.0)).unwrap();
            let b = FeatureStats::from_features(&random_features(&mut rng, 9, 4, shift)).unwrap();
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-8);
        }

        #[test]
        fn stats_ignore_sample_order(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_features(&mut rng, 8, 3, 0.0);
            let mut g = f.clone();
            g.reverse();
            let (a, b) = (FeatureStats::from_features(&f).unwrap(), FeatureStats::from_features(&g).unwrap());
            for (x, y) in a.mean.iter().zip(&b.mean).chain(a.cov.iter().zip(&b.cov)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
