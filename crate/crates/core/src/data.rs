//! Datasets of RGBA images with camera labels, random-background
//! compositing, histogram rebalancing, and a synthetic multi-view dataset
//! rendered from random Gaussian shells.
//!
//! `dataset.json` layout:
//!
//! ```json
//! {"labels": [["img/0000.png", [25 numbers]], ...],
//!  "annotations": {"img/0000.png": {"pose_bin": "front", "smiling": true}}}
//! ```
//!
//! `annotations` is optional and may cover only some files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{sample_camera_pose, Camera, Label, PoseDistribution, LABEL_LEN};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::ply::export_ply;
use crate::raster::render_forward;
use crate::scene::{quat_normalize, GaussianScene};

pub const DATASET_JSON: &str = "dataset.json";

/// Optional per-image metadata produced by external tools.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_bin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smiling: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occluded: Option<bool>,
    /// Which subject the image shows; several views may share one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<String>,
}

impl Annotations {
    pub const KEYS: [&'static str; 4] = ["pose_bin", "smiling", "occluded", "identity"];

    /// The annotation named `key` rendered as a histogram bin.
    pub fn bin(&self, key: &str) -> Result<Option<String>> {
        Ok(match key {
            "pose_bin" => self.pose_bin.clone(),
            "smiling" => self.smiling.map(|b| b.to_string()),
            "occluded" => self.occluded.map(|b| b.to_string()),
            "identity" => self.identity.clone(),
            other => {
                return Err(Error::Config(format!("unknown annotation `{other}` (expected one of {:?})", Self::KEYS)))
            }
        })
    }

    pub fn is_empty(&self) -> bool {
        *self == Annotations::default()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub labels: Vec<(String, Vec<f64>)>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub annotations: BTreeMap<String, Annotations>,
}

impl DatasetFile {
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(DATASET_JSON);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        std::fs::create_dir_all(root)?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(root.join(DATASET_JSON), text)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub file: String,
    pub label: Label,
    /// Straight (not premultiplied) RGBA.
    pub image: Image,
    pub annotations: Annotations,
}

impl DatasetEntry {
    /// Identity key used for batch collation; unannotated images count as
    /// their own identity.
    pub fn identity(&self) -> &str {
        self.annotations.identity.as_deref().unwrap_or(&self.file)
    }

    pub fn camera(&self) -> Result<Camera> {
        Camera::from_label(&self.label, self.image.width, self.image.height)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Common square resolution of all images.
    pub fn resolution(&self) -> Result<usize> {
        let first = self.entries.first().ok_or_else(|| Error::Validation("dataset is empty".into()))?;
        Ok(first.image.width)
    }

    pub fn labels(&self) -> Vec<Label> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn pose_distribution(&self) -> PoseDistribution {
        PoseDistribution::Empirical(self.labels())
    }

    pub fn identities(&self) -> BTreeSet<&str> {
        self.entries.iter().map(DatasetEntry::identity).collect()
    }

    /// Entry count, resolution and the spread of camera yaw/pitch.
    pub fn summary(&self) -> String {
        let mut s = format!("{} entries", self.len());
        if self.is_empty() {
            return s;
        }
        let angles: Vec<(f64, f64)> = self
            .entries
            .iter()
            .map(|e| {
                let p = [e.label[3], e.label[7], e.label[11]];
                let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                (p[0].atan2(p[2]).to_degrees(), (p[1] / r).asin().to_degrees())
            })
            .collect();
        let stats = |f: &dyn Fn(&(f64, f64)) -> f64| {
            let v: Vec<f64> = angles.iter().map(f).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let min = v.iter().copied().fold(f64::INFINITY, f64::min);
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (mean, min, max)
        };
        let (ym, ylo, yhi) = stats(&|a| a.0);
        let (pm, plo, phi) = stats(&|a| a.1);
        let _ = write!(
            s,
            ", {}x{} px, {} identities, yaw mean {ym:.1}° [{ylo:.1}, {yhi:.1}], pitch mean {pm:.1}° [{plo:.1}, {phi:.1}]",
            self.entries[0].image.width,
            self.entries[0].image.height,
            self.identities().len()
        );
        s
    }
}

/// Reads `dataset.json` and every referenced image. All per-entry problems
/// are collected into one validation error.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let file = DatasetFile::read(root)?;
    let mut entries = Vec::with_capacity(file.labels.len());
    let mut problems = Vec::new();
    let mut size: Option<(usize, usize)> = None;
    for (i, (name, label)) in file.labels.iter().enumerate() {
        let fail = |msg: String| format!("entry {i} (`{name}`): {msg}");
        if label.len() != LABEL_LEN {
            problems.push(fail(format!("label has {} numbers, expected {LABEL_LEN}", label.len())));
            continue;
        }
        let path = root.join(name);
        if !path.is_file() {
            problems.push(fail("image file is missing".into()));
            continue;
        }
        let image = match Image::load_png(&path) {
            Ok(img) => img,
            Err(e) => {
                problems.push(fail(format!("cannot read image: {e}")));
                continue;
            }
        };
        if image.channels != 4 {
            problems.push(fail("image has no alpha channel".into()));
            continue;
        }
        if image.width != image.height {
            problems.push(fail(format!("image is {}x{}, expected square", image.width, image.height)));
            continue;
        }
        match size {
            None => size = Some((image.width, image.height)),
            Some(s) if s != (image.width, image.height) => {
                problems.push(fail(format!("image is {}x{}, others are {}x{}", image.width, image.height, s.0, s.1)));
                continue;
            }
            _ => {}
        }
        let label: Label = label.as_slice().try_into().unwrap();
        if let Err(e) = Camera::from_label(&label, image.width, image.height) {
            problems.push(fail(format!("label is not a valid camera: {e}")));
            continue;
        }
        entries.push(DatasetEntry {
            file: name.clone(),
            label,
            image,
            annotations: file.annotations.get(name).cloned().unwrap_or_default(),
        });
    }
    if !problems.is_empty() {
        return Err(Error::Validation(format!(
            "{} invalid dataset entr{}:\n  {}",
            problems.len(),
            if problems.len() == 1 { "y" } else { "ies" },
            problems.join("\n  ")
        )));
    }
    let ds = Dataset { root: root.to_path_buf(), entries };
    log::info!("loaded {}: {}", root.display(), ds.summary());
    Ok(ds)
}

/// `fg·α + bg·(1−α)` for a straight-alpha RGBA image.
pub fn composite_over(rgba: &Image, bg: [f64; 3]) -> Result<Image> {
    if rgba.channels != 4 {
        return Err(Error::Shape(format!("compositing needs RGBA, got {} channels", rgba.channels)));
    }
    let mut out = Vec::with_capacity(rgba.width * rgba.height * 3);
    for px in rgba.data.chunks_exact(4) {
        let a = px[3];
        for k in 0..3 {
            out.push(px[k] * a + bg[k] * (1.0 - a));
        }
    }
    Image::new(rgba.width, rgba.height, 3, out)
}

/// Background color drawn the same way for real composites and fake renders.
pub fn random_background(rng: &mut impl Rng) -> [f64; 3] {
    [0; 3].map(|_| rng.random_range(0.0..1.0))
}

pub fn composite_random_background(rgba: &Image, rng: &mut impl Rng) -> Result<Image> {
    composite_over(rgba, random_background(rng))
}

/// Indices into `bins` such that the bin histogram matches the target
/// proportions to within one entry per bin, only ever adding duplicates.
/// Every original index appears at least once, in original order, followed
/// by the duplicates.
pub fn rebalance_indices(bins: &[String], target: &BTreeMap<String, f64>, seed: u64) -> Result<Vec<usize>> {
    if let Some((k, w)) = target.iter().find(|(_, w)| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::Config(format!("target weight for `{k}` is {w}, expected a finite non-negative number")));
    }
    let total_w: f64 = target.values().sum();
    if total_w <= 0.0 {
        return Err(Error::Config("target histogram has no positive weight".into()));
    }
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, b) in bins.iter().enumerate() {
        members.entry(b.as_str()).or_default().push(i);
    }
    for (b, idx) in &members {
        match target.get(*b) {
            None => {
                return Err(Error::Validation(format!(
                    "bin `{b}` ({} entries) is not in the target histogram",
                    idx.len()
                )))
            }
            Some(&w) if w == 0.0 => {
                return Err(Error::Validation(format!("bin `{b}` has target weight 0 but entries cannot be dropped")))
            }
            _ => {}
        }
    }
    for (b, &w) in target {
        if w > 0.0 && !members.contains_key(b.as_str()) {
            return Err(Error::Validation(format!("target bin `{b}` has no entries to duplicate")));
        }
    }
    // Smallest total that lets every bin reach its share without dropping.
    let total = members.iter().map(|(b, idx)| idx.len() as f64 * total_w / target[*b]).fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<usize> = (0..bins.len()).collect();
    for (b, idx) in &members {
        let want = ((total * target[*b] / total_w).round() as usize).max(idx.len());
        let mut pool = idx.clone();
        pool.shuffle(&mut rng);
        out.extend(pool.iter().cycle().take(want - idx.len()));
    }
    Ok(out)
}

/// Duplicates entries until the histogram of annotation `key` matches
/// `target` (relative weights).
pub fn rebalance(
    entries: &[DatasetEntry],
    key: &str,
    target: &BTreeMap<String, f64>,
    seed: u64,
) -> Result<Vec<DatasetEntry>> {
    let bins = annotation_bins(entries.iter().map(|e| (e.file.as_str(), &e.annotations)), key)?;
    Ok(rebalance_indices(&bins, target, seed)?.into_iter().map(|i| entries[i].clone()).collect())
}

/// Same as [`rebalance`] on a `dataset.json` without touching images.
pub fn rebalance_file(file: &DatasetFile, key: &str, target: &BTreeMap<String, f64>, seed: u64) -> Result<DatasetFile> {
    let empty = Annotations::default();
    let bins =
        annotation_bins(file.labels.iter().map(|(f, _)| (f.as_str(), file.annotations.get(f).unwrap_or(&empty))), key)?;
    let idx = rebalance_indices(&bins, target, seed)?;
    Ok(DatasetFile {
        labels: idx.into_iter().map(|i| file.labels[i].clone()).collect(),
        annotations: file.annotations.clone(),
    })
}

fn annotation_bins<'a>(items: impl Iterator<Item = (&'a str, &'a Annotations)>, key: &str) -> Result<Vec<String>> {
    let mut bins = Vec::new();
    let mut missing = Vec::new();
    for (file, ann) in items {
        match ann.bin(key)? {
            Some(b) => bins.push(b),
            None => missing.push(file.to_string()),
        }
    }
    if !missing.is_empty() {
        let shown: Vec<_> = missing.iter().take(5).cloned().collect();
        return Err(Error::Validation(format!(
            "{} entries lack annotation `{key}` (e.g. {})",
            missing.len(),
            shown.join(", ")
        )));
    }
    Ok(bins)
}

/// Renders `scene` over a zero background and returns straight RGBA with
/// `alpha = 1 − final transmittance`.
pub fn render_rgba(scene: &GaussianScene, camera: &Camera) -> Result<Image> {
    let out = render_forward(scene, camera, [0.0; 3])?;
    let mut data = Vec::with_capacity(out.final_transmittance.len() * 4);
    for (px, &t) in out.image.data.chunks_exact(3).zip(&out.final_transmittance) {
        let a = 1.0 - t;
        for &c in px {
            data.push(if a > 0.0 { (c / a).clamp(0.0, 1.0) } else { 0.0 });
        }
        data.push(a);
    }
    Image::new(camera.width, camera.height, 4, data)
}

/// One synthetic subject: `n` Gaussians scattered around a sphere shell of
/// radius 0.3, colored by a smooth (affine) function of direction.
pub fn synthetic_identity(rng: &mut impl Rng, n: usize) -> GaussianScene {
    let base = [0; 3].map(|_| rng.random_range(0.2..0.8));
    let grad: [[f64; 3]; 3] = [[0.0; 3]; 3].map(|r| r.map(|_| rng.random_range(-0.3..0.3)));
    let mut scene = GaussianScene::with_capacity(n);
    for _ in 0..n {
        let dir = loop {
            let v: [f64; 3] = [0; 3].map(|_| rng.random_range(-1.0..1.0));
            let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if len > 1e-3 && len <= 1.0 {
                break v.map(|x| x / len);
            }
        };
        let r = 0.3 + rng.random_range(-0.02..0.02);
        let color = [0, 1, 2].map(|k| (base[k] + (0..3).map(|j| grad[k][j] * dir[j]).sum::<f64>()).clamp(0.0, 1.0));
        let q = quat_normalize(&[0; 4].map(|_| rng.random_range(-1.0..1.0))).unwrap_or([1.0, 0.0, 0.0, 0.0]);
        scene.push(
            dir.map(|d| d * r),
            q,
            [0; 3].map(|_| rng.random_range(0.04f64..0.1).ln()),
            color,
            rng.random_range(0.6..0.95),
        );
    }
    scene
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSummary {
    pub images: usize,
    pub identities: usize,
    pub primitives: Vec<usize>,
}

/// Writes `images/`, `gt/` (ground-truth PLY per identity) and
/// `dataset.json` under `root`. Identical arguments give identical files.
pub fn generate_synthetic_dataset(
    root: &Path,
    n_identities: usize,
    views_per_identity: usize,
    resolution: usize,
    seed: u64,
) -> Result<SyntheticSummary> {
    if resolution == 0 {
        return Err(Error::Config("resolution must be positive".into()));
    }
    std::fs::create_dir_all(root.join("images"))?;
    std::fs::create_dir_all(root.join("gt"))?;
    let poses = PoseDistribution::parametric_default();
    let mut file = DatasetFile::default();
    let mut primitives = Vec::with_capacity(n_identities);
    for id in 0..n_identities {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let n = rng.random_range(20..=60);
        let scene = synthetic_identity(&mut rng, n);
        export_ply(&scene, &root.join(format!("gt/{id:04}.ply")))?;
        primitives.push(n);
        for v in 0..views_per_identity {
            let cam = sample_camera_pose(&mut rng, &poses, resolution, resolution)?;
            let name = format!("images/{id:04}_{v:02}.png");
            render_rgba(&scene, &cam)?.save_png(&root.join(&name))?;
            file.annotations
                .insert(name.clone(), Annotations { identity: Some(format!("{id:04}")), ..Default::default() });
            file.labels.push((name, cam.label().to_vec()));
        }
    }
    file.write(root)?;
    Ok(SyntheticSummary { images: n_identities * views_per_identity, identities: n_identities, primitives })
}
