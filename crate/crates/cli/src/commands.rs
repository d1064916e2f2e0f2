//! Implementations behind each subcommand. Every command returns its
//! artifacts' summary so it can be driven from tests as well as `main`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::Args;
use serde::Serialize;
use serde_json::json;

use cgs_core::camera::{Camera, DEFAULT_FOV_DEG, DEFAULT_RADIUS};
use cgs_core::checkpoint::Checkpoint;
use cgs_core::data::{generate_synthetic_dataset, load_dataset, rebalance_file, DatasetFile, SyntheticSummary};
use cgs_core::generator::Generator;
use cgs_core::gradcheck::{gradcheck, GradcheckReport};
use cgs_core::metrics::{compute_fid, real_stats, DeskExtractor, FidMode, FidReport, GeneratorSource};
use cgs_core::ply::export_ply;
use cgs_core::raster::render_forward;
use cgs_core::scene::GaussianScene;
use cgs_core::training::{train, RunSummary, Trainer, LATEST_CKPT};

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.json";
pub const DEFAULT_PSI: f64 = 0.8;

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn versions() -> serde_json::Value {
    json!({ "cgs": env!("CARGO_PKG_VERSION") })
}

#[derive(Args, Clone, Debug)]
pub struct TrainArgs {
    /// desk, paper-256, paper-512, paper-1024 or paper-2048.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// Dataset root containing dataset.json.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for checkpoints, logs and the manifest.
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.views=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Continue from `<out>/latest.ckpt` if present.
    #[arg(long)]
    pub resume: bool,
    /// Accepted for reproducibility records; all reductions are sequential.
    #[arg(long)]
    pub deterministic: bool,
}

pub fn run_train(args: &TrainArgs) -> Result<RunSummary> {
    let dataset = load_dataset(&args.data)?;
    let resolution = dataset.resolution().context("cannot train")?;
    let mut cfg = RunConfig::build(&args.preset, resolution, args.config.as_deref(), &args.set)?;
    if let Some(s) = args.seed {
        cfg.set_seed(s);
    }
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_json(&args.out.join("config.json"), &cfg.tree)?;

    let latest = args.out.join(LATEST_CKPT);
    let mut trainer = if args.resume && latest.is_file() {
        log::info!("resuming from {}", latest.display());
        Trainer::from_checkpoint(&Checkpoint::load(&latest)?)?
    } else {
        Trainer::new(cfg.generator()?, cfg.discriminator()?, cfg.train()?, cfg.seed())?
    };
    let opts = cfg.run()?;
    let summary = train(&mut trainer, &dataset, &opts, &args.out, |s| {
        log::info!(
            "step {} images {} d {:.4} g {:.4} center {:.2e} knn {:.3} sigma {:.2}",
            s.step,
            s.images_seen,
            s.d_loss,
            s.g_loss,
            s.center,
            s.knn,
            s.blur_sigma
        );
    })?;
    write_json(
        &args.out.join(MANIFEST),
        &json!({
            "command": "train",
            "preset": args.preset,
            "seed": cfg.seed(),
            "deterministic": args.deterministic,
            "versions": versions(),
            "config": cfg.tree,
            "dataset": { "root": args.data, "entries": dataset.len() },
            "result": {
                "steps": summary.steps,
                "images_seen": summary.images_seen,
                "fid": summary.fid,
                "best_fid": summary.best_fid,
            },
        }),
    )?;
    Ok(summary)
}

/// Loads the EMA generator (or the live one) and the training resolution.
pub fn load_generator(ckpt: &Path, ema: bool) -> Result<(Generator, usize)> {
    let ck = Checkpoint::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let g = Generator::load_from(&ck, if ema { "g_ema" } else { "g" })?;
    let res = ck.meta["d"]["resolution"].as_u64().unwrap_or(64) as usize;
    Ok((g, res))
}

#[derive(Args, Clone, Debug)]
pub struct SceneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Truncation strength toward the average style.
    #[arg(long, default_value_t = DEFAULT_PSI)]
    pub psi: f64,
    /// Use the live generator weights instead of the EMA copy.
    #[arg(long)]
    pub no_ema: bool,
    /// Render resolution; defaults to the training resolution.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Background color as `r,g,b` in [0, 1].
    #[arg(long, default_value = "1,1,1", value_parser = parse_rgb)]
    pub bg: [f64; 3],
}

pub fn parse_rgb(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("`{p}` is not a number")))
        .collect::<std::result::Result<_, _>>()?;
    match v.as_slice() {
        [r, g, b] if v.iter().all(|c| (0.0..=1.0).contains(c)) => Ok([*r, *g, *b]),
        _ => Err(format!("expected three values in [0, 1], got `{s}`")),
    }
}

fn scene_for(g: &Generator, seed: u64, psi: f64) -> Result<GaussianScene> {
    Ok(g.generate(seed, psi)?)
}

#[derive(Args, Clone, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    /// Comma-separated latent seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value = "generated")]
    pub out: PathBuf,
}

/// Writes `seedNNNN.ply` and a frontal `seedNNNN.png` per seed; returns
/// the scene hash per seed.
pub fn run_generate(args: &GenerateArgs) -> Result<BTreeMap<u64, String>> {
    let (g, train_res) = load_generator(&args.scene.ckpt, !args.scene.no_ema)?;
    let res = args.scene.resolution.unwrap_or(train_res);
    std::fs::create_dir_all(&args.out)?;
    let cam = Camera::orbit(0.0, 0.0, DEFAULT_RADIUS, DEFAULT_FOV_DEG, res, res);
    let mut hashes = BTreeMap::new();
    for &seed in &args.seeds {
        let scene = scene_for(&g, seed, args.scene.psi)?;
        export_ply(&scene, &args.out.join(format!("seed{seed:04}.ply")))?;
        render_forward(&scene, &cam, args.scene.bg)?.image.save_png(&args.out.join(format!("seed{seed:04}.png")))?;
        hashes.insert(seed, scene.content_hash());
    }
    write_json(
        &args.out.join(MANIFEST),
        &json!({
            "command": "generate",
            "checkpoint": args.scene.ckpt,
            "psi": args.scene.psi,
            "versions": versions(),
            "scene_hashes": hashes,
        }),
    )?;
    Ok(hashes)
}

#[derive(Args, Clone, Debug)]
pub struct TurntableArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 9)]
    pub frames: usize,
    #[arg(long, default_value = "turntable")]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TurntableFrame {
    pub file: String,
    pub yaw_deg: f64,
    pub scene_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TurntableManifest {
    pub seed: u64,
    pub psi: f64,
    pub syntheses: u64,
    pub frames: Vec<TurntableFrame>,
}

/// Renders one synthesized scene from yaw −90° to +90°.
pub fn run_turntable(args: &TurntableArgs) -> Result<TurntableManifest> {
    ensure!(args.frames >= 1, "--frames must be at least 1");
    let (g, train_res) = load_generator(&args.scene.ckpt, !args.scene.no_ema)?;
    let res = args.scene.resolution.unwrap_or(train_res);
    std::fs::create_dir_all(&args.out)?;
    let before = g.synthesis_count();
    let scene = scene_for(&g, args.seed, args.scene.psi)?;
    let mut frames = Vec::with_capacity(args.frames);
    for i in 0..args.frames {
        let t = if args.frames == 1 { 0.5 } else { i as f64 / (args.frames - 1) as f64 };
        let yaw_deg = -90.0 + 180.0 * t;
        let cam = Camera::orbit(yaw_deg.to_radians(), 0.0, DEFAULT_RADIUS, DEFAULT_FOV_DEG, res, res);
        let out = render_forward(&scene, &cam, args.scene.bg)?;
        let file = format!("frame{i:03}.png");
        out.image.save_png(&args.out.join(&file))?;
        frames.push(TurntableFrame { file, yaw_deg, scene_hash: scene.content_hash() });
    }
    let manifest =
        TurntableManifest { seed: args.seed, psi: args.scene.psi, syntheses: g.synthesis_count() - before, frames };
    write_json(&args.out.join(MANIFEST), &manifest)?;
    if manifest.syntheses != 1 || manifest.frames.iter().any(|f| f.scene_hash != manifest.frames[0].scene_hash) {
        bail!("turntable frames do not come from a single scene");
    }
    Ok(manifest)
}

#[derive(Args, Clone, Debug)]
pub struct ExportArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run_export(args: &ExportArgs) -> Result<String> {
    let (g, _) = load_generator(&args.scene.ckpt, !args.scene.no_ema)?;
    let scene = scene_for(&g, args.seed, args.scene.psi)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    export_ply(&scene, &args.out)?;
    Ok(scene.content_hash())
}

#[derive(Args, Clone, Debug)]
pub struct EvalFidArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub samples: usize,
    /// standard or fid3d.
    #[arg(long, default_value = "standard")]
    pub mode: FidMode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub extractor_seed: u64,
    #[arg(long)]
    pub no_ema: bool,
    /// Append the record as one JSON line to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run_eval_fid(args: &EvalFidArgs) -> Result<FidReport> {
    let (g, _) = load_generator(&args.ckpt, !args.no_ema)?;
    let dataset = load_dataset(&args.data)?;
    let extractor = DeskExtractor::new(args.extractor_seed);
    let reals = real_stats(&dataset, &extractor, args.seed)?;
    let source = GeneratorSource { generator: &g, psi: 1.0, seed: args.seed };
    let report = compute_fid(&source, &dataset, &reals, &extractor, args.samples, args.mode, args.seed)?;
    if let Some(path) = &args.out {
        use std::io::Write as _;
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        writeln!(f, "{}", serde_json::to_string(&report)?)?;
    }
    Ok(report)
}

#[derive(Args, Clone, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub scenes: usize,
    #[arg(long, default_value_t = 5)]
    pub gaussians: usize,
    #[arg(long, default_value_t = 16)]
    pub resolution: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run_gradcheck(args: &GradcheckArgs) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::default();
    for i in 0..args.scenes as u64 {
        report.merge(&gradcheck(args.gaussians, args.resolution, args.seed.wrapping_add(i))?);
    }
    Ok(report)
}

#[derive(Args, Clone, Debug)]
pub struct MakeSyntheticArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub identities: usize,
    #[arg(long, default_value_t = 8)]
    pub views: usize,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run_make_synthetic(args: &MakeSyntheticArgs) -> Result<SyntheticSummary> {
    Ok(generate_synthetic_dataset(&args.out, args.identities, args.views, args.resolution, args.seed)?)
}

#[derive(Args, Clone, Debug)]
pub struct RebalanceArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Annotation to balance: pose_bin, smiling, occluded or identity.
    #[arg(long)]
    pub key: String,
    /// Relative bin weights, e.g. `front=1,side=1`.
    #[arg(long)]
    pub target: String,
    /// Output root; images are copied unchanged. Defaults to rewriting in place.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn parse_target(s: &str) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').with_context(|| format!("target entry `{part}` is not bin=weight"))?;
        let w: f64 = v.trim().parse().with_context(|| format!("weight of `{k}` is not a number"))?;
        out.insert(k.trim().to_string(), w);
    }
    ensure!(!out.is_empty(), "target histogram is empty");
    Ok(out)
}

/// Returns `(entries before, entries after)`.
pub fn run_rebalance(args: &RebalanceArgs) -> Result<(usize, usize)> {
    let file = DatasetFile::read(&args.data)?;
    let target = parse_target(&args.target)?;
    let out = rebalance_file(&file, &args.key, &target, args.seed)?;
    let dest = args.out.clone().unwrap_or_else(|| args.data.clone());
    if dest != args.data {
        let mut copied = std::collections::BTreeSet::new();
        for (name, _) in &file.labels {
            if copied.insert(name) {
                let to = dest.join(name);
                if let Some(parent) = to.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                std::fs::copy(args.data.join(name), &to).with_context(|| format!("copying {name}"))?;
            }
        }
    }
    out.write(&dest)?;
    Ok((file.labels.len(), out.labels.len()))
}
