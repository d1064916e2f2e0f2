//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one `PASS`/`FAIL` line regardless of output capture.
//!
//! Usage: `cargo test -p cgs-cli --test acceptance [-- [--ignored|--include-ignored] [FILTER...]]`.
//! Filters match criterion tags such as `c03`. The desk-convergence run is
//! ignored by default because it needs many CPU hours.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use cgs_autodiff::nn::ParamStore;
use cgs_autodiff::optim::Adam;
use cgs_autodiff::{Tensor, Var};
use cgs_cli::commands::{run_gradcheck, run_turntable, GradcheckArgs, SceneArgs, TurntableArgs};
use cgs_core::camera::{sample_camera_pose, Camera, PoseDistribution, DEFAULT_FOV_DEG, DEFAULT_RADIUS};
use cgs_core::data::{generate_synthetic_dataset, load_dataset, random_background, synthetic_identity};
use cgs_core::discriminator::{Discriminator, DiscriminatorConfig};
use cgs_core::generator::{latent_from_seed, Generator, GeneratorConfig};
use cgs_core::metrics::{frechet_distance, psnr, FeatureStats};
use cgs_core::ply::{export_ply, import_ply};
use cgs_core::raster::{render_forward, render_var, SceneVars, ALPHA_MAX, ALPHA_MIN, DILATION};
use cgs_core::scene::GaussianScene;
use cgs_core::training::{
    center_regularizer, collation_plan, contrastive_pose_loss, knn_cluster_regularizer, multiview_generator_loss,
    normalize_rows, render_multiview, train, RealSampler, RunOptions, TrainConfig, Trainer, KNN_K,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

type Check = fn() -> Outcome;

struct Criterion {
    tag: &'static str,
    title: &'static str,
    ignored: bool,
    run: Check,
}

const CRITERIA: [Criterion; 12] = [
    Criterion { tag: "c01", title: "rasterizer gradients vs finite differences", ignored: false, run: c01_gradcheck },
    Criterion { tag: "c02", title: "compositing oracle", ignored: false, run: c02_compositing },
    Criterion { tag: "c03", title: "scene-fitting oracle", ignored: false, run: c03_scene_fit },
    Criterion { tag: "c04", title: "multi-view gradient identity", ignored: false, run: c04_multiview_gradient },
    Criterion { tag: "c05", title: "batch-collation contract", ignored: false, run: c05_collation },
    Criterion { tag: "c06", title: "turntable consistency contract", ignored: false, run: c06_turntable },
    Criterion { tag: "c07", title: "schedule arithmetic", ignored: false, run: c07_schedule },
    Criterion { tag: "c08", title: "desk convergence", ignored: true, run: c08_desk_convergence },
    Criterion { tag: "c09", title: "contrastive instability", ignored: false, run: c09_contrastive },
    Criterion { tag: "c10", title: "Frechet correctness", ignored: false, run: c10_frechet },
    Criterion { tag: "c11", title: "regularizer oracles", ignored: false, run: c11_regularizers },
    Criterion { tag: "c12", title: "PLY interchange", ignored: false, run: c12_ply },
];

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let only_ignored = args.iter().any(|a| a == "--ignored");
    let include_ignored = args.iter().any(|a| a == "--include-ignored");
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    // `cargo test -- --list` probes each target; answer in libtest's format.
    if args.iter().any(|a| a == "--list") {
        for c in &CRITERIA {
            println!("{}: test", c.tag);
        }
        return;
    }

    let mut failures = 0;
    for c in &CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| c.tag.contains(f.as_str())) {
            continue;
        }
        let selected = if only_ignored { c.ignored } else { include_ignored || !c.ignored };
        if !selected {
            println!("criterion {} {:<44} NOT RUN (ignored; pass --ignored to run)", &c.tag[1..], c.title);
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(c.run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let verdict = if result.passed { "PASS" } else { "FAIL" };
        println!("criterion {} {:<44} {verdict} ({secs:.1}s) {}", &c.tag[1..], c.title, result.detail);
        if !result.passed {
            failures += 1;
        }
    }
    if failures > 0 {
        eprintln!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- c01

fn c01_gradcheck() -> Outcome {
    let start = Instant::now();
    let args = GradcheckArgs { scenes: 20, gaussians: 5, resolution: 16, seed: 0 };
    let report = match run_gradcheck(&args) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("{e:#}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let groups: BTreeSet<&str> = report.max_rel_err.keys().map(String::as_str).collect();
    let all_groups =
        ["position", "rotation", "log_scale", "color", "opacity", "background"].iter().all(|g| groups.contains(g));
    outcome(
        report.passed() && all_groups && secs < 120.0,
        format!(
            "max rel err {:.2e} over {} partials ({} skipped at discontinuities)",
            report.worst(),
            report.compared,
            report.skipped
        ),
    )
}

// ---------------------------------------------------------------- c02

/// Straight pinhole projection of an isotropic Gaussian seen by the
/// frontal orbit camera (world x right, world y up, camera on +z), then
/// front-to-back compositing of every splat whose 3σ box covers the pixel.
fn brute_force_image(splats: &[([f64; 3], f64, [f64; 3], f64)], res: usize, bg: [f64; 3]) -> Vec<f64> {
    let f = (res as f64 / 2.0) / (DEFAULT_FOV_DEG / 2.0).to_radians().tan();
    let c = res as f64 / 2.0;
    let mut out = Vec::with_capacity(res * res * 3);
    for py in 0..res {
        for px in 0..res {
            let mut layers = Vec::new();
            for &(p, s, col, o) in splats {
                let (x, y, z) = (p[0], -p[1], DEFAULT_RADIUS - p[2]);
                let (u, v) = (f * x / z + c, f * y / z + c);
                // J Jᵀ for J = [[f/z, 0, -f x/z²], [0, f/z, -f y/z²]].
                let k = s * s * f * f / (z * z);
                let a = k * (1.0 + x * x / (z * z)) + DILATION;
                let b = k * x * y / (z * z);
                let d = k * (1.0 + y * y / (z * z)) + DILATION;
                let det = a * d - b * b;
                let mid = 0.5 * (a + d);
                let radius = (3.0 * (mid + (mid * mid - det).max(0.0).sqrt()).sqrt()).ceil();
                let (dx, dy) = (px as f64 + 0.5 - u, py as f64 + 0.5 - v);
                if dx.abs() > radius || dy.abs() > radius {
                    continue;
                }
                let power = -0.5 * (d * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
                let alpha = (o * power.exp()).min(ALPHA_MAX);
                if alpha >= ALPHA_MIN {
                    layers.push((z, alpha, col));
                }
            }
            layers.sort_by(|l, r| l.0.total_cmp(&r.0));
            let mut t = 1.0;
            let mut rgb = [0.0; 3];
            for (_, alpha, col) in layers {
                for k in 0..3 {
                    rgb[k] += col[k] * alpha * t;
                }
                t *= 1.0 - alpha;
            }
            for k in 0..3 {
                out.push(rgb[k] + t * bg[k]);
            }
        }
    }
    out
}

fn c02_compositing() -> Outcome {
    let res = 24;
    let bg = [0.2, 0.5, 0.9];
    let cam = Camera::orbit(0.0, 0.0, DEFAULT_RADIUS, DEFAULT_FOV_DEG, res, res);
    let cases: Vec<Vec<([f64; 3], f64, [f64; 3], f64)>> = vec![
        vec![([0.0, 0.0, 0.0], 0.08, [1.0, 0.2, 0.1], 0.9)],
        vec![([0.05, 0.02, 0.1], 0.06, [0.1, 0.9, 0.3], 0.7), ([-0.03, 0.0, -0.2], 0.12, [0.8, 0.8, 0.1], 0.95)],
        vec![
            ([0.0, 0.0, 0.15], 0.05, [0.9, 0.1, 0.1], 0.6),
            ([0.1, -0.08, 0.0], 0.09, [0.1, 0.1, 0.9], 0.99),
            ([-0.12, 0.1, -0.1], 0.07, [0.2, 0.7, 0.2], 0.5),
        ],
    ];
    let mut worst: f64 = 0.0;
    for splats in &cases {
        let mut scene = GaussianScene::default();
        for &(p, s, col, o) in splats {
            scene.push(p, [1.0, 0.0, 0.0, 0.0], [s.ln(); 3], col, o);
        }
        let img = match render_forward(&scene, &cam, bg) {
            Ok(o) => o.image,
            Err(e) => return outcome(false, e.to_string()),
        };
        let oracle = brute_force_image(splats, res, bg);
        worst = img.data.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    let empty = render_forward(&GaussianScene::default(), &cam, bg).map(|o| o.image);
    let empty_exact = empty.is_ok_and(|img| img.data.chunks(3).all(|p| p == bg));
    outcome(
        worst < 1e-6 && empty_exact,
        format!("max |render - oracle| {worst:.1e} on 1-3 splat scenes; empty scene equals background: {empty_exact}"),
    )
}

// ---------------------------------------------------------------- c03

const FIT_RES: usize = 64;
const FIT_PRIMITIVES: usize = 200;
const FIT_STEPS: usize = 2000;
const FIT_EVAL_EVERY: usize = 100;

fn fit_cameras() -> (Vec<Camera>, Camera) {
    let mut train = Vec::new();
    for pitch in [-0.15, 0.15] {
        for yaw in [-0.6, -0.2, 0.2, 0.6] {
            train.push(Camera::orbit(yaw, pitch, DEFAULT_RADIUS, DEFAULT_FOV_DEG, FIT_RES, FIT_RES));
        }
    }
    let held_out = Camera::orbit(0.1, 0.05, DEFAULT_RADIUS, DEFAULT_FOV_DEG, FIT_RES, FIT_RES);
    (train, held_out)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Fits a randomly initialized scene to the training views with Adam and
/// returns the best held-out PSNR, the step it was first above `target`,
/// and the trace of held-out evaluations.
fn fit_scene(seed: u64, target: f64) -> cgs_core::Result<(f64, Option<usize>, Vec<(usize, f64)>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_gt = rng.random_range(20..=60);
    let gt = synthetic_identity(&mut rng, n_gt);
    let (train_cams, held_out) = fit_cameras();

    let n = FIT_PRIMITIVES;
    let mut store = ParamStore::new();
    let ball = |rng: &mut ChaCha8Rng| loop {
        let v: [f64; 3] = [0; 3].map(|_| rng.random_range(-0.4..0.4));
        if v.iter().map(|x| x * x).sum::<f64>() <= 0.16 {
            break v;
        }
    };
    store.insert("position", Tensor::new(&[n, 3], (0..n).flat_map(|_| ball(&mut rng)).collect())?);
    store.insert("rotation", Tensor::new(&[n, 4], (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect())?);
    store.insert("log_scale", Tensor::new(&[n, 3], vec![0.03f64.ln(); n * 3])?);
    store.insert("color", Tensor::new(&[n, 3], (0..n * 3).map(|_| rng.random_range(-0.5..0.5)).collect())?);
    store.insert("opacity", Tensor::new(&[n], vec![logit(0.3); n])?);
    let base_lr = [("position", 2e-3), ("rotation", 1e-2), ("log_scale", 1e-2), ("color", 2.5e-2), ("opacity", 2.5e-2)];
    let mut opts: BTreeMap<&str, Adam> = base_lr.iter().map(|&(k, lr)| (k, Adam::new(lr, 0.9, 0.999, 1e-15))).collect();

    let scene_of = |store: &ParamStore, trainable: bool| {
        let p = store.bind(trainable);
        let sv = SceneVars {
            positions: p.get("position").clone(),
            rotations: normalize_rows(p.get("rotation")),
            log_scales: p.get("log_scale").clone(),
            colors: p.get("color").sigmoid(),
            opacities: p.get("opacity").sigmoid(),
        };
        (p, sv)
    };
    let eval = |store: &ParamStore| -> cgs_core::Result<f64> {
        let (_, sv) = scene_of(store, false);
        let bg = [1.0; 3];
        let fit = render_forward(&sv.to_scene(), &held_out, bg)?.image;
        let truth = render_forward(&gt, &held_out, bg)?.image;
        psnr(&fit, &truth)
    };

    let mut best = f64::NEG_INFINITY;
    let mut reached = None;
    let mut trace = vec![(0, eval(&store)?)];
    for step in 1..=FIT_STEPS {
        // Position step size decays log-linearly to 1% over the run.
        let t = step as f64 / FIT_STEPS as f64;
        opts.get_mut("position").unwrap().lr = 2e-3 * 0.01f64.powf(t);
        let (p, sv) = scene_of(&store, true);
        let mut loss = Var::scalar(0.0);
        for cam in &train_cams {
            let bg = random_background(&mut rng);
            let truth = render_forward(&gt, cam, bg)?.image;
            let (img, _) = render_var(&sv, cam, &Var::constant(Tensor::new(&[3], bg.to_vec())?))?;
            let target = Var::constant(Tensor::new(&[FIT_RES, FIT_RES, 3], truth.data)?);
            loss = loss.add(&img.sub(&target).square().mean_all());
        }
        let grads = p.grads(&loss.mul_scalar(1.0 / train_cams.len() as f64));
        for (name, opt) in opts.iter_mut() {
            let one: BTreeMap<String, Tensor> =
                grads.iter().filter(|(k, _)| k == name).map(|(k, v)| (k.clone(), v.clone())).collect();
            opt.update(&mut store, &one);
        }
        if step % FIT_EVAL_EVERY == 0 {
            let q = eval(&store)?;
            trace.push((step, q));
            best = best.max(q);
            if q > target && reached.is_none() {
                reached = Some(step);
            }
        }
    }
    Ok((best, reached, trace))
}

fn c03_scene_fit() -> Outcome {
    let start = Instant::now();
    let (best, reached, trace) = match fit_scene(3, 28.0) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let secs = start.elapsed().as_secs_f64();
    if std::env::var_os("CGS_FIT_TRACE").is_some() {
        for (s, q) in &trace {
            eprintln!("fit step {s:5}: held-out PSNR {q:.2} dB");
        }
    }
    outcome(
        reached.is_some() && secs < 600.0,
        format!(
            "held-out PSNR {:.2} dB at init, best {best:.2} dB, >28 dB first at step {}, {FIT_PRIMITIVES} primitives, 8 views at {FIT_RES}px",
            trace[0].1,
            reached.map_or("never".to_string(), |s| s.to_string())
        ),
    )
}

// ---------------------------------------------------------------- c04

const MV_RES: usize = 16;

fn mv_generator() -> GeneratorConfig {
    let mut c = GeneratorConfig::preset("desk").unwrap().tiny(8);
    c.base_points = 16;
    c
}

fn mv_discriminator() -> DiscriminatorConfig {
    DiscriminatorConfig { resolution: MV_RES, channel_base: 64, channel_max: 16, mbstd_group: 4 }
}

fn mv_grads(views: &[usize], cams: &[Vec<Camera>], bgs: &[Vec<[f64; 3]>]) -> BTreeMap<String, Tensor> {
    let g = Generator::new(mv_generator(), 5).unwrap();
    let d = Discriminator::new(mv_discriminator(), 6).unwrap();
    let pg = g.params.bind(true);
    let pd = d.params.bind(false);
    let ws: Vec<Var> = (0..cams.len())
        .map(|i| g.map_latent(&pg, &Var::constant(Tensor::new(&[1, 8], latent_from_seed(i as u64, 8)).unwrap())))
        .collect();
    let cams: Vec<Vec<Camera>> = cams.iter().map(|c| views.iter().map(|&k| c[k].clone()).collect()).collect();
    let bgs: Vec<Vec<[f64; 3]>> = bgs.iter().map(|b| views.iter().map(|&k| b[k]).collect()).collect();
    let render = render_multiview(&g, &pg, &ws, &cams, &bgs, cams.len()).unwrap();
    pg.grads(&multiview_generator_loss(&d, &pd, &render, 1.5).unwrap())
}

fn c04_multiview_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let poses = PoseDistribution::parametric_default();
    let identities = 4;
    let cams: Vec<Vec<Camera>> = (0..identities)
        .map(|_| (0..4).map(|_| sample_camera_pose(&mut rng, &poses, MV_RES, MV_RES).unwrap()).collect())
        .collect();
    let bgs: Vec<Vec<[f64; 3]>> =
        (0..identities).map(|_| (0..4).map(|_| random_background(&mut rng)).collect()).collect();
    let joint = mv_grads(&[0, 1, 2, 3], &cams, &bgs);
    let singles: Vec<_> = (0..4).map(|v| mv_grads(&[v], &cams, &bgs)).collect();
    let (mut diff2, mut norm2) = (0.0, 0.0);
    for (name, gj) in &joint {
        for (i, a) in gj.data().iter().enumerate() {
            let mean = singles.iter().map(|s| s[name].data()[i]).sum::<f64>() / 4.0;
            diff2 += (a - mean).powi(2);
            norm2 += a * a;
        }
    }
    let rel = (diff2 / norm2).sqrt();
    outcome(rel < 1e-6 && norm2 > 0.0, format!("relative error {rel:.2e} over {} parameter tensors", joint.len()))
}

// ---------------------------------------------------------------- c05

fn c05_collation() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(dir.path(), 12, 3, 8, 4).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    let sampler = RealSampler::new(&ds);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let configs = [(32, 8, 4), (16, 4, 4), (8, 4, 2), (8, 8, 1), (12, 4, 3)];
    let (mut batches, mut violations) = (0usize, 0usize);
    let mut count = |ids: &[usize]| {
        batches += 1;
        let unique: BTreeSet<_> = ids.iter().collect();
        violations += ids.len() - unique.len();
    };
    for step in 0..1000 {
        let (batch, device_batch, views) = configs[step % configs.len()];
        let cfg = TrainConfig { batch, device_batch, views, ..TrainConfig::default() };
        if cfg.validate().is_err() {
            return outcome(false, format!("config {batch}/{device_batch}/{views} rejected"));
        }
        let plan = match collation_plan(cfg.identities_per_step(), views, device_batch) {
            Ok(p) => p,
            Err(e) => return outcome(false, e.to_string()),
        };
        for group in &plan {
            count(&group.iter().map(|s| s.identity).collect::<Vec<_>>());
        }
        for _ in 0..batch / device_batch {
            let idx = sampler.sample(&mut rng, device_batch).unwrap();
            count(&idx.iter().map(|&i| sampler.identity_of(i)).collect::<Vec<_>>());
        }
    }
    outcome(
        violations == 0,
        format!("{violations} repeated identities in {batches} fake and real batches over 1000 steps"),
    )
}

// ---------------------------------------------------------------- c06

fn tiny_checkpoint(path: &Path) {
    let trainer = Trainer::new(
        mv_generator(),
        mv_discriminator(),
        TrainConfig { batch: 8, device_batch: 4, views: 2, ..TrainConfig::default() },
        0,
    )
    .unwrap();
    trainer.checkpoint().unwrap().save(path).unwrap();
}

fn c06_turntable() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("tiny.ckpt");
    tiny_checkpoint(&ckpt);
    let out = dir.path().join("turntable");
    let status = Command::new(env!("CARGO_BIN_EXE_cgs"))
        .args(["turntable", "--frames", "9", "--seed", "7"])
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--out")
        .arg(&out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    if !status.status.success() {
        return outcome(false, String::from_utf8_lossy(&status.stderr).into_owned());
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let frames = manifest["frames"].as_array().cloned().unwrap_or_default();
    let hashes: BTreeSet<&str> = frames.iter().filter_map(|f| f["scene_hash"].as_str()).collect();
    let syntheses = manifest["syntheses"].as_u64();
    let pngs = frames.iter().filter(|f| out.join(f["file"].as_str().unwrap_or("")).is_file()).count();
    let yaws: Vec<f64> = frames.iter().filter_map(|f| f["yaw_deg"].as_f64()).collect();
    let sweep = yaws.first() == Some(&-90.0) && yaws.last() == Some(&90.0);

    // The same check in-process, with the synthesis counter read directly.
    let (g, _) = cgs_cli::commands::load_generator(&ckpt, true).unwrap();
    let before = g.synthesis_count();
    let scene = g.generate(7, 0.8).unwrap();
    let in_process = g.synthesis_count() - before == 1 && hashes.contains(scene.content_hash().as_str());

    // Direct library call for completeness of the contract.
    let lib = run_turntable(&TurntableArgs {
        scene: SceneArgs { ckpt: ckpt.clone(), psi: 0.8, no_ema: false, resolution: None, bg: [1.0; 3] },
        seed: 7,
        frames: 9,
        out: dir.path().join("lib"),
    })
    .unwrap();

    outcome(
        frames.len() == 9
            && pngs == 9
            && hashes.len() == 1
            && syntheses == Some(1)
            && sweep
            && in_process
            && lib.syntheses == 1,
        format!(
            "{} frames, {} distinct scene hash(es), {} synthesis call(s), yaw {}..{} deg",
            frames.len(),
            hashes.len(),
            syntheses.unwrap_or(0),
            yaws.first().copied().unwrap_or(f64::NAN),
            yaws.last().copied().unwrap_or(f64::NAN)
        ),
    )
}

// ---------------------------------------------------------------- c07

fn c07_schedule() -> Outcome {
    let expected = [("paper-256", 109_056), ("paper-512", 240_128), ("paper-1024", 502_272), ("paper-2048", 1_026_560)];
    let rounded = [109_000.0, 240_000.0, 502_000.0, 1_000_000.0];
    let mut lines = Vec::new();
    let mut ok = true;
    for ((name, want), approx) in expected.iter().zip(rounded) {
        let total = GeneratorConfig::preset(name).map(|c| c.total_primitives()).unwrap_or(0);
        ok &= total == *want && (total as f64 - approx).abs() / approx < 0.03;
        lines.push(format!("{name}={total}"));
    }
    outcome(ok, lines.join(", "))
}

// ---------------------------------------------------------------- c08

fn c08_desk_convergence() -> Outcome {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let res = 64;
    generate_synthetic_dataset(data.path(), 64, 8, res, 2024).unwrap();
    let ds = load_dataset(data.path()).unwrap();
    let mut trainer =
        Trainer::new(GeneratorConfig::preset("desk").unwrap(), DiscriminatorConfig::desk(res), TrainConfig::desk(), 0)
            .unwrap();
    let opts = RunOptions {
        total_images: 200_000,
        snapshot_every_images: 20_000,
        fid_every_images: 20_000,
        fid_samples: 256,
        fid_seed: 0,
    };
    let mut max_gap: f64 = 0.0;
    let summary = match train(&mut trainer, &ds, &opts, out.path(), |s| {
        max_gap = max_gap.max((s.real_score - s.fake_score).abs());
    }) {
        Ok(s) => s,
        Err(e) => return outcome(false, format!("training aborted: {e}")),
    };
    let fid0 = summary.fid.first().map_or(f64::NAN, |f| f.1);
    let best = summary.best_fid.unwrap_or(f64::NAN);
    let bounded = max_gap.is_finite() && max_gap < 100.0;

    let ckpt = out.path().join("latest.ckpt");
    let side = run_turntable(&TurntableArgs {
        scene: SceneArgs { ckpt, psi: 1.0, no_ema: false, resolution: None, bg: [1.0; 3] },
        seed: 0,
        frames: 3,
        out: out.path().join("side"),
    });
    let consistent = side.is_ok_and(|m| m.syntheses == 1);
    outcome(
        bounded && best < 0.5 * fid0 && consistent,
        format!("FID {fid0:.3} -> best {best:.3}, max |real-fake| score gap {max_gap:.2}, side views one scene: {consistent}"),
    )
}

// ---------------------------------------------------------------- c09

fn c09_contrastive() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dim = 6;
    // Four distinct cameras, each appearing twice in a batch of eight.
    let distinct: Vec<f64> = (0..4 * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cams: Vec<f64> = (0..8).flat_map(|i| distinct[(i / 2) * dim..(i / 2 + 1) * dim].to_vec()).collect();
    let cam_var = Var::constant(Tensor::new(&[8, dim], cams.clone()).unwrap());
    let mut lowest = f64::INFINITY;
    for trial in 0..50 {
        let img: Vec<f64> =
            if trial == 0 { cams.clone() } else { (0..8 * dim).map(|_| rng.random_range(-3.0..3.0)).collect() };
        for tau in [0.01, 0.1, 1.0] {
            let l = contrastive_pose_loss(&Var::constant(Tensor::new(&[8, dim], img.clone()).unwrap()), &cam_var, tau)
                .unwrap()
                .item();
            lowest = lowest.min(l);
        }
    }
    // Closed form: two identical rows with a perfect image embedding give
    // logits [1/τ, 1/τ], so the loss is exactly ln 2.
    let pair = Var::constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap());
    let exact = contrastive_pose_loss(&pair, &pair, 0.1).unwrap().item();
    outcome(
        lowest >= ln2 - 1e-12 && (exact - ln2).abs() < 1e-12,
        format!("min loss {lowest:.6} over 150 embeddings (ln 2 = {ln2:.6}); duplicated pair gives {exact:.12}"),
    )
}

// ---------------------------------------------------------------- c10

fn stats(mean: Vec<f64>, cov: Vec<f64>) -> FeatureStats {
    FeatureStats { dim: mean.len(), n: 100, mean, cov }
}

fn c10_frechet() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = 5;
    let a: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    // A Aᵀ + I is a valid covariance.
    let cov: Vec<f64> = (0..d * d)
        .map(|ij| {
            let (i, j) = (ij / d, ij % d);
            (0..d).map(|k| a[i * d + k] * a[j * d + k]).sum::<f64>() + if i == j { 1.0 } else { 0.0 }
        })
        .collect();
    let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let shift: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mu2: Vec<f64> = mu.iter().zip(&shift).map(|(m, s)| m + s).collect();

    let same = frechet_distance(&stats(mu.clone(), cov.clone()), &stats(mu.clone(), cov.clone())).unwrap();
    let one_d = frechet_distance(&stats(vec![0.0], vec![1.0]), &stats(vec![1.0], vec![1.0])).unwrap();
    let shifted = frechet_distance(&stats(mu, cov.clone()), &stats(mu2, cov)).unwrap();
    let want = shift.iter().map(|s| s * s).sum::<f64>();
    outcome(
        same.abs() < 1e-9 && (one_d - 1.0).abs() < 1e-9 && (shifted - want).abs() < 1e-9,
        format!("identical {same:.1e}, N(0,1) vs N(1,1) {one_d:.12}, mean shift {shifted:.9} vs {want:.9}"),
    )
}

// ---------------------------------------------------------------- c11

/// O(N²) reference: sort all distances from every point and take the k-th.
fn knn_brute_force(points: &[[f64; 3]], k: usize) -> f64 {
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut d: Vec<f64> = points
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
            .collect();
        d.sort_by(f64::total_cmp);
        total += d[k - 1];
    }
    total / points.len() as f64
}

fn c11_regularizers() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for n in [4, 5, 17, 64, 200, 512] {
        for k in [1, KNN_K] {
            if n <= k {
                continue;
            }
            let pts: Vec<[f64; 3]> = (0..n).map(|_| [0; 3].map(|_| rng.random_range(-0.5..0.5))).collect();
            let v = Var::constant(Tensor::new(&[n, 3], pts.iter().flatten().copied().collect()).unwrap());
            let got = knn_cluster_regularizer(&v, k).unwrap().item();
            let want = knn_brute_force(&pts, k);
            worst = worst.max((got - want).abs() / want.abs().max(1e-300));
            cases += 1;
        }
    }
    // A lattice is full of exact ties.
    let lattice: Vec<[f64; 3]> =
        (0..64).map(|i| [(i % 4) as f64 * 0.1, ((i / 4) % 4) as f64 * 0.1, (i / 16) as f64 * 0.1]).collect();
    let lv = Var::constant(Tensor::new(&[64, 3], lattice.iter().flatten().copied().collect()).unwrap());
    let got = knn_cluster_regularizer(&lv, KNN_K).unwrap().item();
    worst = worst.max((got - knn_brute_force(&lattice, KNN_K)).abs() / got);

    // Hand arithmetic with r0 = 0.45: norms 0, 0.5, 1, 0.6 give excesses
    // 0, 0.05, 0.55, 0.15; squares sum to 0.3275 over 4 points.
    let crafted =
        Var::constant(Tensor::new(&[4, 3], vec![0.0, 0.0, 0.0, 0.3, 0.4, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, -0.6]).unwrap());
    let center = center_regularizer(&crafted, 0.45).item();
    let inside =
        center_regularizer(&Var::constant(Tensor::new(&[2, 3], vec![0.1, 0.2, 0.0, 0.0, -0.3, 0.1]).unwrap()), 0.45)
            .item();
    outcome(
        worst < 1e-12 && (center - 0.081875).abs() < 1e-12 && inside == 0.0,
        format!(
            "k-NN max rel deviation {worst:.1e} over {} cases (N up to 512); center {center:.9} (hand 0.081875)",
            cases + 1
        ),
    )
}

// ---------------------------------------------------------------- c12

/// Header a standard 3DGS viewer expects for degree-0 spherical harmonics.
const REFERENCE_HEADER: &str = "ply
format binary_little_endian 1.0
element vertex 37
property float x
property float y
property float z
property float f_dc_0
property float f_dc_1
property float f_dc_2
property float opacity
property float scale_0
property float scale_1
property float scale_2
property float rot_0
property float rot_1
property float rot_2
property float rot_3
end_header
";

fn c12_ply() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.ply");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let scene = synthetic_identity(&mut rng, 37);
    export_ply(&scene, &path).unwrap();
    let back = import_ply(&path).unwrap();
    let mut worst: f64 = 0.0;
    let mut upd = |a: &[f64], b: &[f64]| {
        for (x, y) in a.iter().zip(b) {
            worst = worst.max((x - y).abs());
        }
    };
    for i in 0..scene.len() {
        upd(&scene.positions[i], &back.positions[i]);
        upd(&scene.rotations[i], &back.rotations[i]);
        upd(&scene.log_scales[i], &back.log_scales[i]);
        upd(&scene.colors[i], &back.colors[i]);
        upd(&[scene.opacities[i]], &[back.opacities[i]]);
    }
    let bytes = std::fs::read(&path).unwrap();
    let header_ok =
        bytes.starts_with(REFERENCE_HEADER.as_bytes()) && bytes.len() == REFERENCE_HEADER.len() + 37 * 14 * 4;
    outcome(
        worst < 1e-6 && back.len() == scene.len() && header_ok,
        format!(
            "max field error {worst:.1e} over {} primitives; header matches reference layout: {header_ok}",
            scene.len()
        ),
    )
}
