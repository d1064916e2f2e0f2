use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use cgs_cli::commands::{
    run_eval_fid, run_export, run_generate, run_gradcheck, run_make_synthetic, run_rebalance, run_train, run_turntable,
    EvalFidArgs, ExportArgs, GenerateArgs, GradcheckArgs, MakeSyntheticArgs, RebalanceArgs, TrainArgs, TurntableArgs,
};

/// Generative model of 3D Gaussian scenes trained from posed 2D images.
#[derive(Parser)]
#[command(name = "cgs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator/discriminator pair on a posed image dataset.
    Train(TrainArgs),
    /// Export scenes and frontal renders for a list of seeds.
    Generate(GenerateArgs),
    /// Render one scene from a sweep of yaw angles.
    Turntable(TurntableArgs),
    /// Write one generated scene as a PLY file.
    ExportPly(ExportArgs),
    /// Score a checkpoint against a dataset.
    EvalFid(EvalFidArgs),
    /// Compare rasterizer gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Render a synthetic multi-view dataset from random Gaussian shells.
    MakeSynthetic(MakeSyntheticArgs),
    /// Resample a dataset so an annotation follows a target histogram.
    Rebalance(RebalanceArgs),
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(a) => {
            let s = run_train(&a)?;
            println!(
                "trained {} steps ({} images); best FID {}",
                s.steps,
                s.images_seen,
                s.best_fid.map_or("n/a".to_string(), |f| format!("{f:.3}"))
            );
        }
        Command::Generate(a) => {
            for (seed, hash) in run_generate(&a)? {
                println!("seed {seed}: {hash}");
            }
        }
        Command::Turntable(a) => {
            let m = run_turntable(&a)?;
            println!("{} frames from one scene ({})", m.frames.len(), m.frames[0].scene_hash);
        }
        Command::ExportPly(a) => println!("{}: {}", a.out.display(), run_export(&a)?),
        Command::EvalFid(a) => println!("{}", serde_json::to_string(&run_eval_fid(&a)?)?),
        Command::Gradcheck(a) => {
            let r = run_gradcheck(&a)?;
            println!("{r}");
            return Ok(r.passed());
        }
        Command::MakeSynthetic(a) => {
            let s = run_make_synthetic(&a)?;
            println!("wrote {} images of {} identities to {}", s.images, s.identities, a.out.display());
        }
        Command::Rebalance(a) => {
            let (before, after) = run_rebalance(&a)?;
            println!("{before} entries -> {after} entries");
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
