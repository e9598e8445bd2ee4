use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dynvo_core::io_eval::{
    ate, format_significant, load_sequence, read_trajectory_tum, rpe, write_labels, write_sequence,
    write_trajectory_tum, TrajectoryEntry,
};
use dynvo_core::pipeline::{format_diagnostics, run_sequence, EngineConfig, EngineMode, Frame};
use dynvo_core::synth::{generate_scene, SceneSpec};

/// Frames with tracking lost above this fraction make `run` exit with code 2.
const LOST_FRACTION_LIMIT: f64 = 0.5;

#[derive(Parser)]
#[command(name = "dynvo", version, about = "RGB-D visual odometry with static-probability weighting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate a trajectory from a frames file.
    Run {
        #[arg(long)]
        input: PathBuf,
        /// Flat `key = value` engine configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured mode.
        #[arg(long)]
        mode: Option<EngineMode>,
        #[arg(long)]
        out_traj: PathBuf,
        /// Per-frame diagnostics as JSON lines.
        #[arg(long)]
        out_diag: Option<PathBuf>,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare an estimated trajectory with ground truth.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value_t = Metric::Ate)]
        metric: Metric,
        /// Frame offset for relative pose error.
        #[arg(long, default_value_t = 1)]
        delta: usize,
    },
    /// Generate a synthetic sequence.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        out_gt: Option<PathBuf>,
        #[arg(long)]
        out_labels: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Ate,
    Rpe,
}

enum Outcome {
    Done,
    TrackingLost,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn run(
    input: &Path,
    config: Option<&Path>,
    mode: Option<EngineMode>,
    out_traj: &Path,
    out_diag: Option<&Path>,
    seed: Option<u64>,
) -> Result<Outcome> {
    let mut cfg = match config {
        Some(path) => EngineConfig::parse(&read_text(path)?).with_context(|| format!("config {}", path.display()))?,
        None => EngineConfig::default(),
    };
    if let Some(mode) = mode {
        cfg.mode = mode;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;

    let records = load_sequence(input)?;
    let frames: Vec<Frame> = records.iter().map(|r| r.to_frame()).collect();
    let out = run_sequence(&frames, &cfg)?;

    let entries: Vec<TrajectoryEntry> = out
        .trajectory
        .iter()
        .map(|(t, pose)| TrajectoryEntry::from_world_to_camera(*t, pose))
        .collect();
    write_trajectory_tum(&entries, out_traj)?;
    if let Some(path) = out_diag {
        fs::write(path, format_diagnostics(&out.results)).with_context(|| format!("writing {}", path.display()))?;
    }

    let lost = out.tracking_lost_fraction();
    println!("frames {}", out.results.len());
    println!("tracking_lost_fraction {}", format_significant(lost));
    if lost > LOST_FRACTION_LIMIT {
        eprintln!("tracking lost on {:.1}% of frames", 100.0 * lost);
        return Ok(Outcome::TrackingLost);
    }
    Ok(Outcome::Done)
}

fn eval(est: &Path, gt: &Path, metric: Metric, delta: usize) -> Result<Outcome> {
    if delta == 0 {
        bail!("--delta must be at least 1");
    }
    let est = read_trajectory_tum(est)?;
    let gt = read_trajectory_tum(gt)?;
    match metric {
        Metric::Ate => {
            let (rmse, sd) = ate(&est, &gt)?;
            println!("ate_rmse {}", format_significant(rmse));
            println!("ate_sd {}", format_significant(sd));
        }
        Metric::Rpe => {
            let s = rpe(&est, &gt, delta)?;
            println!("rpe_trans_rmse {}", format_significant(s.trans_rmse));
            println!("rpe_trans_sd {}", format_significant(s.trans_sd));
            println!("rpe_rot_rmse_deg {}", format_significant(s.rot_rmse_deg));
            println!("rpe_rot_sd_deg {}", format_significant(s.rot_sd_deg));
        }
    }
    Ok(Outcome::Done)
}

fn synth(spec: &Path, seed: u64, out: &Path, out_gt: Option<&Path>, out_labels: Option<&Path>) -> Result<Outcome> {
    let spec = SceneSpec::parse(&read_text(spec)?).with_context(|| format!("spec {}", spec.display()))?;
    let scene = generate_scene(&spec, seed)?;
    for warning in &scene.warnings {
        eprintln!("warning: {}", warning.0);
    }
    write_sequence(&scene.records, out)?;
    if let Some(path) = out_gt {
        write_trajectory_tum(&scene.ground_truth, path)?;
    }
    if let Some(path) = out_labels {
        write_labels(&scene.labels, path)?;
    }
    println!("frames {}", scene.records.len());
    Ok(Outcome::Done)
}

fn dispatch(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Run {
            input,
            config,
            mode,
            out_traj,
            out_diag,
            seed,
        } => run(&input, config.as_deref(), mode, &out_traj, out_diag.as_deref(), seed),
        Command::Eval { est, gt, metric, delta } => eval(&est, &gt, metric, delta),
        Command::Synth {
            spec,
            seed,
            out,
            out_gt,
            out_labels,
        } => synth(&spec, seed, &out, out_gt.as_deref(), out_labels.as_deref()),
    }
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors, which is reserved for lost tracking.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::TrackingLost) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
