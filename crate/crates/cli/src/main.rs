use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use socc_core::eval::{eval_rte_rre_with, KITTI_LENGTHS};
use socc_core::io::{read_trajectory_kitti, write_grid_file, write_trajectory_kitti};
use socc_core::synth::{write_dataset, SceneSpec};
use socc_core::{eval_ape_rpe, Dataset, LabelMap, Odometry, Settings};

#[derive(Parser)]
#[command(name = "socc", version, about = "LiDAR odometry against a sparse semantic occupancy grid")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run odometry over a sequence and write the trajectory in KITTI format.
    Run {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an estimated trajectory against ground truth.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value_t = Protocol::Kitti)]
        protocol: Protocol,
        /// Subsequence lengths in meters for the KITTI protocol.
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<f64>>,
        /// Frame offset for the relative pose error.
        #[arg(long, default_value_t = 1)]
        rpe_delta: usize,
    },
    /// Render a scene file into a sequence directory.
    Synth {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Render only the first N frames.
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, default_value = "semantic-kitti")]
        label_map: LabelMap,
    },
    /// Run odometry and write the final map.
    DumpGrid {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    /// Relative errors over 100..800 m subsequences.
    Kitti,
    /// Absolute and relative pose errors after rigid alignment.
    Ape,
}

#[derive(Args)]
struct Input {
    /// Sequence directory holding velodyne/*.bin.
    #[arg(long)]
    data: PathBuf,
    /// Settings file. Built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Label directory, or `none`. Defaults to <data>/labels when it exists.
    #[arg(long)]
    labels: Option<String>,
    /// Ablation switch, e.g. `use_sem_weight=false` or `anchor_mode=mean`.
    #[arg(long, value_name = "KEY=VALUE")]
    ablate: Vec<String>,
    /// Any setting, e.g. `registration.gamma=0`.
    #[arg(long, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print one line per frame to stderr.
    #[arg(long)]
    verbose: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run { input, out } => {
            let odo = odometry(&input)?;
            write_trajectory_kitti(&out, odo.trajectory())?;
            Ok(())
        }
        Command::DumpGrid { input, out } => {
            let odo = odometry(&input)?;
            write_grid_file(&out, odo.grid())?;
            println!("voxels = {}", odo.grid().len());
            Ok(())
        }
        Command::Eval {
            est,
            gt,
            protocol,
            lengths,
            rpe_delta,
        } => eval(&est, &gt, protocol, lengths.as_deref(), rpe_delta),
        Command::Synth {
            scene,
            out,
            frames,
            label_map,
        } => {
            let text = std::fs::read_to_string(&scene).with_context(|| format!("reading {}", scene.display()))?;
            let mut spec = SceneSpec::parse(&text).with_context(|| format!("parsing {}", scene.display()))?;
            if let Some(n) = frames {
                if n == 0 || n > spec.frames() {
                    bail!("--frames must lie in 1..={}", spec.frames());
                }
                spec.trajectory.truncate(n);
            }
            let n = write_dataset(&spec, &out, &label_map)?;
            println!("frames = {n}");
            Ok(())
        }
    }
}

fn settings(input: &Input) -> Result<Settings> {
    let mut s = match &input.config {
        Some(path) => Settings::load(path)?,
        None => Settings::default(),
    };
    let overrides = input
        .ablate
        .iter()
        .map(|kv| (kv, "ablation."))
        .chain(input.set.iter().map(|kv| (kv, "")));
    for (kv, prefix) in overrides {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("expected KEY=VALUE, got '{kv}'");
        };
        s.set(&format!("{prefix}{}", k.trim()), v.trim())?;
    }
    Ok(s)
}

fn odometry(input: &Input) -> Result<Odometry> {
    let settings = settings(input)?;
    let cfg = settings.pipeline()?;
    let map = settings.label_map();
    let ds = Dataset::open(&input.data)?;
    let labels: Option<PathBuf> = match input.labels.as_deref() {
        Some("none") => None,
        Some(dir) => Some(PathBuf::from(dir)),
        None => ds.default_labels_dir(),
    };
    let mut odo = Odometry::new(cfg)?;
    let mut fallbacks = 0;
    for i in 0..ds.len() {
        let scan = ds.load(i, labels.as_deref().map(|d| (d, &map)))?;
        let r = odo.process_scan(&scan).with_context(|| format!("frame {i}"))?;
        fallbacks += usize::from(r.fallback.is_some());
        if input.verbose {
            let t = r.pose.translation;
            let iters = r.registration.as_ref().map_or(0, |g| g.iterations());
            eprintln!(
                "frame {i}: {} points, {iters} iterations, tau {:.3}, position {:.3} {:.3} {:.3}{}",
                r.downsampled_points,
                r.tau_corr,
                t.x,
                t.y,
                t.z,
                r.fallback.map(|e| format!(", fallback: {e}")).unwrap_or_default()
            );
        }
    }
    println!("frames = {}", ds.len());
    println!("fallbacks = {fallbacks}");
    Ok(odo)
}

fn eval(est: &Path, gt: &Path, protocol: Protocol, lengths: Option<&[f64]>, rpe_delta: usize) -> Result<()> {
    let est = read_trajectory_kitti(est)?;
    let gt = read_trajectory_kitti(gt)?;
    match protocol {
        Protocol::Kitti => {
            let r = eval_rte_rre_with(&est, &gt, lengths.unwrap_or(&KITTI_LENGTHS))?;
            println!("rte_percent = {:.6}", r.rte_percent);
            println!("rre_deg_per_100m = {:.6}", r.rre_deg_per_100m);
            println!("segments = {}", r.segments);
        }
        Protocol::Ape => {
            let r = eval_ape_rpe(&est, &gt, rpe_delta)?;
            println!("ape_rmse = {:.6}", r.ape.rmse);
            println!("ape_mean = {:.6}", r.ape.mean);
            println!("ape_max = {:.6}", r.ape.max);
            println!("rpe_rmse = {:.6}", r.rpe.rmse);
            println!("rpe_mean = {:.6}", r.rpe.mean);
            println!("rpe_max = {:.6}", r.rpe.max);
            let drift = socc_core::eval::endpoint_drift(&est, &gt)?;
            println!("endpoint_drift_percent = {:.6}", 100.0 * drift);
        }
    }
    Ok(())
}
