//! `pvo`: render synthetic scenes, run the odometry pipeline, score results.
//!
//! Exit codes: 0 success, 1 usage error, 2 computation failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use pvo_core::io::{self, Scene};
use pvo_core::metrics::{evaluate, Alignment};
use pvo_core::pipeline::{run_pvo, PipelineConfig, SolveMode};
use pvo_core::simworld::{render_sequence, SceneConfig};

const OUT_DIR_ENV: &str = "PVO_OUT_DIR";

/// Like `println!`, but a closed pipe is not an error.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Debug, Parser)]
#[command(name = "pvo", version, about)]
struct Cli {
    /// Overrides the scene seed (simulate) or is recorded in the report (solve).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print progress and timings to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a scene config into a scene directory.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `$PVO_OUT_DIR/<config name>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate trajectory, depth and a track-consistent segmentation.
    Solve {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Pipeline)]
        mode: Mode,
        /// Defaults to `$PVO_OUT_DIR/<scene name>-<mode>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the outer iteration count of the chosen mode.
        #[arg(long)]
        outer_iterations: Option<usize>,
        #[arg(long)]
        working_scale: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Score a prediction (result or scene directory) against a scene.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Temporal window sizes.
        #[arg(long, value_delimiter = ',', default_value = "0,5,10,15")]
        k: Vec<usize>,
        #[arg(long, value_enum, default_value_t = AlignmentArg::Similarity)]
        alignment: AlignmentArg,
        /// Also write the key-value report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Unweighted,
    Panoptic,
    Pipeline,
}

impl From<Mode> for SolveMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Unweighted => SolveMode::Unweighted,
            Mode::Panoptic => SolveMode::Panoptic,
            Mode::Pipeline => SolveMode::Pipeline,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AlignmentArg {
    Rigid,
    Similarity,
}

impl From<AlignmentArg> for Alignment {
    fn from(a: AlignmentArg) -> Self {
        match a {
            AlignmentArg::Rigid => Alignment::Rigid,
            AlignmentArg::Similarity => Alignment::Similarity,
        }
    }
}

enum Failure {
    Usage(String),
    Compute(String),
}

impl From<pvo_core::Error> for Failure {
    fn from(e: pvo_core::Error) -> Self {
        Failure::Compute(e.to_string())
    }
}

fn default_out(out: Option<PathBuf>, name: &str) -> Result<PathBuf, Failure> {
    if let Some(out) = out {
        return Ok(out);
    }
    match std::env::var_os(OUT_DIR_ENV) {
        Some(base) if !base.is_empty() => Ok(Path::new(&base).join(name)),
        _ => Err(Failure::Usage(format!("--out is required when {OUT_DIR_ENV} is unset"))),
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .or_else(|| path.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into())
}

fn simulate(cli: &Cli, config: &Path, out: Option<PathBuf>) -> Result<(), Failure> {
    let out = default_out(out, &stem(config))?;
    let text = std::fs::read_to_string(config)
        .map_err(|e| Failure::Compute(format!("{}: {e}", config.display())))?;
    let mut cfg = SceneConfig::from_toml(&text)
        .map_err(|e| Failure::Compute(format!("{}: {e}", config.display())))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let start = Instant::now();
    let frames = render_sequence(&cfg)?;
    let scene = Scene {
        intrinsics: cfg.intrinsics()?,
        thing_classes: cfg.thing_set(),
        flow_radius: cfg.flow_radius,
        frames,
    };
    io::write_scene(&out, &scene)?;
    if cli.verbose {
        eprintln!("rendered in {:.3} s", start.elapsed().as_secs_f64());
    }
    say!("wrote {} frames to {}", scene.frames.len(), out.display());
    say!("digest {}", io::directory_digest(&out)?);
    Ok(())
}

fn solve(cli: &Cli, scene_dir: &Path, mode: Mode, out: Option<PathBuf>, overrides: (Option<usize>, Option<usize>, Option<f64>)) -> Result<(), Failure> {
    let out = default_out(out, &format!("{}-{}", stem(scene_dir), SolveMode::from(mode).name()))?;
    let mut config = PipelineConfig::for_mode(mode.into());
    if let Some(n) = overrides.0 {
        config.outer_iterations = n;
    }
    if let Some(s) = overrides.1 {
        config.working_scale = s;
    }
    if let Some(eta) = overrides.2 {
        config.eta = eta;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    let start = Instant::now();
    let scene = io::read_scene(scene_dir)?;
    let loaded = start.elapsed().as_secs_f64();
    let result = run_pvo(&scene.observations(), &config)?;
    let solved = start.elapsed().as_secs_f64() - loaded;
    if let Some(d) = result.diagnostics.iter().find(|d| !d.solver.is_monotone()) {
        return Err(Failure::Compute(format!("objective increased: {:?}", d.solver.cost_trace)));
    }
    io::write_solve_output(&out, &result.to_output(mode.into(), &config)?)?;
    if cli.verbose {
        for (i, d) in result.diagnostics.iter().enumerate() {
            eprintln!(
                "outer {}: objective {:.6e}, {} solver iterations, ATE {}",
                i + 1,
                d.objective,
                d.solver.iterations,
                d.ate.map_or("n/a".into(), |a| format!("{a:.6}")),
            );
        }
    }
    say!("wrote {} poses to {}", result.trajectory.len(), out.display());
    say!("load {loaded:.3} s, solve {solved:.3} s");
    say!("digest {}", io::directory_digest(&out)?);
    Ok(())
}

fn run_evaluate(pred: &Path, gt: &Path, ks: &[usize], alignment: AlignmentArg, report: Option<PathBuf>) -> Result<(), Failure> {
    let start = Instant::now();
    let (pred_traj, pred_video) = io::read_evaluable(pred)?;
    let (gt_traj, gt_video) = io::read_evaluable(gt)?;
    let loaded = start.elapsed().as_secs_f64();
    let mut rep = evaluate((&pred_traj, &pred_video), (&gt_traj, &gt_video), ks, alignment.into())?;
    rep.runtime = vec![
        ("load".into(), loaded),
        ("metrics".into(), start.elapsed().as_secs_f64() - loaded),
    ];
    let _ = write!(std::io::stdout(), "{}", rep.to_table());
    let kv = rep.to_key_values();
    say!("");
    let _ = write!(std::io::stdout(), "{}", kv.render());
    if let Some(path) = report {
        kv.write(&path)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Compute(e.to_string()))?;
    }
    match &cli.command {
        Command::Simulate { config, out } => simulate(cli, config, out.clone()),
        Command::Solve {
            scene,
            mode,
            out,
            outer_iterations,
            working_scale,
            eta,
        } => solve(cli, scene, *mode, out.clone(), (*outer_iterations, *working_scale, *eta)),
        Command::Evaluate {
            pred,
            gt,
            k,
            alignment,
            report,
        } => run_evaluate(pred, gt, k, *alignment, report.clone()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Compute(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
