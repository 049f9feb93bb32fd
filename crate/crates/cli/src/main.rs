//! Command-line interface for the panovio pipeline.
//!
//! Subcommands:
//! - `simulate`  synthesize the five sensor stream files of a scenario
//! - `run`       run the full pipeline and write trajectory + metrics
//! - `ablate`    sweep toggle combinations and write a comparison table
//! - `evaluate`  compute the ATE RMSE between two trajectory files

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use panovio::estimator::SolverConfig;
use panovio::pipeline::{
    ablate, config_digest, run, AblationAxes, CameraSelection, PipelineParams, RunConfig,
    RunToggles, Streams,
};
use panovio::rig::RigConfig;
use panovio::sim::{evaluate_ate, Scenario};
use panovio::streams::read_trajectory;

#[derive(Parser)]
#[command(
    name = "panovio",
    about = "Panoramic multi-fisheye visual-inertial odometry with LiDAR depth fusion",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ScenarioArgs {
    /// Bundled scenario name (square_loop, figure_eight, stairs_helix,
    /// masked_texture) or path to a scenario TOML file.
    #[arg(long)]
    scenario: String,
    /// Rig TOML file overriding the scenario's rig.
    #[arg(long)]
    rig: Option<PathBuf>,
    /// Seed overriding the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ScenarioArgs {
    fn load(&self) -> anyhow::Result<Scenario> {
        let mut scenario = Scenario::resolve(&self.scenario)?;
        if let Some(rig_path) = &self.rig {
            scenario.rig = RigConfig::load(rig_path)?;
        }
        if let Some(seed) = self.seed {
            scenario.seed = seed;
        }
        scenario.validate()?;
        Ok(scenario)
    }
}

#[derive(Args, Clone)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Solver configuration TOML file.
    #[arg(long)]
    solver_config: Option<PathBuf>,
    /// Camera subset, e.g. `0` or `0,2`, or `all`.
    #[arg(long, default_value = "all")]
    cameras: String,
    /// Disable the extrinsic triangulation compensation.
    #[arg(long)]
    no_compensation: bool,
    /// Disable loop closures.
    #[arg(long)]
    no_loop: bool,
    /// Disable LiDAR depth association.
    #[arg(long)]
    no_depth: bool,
    /// Stream directory (defaults to `<out>/streams`; synthesized if absent).
    #[arg(long)]
    streams: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the sensor streams of a scenario.
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Output directory (streams land in `<out>/streams`).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline.
    Run(RunArgs),
    /// Run an ablation sweep over toggle axes.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated axes: compensation, cameras, loop, depth.
        #[arg(long)]
        axes: String,
    },
    /// Evaluate a trajectory against a reference.
    Evaluate {
        /// Estimated trajectory file (t px py pz qw qx qy qz).
        #[arg(long)]
        estimate: PathBuf,
        /// Ground-truth trajectory file.
        #[arg(long)]
        truth: PathBuf,
        /// Maximum timestamp gap for pose association, seconds.
        #[arg(long, default_value_t = 0.05)]
        max_dt: f64,
        /// Optional output directory for per-pose error rows.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn build_run_config(args: &RunArgs) -> anyhow::Result<RunConfig> {
    let scenario = args.scenario.load()?;
    let solver = match &args.solver_config {
        Some(p) => SolverConfig::load(p)?,
        None => SolverConfig::default(),
    };
    let toggles = RunToggles {
        cameras: CameraSelection::parse(&args.cameras)?,
        compensation: !args.no_compensation,
        loop_closure: !args.no_loop,
        depth_association: !args.no_depth,
    };
    Ok(RunConfig {
        scenario,
        solver,
        params: PipelineParams::default(),
        toggles,
    })
}

fn obtain_streams(config: &RunConfig, args: &RunArgs) -> anyhow::Result<Streams> {
    let dir = args
        .streams
        .clone()
        .unwrap_or_else(|| args.out.join("streams"));
    if dir.join("imu.txt").exists() {
        Ok(Streams::load(&dir)?)
    } else {
        let streams = Streams::synthesize(&config.scenario)?;
        streams.write(&dir)?;
        Ok(streams)
    }
}

fn cmd_simulate(scenario: &ScenarioArgs, out: &Path) -> anyhow::Result<()> {
    let scenario = scenario.load()?;
    let dir = panovio::pipeline::simulate_to_dir(&scenario, out)?;
    println!(
        "wrote streams for '{}' (seed {}) to {}",
        scenario.name,
        scenario.seed,
        dir.display()
    );
    Ok(())
}

fn cmd_run(args: &RunArgs) -> anyhow::Result<()> {
    let config = build_run_config(args)?;
    let streams = obtain_streams(&config, args)?;
    let report = run(&config, &streams)?;
    report.write_outputs(&args.out)?;
    print!("{}", report.metrics_text());
    if report.diverged {
        bail!(
            "estimator diverged; partial trajectory written to {}",
            args.out.display()
        );
    }
    Ok(())
}

fn cmd_ablate(args: &RunArgs, axes: &str) -> anyhow::Result<()> {
    let config = build_run_config(args)?;
    let streams = obtain_streams(&config, args)?;
    let axes = AblationAxes::parse(axes)?;
    let report = ablate(&config, &streams, &axes);
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let table = report.table_text();
    std::fs::write(args.out.join("ablation.txt"), &table)
        .with_context(|| "writing ablation.txt")?;
    println!("# digest = {}", config_digest(&config));
    print!("{table}");
    Ok(())
}

fn cmd_evaluate(
    estimate: &Path,
    truth: &Path,
    max_dt: f64,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let est = read_trajectory(estimate)?;
    let tru = read_trajectory(truth)?;
    let report = evaluate_ate(&est, &tru, max_dt)?;
    println!("ate_rmse = {:.9}", report.rmse);
    println!("matched_poses = {}", report.matched);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut rows = String::from("# t translational_error\n");
        for (t, e) in &report.per_pose {
            rows.push_str(&format!("{t} {e}\n"));
        }
        std::fs::write(dir.join("ate_errors.txt"), rows)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { scenario, out } => cmd_simulate(scenario, out),
        Command::Run(args) => cmd_run(args),
        Command::Ablate { run, axes } => cmd_ablate(run, axes),
        Command::Evaluate {
            estimate,
            truth,
            max_dt,
            out,
        } => cmd_evaluate(estimate, truth, *max_dt, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
