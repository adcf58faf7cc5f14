use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mrstorm::harness::{self, AlgoKind, AlgoMode, SweepOptions, TrialConfig};
use mrstorm::world::{make_scenario_with, ArmLayout, ArmPreset, Scenario, ScenarioOptions, TaskKind};

#[derive(Parser)]
#[command(name = "mrstorm", version, about = "Decentralized multi-arm MPC: trials, sweeps and reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one trial and write metrics.json and log.csv.
    Run(RunArgs),
    /// Run every level × seed × algorithm of one task, resuming if interrupted.
    Sweep(SweepArgs),
    /// Paired-difference tables from a sweep directory.
    Report(ReportArgs),
    /// Generate a scenario file.
    Scenario(ScenarioArgs),
}

#[derive(Args)]
struct PlannerArgs {
    /// Rollouts per iteration.
    #[arg(long, default_value_t = 400)]
    rollouts: usize,
    /// Optimization iterations per control step.
    #[arg(long, default_value_t = 5)]
    iterations: usize,
    /// Trust exponent of the prioritization factor.
    #[arg(long, default_value_t = 3.0)]
    trust: f64,
    /// Trial configuration (planner, weights, contact threshold) as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl PlannerArgs {
    fn trial_config(&self) -> Result<TrialConfig> {
        match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            }
            None => Ok(TrialConfig::default()),
        }
    }

    fn mode(&self, kind: AlgoKind) -> AlgoMode {
        AlgoMode::new(kind, self.rollouts, self.iterations).with_trust(self.trust)
    }
}

#[derive(Args)]
struct LayoutArgs {
    /// Arm model: desk6 or spatial3.
    #[arg(long, default_value = "desk6")]
    arm: ArmPreset,
    /// Number of arms placed around the center.
    #[arg(long, default_value_t = 4)]
    arms: usize,
    /// Place two arms facing each other this far apart instead.
    #[arg(long)]
    head_on: Option<f64>,
    /// Override the level-derived obstacle count.
    #[arg(long)]
    obstacles: Option<usize>,
    #[arg(long, default_value_t = 500)]
    t_max: usize,
}

impl LayoutArgs {
    fn options(&self) -> ScenarioOptions {
        ScenarioOptions {
            preset: self.arm,
            layout: match self.head_on {
                Some(separation) => ArmLayout::HeadOn { separation },
                None => ArmLayout::Corners { count: self.arms },
            },
            obstacle_count: self.obstacles,
            t_max: self.t_max,
            ..Default::default()
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value = "mrs")]
    algo: AlgoKind,
    /// Planner seed, mixed with the scenario seed and arm index.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Give each arm its own thread (results are not reproducible).
    #[arg(long = "async")]
    asynchronous: bool,
    #[command(flatten)]
    planner: PlannerArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    task: TaskKind,
    /// Levels as a range `1..5` or a list `1,3,5`.
    #[arg(long, default_value = "1..5", value_parser = parse_levels)]
    levels: Levels,
    #[arg(long, default_value_t = 6)]
    seeds_per_level: usize,
    /// Comma-separated algorithms.
    #[arg(long, value_delimiter = ',', default_value = "mrs,sd")]
    algos: Vec<AlgoKind>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    planner: PlannerArgs,
    #[command(flatten)]
    layout: LayoutArgs,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "mrs")]
    baseline: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long)]
    task: TaskKind,
    #[arg(long, default_value_t = 1)]
    level: u8,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    layout: LayoutArgs,
}

#[derive(Clone, Debug)]
struct Levels(Vec<u8>);

fn parse_levels(s: &str) -> Result<Levels, String> {
    let bad = || format!("bad level list {s:?}; use 1..5 or 1,2,3");
    let levels: Vec<u8> = if let Some((a, b)) = s.split_once("..") {
        let a: u8 = a.trim().parse().map_err(|_| bad())?;
        let b: u8 = b.trim_start_matches('=').trim().parse().map_err(|_| bad())?;
        (a..=b).collect()
    } else {
        s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?
    };
    if levels.is_empty() || levels.iter().any(|l| !(1..=5).contains(l)) {
        return Err(format!("levels must lie in 1..=5, got {s:?}"));
    }
    Ok(Levels(levels))
}

fn run(args: &RunArgs) -> Result<()> {
    let scenario = Scenario::load(&args.scenario).with_context(|| format!("loading {}", args.scenario.display()))?;
    let mut cfg = args.planner.trial_config()?;
    cfg.planner.seed = args.seed;
    cfg.asynchronous |= args.asynchronous;
    let result = harness::run_trial(&scenario, &args.planner.mode(args.algo), &cfg)?;
    std::fs::create_dir_all(&args.out)?;
    harness::write_metrics(args.out.join("metrics.json"), &result.metrics)?;
    harness::write_log_csv(args.out.join("log.csv"), &scenario, &result.log)?;
    let m = &result.metrics;
    println!(
        "{} {} level {} seed {}: task score {}, collision steps {}, {:.1} Hz{}",
        m.task,
        m.algo,
        m.level,
        m.seed,
        m.task_score,
        m.collision_steps,
        m.control_frequency_hz,
        if m.aborted { " (aborted)" } else { "" }
    );
    if m.aborted {
        bail!("trial aborted after {} steps", m.steps_run);
    }
    Ok(())
}

fn sweep(args: &SweepArgs) -> Result<()> {
    let opts = SweepOptions {
        task: args.task,
        levels: args.levels.0.clone(),
        seeds_per_level: args.seeds_per_level,
        algos: args.algos.iter().map(|k| args.planner.mode(*k)).collect(),
        scenario: args.layout.options(),
        trial: args.planner.trial_config()?,
    };
    let total = opts.levels.len() * opts.seeds_per_level * opts.algos.len();
    let mut done = 0;
    harness::run_sweep(&opts, &args.out, |path: &Path, cached| {
        done += 1;
        let tag = if cached { "cached" } else { "ran" };
        log::info!("[{done}/{total}] {tag} {}", path.display());
    })?;
    println!("{total} trials in {}", args.out.display());
    Ok(())
}

fn report(args: &ReportArgs) -> Result<()> {
    let rows = harness::report(&args.input, &args.baseline)?;
    if rows.is_empty() {
        bail!("no trials with a {} baseline under {}", args.baseline, args.input.display());
    }
    harness::write_tables(&args.out, &rows)?;
    println!("{:<14} {:<11} {:>5} {:>3} {:>18} {:>18}", "task", "algo", "level", "n", "dTask", "dCollision");
    for r in &rows {
        let level = r.level.map_or("all".to_string(), |l| l.to_string());
        println!(
            "{:<14} {:<11} {:>5} {:>3} {:>8.3} ± {:<7.3} {:>8.3} ± {:<7.3}",
            r.task, r.algo, level, r.n, r.dt_mean, r.dt_sd, r.dc_mean, r.dc_sd
        );
    }
    Ok(())
}

fn scenario(args: &ScenarioArgs) -> Result<()> {
    let s = make_scenario_with(args.task, args.level, args.seed, &args.layout.options())?;
    match &args.out {
        Some(p) => s.save(p)?,
        None => println!("{}", s.to_json()),
    }
    Ok(())
}

fn init_workers() -> Result<()> {
    if let Ok(v) = std::env::var("MRSTORM_WORKERS") {
        let n: usize = v.parse().with_context(|| format!("MRSTORM_WORKERS={v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = init_workers().and_then(|()| match &cli.command {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
        Command::Scenario(a) => scenario(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
