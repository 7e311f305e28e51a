use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use gcmr::harness::{self, Algo, Profile, RunConfig};
use gcmr::Error;

/// Train a two-level goal-conditioned agent on a point-mass maze.
#[derive(Parser, Debug)]
#[command(name = "gcmr", version)]
struct Cli {
    /// Maze name (point_maze_u, point_maze_w, point_maze_large_u, point_maze_bottleneck).
    #[arg(long, default_value = "point_maze_u")]
    env: String,
    /// Optional JSON maze layout file; overrides --env.
    #[arg(long)]
    layout: Option<PathBuf>,
    /// aclg, aclg+gcmr, gcmr-only, higl-baseline or hiro-correction-baseline.
    #[arg(long, default_value = "aclg+gcmr")]
    algo: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Total environment steps. Defaults to the preset value.
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory for CSV logs, run.json and checkpoints.
    #[arg(long, default_value = "runs/out")]
    out: PathBuf,
    /// JSON file of config overrides, merged field-wise into the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the landmark graph and planned path at every evaluation.
    #[arg(long)]
    dump_graph: bool,
    /// paper or desk.
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Print the resolved config as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

fn build_config(cli: &Cli) -> gcmr::Result<RunConfig> {
    let algo: Algo = cli.algo.parse()?;
    let profile: Profile = cli.profile.parse()?;
    let mut cfg = RunConfig::preset(algo, profile);
    cfg.env = cli.env.clone();
    cfg.seed = cli.seed;
    if let Some(p) = &cli.config {
        cfg = cfg.load_overrides(p)?;
    }
    if let Some(l) = &cli.layout {
        cfg.layout_file = Some(l.clone());
    }
    if let Some(s) = cli.steps {
        cfg.total_steps = s;
    }
    cfg.dump_graph |= cli.dump_graph;
    cfg.validate()?;
    cfg.layout()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match build_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if cli.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
        return ExitCode::SUCCESS;
    }
    match harness::train(cfg, Some(&cli.out)) {
        Ok(t) => {
            let last = t.log.progress.last().map(|r| r.success_rate);
            println!(
                "finished {} steps; final success rate {}",
                t.step_count(),
                last.map_or("n/a".into(), |v| format!("{v:.2}"))
            );
            ExitCode::SUCCESS
        }
        Err(e @ (Error::Config(_) | Error::Usage(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
