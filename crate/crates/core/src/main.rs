use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use opdop::envs;
use opdop::harness::{self, AggregateStats};
use opdop::{solve_hindsight, BackendKind, CmdpModel, Error, Result, RunSpec};

#[derive(Parser)]
#[command(
    name = "opdop",
    about = "Optimistic primal-dual policy optimization for episodic constrained MDPs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic environment file.
    #[command(subcommand)]
    Gen(GenFamily),
    /// Solve the constrained planning problem and print the solution JSON.
    SolveHindsight { model: PathBuf },
    /// Run the online optimizer over one or more seeds.
    Run(RunArgs),
    /// Re-aggregate a finished run directory and refresh its plots.
    Report { dir: PathBuf },
}

#[derive(Subcommand)]
enum GenFamily {
    /// Random dense tabular model.
    Tabular {
        #[arg(long, default_value_t = 5)]
        states: usize,
        #[arg(long, default_value_t = 3)]
        actions: usize,
        #[arg(long, default_value_t = 5)]
        horizon: usize,
        /// Utility floor of the constraint.
        #[arg(long)]
        b: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Slippery gridworld with hazard cells.
    Gridworld {
        #[arg(long, default_value_t = 3)]
        width: usize,
        #[arg(long, default_value_t = 3)]
        height: usize,
        #[arg(long, default_value_t = 5)]
        horizon: usize,
        /// Hazard cell indices, comma separated.
        #[arg(long, value_delimiter = ',')]
        hazards: Vec<usize>,
        /// Utility floor of the constraint.
        #[arg(long)]
        b: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mixture-of-base-kernels model with an exactly linear structure.
    Linear {
        #[arg(long, default_value_t = 4)]
        states: usize,
        #[arg(long, default_value_t = 2)]
        actions: usize,
        #[arg(long, default_value_t = 3)]
        horizon: usize,
        #[arg(long, default_value_t = 3)]
        base_models: usize,
        /// Utility floor of the constraint.
        #[arg(long)]
        b: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON file carrying the same fields as the flags; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Evaluation backend: lstd or tabular.
    #[arg(long)]
    backend: Option<BackendKind>,
    /// Scored episodes per seed.
    #[arg(long)]
    episodes: Option<usize>,
    /// Number of seeds, run as 0..n.
    #[arg(long)]
    seeds: Option<usize>,
    /// Overrides the model's utility floor.
    #[arg(long)]
    b: Option<f64>,
    /// Bonus multiplier constant of the schedule.
    #[arg(long)]
    c1: Option<f64>,
    /// Confidence failure probability.
    #[arg(long)]
    p: Option<f64>,
    /// Output directory for ledgers, aggregate, plots, and the manifest.
    #[arg(long)]
    out: PathBuf,
}

fn resolve_run_spec(args: &RunArgs) -> Result<RunSpec> {
    let base: Option<RunSpec> = match &args.config {
        Some(path) => Some(serde_json::from_slice(&fs::read(path)?)?),
        None => None,
    };
    let model = args
        .model
        .clone()
        .or_else(|| base.as_ref().map(|b| b.model.clone()))
        .ok_or_else(|| Error::Config("missing --model (or config field 'model')".into()))?;
    let backend = args
        .backend
        .or_else(|| base.as_ref().map(|b| b.backend))
        .ok_or_else(|| Error::Config("missing --backend (or config field 'backend')".into()))?;
    let episodes = args
        .episodes
        .or_else(|| base.as_ref().map(|b| b.episodes))
        .ok_or_else(|| Error::Config("missing --episodes (or config field 'episodes')".into()))?;
    let seeds = args
        .seeds
        .or_else(|| base.as_ref().map(|b| b.seeds))
        .unwrap_or(1);
    if seeds == 0 {
        return Err(Error::Config("need at least one seed".into()));
    }
    Ok(RunSpec {
        model,
        backend,
        episodes,
        seeds,
        utility_floor: args.b.or_else(|| base.as_ref().and_then(|b| b.utility_floor)),
        c1: args
            .c1
            .or_else(|| base.as_ref().map(|b| b.c1))
            .unwrap_or(1.0),
        failure_prob: args
            .p
            .or_else(|| base.as_ref().map(|b| b.failure_prob))
            .unwrap_or(0.1),
    })
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(family) => {
            let (model, out) = match family {
                GenFamily::Tabular {
                    states,
                    actions,
                    horizon,
                    b,
                    seed,
                    out,
                } => (
                    envs::make_tabular_random(states, actions, horizon, b, seed)?,
                    out,
                ),
                GenFamily::Gridworld {
                    width,
                    height,
                    horizon,
                    hazards,
                    b,
                    seed,
                    out,
                } => (
                    envs::make_hazard_gridworld(width, height, horizon, &hazards, b, seed)?,
                    out,
                ),
                GenFamily::Linear {
                    states,
                    actions,
                    horizon,
                    base_models,
                    b,
                    seed,
                    out,
                } => {
                    let (model, _maps) =
                        envs::make_linear_mixture(states, actions, horizon, base_models, b, seed)?;
                    (model, out)
                }
            };
            model.save(&out)?;
            println!(
                "wrote {} ({} states, {} actions, horizon {}, floor {})",
                out.display(),
                model.num_states(),
                model.num_actions(),
                model.horizon(),
                model.utility_floor()
            );
            Ok(())
        }
        Command::SolveHindsight { model } => {
            let model = CmdpModel::load(&model)?;
            let solution = solve_hindsight(&model)?;
            println!("{}", serde_json::to_string_pretty(&solution)?);
            Ok(())
        }
        Command::Run(args) => {
            let spec = resolve_run_spec(&args)?;
            let manifest = harness::run_experiment(&spec, &args.out)?;
            if let Some(name) = &manifest.aggregate_file {
                let stats: AggregateStats =
                    serde_json::from_slice(&fs::read(args.out.join(name))?)?;
                println!(
                    "{} seeds x {} episodes in {:.1}s: final regret {:.4}, violation {:.4}, slope {}",
                    stats.seeds,
                    stats.episodes,
                    manifest.wall_clock_seconds,
                    stats.final_regret,
                    stats.final_violation,
                    stats
                        .regret_slope
                        .map_or("n/a".into(), |s| format!("{s:.3}")),
                );
            } else {
                println!(
                    "run finished in {:.1}s; artifacts in {}",
                    manifest.wall_clock_seconds,
                    args.out.display()
                );
            }
            Ok(())
        }
        Command::Report { dir } => {
            harness::report(&dir)?;
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
