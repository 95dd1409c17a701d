use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fedhet_core::config::build_population;
use fedhet_core::experiment::{matrix_to_csv, run_experiment, ExperimentOutcome};
use fedhet_core::partition::{partition_stats, split, PartitionSpec};
use fedhet_core::projection::{
    gathered_landscape, grid_to_csv, relative_position, trajectory_to_csv, GridSpec, ProjectionBasis, ProjectionMode,
    TrajectoryPoint,
};
use fedhet_core::sweep::{run_sweep, sweep_to_csv, SweepParameter};
use fedhet_core::verify::{run_suite, Suite};
use fedhet_core::{ExperimentConfig, ModelVector};

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_VERIFICATION: u8 = 3;

/// Federated optimization simulator with per-round distance diagnostics.
///
/// Exit codes: 0 ok, 1 runtime failure, 2 config error, 3 verification failure.
#[derive(Parser, Debug)]
#[command(name = "fedhet", version)]
struct Cli {
    /// Override the master seed of the config (or the suite seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config's output.dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for client runs and grid evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an experiment and write the trajectory log and summary.
    Run(RunArgs),
    /// Run a randomized property suite and print a pass/fail table.
    Verify(VerifyArgs),
    /// Run one experiment per parameter value and write a combined CSV.
    Sweep(SweepArgs),
    /// Split a label file across clients with Dirichlet proportions.
    Partition(PartitionArgs),
    /// Export the gathered loss landscape and the projected trajectory.
    Landscape(LandscapeArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the number of rounds.
    #[arg(long)]
    rounds: Option<usize>,
    /// Write the per-round A matrices as CSV.
    #[arg(long = "dump-a", alias = "dump-A")]
    dump_a: bool,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// fedavg, corrected, momentum, decoupling, bounds, lowerbound or all.
    suite: String,
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// alpha, participation, K, eta_l, nu or beta.
    #[arg(long)]
    param: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    values: Vec<f64>,
    /// Run each value with seeds 0..N instead of the config seed.
    #[arg(long)]
    seeds: Option<u64>,
}

#[derive(Args, Debug)]
struct PartitionArgs {
    /// JSON array of labels, or integers separated by whitespace or commas.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    clients: usize,
    #[arg(long)]
    alpha: f64,
    #[arg(long, default_value_t = 1)]
    min_threshold: usize,
}

#[derive(Args, Debug)]
struct LandscapeArgs {
    #[arg(long)]
    config: PathBuf,
    /// Grid points per axis.
    #[arg(long, default_value_t = 41)]
    grid: usize,
    /// Plane range `lo:hi` for both axes (default: around the optima).
    #[arg(long)]
    range: Option<String>,
}

/// A property or identity check failed.
#[derive(Debug)]
struct VerificationFailed(String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

/// A config problem detected in the front end.
#[derive(Debug)]
struct ConfigProblem(String);

impl std::fmt::Display for ConfigProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigProblem {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<VerificationFailed>() {
            return EXIT_VERIFICATION;
        }
        if cause.is::<ConfigProblem>() {
            return EXIT_CONFIG;
        }
        if let Some(fedhet_core::Error::Config { .. }) = cause.downcast_ref::<fedhet_core::Error>() {
            return EXIT_CONFIG;
        }
    }
    EXIT_RUNTIME
}

struct Ctx {
    seed: Option<u64>,
    out: Option<PathBuf>,
    quiet: bool,
}

impl Ctx {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn load(&self, path: &Path) -> Result<ExperimentConfig> {
        let mut cfg = match ExperimentConfig::load(path) {
            Ok(c) => c,
            Err(fedhet_core::Error::Io(e)) => {
                return Err(ConfigProblem(format!("cannot read config {}: {e}", path.display())).into())
            }
            Err(e) => return Err(anyhow::Error::new(e).context(format!("invalid config {}", path.display()))),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output.dir = o.clone();
        }
        Ok(cfg)
    }

    fn out_dir(&self, fallback: &Path) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| fallback.to_path_buf());
        fs::create_dir_all(&dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(dir)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    }
    let ctx = Ctx {
        seed: cli.seed,
        out: cli.out.clone(),
        quiet: cli.quiet,
    };
    let result = match &cli.command {
        Command::Run(a) => cmd_run(&ctx, a),
        Command::Verify(a) => cmd_verify(&ctx, a),
        Command::Sweep(a) => cmd_sweep(&ctx, a),
        Command::Partition(a) => cmd_partition(&ctx, a),
        Command::Landscape(a) => cmd_landscape(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn cmd_run(ctx: &Ctx, args: &RunArgs) -> Result<()> {
    let mut cfg = ctx.load(&args.config)?;
    if let Some(r) = args.rounds {
        cfg.rounds = r;
    }
    if args.dump_a {
        cfg.diagnostics.dump_a = true;
    }
    cfg.validate()?;
    let dir = ctx.out_dir(&cfg.output.dir)?;
    let log_path = dir.join(&cfg.output.log);
    let file = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut sink = BufWriter::new(file);
    let outcome = run_experiment(&cfg, &mut sink);
    sink.flush()?;
    let outcome = outcome.with_context(|| format!("experiment aborted; partial log in {}", log_path.display()))?;

    let summary_path = dir.join(&cfg.output.summary);
    fs::write(&summary_path, serde_json::to_string_pretty(&outcome.summary)?)?;
    if cfg.diagnostics.dump_a {
        write_a_matrices(&dir, &outcome)?;
    }
    let s = &outcome.summary;
    ctx.say(format!(
        "rounds {}  final distance {:.6e}  final objective {:.6e}",
        s.rounds, s.final_distance, s.final_objective
    ));
    ctx.say(format!(
        "region radius {}  entry round {}  dwell fraction {}",
        s.region_radius.map_or("-".into(), |r| format!("{r:.6e}")),
        s.region_entry_round.map_or("-".into(), |r| r.to_string()),
        s.dwell_fraction.map_or("-".into(), |r| format!("{r:.3}")),
    ));
    ctx.say(format!(
        "identity residual max {}  failures {}/{}",
        s.max_identity_residual.map_or("-".into(), |r| format!("{r:.3e}")),
        s.identity_failures,
        s.identity_checked_rounds
    ));
    ctx.say(format!("wrote {} and {}", log_path.display(), summary_path.display()));
    if s.identity_failures > 0 {
        return Err(VerificationFailed(format!(
            "{} rounds exceeded the identity tolerance {:e}",
            s.identity_failures, cfg.diagnostics.tolerance
        ))
        .into());
    }
    Ok(())
}

fn write_a_matrices(dir: &Path, outcome: &ExperimentOutcome) -> Result<()> {
    let a_dir = dir.join("a_matrices");
    fs::create_dir_all(&a_dir)?;
    for (r, a) in outcome.rounds.iter().zip(&outcome.a_matrices) {
        let ids: Vec<String> = r.clients.iter().map(|c| c.to_string()).collect();
        let body = format!("# clients={}\n{}", ids.join(" "), matrix_to_csv(a));
        fs::write(a_dir.join(format!("round_{:05}.csv", r.round)), body)?;
    }
    Ok(())
}

fn cmd_verify(ctx: &Ctx, args: &VerifyArgs) -> Result<()> {
    let suite: Suite = args.suite.parse()?;
    let rows = run_suite(suite, ctx.seed.unwrap_or(0), args.trials)?;
    for r in &rows {
        ctx.say(r.to_string());
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        bail!(VerificationFailed(format!("{failed} of {} checks failed", rows.len())));
    }
    Ok(())
}

fn cmd_sweep(ctx: &Ctx, args: &SweepArgs) -> Result<()> {
    let cfg = ctx.load(&args.config)?;
    let param: SweepParameter = args.param.parse()?;
    let seeds: Vec<u64> = match args.seeds {
        Some(0) => return Err(ConfigProblem("--seeds must be positive".into()).into()),
        Some(n) => (0..n).collect(),
        None => Vec::new(),
    };
    let rows = run_sweep(&cfg, param, &args.values, &seeds)?;
    let dir = ctx.out_dir(&cfg.output.dir)?;
    let path = dir.join(format!("sweep_{}.csv", param.name()));
    fs::write(&path, sweep_to_csv(&rows))?;
    ctx.say(format!("{} runs, wrote {}", rows.len(), path.display()));
    Ok(())
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| ConfigProblem(format!("cannot read {}: {e}", path.display())))?;
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        return serde_json::from_str(trimmed)
            .map_err(|e| ConfigProblem(format!("{}: {e}", path.display())).into());
    }
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| ConfigProblem(format!("{}: `{t}` is not a class label", path.display())).into())
        })
        .collect()
}

fn cmd_partition(ctx: &Ctx, args: &PartitionArgs) -> Result<()> {
    let labels = read_labels(&args.labels)?;
    let spec = PartitionSpec {
        num_clients: args.clients,
        alpha: args.alpha,
        min_threshold: args.min_threshold,
        seed: ctx.seed.unwrap_or(0),
    };
    let result = split(&labels, &spec)?;
    let stats = partition_stats(&result, &labels);
    let dir = ctx.out_dir(Path::new("out"))?;
    fs::write(dir.join("partition.json"), result.to_json()?)?;
    fs::write(dir.join("class_counts.csv"), result.class_counts_csv())?;
    fs::write(dir.join("partition_stats.json"), serde_json::to_string_pretty(&stats)?)?;
    ctx.say(format!(
        "{} samples over {} clients, sizes {:?}",
        stats.total,
        result.num_clients(),
        stats.sizes
    ));
    ctx.say(format!(
        "mean label entropy {:.4}  mean pairwise total variation {:.4}",
        stats.mean_label_entropy, stats.mean_pairwise_tv
    ));
    ctx.say(format!("wrote partition.json, class_counts.csv and partition_stats.json to {}", dir.display()));
    Ok(())
}

fn parse_range(s: &str) -> Result<(f64, f64)> {
    let bad = || ConfigProblem(format!("--range expects lo:hi, got `{s}`"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    Ok((lo, hi))
}

/// Symmetric padding around the extent of `coords`.
fn default_range(coords: &[f64]) -> (f64, f64) {
    let lo = coords.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = coords.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pad = (0.5 * (hi - lo)).max(1e-3);
    (lo - pad, hi + pad)
}

fn cmd_landscape(ctx: &Ctx, args: &LandscapeArgs) -> Result<()> {
    let cfg = ctx.load(&args.config)?;
    cfg.validate()?;
    let pop = build_population(&cfg.population, cfg.seed)?;
    let optima = pop.optima()?;
    let basis = ProjectionBasis::sample(pop.dim(), cfg.seed)?;
    let positions: Vec<(f64, f64)> = optima
        .iter()
        .map(|o| relative_position(o, &basis, ProjectionMode::Normalized))
        .collect::<fedhet_core::Result<_>>()?;

    let outcome = run_experiment(&cfg, &mut std::io::sink())?;
    let mut points = Vec::with_capacity(outcome.rounds.len() + 1);
    let initial = ModelVector::from_vec(outcome.initial.x.clone());
    let (x0, y0) = relative_position(&initial, &basis, ProjectionMode::Normalized)?;
    points.push(TrajectoryPoint {
        round: 0,
        x: x0,
        y: y0,
        distance: outcome.initial.distance,
        in_region: outcome.initial.in_region.unwrap_or(false),
    });
    for r in &outcome.rounds {
        let (x, y) = relative_position(&ModelVector::from_vec(r.x.clone()), &basis, ProjectionMode::Normalized)?;
        points.push(TrajectoryPoint {
            round: r.round + 1,
            x,
            y,
            distance: r.distance,
            in_region: r.in_region.unwrap_or(false),
        });
    }

    let (x_range, y_range) = match &args.range {
        Some(s) => {
            let r = parse_range(s)?;
            (r, r)
        }
        None => {
            let xs: Vec<f64> = positions.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = positions.iter().map(|p| p.1).collect();
            (default_range(&xs), default_range(&ys))
        }
    };
    let grid = GridSpec {
        x_range,
        y_range,
        resolution: args.grid,
    };
    let values = gathered_landscape(&pop, &basis, &grid, None)?;

    let dir = ctx.out_dir(&cfg.output.dir)?;
    fs::write(dir.join("landscape.csv"), grid_to_csv(&values, &grid))?;
    fs::write(dir.join("trajectory.csv"), trajectory_to_csv(&points))?;
    let mut optima_csv = String::from("client,x,y\n");
    for (i, (x, y)) in positions.iter().enumerate() {
        optima_csv.push_str(&format!("{i},{x:e},{y:e}\n"));
    }
    fs::write(dir.join("optima.csv"), optima_csv)?;
    ctx.say(format!(
        "{}x{} grid, {} trajectory points, wrote landscape.csv, trajectory.csv and optima.csv to {}",
        grid.resolution,
        grid.resolution,
        points.len(),
        dir.display()
    ));
    Ok(())
}
