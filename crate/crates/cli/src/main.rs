use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use atomic_routing::design::{design_loop, format_float, verify_design, DesignConfig, DesignError, DesignOutcome};
use atomic_routing::game::{nash_gap, AtomicRoutingGame, CostParams, GameError};
use atomic_routing::io::{game_to_json, load_game, IoError};
use atomic_routing::scenario::Scenario;
use atomic_routing::sensitivity::{links_along, path_to_target, tracking_objective, SensitivityError};
use atomic_routing::smooth_eq::{
    homotopy_solve, solve_nls, EquilibriumSolution, HomotopySchedule, SmoothEqError, SmoothEqSettings,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde_json::json;

#[derive(Parser)]
#[command(name = "atomic-routing", version, about = "Equilibria and cost design for atomic routing games")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the regularized equilibrium and write equilibrium.json.
    Solve(SolveArgs),
    /// Run the cost design loop and write trace.csv and designed_game.json.
    Design(DesignArgs),
    /// One design run per parameter value; writes sweep.csv.
    Sweep(SweepArgs),
    /// Nash gap of a stored flow, or of the small-lambda equilibrium.
    Gap(GapArgs),
}

#[derive(Args, Clone)]
#[group(required = true, multiple = false)]
struct Source {
    /// Built-in scenario: two_player_3x3 or four_player_5x5.
    #[arg(long)]
    scenario: Option<Scenario>,
    /// Game JSON file.
    #[arg(long)]
    game: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Common {
    #[command(flatten)]
    source: Source,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Recorded in reports; the pipeline itself is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 0.01)]
    lambda: f64,
    /// Continue from lambda = 1 down to 1e-3 instead of a single solve.
    #[arg(long)]
    homotopy: bool,
    /// Levenberg-Marquardt iteration cap.
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    /// Initial cost for built-in scenarios.
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Frobenius radius; defaults to the game file's value or 0.5.
    #[arg(long)]
    rho: Option<f64>,
}

#[derive(Args, Clone)]
struct DesignParams {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 0.005)]
    alpha: f64,
    #[arg(long, default_value_t = 0.01)]
    lambda: f64,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    #[arg(long, default_value_t = 0.01)]
    eps: f64,
    /// Frobenius radius; defaults to the game file's value or 0.5.
    #[arg(long)]
    rho: Option<f64>,
    /// Outer iteration cap.
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    /// Desired path of one player as comma-separated 1-based nodes; repeat
    /// once per player in player order. Defaults to the scenario's paths.
    #[arg(long = "path", value_delimiter = ';')]
    paths: Vec<String>,
}

#[derive(Args)]
struct DesignArgs {
    #[command(flatten)]
    params: DesignParams,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParam {
    Lambda,
    Rho,
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Rho => "rho",
        }
    }
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    params: DesignParams,
    #[arg(long, value_enum)]
    param: SweepParam,
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    values: Vec<f64>,
}

#[derive(Args)]
struct GapArgs {
    #[command(flatten)]
    common: Common,
    /// equilibrium.json whose `x` is evaluated; without it the small-lambda
    /// equilibrium is computed first.
    #[arg(long)]
    flow: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    #[arg(long)]
    rho: Option<f64>,
}

enum Failure {
    Validation(String),
    Numerical(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Numerical(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Failure::Validation(e.to_string())
    }
}

impl From<GameError> for Failure {
    fn from(e: GameError) -> Self {
        Failure::Validation(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Validation(format!("i/o error: {e}"))
    }
}

impl From<SmoothEqError> for Failure {
    fn from(e: SmoothEqError) -> Self {
        match e {
            SmoothEqError::NotConverged { .. } | SmoothEqError::Overflow { .. } => Failure::Numerical(e.to_string()),
            other => Failure::Validation(other.to_string()),
        }
    }
}

impl From<SensitivityError> for Failure {
    fn from(e: SensitivityError) -> Self {
        match e {
            SensitivityError::Solver(s) => s.into(),
            SensitivityError::SingularJacobian { .. } => Failure::Numerical(e.to_string()),
            other => Failure::Validation(other.to_string()),
        }
    }
}

impl From<DesignError> for Failure {
    fn from(e: DesignError) -> Self {
        match e {
            DesignError::Inner { .. } | DesignError::Gradient { .. } => Failure::Numerical(e.to_string()),
            DesignError::Verify(s) => s.into(),
            other => Failure::Validation(other.to_string()),
        }
    }
}

struct Loaded {
    game: AtomicRoutingGame,
    scenario: Option<Scenario>,
}

fn load(source: &Source, delta: f64, rho: Option<f64>) -> Result<Loaded, Failure> {
    let (game, scenario) = match (&source.scenario, &source.game) {
        (Some(sc), None) => (sc.build(delta, rho.unwrap_or(0.5))?.game, Some(*sc)),
        (None, Some(path)) => (load_game(path)?, None),
        _ => return Err(Failure::Validation("exactly one of --scenario and --game is required".into())),
    };
    let game = match rho {
        Some(r) => game.with_rho(r)?,
        None => game,
    };
    Ok(Loaded { game, scenario })
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn vec_json(v: &DVector<f64>) -> serde_json::Value {
    json!(v.iter().copied().collect::<Vec<f64>>())
}

fn solution_json(sol: &EquilibriumSolution, gap: Option<f64>) -> serde_json::Value {
    json!({
        "lambda": sol.lambda,
        "x": vec_json(&sol.x),
        "v": vec_json(&sol.v),
        "residual": sol.residual_norm,
        "iterations": sol.iterations,
        "gap": gap,
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).expect("json value serializes");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn cmd_solve(args: &SolveArgs) -> Result<(), Failure> {
    let loaded = load(&args.common.source, args.delta, args.rho)?;
    let game = loaded.game;
    let settings = SmoothEqSettings {
        max_iters: args.max_iters,
        ..SmoothEqSettings::with_lambda(args.lambda)
    };
    let sol = if args.homotopy {
        homotopy_solve(&game, &HomotopySchedule::default(), &settings)?
    } else {
        solve_nls(&game, &settings, None)?
    };
    // Gap needs a conservation-feasible flow; a loose solve may not be.
    let gap = nash_gap(&game, &sol.x).ok();
    ensure_dir(&args.common.out)?;
    write_json(&args.common.out.join("equilibrium.json"), &solution_json(&sol, gap))?;
    println!("lambda {}", sol.lambda);
    println!("residual {:e}", sol.residual_norm);
    println!("iterations {}", sol.iterations);
    match gap {
        Some(g) => println!("gap {g:e}"),
        None => println!("gap unavailable"),
    }
    Ok(())
}

fn parse_paths(game: &AtomicRoutingGame, raw: &[String]) -> Result<Vec<Vec<usize>>, Failure> {
    raw.iter()
        .map(|p| {
            let nodes = p
                .split(',')
                .map(|t| {
                    let n: usize = t
                        .trim()
                        .parse()
                        .map_err(|_| Failure::Validation(format!("bad node `{t}` in path `{p}`")))?;
                    n.checked_sub(1)
                        .ok_or_else(|| Failure::Validation(format!("path `{p}` uses 1-based nodes")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            links_along(game, &nodes).ok_or_else(|| Failure::Validation(format!("path `{p}` does not follow links")))
        })
        .collect()
}

struct DesignRun {
    game: AtomicRoutingGame,
    target: DVector<f64>,
    config: DesignConfig,
}

fn prepare_design(params: &DesignParams) -> Result<DesignRun, Failure> {
    let loaded = load(&params.common.source, params.delta, params.rho)?;
    let game = loaded.game;
    let links = if !params.paths.is_empty() {
        parse_paths(&game, &params.paths)?
    } else if let Some(sc) = loaded.scenario {
        sc.build(params.delta, game.rho())?.desired_links()
    } else {
        return Err(Failure::Validation("--path is required with --game".into()));
    };
    let target = path_to_target(&game, &links)?;
    let config = DesignConfig {
        alpha: params.alpha,
        lambda: params.lambda,
        delta: params.delta,
        epsilon: params.eps,
        rho: game.rho(),
        max_outer_iters: params.max_iters,
        ..DesignConfig::default()
    };
    config.validate()?;
    Ok(DesignRun { game, target, config })
}

struct DesignReport {
    outcome: DesignOutcome,
    designed: AtomicRoutingGame,
    psi: f64,
    gap: f64,
    path_match: bool,
}

fn run_design(run: &DesignRun) -> Result<DesignReport, Failure> {
    let objective = tracking_objective(&run.game, run.target.clone())?;
    let outcome = design_loop(&run.game, &objective, &run.config)?;
    let designed = run
        .game
        .with_costs(CostParams::new(outcome.b.clone(), outcome.c.clone(), run.game.link_count())?)?
        .with_rho(run.config.rho)?;
    let check = verify_design(&designed, &objective, &run.target, &run.config.reference)?;
    Ok(DesignReport {
        outcome,
        designed,
        psi: check.psi,
        gap: check.nash_gap,
        path_match: check.path_match,
    })
}

fn write_design(dir: &Path, report: &DesignReport, seed: u64, seconds: f64) -> Result<(), Failure> {
    ensure_dir(dir)?;
    let trace = dir.join("trace.csv");
    fs::write(&trace, report.outcome.trace.to_csv())?;
    let mut game_text = game_to_json(&report.designed);
    game_text.push('\n');
    fs::write(dir.join("designed_game.json"), game_text)?;
    let c = &report.outcome.c;
    write_json(
        &dir.join("report.json"),
        &json!({
            "b": vec_json(&report.outcome.b),
            "C": c.row_iter().map(|r| r.iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>(),
            "psi_bar": report.psi,
            "nash_gap": report.gap,
            "path_match": report.path_match,
            "iterations": report.outcome.trace.len(),
            "converged": report.outcome.converged,
            "wall_time_s": seconds,
            "trace": trace.display().to_string(),
            "seed": seed,
        }),
    )
}

fn cmd_design(args: &DesignArgs) -> Result<(), Failure> {
    let params = &args.params;
    let run = prepare_design(params)?;
    let start = Instant::now();
    let report = run_design(&run)?;
    write_design(&params.common.out, &report, params.common.seed, start.elapsed().as_secs_f64())?;
    println!("iterations {}", report.outcome.trace.len());
    println!("psi_bar {}", report.psi);
    println!("nash_gap {:e}", report.gap);
    println!("path_match {}", report.path_match);
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), Failure> {
    let params = &args.params;
    let runs = args
        .values
        .iter()
        .map(|&value| {
            let mut p = params.clone();
            match args.param {
                SweepParam::Lambda => p.lambda = value,
                SweepParam::Rho => p.rho = Some(value),
            }
            p.common.out = params.common.out.join(format!("{}_{}", args.param.name(), value));
            prepare_design(&p).map(|run| (p, run))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let results: Vec<Result<f64, Failure>> = std::thread::scope(|scope| {
        let handles: Vec<_> = runs
            .iter()
            .map(|(p, run)| {
                scope.spawn(move || {
                    let start = Instant::now();
                    let report = run_design(run)?;
                    write_design(&p.common.out, &report, p.common.seed, start.elapsed().as_secs_f64())?;
                    Ok(report.outcome.trace.last().map_or(f64::NAN, |r| r.psi_bar))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });

    ensure_dir(&params.common.out)?;
    let mut csv = String::from("param,psi_final\n");
    let mut failures = 0;
    for (value, result) in args.values.iter().zip(&results) {
        match result {
            Ok(psi) => csv.push_str(&format!("{value},{}\n", format_float(*psi))),
            Err(e) => {
                failures += 1;
                eprintln!("{} = {value}: {}", args.param.name(), e.message());
                csv.push_str(&format!("{value},NaN\n"));
            }
        }
    }
    fs::write(params.common.out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    if failures == results.len() {
        return Err(Failure::Numerical("every sweep run failed".into()));
    }
    Ok(())
}

fn cmd_gap(args: &GapArgs) -> Result<(), Failure> {
    let loaded = load(&args.common.source, args.delta, args.rho)?;
    let game = loaded.game;
    let (x, lambda) = match &args.flow {
        Some(path) => {
            let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)
                .map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
            let x: Vec<f64> = serde_json::from_value(value["x"].clone())
                .map_err(|e| Failure::Validation(format!("{}: field x: {e}", path.display())))?;
            (DVector::from_vec(x), value["lambda"].as_f64())
        }
        None => {
            let sol = homotopy_solve(&game, &HomotopySchedule::default(), &SmoothEqSettings::default())?;
            (sol.x, Some(sol.lambda))
        }
    };
    let gap = nash_gap(&game, &x)?;
    ensure_dir(&args.common.out)?;
    write_json(&args.common.out.join("gap.json"), &json!({ "gap": gap, "lambda": lambda }))?;
    println!("gap {gap:e}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Design(a) => cmd_design(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Gap(a) => cmd_gap(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}
