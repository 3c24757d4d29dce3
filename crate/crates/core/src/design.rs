//! Cost design by projected gradient steps on `(b, C)`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::game::{marginal_cost, AtomicRoutingGame, CostParams, GameError};
use crate::graph::{graph_rank_check, shortest_path_cost, GraphError, LinkWeights};
use crate::numerics::{eig_sym, ToleranceConfig};
use crate::sensitivity::{implicit_gradients, DesignObjective, GradientMode, SensitivityError};
use crate::smooth_eq::{
    initial_point, reference_equilibrium, solve_with_fallback, HomotopySchedule, ReferenceEquilibrium,
    SmoothEqError, SmoothEqSettings,
};

pub const DYKSTRA_TOL: f64 = 1e-10;
pub const DYKSTRA_MAX_SWEEPS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("invalid design config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error("incidence matrix of the graph is rank deficient")]
    RankDeficientGraph,
    #[error("no strictly positive starting flow: {0}")]
    InfeasibleStart(GraphError),
    #[error("iteration {iteration}: {source}")]
    Inner {
        iteration: usize,
        #[source]
        source: SmoothEqError,
    },
    #[error("iteration {iteration}: {source}")]
    Gradient {
        iteration: usize,
        #[source]
        source: SensitivityError,
    },
    #[error(transparent)]
    Verify(#[from] SmoothEqError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub rho: f64,
    pub max_outer_iters: usize,
    pub gradient_mode: GradientMode,
    /// Schedule for the reference equilibrium logged as `psi_bar`.
    pub reference: HomotopySchedule,
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self {
            alpha: 0.005,
            lambda: 0.01,
            delta: 0.1,
            epsilon: 0.01,
            rho: 0.5,
            max_outer_iters: 100,
            gradient_mode: GradientMode::default(),
            reference: HomotopySchedule::default(),
        }
    }
}

impl DesignConfig {
    pub fn validate(&self) -> Result<(), DesignError> {
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(DesignError::InvalidConfig(format!("{name} must be finite and nonnegative, got {v}")))
            }
        };
        nonneg("alpha", self.alpha)?;
        nonneg("delta", self.delta)?;
        nonneg("epsilon", self.epsilon)?;
        nonneg("rho", self.rho)?;
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(DesignError::InvalidConfig(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.max_outer_iters == 0 {
            return Err(DesignError::InvalidConfig("max_outer_iters must be positive".into()));
        }
        self.reference
            .validate()
            .map_err(|e| DesignError::InvalidConfig(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    /// Objective at the reference (small-`lambda`) equilibrium.
    pub psi_bar: f64,
    /// Objective at the inner solution used for the gradient.
    pub psi_lambda: f64,
    pub db_norm: f64,
    pub dc_norm: f64,
    pub residual: f64,
    /// Nash gap of the reference equilibrium.
    pub gap: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DesignTrace {
    pub records: Vec<TraceRecord>,
}

impl DesignTrace {
    pub const CSV_HEADER: &'static str = "iter,psi_bar,psi_lambda,db_norm,dC_norm,residual,gap";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = write!(out, "{}", r.iter);
            for v in [r.psi_bar, r.psi_lambda, r.db_norm, r.dc_norm, r.residual, r.gap] {
                out.push(',');
                out.push_str(&format_float(v));
            }
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn first(&self) -> Option<&TraceRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }
}

/// Shortest round-trip decimal, switching to exponent form for very small or
/// very large magnitudes.
pub fn format_float(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && a.is_finite() && !(1e-4..1e15).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

/// Clamp to `[0, delta]`.
pub fn project_b(b: &DVector<f64>, delta: f64) -> DVector<f64> {
    b.map(|v| v.clamp(0.0, delta))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    pub matrix: DMatrix<f64>,
    pub sweeps: usize,
    pub converged: bool,
}

fn symmetrize_diagonal_blocks(c: &mut DMatrix<f64>, block: usize, players: usize) {
    for i in 0..players {
        let mut blk = c.view_mut((i * block, i * block), (block, block));
        let sym = (&blk + blk.transpose()) * 0.5;
        blk.copy_from(&sym);
    }
}

fn project_psd_symmetric_part(c: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (c + c.transpose()) * 0.5;
    let skew = (c - c.transpose()) * 0.5;
    let loose = ToleranceConfig {
        eig_tol: f64::INFINITY,
        ..ToleranceConfig::default()
    };
    let eig = eig_sym(&sym, &loose).expect("square symmetric input");
    eig.recompose_with(|l| l.max(0.0)) + skew
}

fn project_ball(c: &DMatrix<f64>, rho: f64) -> DMatrix<f64> {
    let norm = c.norm();
    if norm > rho {
        c * (rho / norm)
    } else {
        c.clone()
    }
}

/// Dykstra's alternating projections with an explicit sweep budget.
pub fn project_d_with_budget(
    c: &DMatrix<f64>,
    rho: f64,
    block: usize,
    players: usize,
    max_sweeps: usize,
    tol: f64,
) -> ProjectionResult {
    assert!(rho >= 0.0, "rho must be nonnegative");
    assert_eq!(c.shape(), (block * players, block * players), "C must be pm x pm");
    let zeros = || DMatrix::<f64>::zeros(c.nrows(), c.ncols());
    let mut x = c.clone();
    let (mut p_sym, mut p_psd, mut p_ball) = (zeros(), zeros(), zeros());
    for sweep in 1..=max_sweeps {
        let start = x.clone();

        let y = &x + &p_sym;
        let mut next = y.clone();
        symmetrize_diagonal_blocks(&mut next, block, players);
        p_sym = y - &next;
        x = next;

        let y = &x + &p_psd;
        let next = project_psd_symmetric_part(&y);
        p_psd = y - &next;
        x = next;

        let y = &x + &p_ball;
        let next = project_ball(&y, rho);
        p_ball = y - &next;
        x = next;

        if (&x - &start).norm() <= tol {
            return ProjectionResult {
                matrix: x,
                sweeps: sweep,
                converged: true,
            };
        }
    }
    ProjectionResult {
        matrix: x,
        sweeps: max_sweeps,
        converged: false,
    }
}

/// Nearest matrix with positive semidefinite symmetric part, symmetric
/// diagonal blocks and Frobenius norm at most `rho`.
pub fn project_d(c: &DMatrix<f64>, rho: f64, block: usize, players: usize) -> ProjectionResult {
    project_d_with_budget(c, rho, block, players, DYKSTRA_MAX_SWEEPS, DYKSTRA_TOL)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignOutcome {
    pub b: DVector<f64>,
    pub c: DMatrix<f64>,
    pub trace: DesignTrace,
    /// Whether the step-size test fired before the iteration cap.
    pub converged: bool,
}

impl DesignOutcome {
    pub fn costs(&self, game: &AtomicRoutingGame) -> Result<CostParams, GameError> {
        CostParams::new(self.b.clone(), self.c.clone(), game.link_count())
    }
}

/// Parameters evaluated in one outer iteration and the step taken from them.
#[derive(Debug, Clone, Copy)]
pub struct DesignIterate<'a> {
    pub b: &'a DVector<f64>,
    pub c: &'a DMatrix<f64>,
    pub b_next: &'a DVector<f64>,
    pub c_next: &'a DMatrix<f64>,
    pub record: &'a TraceRecord,
}

/// Projected gradient design starting from `b = delta * 1`, `C = 0`.
///
/// Each iteration solves the smooth equilibrium at `config.lambda`
/// (warm-started), steps along the implicit gradients and projects. The loop
/// body always runs at least once and stops once both parameter changes are
/// below `epsilon`. The returned `(b, C)` are the parameters evaluated in the
/// final iteration.
pub fn design_loop(
    template: &AtomicRoutingGame,
    objective: &dyn DesignObjective,
    config: &DesignConfig,
) -> Result<DesignOutcome, DesignError> {
    design_loop_observed(template, objective, config, |_| {})
}

/// [`design_loop`] calling `observe` after every outer iteration.
pub fn design_loop_observed(
    template: &AtomicRoutingGame,
    objective: &dyn DesignObjective,
    config: &DesignConfig,
    mut observe: impl FnMut(&DesignIterate<'_>),
) -> Result<DesignOutcome, DesignError> {
    config.validate()?;
    if !graph_rank_check(template.graph()) {
        return Err(DesignError::RankDeficientGraph);
    }
    let pm = template.flow_dim();
    if objective.dim() != pm {
        return Err(GameError::Dimension {
            what: "objective",
            expected: pm,
            got: objective.dim(),
        }
        .into());
    }
    let m = template.link_count();
    let p = template.player_count();
    let inner = SmoothEqSettings::with_lambda(config.lambda);
    initial_point(template, inner.interior_eps).map_err(|e| match e {
        SmoothEqError::Game(GameError::Graph(g)) => DesignError::InfeasibleStart(g),
        other => DesignError::Inner {
            iteration: 0,
            source: other,
        },
    })?;

    let mut b = DVector::from_element(pm, config.delta);
    let mut c = DMatrix::zeros(pm, pm);
    let mut warm: Option<(DVector<f64>, DVector<f64>)> = None;
    let mut reference_warm: Option<(DVector<f64>, DVector<f64>)> = None;
    let mut trace = DesignTrace::default();
    let mut converged = false;

    for iteration in 1..=config.max_outer_iters {
        let game = template
            .with_costs(CostParams::new(b.clone(), c.clone(), m)?)?
            .with_rho(config.rho)?;
        let inner_err = |source| DesignError::Inner { iteration, source };
        let sol = solve_with_fallback(&game, &inner, warm.as_ref().map(|(x, v)| (x, v))).map_err(inner_err)?;
        let reference = reference_equilibrium(
            &game,
            &config.reference,
            &inner,
            reference_warm.as_ref().map(|(x, v)| (x, v)),
        )
        .map_err(inner_err)?;

        let grads = implicit_gradients(&game, &sol, objective, config.gradient_mode)
            .map_err(|source| DesignError::Gradient { iteration, source })?;
        let b_next = project_b(&(&b - &grads.grad_b * config.alpha), config.delta);
        let c_next = project_d(&(&c - grads.grad_c() * config.alpha), config.rho, m, p).matrix;
        let db_norm = (&b - &b_next).norm();
        let dc_norm = (&c - &c_next).norm();

        trace.records.push(TraceRecord {
            iter: iteration,
            psi_bar: objective.evaluate(&reference.solution.x),
            psi_lambda: objective.evaluate(&sol.x),
            db_norm,
            dc_norm,
            residual: sol.residual_norm,
            gap: reference.gap,
        });
        observe(&DesignIterate {
            b: &b,
            c: &c,
            b_next: &b_next,
            c_next: &c_next,
            record: trace.records.last().expect("just pushed"),
        });
        warm = Some((sol.x, sol.v));
        reference_warm = Some((reference.solution.x, reference.solution.v));

        if db_norm.max(dc_norm) < config.epsilon {
            converged = true;
            break;
        }
        if iteration < config.max_outer_iters {
            b = b_next;
            c = c_next;
        }
    }
    Ok(DesignOutcome { b, c, trace, converged })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignVerification {
    pub psi: f64,
    pub nash_gap: f64,
    pub path_match: bool,
    pub reference: ReferenceEquilibrium,
}

/// Link indices where a player's part of `target` is set.
fn support(target: &DVector<f64>, offset: usize, m: usize) -> Vec<usize> {
    (0..m).filter(|&k| target[offset + k] > 0.5).collect()
}

/// Evaluates the objective at the reference equilibrium and checks that every
/// player's cheapest path under its marginal costs is the target path.
pub fn verify_design(
    game: &AtomicRoutingGame,
    objective: &dyn DesignObjective,
    target: &DVector<f64>,
    schedule: &HomotopySchedule,
) -> Result<DesignVerification, DesignError> {
    let reference = reference_equilibrium(game, schedule, &SmoothEqSettings::default(), None)?;
    let x = &reference.solution.x;
    let m = game.link_count();
    let mut path_match = true;
    for (i, pl) in game.players().iter().enumerate() {
        let w = LinkWeights::new(game.graph(), marginal_cost(game, x, i)?).map_err(GameError::from)?;
        let best = shortest_path_cost(game.graph(), &w, pl.origin, pl.destination).map_err(GameError::from)?;
        let mut links = best.links.clone();
        links.sort_unstable();
        path_match &= links == support(target, i * m, m);
    }
    Ok(DesignVerification {
        psi: objective.evaluate(x),
        nash_gap: reference.gap,
        path_match,
        reference,
    })
}
