//! Entropy-regularized equilibria.
//!
//! With an entropy term of weight `lambda` on every player's objective, the
//! equilibrium conditions become the square smooth system
//!
//! ```text
//! F(x, v) = [ x - exp((E^T v - b - C x) / lambda - 1) ]
//!           [ s - E x                                 ]
//! ```
//!
//! which is solved by Levenberg-Marquardt, optionally continued along a
//! decreasing sequence of `lambda`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::game::{membership_d, nash_gap, AtomicRoutingGame, FlowProfile, GameError};
use crate::graph::{graph_rank_check, interior_flow, GraphError};
use crate::numerics::DampedNormalEquations;

/// Exponent entries above this are clamped.
pub const EXPONENT_CLAMP: f64 = 50.0;
/// Exponent entries above this are reported as overflow.
pub const EXPONENT_LIMIT: f64 = 200.0;
/// Tolerance used when checking `C` against the designable set before a solve.
pub const MEMBERSHIP_TOL: f64 = 1e-8;
/// Gap below which a small-`lambda` solution is accepted as an equilibrium.
pub const CERTIFICATE_GAP: f64 = 1e-2;

const MAX_DAMPING: f64 = 1e16;
const MIN_DAMPING: f64 = 1e-20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmoothEqError {
    #[error(transparent)]
    Game(#[from] GameError),
    #[error("invalid settings: {0}")]
    InvalidSettings(String),
    #[error("incidence matrix of the graph is rank deficient")]
    RankDeficientGraph,
    #[error("interaction matrix is outside the designable set (rho = {rho})")]
    OutsideDesignSet { rho: f64 },
    #[error("warm start has wrong dimensions")]
    WarmStartDimension,
    #[error("exponent {exponent:.3e} exceeds {EXPONENT_LIMIT} at lambda = {lambda}")]
    Overflow { lambda: f64, exponent: f64 },
    #[error("no convergence at lambda = {lambda}: residual {:.3e} after {} iterations", best.residual_norm, best.iterations)]
    NotConverged {
        lambda: f64,
        best: Box<EquilibriumSolution>,
    },
}

impl From<GraphError> for SmoothEqError {
    fn from(e: GraphError) -> Self {
        SmoothEqError::Game(GameError::Graph(e))
    }
}

impl SmoothEqError {
    /// The `lambda` at which a numerical failure happened, if any.
    pub fn lambda(&self) -> Option<f64> {
        match self {
            SmoothEqError::Overflow { lambda, .. } | SmoothEqError::NotConverged { lambda, .. } => Some(*lambda),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothEqSettings {
    pub lambda: f64,
    pub residual_tol: f64,
    pub max_iters: usize,
    pub lm_damping_init: f64,
    pub interior_eps: f64,
}

impl Default for SmoothEqSettings {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            residual_tol: 1e-10,
            max_iters: 500,
            lm_damping_init: 1e-3,
            interior_eps: 0.1,
        }
    }
}

impl SmoothEqSettings {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SmoothEqError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(SmoothEqError::InvalidSettings(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lambda", self.lambda)?;
        positive("residual_tol", self.residual_tol)?;
        positive("lm_damping_init", self.lm_damping_init)?;
        positive("interior_eps", self.interior_eps)?;
        if self.max_iters == 0 {
            return Err(SmoothEqError::InvalidSettings("max_iters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumSolution {
    pub x: FlowProfile,
    pub v: DVector<f64>,
    pub residual_norm: f64,
    pub lambda: f64,
    pub iterations: usize,
}

/// One accepted or final Levenberg-Marquardt iterate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub residual: f64,
    pub damping: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomotopySchedule {
    pub lambda_start: f64,
    pub decay: f64,
    pub lambda_min: f64,
}

impl Default for HomotopySchedule {
    fn default() -> Self {
        Self {
            lambda_start: 1.0,
            decay: 0.5,
            lambda_min: 1e-3,
        }
    }
}

impl HomotopySchedule {
    pub fn validate(&self) -> Result<(), SmoothEqError> {
        let ok = self.lambda_min > 0.0
            && self.lambda_min.is_finite()
            && self.lambda_start.is_finite()
            && self.lambda_min <= self.lambda_start
            && self.decay > 0.0
            && self.decay < 1.0;
        if ok {
            Ok(())
        } else {
            Err(SmoothEqError::InvalidSettings(format!("invalid homotopy schedule {self:?}")))
        }
    }

    /// `lambda_start, lambda_start * decay, ...` up to and including the first
    /// value `<= lambda_min`.
    pub fn levels(&self) -> Vec<f64> {
        let mut out = vec![self.lambda_start];
        let mut lambda = self.lambda_start;
        while lambda > self.lambda_min {
            lambda *= self.decay;
            out.push(lambda);
        }
        out
    }
}

/// Exponential term of the smooth system together with a mask that is zero
/// where the exponent was clamped.
struct Exponential {
    values: DVector<f64>,
    active: DVector<f64>,
}

fn exponent(game: &AtomicRoutingGame, x: &DVector<f64>, v: &DVector<f64>, lambda: f64) -> DVector<f64> {
    let costs = game.costs();
    (game.block_incidence().tr_mul(v) - costs.b() - costs.c() * x) / lambda - DVector::from_element(x.len(), 1.0)
}

fn max_entry(z: &DVector<f64>) -> f64 {
    z.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn exponential(
    game: &AtomicRoutingGame,
    x: &DVector<f64>,
    v: &DVector<f64>,
    lambda: f64,
) -> Result<Exponential, SmoothEqError> {
    let z = exponent(game, x, v, lambda);
    let top = max_entry(&z);
    if !(top <= EXPONENT_LIMIT) {
        return Err(SmoothEqError::Overflow { lambda, exponent: top });
    }
    let values = z.map(|e| e.min(EXPONENT_CLAMP).exp());
    let active = z.map(|e| if e > EXPONENT_CLAMP { 0.0 } else { 1.0 });
    Ok(Exponential { values, active })
}

fn check_dims(game: &AtomicRoutingGame, x: &DVector<f64>, v: &DVector<f64>) -> Result<(), SmoothEqError> {
    if x.len() != game.flow_dim() {
        return Err(GameError::Dimension {
            what: "flow",
            expected: game.flow_dim(),
            got: x.len(),
        }
        .into());
    }
    if v.len() != game.multiplier_dim() {
        return Err(GameError::Dimension {
            what: "multipliers",
            expected: game.multiplier_dim(),
            got: v.len(),
        }
        .into());
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<(), SmoothEqError> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(SmoothEqError::InvalidSettings(format!("lambda must be positive, got {lambda}")))
    }
}

/// Diagonal of the exponential term, `exp((E^T v - b - C x) / lambda - 1)`.
pub fn exponential_term(
    game: &AtomicRoutingGame,
    x: &FlowProfile,
    v: &DVector<f64>,
    lambda: f64,
) -> Result<DVector<f64>, SmoothEqError> {
    check_lambda(lambda)?;
    check_dims(game, x, v)?;
    Ok(exponential(game, x, v, lambda)?.values)
}

fn stack(top: DVector<f64>, bottom: DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(top.len() + bottom.len());
    out.rows_mut(0, top.len()).copy_from(&top);
    out.rows_mut(top.len(), bottom.len()).copy_from(&bottom);
    out
}

fn residual_unchecked(
    game: &AtomicRoutingGame,
    x: &DVector<f64>,
    v: &DVector<f64>,
    lambda: f64,
) -> Result<DVector<f64>, SmoothEqError> {
    let e = exponential(game, x, v, lambda)?;
    Ok(stack(x - e.values, game.stacked_s() - game.block_incidence() * x))
}

/// The smooth equilibrium residual, of length `p*m + p*(n-1)`.
pub fn residual_f(
    game: &AtomicRoutingGame,
    x: &FlowProfile,
    v: &DVector<f64>,
    lambda: f64,
) -> Result<DVector<f64>, SmoothEqError> {
    check_lambda(lambda)?;
    check_dims(game, x, v)?;
    residual_unchecked(game, x, v, lambda)
}

fn jacobian_unchecked(
    game: &AtomicRoutingGame,
    x: &DVector<f64>,
    v: &DVector<f64>,
    lambda: f64,
) -> Result<DMatrix<f64>, SmoothEqError> {
    let e = exponential(game, x, v, lambda)?;
    let slope = e.values.component_mul(&e.active) / lambda;
    let pm = game.flow_dim();
    let k = game.multiplier_dim();
    let blk = game.block_incidence();
    let mut j = DMatrix::zeros(pm + k, pm + k);
    {
        let mut tl = j.view_mut((0, 0), (pm, pm));
        tl.copy_from(game.costs().c());
        for (r, &d) in slope.iter().enumerate() {
            tl.row_mut(r).scale_mut(d);
            tl[(r, r)] += 1.0;
        }
    }
    {
        let mut tr = j.view_mut((0, pm), (pm, k));
        tr.copy_from(&blk.transpose());
        for (r, &d) in slope.iter().enumerate() {
            tr.row_mut(r).scale_mut(-d);
        }
    }
    j.view_mut((pm, 0), (k, pm)).copy_from(&(-blk));
    Ok(j)
}

/// Jacobian of [`residual_f`] with respect to `(x, v)`.
pub fn jacobian_f(
    game: &AtomicRoutingGame,
    x: &FlowProfile,
    v: &DVector<f64>,
    lambda: f64,
) -> Result<DMatrix<f64>, SmoothEqError> {
    check_lambda(lambda)?;
    check_dims(game, x, v)?;
    jacobian_unchecked(game, x, v, lambda)
}

/// Stacked interior flows of all players with zero multipliers.
pub fn initial_point(game: &AtomicRoutingGame, eps: f64) -> Result<(FlowProfile, DVector<f64>), SmoothEqError> {
    let m = game.link_count();
    let mut x = DVector::zeros(game.flow_dim());
    for (i, pl) in game.players().iter().enumerate() {
        let y = interior_flow(game.graph(), pl.origin, pl.destination, eps)?;
        x.rows_mut(i * m, m).copy_from(&y);
    }
    Ok((x, DVector::zeros(game.multiplier_dim())))
}

/// Checks the structural preconditions for a unique smooth equilibrium.
pub fn check_preconditions(game: &AtomicRoutingGame) -> Result<(), SmoothEqError> {
    if !graph_rank_check(game.graph()) {
        return Err(SmoothEqError::RankDeficientGraph);
    }
    if !membership_d(game.costs(), game.rho(), MEMBERSHIP_TOL) {
        return Err(SmoothEqError::OutsideDesignSet { rho: game.rho() });
    }
    Ok(())
}

/// Levenberg-Marquardt on the smooth system.
///
/// Checks the graph rank and membership of `C` in the designable set first.
pub fn solve_nls(
    game: &AtomicRoutingGame,
    settings: &SmoothEqSettings,
    warm_start: Option<(&FlowProfile, &DVector<f64>)>,
) -> Result<EquilibriumSolution, SmoothEqError> {
    check_preconditions(game)?;
    solve_nls_unchecked(game, settings, warm_start, None)
}

/// Same as [`solve_nls`], also recording every accepted iterate.
pub fn solve_nls_traced(
    game: &AtomicRoutingGame,
    settings: &SmoothEqSettings,
    warm_start: Option<(&FlowProfile, &DVector<f64>)>,
) -> (Result<EquilibriumSolution, SmoothEqError>, Vec<IterationRecord>) {
    let mut trace = Vec::new();
    let result = check_preconditions(game).and_then(|_| solve_nls_unchecked(game, settings, warm_start, Some(&mut trace)));
    (result, trace)
}

/// [`solve_nls`] without the precondition checks, for callers that maintain
/// them by construction.
pub fn solve_nls_unchecked(
    game: &AtomicRoutingGame,
    settings: &SmoothEqSettings,
    warm_start: Option<(&FlowProfile, &DVector<f64>)>,
    mut trace: Option<&mut Vec<IterationRecord>>,
) -> Result<EquilibriumSolution, SmoothEqError> {
    settings.validate()?;
    let lambda = settings.lambda;
    let pm = game.flow_dim();
    let (mut x, mut v) = match warm_start {
        Some((x, v)) => {
            check_dims(game, x, v).map_err(|_| SmoothEqError::WarmStartDimension)?;
            (x.clone(), v.clone())
        }
        None => initial_point(game, settings.interior_eps)?,
    };
    let mut r = residual_unchecked(game, &x, &v, lambda)?;
    let mut norm = r.norm();
    let mut damping = settings.lm_damping_init;
    let mut iterations = 0;
    if let Some(t) = trace.as_deref_mut() {
        t.push(IterationRecord {
            iteration: 0,
            residual: norm,
            damping,
        });
    }
    let best = |x: &DVector<f64>, v: &DVector<f64>, norm: f64, iterations: usize| EquilibriumSolution {
        x: x.clone(),
        v: v.clone(),
        residual_norm: norm,
        lambda,
        iterations,
    };
    while norm > settings.residual_tol {
        if iterations >= settings.max_iters {
            return Err(SmoothEqError::NotConverged {
                lambda,
                best: Box::new(best(&x, &v, norm, iterations)),
            });
        }
        let j = jacobian_unchecked(game, &x, &v, lambda)?;
        let normal = DampedNormalEquations::new(&j, &(-&r));
        loop {
            let step = normal.solve(damping);
            let trial = step.and_then(|d| {
                let xt = &x + d.rows(0, pm);
                let vt = &v + d.rows(pm, d.len() - pm);
                // Trial points deep in the clamped region are rejected
                // outright; the clamp only guards against infinities.
                if !(max_entry(&exponent(game, &xt, &vt, lambda)) <= EXPONENT_CLAMP) {
                    return None;
                }
                let rt = residual_unchecked(game, &xt, &vt, lambda).ok()?;
                let nt = rt.norm();
                (nt < norm).then_some((xt, vt, rt, nt))
            });
            if let Some((xt, vt, rt, nt)) = trial {
                x = xt;
                v = vt;
                r = rt;
                norm = nt;
                damping = (damping / 10.0).max(MIN_DAMPING);
                break;
            }
            damping *= 10.0;
            if damping > MAX_DAMPING {
                return Err(SmoothEqError::NotConverged {
                    lambda,
                    best: Box::new(best(&x, &v, norm, iterations)),
                });
            }
        }
        iterations += 1;
        if let Some(t) = trace.as_deref_mut() {
            t.push(IterationRecord {
                iteration: iterations,
                residual: norm,
                damping,
            });
        }
    }
    Ok(best(&x, &v, norm, iterations))
}

fn continuation(
    game: &AtomicRoutingGame,
    levels: &[f64],
    settings: &SmoothEqSettings,
    warm_start: Option<(&FlowProfile, &DVector<f64>)>,
) -> Result<Vec<EquilibriumSolution>, SmoothEqError> {
    let mut out: Vec<EquilibriumSolution> = Vec::with_capacity(levels.len());
    for &lambda in levels {
        let level = SmoothEqSettings {
            lambda,
            ..settings.clone()
        };
        let warm = match out.last() {
            Some(prev) => Some((&prev.x, &prev.v)),
            None => warm_start,
        };
        let sol = solve_nls_unchecked(game, &level, warm, None)?;
        out.push(sol);
    }
    Ok(out)
}

/// Solutions at every level of the schedule; `settings.lambda` is ignored.
pub fn homotopy_path(
    game: &AtomicRoutingGame,
    schedule: &HomotopySchedule,
    settings: &SmoothEqSettings,
) -> Result<Vec<EquilibriumSolution>, SmoothEqError> {
    schedule.validate()?;
    check_preconditions(game)?;
    continuation(game, &schedule.levels(), settings, None)
}

/// Final solution of [`homotopy_path`].
pub fn homotopy_solve(
    game: &AtomicRoutingGame,
    schedule: &HomotopySchedule,
    settings: &SmoothEqSettings,
) -> Result<EquilibriumSolution, SmoothEqError> {
    let mut path = homotopy_path(game, schedule, settings)?;
    Ok(path.pop().expect("schedule has at least one level"))
}

/// Solves at `settings.lambda` from `warm_start`. Without a warm start, or
/// if the warm-started solve fails, starts from the interior point and halves
/// `lambda` down from `max(1, lambda)`, ending exactly at `settings.lambda`.
pub fn solve_with_fallback(
    game: &AtomicRoutingGame,
    settings: &SmoothEqSettings,
    warm_start: Option<(&FlowProfile, &DVector<f64>)>,
) -> Result<EquilibriumSolution, SmoothEqError> {
    settings.validate()?;
    if let Some(w) = warm_start {
        match solve_nls_unchecked(game, settings, Some(w), None) {
            Ok(sol) => return Ok(sol),
            Err(SmoothEqError::NotConverged { .. } | SmoothEqError::Overflow { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    let target = settings.lambda;
    let mut levels = Vec::new();
    let mut lambda = target.max(1.0);
    while lambda > target {
        levels.push(lambda);
        lambda *= 0.5;
    }
    levels.push(target);
    let mut path = continuation(game, &levels, settings, None)?;
    Ok(path.pop().expect("at least one level"))
}

/// Small-`lambda` solution used as a stand-in for the exact equilibrium,
/// together with its Nash gap.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEquilibrium {
    pub solution: EquilibriumSolution,
    pub gap: f64,
}

impl ReferenceEquilibrium {
    pub fn certified(&self) -> bool {
        self.gap <= CERTIFICATE_GAP
    }
}

/// Solves at `schedule.lambda_min`. With a warm start the final level is tried
/// directly first; the solution is unique, so a converged warm-started solve
/// lands on the same point as the full schedule.
pub fn reference_equilibrium(
    game: &AtomicRoutingGame,
    schedule: &HomotopySchedule,
    settings: &SmoothEqSettings,
    warm_start: Option<(&FlowProfile, &DVector<f64>)>,
) -> Result<ReferenceEquilibrium, SmoothEqError> {
    schedule.validate()?;
    let levels = schedule.levels();
    let last = *levels.last().expect("nonempty schedule");
    let direct = warm_start.and_then(|w| {
        let level = SmoothEqSettings {
            lambda: last,
            ..settings.clone()
        };
        solve_nls_unchecked(game, &level, Some(w), None).ok()
    });
    let solution = match direct {
        Some(sol) => sol,
        None => continuation(game, &levels, settings, None)?.pop().expect("nonempty"),
    };
    let gap = nash_gap(game, &solution.x)?;
    Ok(ReferenceEquilibrium { solution, gap })
}
