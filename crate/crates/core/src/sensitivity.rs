//! Gradients of a design objective through the smooth equilibrium.
//!
//! Differentiating `F(x(b, C), v(b, C), b, C) = 0` gives
//! `grad_b = -(1/lambda) D [J^-T (grad_x psi, 0)]_x` and
//! `grad_C = grad_b x^T`, where `D` is the diagonal of the exponential term.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::game::{AtomicRoutingGame, GameError};
use crate::numerics::{condition_number, lu_solve, pinv_solve, ToleranceConfig};
use crate::smooth_eq::{exponential_term, jacobian_f, EquilibriumSolution, SmoothEqError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensitivityError {
    #[error(transparent)]
    Solver(#[from] SmoothEqError),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error("jacobian condition estimate {condition:.3e} exceeds {limit:.3e}")]
    SingularJacobian { condition: f64, limit: f64 },
    #[error("path of player {player} does not connect its origin to its destination")]
    BrokenPath { player: usize },
    #[error("expected {expected} paths, got {got}")]
    PathCount { expected: usize, got: usize },
}

/// Scalar objective of the equilibrium flow.
pub trait DesignObjective {
    fn dim(&self) -> usize;
    fn evaluate(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
}

/// `1/2 ||x - target||^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingObjective {
    target: DVector<f64>,
}

impl TrackingObjective {
    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }
}

impl DesignObjective for TrackingObjective {
    fn dim(&self) -> usize {
        self.target.len()
    }

    fn evaluate(&self, x: &DVector<f64>) -> f64 {
        0.5 * (x - &self.target).norm_squared()
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        x - &self.target
    }
}

pub fn tracking_objective(game: &AtomicRoutingGame, target: DVector<f64>) -> Result<TrackingObjective, SensitivityError> {
    if target.len() != game.flow_dim() {
        return Err(GameError::Dimension {
            what: "target",
            expected: game.flow_dim(),
            got: target.len(),
        }
        .into());
    }
    Ok(TrackingObjective { target })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradientMode {
    /// Solve with `J^T` directly; refuses when the condition estimate exceeds
    /// `max_condition`.
    Exact { max_condition: f64 },
    Pseudoinverse(ToleranceConfig),
}

impl Default for GradientMode {
    fn default() -> Self {
        GradientMode::Pseudoinverse(ToleranceConfig::default())
    }
}

/// `grad_b` and the flow it was computed at; `grad_C = grad_b x^T` is
/// expanded only on request.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientPair {
    pub grad_b: DVector<f64>,
    pub x: DVector<f64>,
}

impl GradientPair {
    pub fn grad_c(&self) -> DMatrix<f64> {
        &self.grad_b * self.x.transpose()
    }

    /// `||grad_C||_F` without forming the matrix.
    pub fn grad_c_norm(&self) -> f64 {
        self.grad_b.norm() * self.x.norm()
    }
}

/// Diagonal matrix of the exponential term at a solution.
pub fn matrix_d(game: &AtomicRoutingGame, sol: &EquilibriumSolution) -> Result<DMatrix<f64>, SensitivityError> {
    Ok(DMatrix::from_diagonal(&exponential_term(game, &sol.x, &sol.v, sol.lambda)?))
}

pub fn implicit_gradients(
    game: &AtomicRoutingGame,
    sol: &EquilibriumSolution,
    objective: &dyn DesignObjective,
    mode: GradientMode,
) -> Result<GradientPair, SensitivityError> {
    let pm = game.flow_dim();
    if objective.dim() != pm {
        return Err(GameError::Dimension {
            what: "objective",
            expected: pm,
            got: objective.dim(),
        }
        .into());
    }
    let lambda = sol.lambda;
    let jt = jacobian_f(game, &sol.x, &sol.v, lambda)?.transpose();
    let mut rhs = DVector::zeros(jt.nrows());
    rhs.rows_mut(0, pm).copy_from(&objective.gradient(&sol.x));
    let w = match mode {
        GradientMode::Exact { max_condition } => {
            let condition = condition_number(&jt);
            let singular = SensitivityError::SingularJacobian {
                condition,
                limit: max_condition,
            };
            if !(condition <= max_condition) {
                return Err(singular);
            }
            lu_solve(&jt, &rhs).ok_or(singular)?
        }
        GradientMode::Pseudoinverse(tol) => pinv_solve(&jt, &rhs, &tol),
    };
    let d = exponential_term(game, &sol.x, &sol.v, lambda)?;
    let grad_b = -d.component_mul(&w.rows(0, pm)) / lambda;
    Ok(GradientPair {
        grad_b,
        x: sol.x.clone(),
    })
}

/// Link indices along a node sequence; `None` if two consecutive nodes are
/// not joined by a link.
pub fn links_along(game: &AtomicRoutingGame, nodes: &[usize]) -> Option<Vec<usize>> {
    nodes.windows(2).map(|w| game.graph().link_index(w[0], w[1])).collect()
}

/// Joint 0/1 flow of one path per player, each given as link indices.
pub fn path_to_target(game: &AtomicRoutingGame, paths: &[Vec<usize>]) -> Result<DVector<f64>, SensitivityError> {
    if paths.len() != game.player_count() {
        return Err(SensitivityError::PathCount {
            expected: game.player_count(),
            got: paths.len(),
        });
    }
    let m = game.link_count();
    let links = game.graph().links();
    let mut x = DVector::zeros(game.flow_dim());
    for (i, (path, pl)) in paths.iter().zip(game.players()).enumerate() {
        let broken = SensitivityError::BrokenPath { player: i };
        let mut at = pl.origin;
        for &k in path {
            let &(t, h) = links.get(k).ok_or(broken.clone())?;
            if t != at || x[i * m + k] != 0.0 {
                return Err(broken);
            }
            x[i * m + k] = 1.0;
            at = h;
        }
        if path.is_empty() || at != pl.destination {
            return Err(broken);
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{CostParams, Player};
    use crate::graph::{grid_graph, incidence_matrix, od_vectors, DirectedGraph, GridSpec};
    use crate::smooth_eq::{solve_nls, SmoothEqSettings};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line_game(rng: &mut ChaCha8Rng) -> AtomicRoutingGame {
        let g = grid_graph(GridSpec::new(3, 1).unwrap());
        let m = g.link_count();
        let n = 2 * m;
        let b = DVector::from_fn(n, |_, _| rng.random_range(0.0..1.0));
        let f = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let mut c = &f * f.transpose();
        c *= 0.3 / c.norm();
        let costs = CostParams::new(b, c, m).unwrap();
        AtomicRoutingGame::new(g, vec![Player::new(0, 2), Player::new(2, 0)], costs, 0.5).unwrap()
    }

    fn three_by_three() -> AtomicRoutingGame {
        let g = grid_graph(GridSpec::new(3, 3).unwrap());
        let m = g.link_count();
        AtomicRoutingGame::new(g, vec![Player::new(3, 5), Player::new(5, 3)], CostParams::uniform(2, m, 0.1), 0.5)
            .unwrap()
    }

    #[test]
    fn tracking_objective_examples() {
        let game = three_by_three();
        let target = DVector::from_fn(game.flow_dim(), |i, _| (i % 3) as f64);
        let obj = tracking_objective(&game, target.clone()).unwrap();
        assert_eq!(obj.evaluate(&target), 0.0);
        assert_eq!(obj.gradient(&target).amax(), 0.0);
        let mut e1 = target.clone();
        e1[0] += 1.0;
        assert_eq!(obj.evaluate(&e1), 0.5);
        let mut unit = DVector::zeros(game.flow_dim());
        unit[0] = 1.0;
        assert_eq!(obj.gradient(&e1), unit);
        assert!(tracking_objective(&game, DVector::zeros(3)).is_err());
    }

    #[test]
    fn tracking_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let target = DVector::from_fn(10, |_, _| rng.random_range(0.0..1.0));
        let obj = TrackingObjective { target };
        let x = DVector::from_fn(10, |_, _| rng.random_range(0.0..1.0));
        let g = obj.gradient(&x);
        let h = 1e-6;
        for k in 0..10 {
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            let fd = (obj.evaluate(&xp) - obj.evaluate(&xm)) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-8 * (1.0 + g[k].abs()));
        }
    }

    #[test]
    fn d_matches_flow_and_is_positive() {
        let game = three_by_three();
        let settings = SmoothEqSettings::with_lambda(0.1);
        let sol = solve_nls(&game, &settings, None).unwrap();
        let d = matrix_d(&game, &sol).unwrap();
        assert!((&d - DMatrix::from_diagonal(&sol.x)).norm() <= 10.0 * settings.residual_tol);
        assert!(d.diagonal().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn zero_objective_gradient_gives_zero_pair() {
        let game = three_by_three();
        let sol = solve_nls(&game, &SmoothEqSettings::with_lambda(0.1), None).unwrap();
        let obj = tracking_objective(&game, sol.x.clone()).unwrap();
        let g = implicit_gradients(&game, &sol, &obj, GradientMode::default()).unwrap();
        assert_eq!(g.grad_b.amax(), 0.0);
        assert_eq!(g.grad_c().amax(), 0.0);
    }

    #[test]
    fn gradient_matches_resolve_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let game = line_game(&mut rng);
        let lambda = 0.1;
        let settings = SmoothEqSettings {
            residual_tol: 1e-13,
            ..SmoothEqSettings::with_lambda(lambda)
        };
        let sol = solve_nls(&game, &settings, None).unwrap();
        let target = DVector::from_fn(game.flow_dim(), |_, _| rng.random_range(0.0..1.0));
        let obj = tracking_objective(&game, target).unwrap();
        let grads = implicit_gradients(&game, &sol, &obj, GradientMode::default()).unwrap();
        let h = 1e-5;
        for k in 0..game.flow_dim() {
            let shifted = |delta: f64| {
                let mut b = game.costs().b().clone();
                b[k] += delta;
                let costs = CostParams::new(b, game.costs().c().clone(), game.link_count()).unwrap();
                let g = game.with_costs(costs).unwrap();
                let s = solve_nls(&g, &settings, Some((&sol.x, &sol.v))).unwrap();
                obj.evaluate(&s.x)
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            if fd.abs() > 1e-6 {
                assert!((grads.grad_b[k] - fd).abs() <= 1e-3 * fd.abs(), "k={k} {} vs {fd}", grads.grad_b[k]);
            }
        }
        assert_eq!(grads.grad_c(), &grads.grad_b * sol.x.transpose());
    }

    #[test]
    fn exact_and_pseudoinverse_agree_when_well_conditioned() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let game = line_game(&mut rng);
        let sol = solve_nls(&game, &SmoothEqSettings::with_lambda(0.2), None).unwrap();
        let obj = tracking_objective(&game, DVector::from_element(game.flow_dim(), 0.5)).unwrap();
        let jt = jacobian_f(&game, &sol.x, &sol.v, sol.lambda).unwrap();
        assert!(condition_number(&jt) <= 1e8);
        let exact = implicit_gradients(&game, &sol, &obj, GradientMode::Exact { max_condition: 1e8 }).unwrap();
        let pinv = implicit_gradients(&game, &sol, &obj, GradientMode::default()).unwrap();
        assert!((&exact.grad_b - &pinv.grad_b).amax() <= 1e-6 * pinv.grad_b.amax());
        let refused = implicit_gradients(&game, &sol, &obj, GradientMode::Exact { max_condition: 1.0 });
        assert!(matches!(refused, Err(SensitivityError::SingularJacobian { .. })));
    }

    #[test]
    fn grad_c_has_rank_at_most_one() {
        let game = three_by_three();
        let sol = solve_nls(&game, &SmoothEqSettings::with_lambda(0.1), None).unwrap();
        let obj = tracking_objective(&game, DVector::zeros(game.flow_dim())).unwrap();
        let g = implicit_gradients(&game, &sol, &obj, GradientMode::default()).unwrap();
        let sv = g.grad_c().singular_values();
        let mut sorted: Vec<f64> = sv.iter().copied().collect();
        sorted.sort_by(|a, b| b.total_cmp(a));
        assert!(sorted[1] <= 1e-12 * sorted[0]);
        assert!((g.grad_c_norm() - g.grad_c().norm()).abs() <= 1e-12 * g.grad_c_norm());
    }

    #[test]
    fn path_targets() {
        let g = DirectedGraph::new(2, vec![(0, 1), (1, 0)]).unwrap();
        let game = AtomicRoutingGame::new(g, vec![Player::new(0, 1)], CostParams::uniform(1, 2, 0.1), 0.5).unwrap();
        assert_eq!(path_to_target(&game, &[vec![0]]).unwrap(), DVector::from_vec(vec![1.0, 0.0]));

        let game = three_by_three();
        let graph = game.graph();
        let upper = links_along(&game, &[3, 0, 1, 2, 5]).unwrap();
        let lower = links_along(&game, &[5, 8, 7, 6, 3]).unwrap();
        let x = path_to_target(&game, &[upper.clone(), lower]).unwrap();
        assert_eq!(x.sum(), 8.0);
        let e = incidence_matrix(graph);
        let (r, _) = od_vectors(graph, 3, 5).unwrap();
        assert_eq!(e * x.rows(0, graph.link_count()), r);

        let gapped = vec![upper[0], upper[2]];
        assert_eq!(
            path_to_target(&game, &[gapped, upper.clone()]),
            Err(SensitivityError::BrokenPath { player: 0 })
        );
        assert!(links_along(&game, &[0, 4]).is_none());
        assert!(matches!(path_to_target(&game, &[upper]), Err(SensitivityError::PathCount { .. })));
    }
}
