//! Atomic routing games with quadratic link costs.
//!
//! Player `i` routes one unit of flow from its origin to its destination and
//! minimizes `(b_i + 1/2 C_ii x_i + sum_{j != i} C_ij x_j)^T x_i` over its flow
//! polytope. The joint flow stacks the per-player link flows, so all vectors
//! indexed by flow have length `p * m` and `C` is partitioned into `m x m`
//! blocks.

use nalgebra::{DMatrix, DVector, DVectorView};
use thiserror::Error;

use crate::graph::{
    distances_to, graph_rank_check, od_vectors, reduced_incidence, shortest_path_cost, DirectedGraph,
    GraphError, LinkWeights,
};
use crate::numerics::{min_eigenvalue, ToleranceConfig};

/// Conservation tolerance below which a flow counts as feasible.
pub const FEASIBILITY_TOL: f64 = 1e-6;

/// Joint flow of all players, player-major.
pub type FlowProfile = DVector<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GameError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("game needs at least one player")]
    NoPlayers,
    #[error("{what} has dimension {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("cost parameters contain non-finite entries")]
    NonFinite,
    #[error("rho must be finite and nonnegative, got {0}")]
    InvalidRho(f64),
    #[error("flow violates feasibility by {violation:e} (tolerance {FEASIBILITY_TOL:e})")]
    Infeasible { violation: f64 },
    #[error("player index {0} out of range")]
    NoSuchPlayer(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Player {
    pub origin: usize,
    pub destination: usize,
}

impl Player {
    pub fn new(origin: usize, destination: usize) -> Self {
        Self { origin, destination }
    }
}

/// Nominal link costs `b` and the interaction matrix `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostParams {
    b: DVector<f64>,
    c: DMatrix<f64>,
    block: usize,
}

impl CostParams {
    pub fn new(b: DVector<f64>, c: DMatrix<f64>, block: usize) -> Result<Self, GameError> {
        if block == 0 || !b.len().is_multiple_of(block) || b.is_empty() {
            return Err(GameError::Dimension {
                what: "b",
                expected: block.max(1) * (b.len() / block.max(1)).max(1),
                got: b.len(),
            });
        }
        if c.shape() != (b.len(), b.len()) {
            return Err(GameError::Dimension {
                what: "C rows/cols",
                expected: b.len(),
                got: if c.nrows() != b.len() { c.nrows() } else { c.ncols() },
            });
        }
        if b.iter().chain(c.iter()).any(|v| !v.is_finite()) {
            return Err(GameError::NonFinite);
        }
        Ok(Self { b, c, block })
    }

    /// `b = delta * 1`, `C = 0`.
    pub fn uniform(players: usize, links: usize, delta: f64) -> Self {
        let n = players * links;
        Self {
            b: DVector::from_element(n, delta),
            c: DMatrix::zeros(n, n),
            block: links,
        }
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn block_size(&self) -> usize {
        self.block
    }

    pub fn player_count(&self) -> usize {
        self.b.len() / self.block
    }

    pub fn into_parts(self) -> (DVector<f64>, DMatrix<f64>) {
        (self.b, self.c)
    }
}

/// Checks membership of `C` in `{C : C + C^T psd, ||C||_F <= rho, C_ii = C_ii^T}`
/// up to `tol`.
pub fn membership_d(costs: &CostParams, rho: f64, tol: f64) -> bool {
    let c = costs.c();
    if c.norm() > rho + tol {
        return false;
    }
    let m = costs.block_size();
    for i in 0..costs.player_count() {
        let blk = c.view((i * m, i * m), (m, m));
        if (blk - blk.transpose()).norm() > tol {
            return false;
        }
    }
    let sym = c + c.transpose();
    let loose = ToleranceConfig {
        eig_tol: f64::INFINITY,
        ..ToleranceConfig::default()
    };
    match min_eigenvalue(&sym, &loose) {
        Ok(lo) => lo >= -tol,
        Err(_) => false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtomicRoutingGame {
    graph: DirectedGraph,
    players: Vec<Player>,
    costs: CostParams,
    rho: f64,
    stacked_s: DVector<f64>,
    block_incidence: DMatrix<f64>,
}

impl AtomicRoutingGame {
    pub fn new(
        graph: DirectedGraph,
        players: Vec<Player>,
        costs: CostParams,
        rho: f64,
    ) -> Result<Self, GameError> {
        if players.is_empty() {
            return Err(GameError::NoPlayers);
        }
        if !(rho.is_finite() && rho >= 0.0) {
            return Err(GameError::InvalidRho(rho));
        }
        let m = graph.link_count();
        let n = graph.node_count();
        let p = players.len();
        if costs.block_size() != m || costs.player_count() != p {
            return Err(GameError::Dimension {
                what: "b",
                expected: p * m,
                got: costs.b().len(),
            });
        }
        let mut stacked_s = DVector::zeros(p * (n - 1));
        let mut block_incidence = DMatrix::zeros(p * (n - 1), p * m);
        for (i, pl) in players.iter().enumerate() {
            let (_, s) = od_vectors(&graph, pl.origin, pl.destination)?;
            stacked_s.rows_mut(i * (n - 1), n - 1).copy_from(&s);
            let ei = reduced_incidence(&graph, pl.destination)?;
            block_incidence
                .view_mut((i * (n - 1), i * m), (n - 1, m))
                .copy_from(&ei);
        }
        Ok(Self {
            graph,
            players,
            costs,
            rho,
            stacked_s,
            block_incidence,
        })
    }

    /// Same graph and players with different cost parameters.
    pub fn with_costs(&self, costs: CostParams) -> Result<Self, GameError> {
        if costs.b().len() != self.flow_dim() || costs.block_size() != self.link_count() {
            return Err(GameError::Dimension {
                what: "b",
                expected: self.flow_dim(),
                got: costs.b().len(),
            });
        }
        Ok(Self {
            costs,
            ..self.clone()
        })
    }

    pub fn with_rho(&self, rho: f64) -> Result<Self, GameError> {
        if !(rho.is_finite() && rho >= 0.0) {
            return Err(GameError::InvalidRho(rho));
        }
        Ok(Self { rho, ..self.clone() })
    }

    pub fn graph(&self) -> &DirectedGraph {
        &self.graph
    }

    pub fn players(&self) -> &[Player] {
        &self.players
    }

    pub fn costs(&self) -> &CostParams {
        &self.costs
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn player_count(&self) -> usize {
        self.players.len()
    }

    pub fn link_count(&self) -> usize {
        self.graph.link_count()
    }

    /// `p * m`.
    pub fn flow_dim(&self) -> usize {
        self.players.len() * self.graph.link_count()
    }

    /// `p * (n - 1)`.
    pub fn multiplier_dim(&self) -> usize {
        self.players.len() * (self.graph.node_count() - 1)
    }

    /// Stacked reduced origin-destination vectors.
    pub fn stacked_s(&self) -> &DVector<f64> {
        &self.stacked_s
    }

    /// Block-diagonal matrix of the players' reduced incidence matrices.
    pub fn block_incidence(&self) -> &DMatrix<f64> {
        &self.block_incidence
    }

    pub fn player_flow<'a>(&self, x: &'a FlowProfile, i: usize) -> DVectorView<'a, f64> {
        let m = self.link_count();
        x.rows(i * m, m)
    }

    /// `||s - E x||_inf`.
    pub fn conservation_violation(&self, x: &FlowProfile) -> f64 {
        (&self.stacked_s - &self.block_incidence * x).amax()
    }

    /// Full-rank incidence structure and `C` in the designable set.
    pub fn satisfies_regularity(&self, tol: f64) -> bool {
        graph_rank_check(&self.graph) && membership_d(&self.costs, self.rho, tol)
    }

    fn check_flow(&self, x: &FlowProfile) -> Result<(), GameError> {
        if x.len() != self.flow_dim() {
            return Err(GameError::Dimension {
                what: "flow",
                expected: self.flow_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn check_player(&self, i: usize) -> Result<(), GameError> {
        if i < self.players.len() {
            Ok(())
        } else {
            Err(GameError::NoSuchPlayer(i))
        }
    }
}

/// Dual certificate `(u, v)` for the KKT form of the equilibrium conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct KKTCertificate {
    pub u: DVector<f64>,
    pub v: DVector<f64>,
}

impl KKTCertificate {
    /// Builds `u := b + C x - E^T v` from the multipliers.
    pub fn from_multipliers(game: &AtomicRoutingGame, x: &FlowProfile, v: DVector<f64>) -> Self {
        let u = reduced_costs(game, x, &v);
        Self { u, v }
    }
}

/// `b + C x - E^T v`.
pub fn reduced_costs(game: &AtomicRoutingGame, x: &FlowProfile, v: &DVector<f64>) -> DVector<f64> {
    game.costs.b() + game.costs.c() * x - game.block_incidence.tr_mul(v)
}

/// Gradient of player `i`'s objective with respect to its own flow:
/// `b_i + sum_j C_ij x_j`.
pub fn marginal_cost(game: &AtomicRoutingGame, x: &FlowProfile, i: usize) -> Result<DVector<f64>, GameError> {
    game.check_flow(x)?;
    game.check_player(i)?;
    let m = game.link_count();
    let rows = game.costs.c().rows(i * m, m);
    Ok(game.costs.b().rows(i * m, m) + rows * x)
}

pub fn player_objective(game: &AtomicRoutingGame, x: &FlowProfile, i: usize) -> Result<f64, GameError> {
    game.check_flow(x)?;
    game.check_player(i)?;
    let m = game.link_count();
    let xi = game.player_flow(x, i);
    let c = game.costs.c();
    let mut lin = game.costs.b().rows(i * m, m).into_owned();
    for j in 0..game.player_count() {
        let blk = c.view((i * m, j * m), (m, m));
        let xj = game.player_flow(x, j);
        if j == i {
            lin += blk * xj * 0.5;
        } else {
            lin += blk * xj;
        }
    }
    Ok(lin.dot(&xi))
}

/// Sum of the marginal costs of player `i` along `links` at flow `x`.
pub fn path_cost(game: &AtomicRoutingGame, x: &FlowProfile, i: usize, links: &[usize]) -> Result<f64, GameError> {
    let c = marginal_cost(game, x, i)?;
    links
        .iter()
        .map(|&j| {
            c.get(j).copied().ok_or(GameError::Dimension {
                what: "link index",
                expected: game.link_count(),
                got: j,
            })
        })
        .sum()
}

/// Violation of the KKT system; zero iff it holds exactly.
pub fn kkt_residual(game: &AtomicRoutingGame, x: &FlowProfile, cert: &KKTCertificate) -> f64 {
    let conservation = game.conservation_violation(x);
    let stationarity = (&cert.u - reduced_costs(game, x, &cert.v)).amax();
    let complementarity = cert.u.dot(x).abs();
    let x_neg = (-x.min()).max(0.0);
    let u_neg = (-cert.u.min()).max(0.0);
    conservation
        .max(stationarity)
        .max(complementarity)
        .max(x_neg)
        .max(u_neg)
}

/// Violation of `s = E x`, `x = max(0, x + E^T v - b - C x)`.
pub fn pwl_residual(game: &AtomicRoutingGame, x: &FlowProfile, v: &DVector<f64>) -> f64 {
    let conservation = game.conservation_violation(x);
    let u = reduced_costs(game, x, v);
    let fixed_point = x
        .iter()
        .zip(u.iter())
        .map(|(&xk, &uk)| (xk - (xk - uk).max(0.0)).abs())
        .fold(0.0, f64::max);
    conservation.max(fixed_point)
}

fn check_feasible(game: &AtomicRoutingGame, x: &FlowProfile) -> Result<(), GameError> {
    game.check_flow(x)?;
    let violation = game.conservation_violation(x).max((-x.min()).max(0.0));
    if violation > FEASIBILITY_TOL {
        return Err(GameError::Infeasible { violation });
    }
    Ok(())
}

/// Per-player first-order gap `c_i^T x_i - min_{y in P_i} c_i^T y` with
/// `c_i` the marginal cost at `x`.
pub fn player_gaps(game: &AtomicRoutingGame, x: &FlowProfile) -> Result<Vec<f64>, GameError> {
    check_feasible(game, x)?;
    (0..game.player_count())
        .map(|i| {
            let c = marginal_cost(game, x, i)?;
            let pl = game.players[i];
            let current = c.dot(&game.player_flow(x, i));
            let w = LinkWeights::new(&game.graph, c)?;
            let best = shortest_path_cost(&game.graph, &w, pl.origin, pl.destination)?;
            Ok(current - best.cost)
        })
        .collect()
}

/// Sum of the per-player first-order gaps. Zero exactly at an equilibrium
/// when every `C_ii` is positive semidefinite.
pub fn nash_gap(game: &AtomicRoutingGame, x: &FlowProfile) -> Result<f64, GameError> {
    Ok(player_gaps(game, x)?.iter().sum())
}

/// Multipliers from shortest-path node potentials under the marginal costs:
/// `v_i[node] = dist(node -> d_i)`.
pub fn certificate_from_potentials(game: &AtomicRoutingGame, x: &FlowProfile) -> Result<KKTCertificate, GameError> {
    game.check_flow(x)?;
    let n = game.graph.node_count();
    let mut v = DVector::zeros(game.multiplier_dim());
    for (i, pl) in game.players.iter().enumerate() {
        let c = marginal_cost(game, x, i)?;
        let w = LinkWeights::new(&game.graph, c)?;
        let dist = distances_to(&game.graph, &w, pl.destination)?;
        let mut row = i * (n - 1);
        for (node, d) in dist.iter().enumerate() {
            if node == pl.destination {
                continue;
            }
            v[row] = d.ok_or(GraphError::Unreachable {
                origin: node,
                destination: pl.destination,
            })?;
            row += 1;
        }
    }
    Ok(KKTCertificate::from_multipliers(game, x, v))
}
