//! Built-in grid scenarios.
//!
//! Players travel between opposite sides of the grid. Without design every
//! player takes the straight line through the center; the desired paths go
//! around the border instead.

use std::fmt;
use std::str::FromStr;

use crate::game::{AtomicRoutingGame, CostParams, GameError, Player};
use crate::graph::{grid_graph, GridSpec};
use crate::sensitivity::links_along;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    TwoPlayer3x3,
    FourPlayer5x5,
}

impl Scenario {
    pub const ALL: [Scenario; 2] = [Scenario::TwoPlayer3x3, Scenario::FourPlayer5x5];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::TwoPlayer3x3 => "two_player_3x3",
            Scenario::FourPlayer5x5 => "four_player_5x5",
        }
    }

    fn side(self) -> usize {
        match self {
            Scenario::TwoPlayer3x3 => 3,
            Scenario::FourPlayer5x5 => 5,
        }
    }

    /// `(desired, straight)` node sequences per player.
    fn routes(self) -> Vec<(Vec<usize>, Vec<usize>)> {
        match self {
            Scenario::TwoPlayer3x3 => vec![
                (vec![3, 0, 1, 2, 5], vec![3, 4, 5]),
                (vec![5, 8, 7, 6, 3], vec![5, 4, 3]),
            ],
            Scenario::FourPlayer5x5 => vec![
                (vec![10, 5, 0, 1, 2, 3, 4, 9, 14], vec![10, 11, 12, 13, 14]),
                (vec![14, 19, 24, 23, 22, 21, 20, 15, 10], vec![14, 13, 12, 11, 10]),
                (vec![7, 8, 13, 18, 17], vec![7, 12, 17]),
                (vec![17, 16, 11, 6, 7], vec![17, 12, 7]),
            ],
        }
    }

    /// Game with `b = delta * 1`, `C = 0` and the given radius, together with
    /// the desired and straight paths as node sequences.
    pub fn build(self, delta: f64, rho: f64) -> Result<ScenarioGame, GameError> {
        let side = self.side();
        let graph = grid_graph(GridSpec::new(side, side)?);
        let routes = self.routes();
        let players: Vec<Player> = routes
            .iter()
            .map(|(d, _)| Player::new(d[0], *d.last().expect("nonempty route")))
            .collect();
        let costs = CostParams::uniform(players.len(), graph.link_count(), delta);
        let game = AtomicRoutingGame::new(graph, players, costs, rho)?;
        let (desired, straight) = routes.into_iter().unzip();
        Ok(ScenarioGame {
            game,
            desired,
            straight,
        })
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| format!("unknown scenario `{s}` (expected two_player_3x3 or four_player_5x5)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioGame {
    pub game: AtomicRoutingGame,
    pub desired: Vec<Vec<usize>>,
    pub straight: Vec<Vec<usize>>,
}

impl ScenarioGame {
    pub fn desired_links(&self) -> Vec<Vec<usize>> {
        self.desired
            .iter()
            .map(|p| links_along(&self.game, p).expect("built-in routes follow grid links"))
            .collect()
    }

    pub fn straight_links(&self) -> Vec<Vec<usize>> {
        self.straight
            .iter()
            .map(|p| links_along(&self.game, p).expect("built-in routes follow grid links"))
            .collect()
    }
}
