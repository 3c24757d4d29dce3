//! JSON form of a game. Node indices in files are 1-based.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{AtomicRoutingGame, CostParams, GameError, Player};
use crate::graph::DirectedGraph;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed game json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid game: {0}")]
    Invalid(String),
    #[error(transparent)]
    Game(#[from] GameError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub n: usize,
    pub links: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlayerFile {
    pub origin: usize,
    pub destination: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameFile {
    pub graph: GraphFile,
    pub players: Vec<PlayerFile>,
    pub b: Vec<f64>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    pub rho: f64,
}

fn zero_based(v: usize, what: &str) -> Result<usize, IoError> {
    v.checked_sub(1)
        .ok_or_else(|| IoError::Invalid(format!("{what} uses 1-based node indices, got 0")))
}

impl GameFile {
    pub fn from_game(game: &AtomicRoutingGame) -> Self {
        let c = game.costs().c();
        GameFile {
            graph: GraphFile {
                n: game.graph().node_count(),
                links: game.graph().links().iter().map(|&(t, h)| [t + 1, h + 1]).collect(),
            },
            players: game
                .players()
                .iter()
                .map(|p| PlayerFile {
                    origin: p.origin + 1,
                    destination: p.destination + 1,
                })
                .collect(),
            b: game.costs().b().iter().copied().collect(),
            c: c.row_iter().map(|r| r.iter().copied().collect()).collect(),
            rho: game.rho(),
        }
    }

    pub fn into_game(self) -> Result<AtomicRoutingGame, IoError> {
        let links = self
            .graph
            .links
            .iter()
            .map(|&[t, h]| Ok((zero_based(t, "link")?, zero_based(h, "link")?)))
            .collect::<Result<Vec<_>, IoError>>()?;
        // Links are stored sorted; b and C follow the file order per block.
        let mut order: Vec<usize> = (0..links.len()).collect();
        order.sort_by_key(|&k| links[k]);
        let sorted = order.iter().map(|&k| links[k]).collect();
        let graph = DirectedGraph::new(self.graph.n, sorted).map_err(GameError::from)?;
        let players = self
            .players
            .iter()
            .map(|p| Ok(Player::new(zero_based(p.origin, "player")?, zero_based(p.destination, "player")?)))
            .collect::<Result<Vec<_>, IoError>>()?;
        let pm = self.b.len();
        if self.c.len() != pm || self.c.iter().any(|r| r.len() != pm) {
            return Err(IoError::Invalid(format!("C must be {pm} x {pm}")));
        }
        let m = order.len();
        if m == 0 || !pm.is_multiple_of(m) {
            return Err(IoError::Invalid(format!("b has length {pm}, not a multiple of {m} links")));
        }
        let src = |k: usize| (k / m) * m + order[k % m];
        let b = DVector::from_fn(pm, |k, _| self.b[src(k)]);
        let c = DMatrix::from_fn(pm, pm, |r, col| self.c[src(r)][src(col)]);
        let costs = CostParams::new(b, c, graph.link_count())?;
        Ok(AtomicRoutingGame::new(graph, players, costs, self.rho)?)
    }
}

pub fn game_to_json(game: &AtomicRoutingGame) -> String {
    serde_json::to_string_pretty(&GameFile::from_game(game)).expect("game serializes")
}

pub fn game_from_json(text: &str) -> Result<AtomicRoutingGame, IoError> {
    serde_json::from_str::<GameFile>(text)?.into_game()
}

pub fn load_game(path: &std::path::Path) -> Result<AtomicRoutingGame, IoError> {
    game_from_json(&std::fs::read_to_string(path)?)
}
