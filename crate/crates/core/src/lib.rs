//! Equilibria and cost design for atomic routing games.

pub mod design;
pub mod game;
pub mod graph;
pub mod io;
pub mod numerics;
pub mod scenario;
pub mod sensitivity;
pub mod smooth_eq;
