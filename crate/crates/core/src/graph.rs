//! Directed graphs, incidence matrices and the shortest-path oracle.
//!
//! Nodes are indexed from zero internally; the JSON layer converts to and from
//! one-based indices.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::numerics::{numerical_rank, ToleranceConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("graph must have at least one node")]
    NoNodes,
    #[error("link ({tail}, {head}) references a node outside 0..{n}")]
    NodeOutOfRange { tail: usize, head: usize, n: usize },
    #[error("link ({0}, {0}) is a self-loop")]
    SelfLoop(usize),
    #[error("links must be sorted by (tail, head); ({0}, {1}) is out of order")]
    Unsorted(usize, usize),
    #[error("duplicate link ({0}, {1})")]
    DuplicateLink(usize, usize),
    #[error("node {node} is outside 0..{n}")]
    InvalidNode { node: usize, n: usize },
    #[error("origin and destination coincide (node {0})")]
    SameOriginDestination(usize),
    #[error("weight vector has length {got}, graph has {expected} links")]
    WeightLength { expected: usize, got: usize },
    #[error("link weights contain a non-finite entry")]
    NonFiniteWeight,
    #[error("weights admit a negative-cost cycle")]
    NegativeCycle,
    #[error("no path from node {origin} to node {destination}")]
    Unreachable { origin: usize, destination: usize },
    #[error("circulation weight must be positive, got {0}")]
    NonPositiveEps(f64),
    #[error("grid must contain at least two cells, got {width}x{height}")]
    GridTooSmall { width: usize, height: usize },
}

/// A simple directed graph whose links are kept in lexicographic `(tail, head)` order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectedGraph {
    n: usize,
    links: Vec<(usize, usize)>,
}

impl DirectedGraph {
    /// Validates and wraps a link list. The list must already be sorted and
    /// duplicate-free so that link indices are stable across serialization.
    pub fn new(n: usize, links: Vec<(usize, usize)>) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::NoNodes);
        }
        for &(tail, head) in &links {
            if tail >= n || head >= n {
                return Err(GraphError::NodeOutOfRange { tail, head, n });
            }
            if tail == head {
                return Err(GraphError::SelfLoop(tail));
            }
        }
        for pair in links.windows(2) {
            if pair[0] == pair[1] {
                return Err(GraphError::DuplicateLink(pair[1].0, pair[1].1));
            }
            if pair[0] > pair[1] {
                return Err(GraphError::Unsorted(pair[1].0, pair[1].1));
            }
        }
        Ok(Self { n, links })
    }

    /// Sorts the links before validating; duplicates are still rejected.
    pub fn from_unsorted(n: usize, mut links: Vec<(usize, usize)>) -> Result<Self, GraphError> {
        links.sort_unstable();
        Self::new(n, links)
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn links(&self) -> &[(usize, usize)] {
        &self.links
    }

    pub fn link_index(&self, tail: usize, head: usize) -> Option<usize> {
        self.links.binary_search(&(tail, head)).ok()
    }

    pub fn check_node(&self, node: usize) -> Result<(), GraphError> {
        if node < self.n {
            Ok(())
        } else {
            Err(GraphError::InvalidNode { node, n: self.n })
        }
    }

    fn check_od(&self, origin: usize, destination: usize) -> Result<(), GraphError> {
        self.check_node(origin)?;
        self.check_node(destination)?;
        if origin == destination {
            return Err(GraphError::SameOriginDestination(origin));
        }
        Ok(())
    }
}

/// Dimensions of a rectangular grid world.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
}

impl GridSpec {
    pub fn new(width: usize, height: usize) -> Result<Self, GraphError> {
        if width == 0 || height == 0 || width * height < 2 {
            return Err(GraphError::GridTooSmall { width, height });
        }
        Ok(Self { width, height })
    }

    /// Row-major node index of the cell at `(row, col)`.
    pub fn node(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }
}

/// Per-link weights handed to the shortest-path oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkWeights(DVector<f64>);

impl LinkWeights {
    pub fn new(graph: &DirectedGraph, w: DVector<f64>) -> Result<Self, GraphError> {
        if w.len() != graph.link_count() {
            return Err(GraphError::WeightLength {
                expected: graph.link_count(),
                got: w.len(),
            });
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(GraphError::NonFiniteWeight);
        }
        Ok(Self(w))
    }

    pub fn uniform(graph: &DirectedGraph, value: f64) -> Self {
        Self(DVector::from_element(graph.link_count(), value))
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }
}

/// Node-link incidence matrix: `+1` at a link's tail, `-1` at its head.
pub fn incidence_matrix(g: &DirectedGraph) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(g.n, g.links.len());
    for (j, &(tail, head)) in g.links.iter().enumerate() {
        e[(tail, j)] = 1.0;
        e[(head, j)] = -1.0;
    }
    e
}

/// Incidence matrix with the destination row removed.
pub fn reduced_incidence(g: &DirectedGraph, destination: usize) -> Result<DMatrix<f64>, GraphError> {
    g.check_node(destination)?;
    Ok(incidence_matrix(g).remove_row(destination))
}

/// Grid world with one node per cell and a link in each direction between
/// 4-neighbours.
pub fn grid_graph(spec: GridSpec) -> DirectedGraph {
    let mut links = Vec::with_capacity(4 * spec.width * spec.height);
    for row in 0..spec.height {
        for col in 0..spec.width {
            let u = spec.node(row, col);
            if row > 0 {
                links.push((u, spec.node(row - 1, col)));
            }
            if col > 0 {
                links.push((u, spec.node(row, col - 1)));
            }
            if col + 1 < spec.width {
                links.push((u, spec.node(row, col + 1)));
            }
            if row + 1 < spec.height {
                links.push((u, spec.node(row + 1, col)));
            }
        }
    }
    links.sort_unstable();
    DirectedGraph::new(spec.width * spec.height, links).expect("grid links are valid by construction")
}

/// Origin-destination vector `r` (length n) and its reduced form `s` with the
/// destination entry removed.
pub fn od_vectors(
    g: &DirectedGraph,
    origin: usize,
    destination: usize,
) -> Result<(DVector<f64>, DVector<f64>), GraphError> {
    g.check_od(origin, destination)?;
    let mut r = DVector::zeros(g.n);
    r[origin] = 1.0;
    r[destination] = -1.0;
    let s = r.clone().remove_row(destination);
    Ok((r, s))
}

/// Result of the shortest-path oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct ShortestPath {
    pub cost: f64,
    /// 0/1 link indicator of the chosen path.
    pub flow: DVector<f64>,
    /// Link indices in travel order.
    pub links: Vec<usize>,
}

fn relax_tolerance(w: &DVector<f64>) -> f64 {
    1e-12 * (1.0 + w.iter().map(|v| v.abs()).sum::<f64>())
}

/// Label-correcting distances from `source` along `arcs`; `None` marks
/// unreachable nodes. Fails if a negative cycle is reachable.
fn bellman_ford(
    n: usize,
    arcs: &[(usize, usize)],
    w: &DVector<f64>,
    source: Option<usize>,
) -> Result<Vec<Option<f64>>, GraphError> {
    let tol = relax_tolerance(w);
    let mut dist: Vec<Option<f64>> = match source {
        Some(s) => {
            let mut d = vec![None; n];
            d[s] = Some(0.0);
            d
        }
        // Virtual source connected to every node: detects any negative cycle.
        None => vec![Some(0.0); n],
    };
    for round in 0..=n {
        let mut changed = false;
        for (j, &(t, h)) in arcs.iter().enumerate() {
            let Some(dt) = dist[t] else { continue };
            let cand = dt + w[j];
            let better = match dist[h] {
                None => true,
                Some(dh) => cand < dh - tol,
            };
            if better {
                if round == n {
                    return Err(GraphError::NegativeCycle);
                }
                dist[h] = Some(cand);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(dist)
}

/// True if some directed cycle has negative total weight.
pub fn has_negative_cycle(g: &DirectedGraph, w: &LinkWeights) -> bool {
    bellman_ford(g.n, &g.links, w.as_vector(), None).is_err()
}

/// Minimum-cost path from `origin` to `destination`.
///
/// Any negative cycle in the graph is reported, even one that the chosen path
/// does not touch: a circulation on it is feasible in every flow polytope and
/// makes the linear minimization unbounded. Among tight shortest paths the one
/// with the fewest links wins, then the lowest-index predecessor.
pub fn shortest_path_cost(
    g: &DirectedGraph,
    w: &LinkWeights,
    origin: usize,
    destination: usize,
) -> Result<ShortestPath, GraphError> {
    g.check_od(origin, destination)?;
    let weights = w.as_vector();
    if has_negative_cycle(g, w) {
        return Err(GraphError::NegativeCycle);
    }
    let dist = bellman_ford(g.n, &g.links, weights, Some(origin))?;
    let Some(cost) = dist[destination] else {
        return Err(GraphError::Unreachable {
            origin,
            destination,
        });
    };
    let tol = relax_tolerance(weights) * 10.0;
    let tight = |j: usize| -> bool {
        let (t, h) = g.links[j];
        match (dist[t], dist[h]) {
            (Some(dt), Some(dh)) => (dt + weights[j] - dh).abs() <= tol,
            _ => false,
        }
    };
    // Hop counts over the tight subgraph, breadth-first from the origin.
    let mut out_links: Vec<Vec<usize>> = vec![Vec::new(); g.n];
    for (j, &(t, _)) in g.links.iter().enumerate() {
        if tight(j) {
            out_links[t].push(j);
        }
    }
    let mut hops: Vec<Option<usize>> = vec![None; g.n];
    hops[origin] = Some(0);
    let mut queue = VecDeque::from([origin]);
    while let Some(u) = queue.pop_front() {
        let hu = hops[u].expect("queued nodes have hop counts");
        for &j in &out_links[u] {
            let h = g.links[j].1;
            if hops[h].is_none() {
                hops[h] = Some(hu + 1);
                queue.push_back(h);
            }
        }
    }
    let mut path = Vec::new();
    let mut node = destination;
    while node != origin {
        let hn = hops[node].ok_or(GraphError::Unreachable {
            origin,
            destination,
        })?;
        // Links are sorted by tail, so the first match has the lowest predecessor.
        let j = (0..g.links.len())
            .find(|&j| g.links[j].1 == node && tight(j) && hops[g.links[j].0] == Some(hn - 1))
            .expect("a node at hop distance k has a tight predecessor at k - 1");
        path.push(j);
        node = g.links[j].0;
    }
    path.reverse();
    let mut flow = DVector::zeros(g.links.len());
    for &j in &path {
        flow[j] = 1.0;
    }
    Ok(ShortestPath {
        cost,
        flow,
        links: path,
    })
}

/// Shortest-path distance from every node to `target`; `None` where the
/// target cannot be reached.
pub fn distances_to(
    g: &DirectedGraph,
    w: &LinkWeights,
    target: usize,
) -> Result<Vec<Option<f64>>, GraphError> {
    g.check_node(target)?;
    let reversed: Vec<(usize, usize)> = g.links.iter().map(|&(t, h)| (h, t)).collect();
    bellman_ford(g.n, &reversed, w.as_vector(), Some(target))
}

/// Strictly positive feasible unit flow from `origin` to `destination`: a
/// fewest-links path plus an `eps` circulation around every link.
///
/// Each pair of opposite links gets one `eps` 2-cycle. A link without a
/// reverse partner is closed into a cycle along the fewest-links return path.
pub fn interior_flow(
    g: &DirectedGraph,
    origin: usize,
    destination: usize,
    eps: f64,
) -> Result<DVector<f64>, GraphError> {
    // Negated comparison so NaN is rejected too.
    if !(eps > 0.0) {
        return Err(GraphError::NonPositiveEps(eps));
    }
    let unit = LinkWeights::uniform(g, 1.0);
    let mut y = shortest_path_cost(g, &unit, origin, destination)?.flow;
    let mut covered = BTreeSet::new();
    for (j, &(t, h)) in g.links.iter().enumerate() {
        if covered.contains(&j) {
            continue;
        }
        if let Some(k) = g.link_index(h, t) {
            y[j] += eps;
            y[k] += eps;
            covered.insert(j);
            covered.insert(k);
        } else {
            let back = shortest_path_cost(g, &unit, h, t)?;
            y[j] += eps;
            for &k in &back.links {
                y[k] += eps;
            }
            covered.insert(j);
        }
    }
    Ok(y)
}

/// True iff the incidence matrix has rank `n - 1`.
pub fn graph_rank_check(g: &DirectedGraph) -> bool {
    numerical_rank(&incidence_matrix(g), &ToleranceConfig::default()) + 1 == g.n
}
