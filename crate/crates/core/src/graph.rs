//! Leader-rooted directed communication graphs and their structure matrices.
//!
//! A [`LeaderGraph`] has followers `1..=N` and a distinguished leader node
//! `0`. A directed edge `(j, i)` with positive weight means information flows
//! from `j` to `i`; leader links are edges from the leader to a follower.
//! The derived structure matrices follow the usual conventions: the adjacency
//! matrix `A` holds `a_ij = w(j -> i)`, the in-degree matrix is the diagonal
//! of row sums of `A`, the Laplacian is `L = -A + In`, the leader matrix `D`
//! is the diagonal of leader-link weights, and `H = L + D` is the matrix that
//! governs leader-following error dynamics.
//!
//! Connectivity is always meant in the leader-rooted sense: the graph is
//! connected when every follower is reachable from the leader along directed
//! edges. A collection is jointly connected when its union is connected, and
//! for any positive combination weights the union matrix `H` then has all
//! eigenvalue real parts strictly positive.

use crate::linalg::{self, Matrix, MatrixError};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("a graph needs at least one follower")]
    NoFollowers,
    #[error("node {node} out of range: followers are 1..={n})")]
    NodeOutOfRange { node: usize, n: usize },
    #[error("self loop on follower {node}")]
    SelfLoop { node: usize },
    #[error("edge weight must be positive and finite, got {weight}")]
    BadWeight { weight: f64 },
    #[error("graph collection is empty")]
    EmptyCollection,
    #[error("graph collections must share follower counts: expected {expected}, got {got}")]
    MixedSizes { expected: usize, got: usize },
    #[error("expected {expected} combination weights, got {got}")]
    ScaleCountMismatch { expected: usize, got: usize },
    #[error("combination weight must be positive and finite, got {weight}")]
    BadScale { weight: f64 },
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

/// Directed graph on followers `1..=N` plus leader links from node `0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaderGraph {
    n_followers: usize,
    /// Keyed by `(from, to)` with both in `1..=N`.
    edges: BTreeMap<(usize, usize), f64>,
    /// Keyed by the receiving follower.
    leader_links: BTreeMap<usize, f64>,
}

impl LeaderGraph {
    /// Empty graph on `n_followers` followers.
    pub fn new(n_followers: usize) -> Result<Self, GraphError> {
        if n_followers == 0 {
            return Err(GraphError::NoFollowers);
        }
        Ok(LeaderGraph {
            n_followers,
            edges: BTreeMap::new(),
            leader_links: BTreeMap::new(),
        })
    }

    pub fn n_followers(&self) -> usize {
        self.n_followers
    }

    fn check_node(&self, node: usize) -> Result<(), GraphError> {
        if node == 0 || node > self.n_followers {
            return Err(GraphError::NodeOutOfRange {
                node,
                n: self.n_followers,
            });
        }
        Ok(())
    }

    fn check_weight(weight: f64) -> Result<(), GraphError> {
        if !(weight.is_finite() && weight > 0.0) {
            return Err(GraphError::BadWeight { weight });
        }
        Ok(())
    }

    /// Adds the follower edge `(from, to)`. Adding an edge that already
    /// exists accumulates its weight, matching union semantics.
    pub fn add_edge(&mut self, from: usize, to: usize, weight: f64) -> Result<(), GraphError> {
        self.check_node(from)?;
        self.check_node(to)?;
        if from == to {
            return Err(GraphError::SelfLoop { node: from });
        }
        Self::check_weight(weight)?;
        *self.edges.entry((from, to)).or_insert(0.0) += weight;
        Ok(())
    }

    /// Adds a link from the leader to follower `to`, accumulating weight.
    pub fn add_leader_link(&mut self, to: usize, weight: f64) -> Result<(), GraphError> {
        self.check_node(to)?;
        Self::check_weight(weight)?;
        *self.leader_links.entry(to).or_insert(0.0) += weight;
        Ok(())
    }

    /// Follower edges as `(from, to, weight)` in deterministic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.edges.iter().map(|(&(f, t), &w)| (f, t, w))
    }

    /// Leader links as `(to, weight)` in deterministic order.
    pub fn leader_links(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.leader_links.iter().map(|(&t, &w)| (t, w))
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len() + self.leader_links.len()
    }

    /// Equality up to `tol` on every weight, with identical edge sets.
    pub fn approx_eq(&self, other: &LeaderGraph, tol: f64) -> bool {
        if self.n_followers != other.n_followers
            || self.edges.len() != other.edges.len()
            || self.leader_links.len() != other.leader_links.len()
        {
            return false;
        }
        let edges_match = self
            .edges
            .iter()
            .zip(other.edges.iter())
            .all(|((ka, wa), (kb, wb))| ka == kb && (wa - wb).abs() <= tol);
        let links_match = self
            .leader_links
            .iter()
            .zip(other.leader_links.iter())
            .all(|((ka, wa), (kb, wb))| ka == kb && (wa - wb).abs() <= tol);
        edges_match && links_match
    }

    /// True when every follower is reachable from the leader.
    pub fn is_connected(&self) -> bool {
        let n = self.n_followers;
        let mut seen = vec![false; n + 1];
        seen[0] = true;
        let mut queue = VecDeque::from([0usize]);
        let mut reached = 0usize;
        while let Some(node) = queue.pop_front() {
            let targets: Vec<usize> = if node == 0 {
                self.leader_links.keys().copied().collect()
            } else {
                self.edges
                    .range((node, 0)..(node + 1, 0))
                    .map(|(&(_, t), _)| t)
                    .collect()
            };
            for t in targets {
                if !seen[t] {
                    seen[t] = true;
                    reached += 1;
                    queue.push_back(t);
                }
            }
        }
        reached == n
    }

    /// Derives the adjacency, in-degree, Laplacian, leader, and `H` matrices.
    pub fn structure_matrices(&self) -> StructureMatrices {
        let n = self.n_followers;
        let adjacency = Matrix::from_fn(n, n, |i, j| {
            self.edges.get(&(j + 1, i + 1)).copied().unwrap_or(0.0)
        })
        .expect("finite edge weights");
        let in_degree = Matrix::from_fn(n, n, |i, j| {
            if i == j {
                (0..n).map(|k| adjacency.get(i, k)).sum()
            } else {
                0.0
            }
        })
        .expect("finite degrees");
        let laplacian = &in_degree - &adjacency;
        let leader_diag = Matrix::from_fn(n, n, |i, j| {
            if i == j {
                self.leader_links.get(&(i + 1)).copied().unwrap_or(0.0)
            } else {
                0.0
            }
        })
        .expect("finite leader weights");
        let h = &laplacian + &leader_diag;
        StructureMatrices {
            adjacency,
            in_degree,
            laplacian,
            leader_diag,
            h,
        }
    }
}

/// The structure matrices of one graph. `h = laplacian + leader_diag` is the
/// matrix whose spectrum decides leader-following stability.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureMatrices {
    pub adjacency: Matrix,
    pub in_degree: Matrix,
    pub laplacian: Matrix,
    pub leader_diag: Matrix,
    pub h: Matrix,
}

/// Weighted union of a graph collection. With `scales = None` all graphs
/// enter with weight one; otherwise `scales[k]` multiplies every weight of
/// graph `k`. Structure matrices are linear in the weights, so the union's
/// `H` equals the corresponding combination of the members' `H` matrices.
pub fn union(graphs: &[LeaderGraph], scales: Option<&[f64]>) -> Result<LeaderGraph, GraphError> {
    let first = graphs.first().ok_or(GraphError::EmptyCollection)?;
    let n = first.n_followers;
    if let Some(s) = scales {
        if s.len() != graphs.len() {
            return Err(GraphError::ScaleCountMismatch {
                expected: graphs.len(),
                got: s.len(),
            });
        }
        for &w in s {
            if !(w.is_finite() && w > 0.0) {
                return Err(GraphError::BadScale { weight: w });
            }
        }
    }
    let mut out = LeaderGraph::new(n)?;
    for (k, g) in graphs.iter().enumerate() {
        if g.n_followers != n {
            return Err(GraphError::MixedSizes {
                expected: n,
                got: g.n_followers,
            });
        }
        let scale = scales.map_or(1.0, |s| s[k]);
        for (from, to, w) in g.edges() {
            out.add_edge(from, to, scale * w)?;
        }
        for (to, w) in g.leader_links() {
            out.add_leader_link(to, scale * w)?;
        }
    }
    Ok(out)
}

/// A collection is jointly connected when its unweighted union is connected.
pub fn jointly_connected(graphs: &[LeaderGraph]) -> Result<bool, GraphError> {
    Ok(union(graphs, None)?.is_connected())
}

/// Smallest eigenvalue real part of a structure matrix.
pub fn min_real_eig(h: &Matrix) -> Result<f64, MatrixError> {
    Ok(linalg::eigenvalues(h)?.min_real())
}

/// Row disc of the Gershgorin localization: center at the diagonal entry,
/// radius the sum of off-diagonal magnitudes in that row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GershgorinDisc {
    pub center: f64,
    pub radius: f64,
}

impl GershgorinDisc {
    /// True when the complex point `(re, im)` lies in the disc, grown by
    /// `slack` to absorb eigenvalue roundoff.
    pub fn contains(&self, re: f64, im: f64, slack: f64) -> bool {
        let dr = re - self.center;
        (dr * dr + im * im).sqrt() <= self.radius + slack
    }
}

/// Row discs of a square matrix.
pub fn gershgorin_discs(m: &Matrix) -> Result<Vec<GershgorinDisc>, MatrixError> {
    if !m.is_square() {
        return Err(MatrixError::NotSquare {
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    let n = m.rows();
    Ok((0..n)
        .map(|i| {
            let radius = (0..n)
                .filter(|&j| j != i)
                .map(|j| m.get(i, j).abs())
                .sum();
            GershgorinDisc {
                center: m.get(i, i),
                radius,
            }
        })
        .collect())
}

/// True when `(re, im)` lies in the union of the discs with `slack` growth.
pub fn discs_contain(discs: &[GershgorinDisc], re: f64, im: f64, slack: f64) -> bool {
    discs.iter().any(|d| d.contains(re, im, slack))
}

/// Serialized form of a follower edge, either `[from, to]` with weight one
/// or `[from, to, weight]`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EdgeSpec {
    Pair(usize, usize),
    Weighted(usize, usize, f64),
}

/// Serialized form of a leader link, either a bare follower index with
/// weight one or `[to, weight]`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LinkSpec {
    Bare(usize),
    Weighted(usize, f64),
}

/// Graph description as it appears in configuration files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphConfig {
    pub n_followers: usize,
    #[serde(default)]
    pub edges: Vec<EdgeSpec>,
    #[serde(default)]
    pub leader_links: Vec<LinkSpec>,
}

impl GraphConfig {
    pub fn to_graph(&self) -> Result<LeaderGraph, GraphError> {
        let mut g = LeaderGraph::new(self.n_followers)?;
        for e in &self.edges {
            match *e {
                EdgeSpec::Pair(from, to) => g.add_edge(from, to, 1.0)?,
                EdgeSpec::Weighted(from, to, w) => g.add_edge(from, to, w)?,
            }
        }
        for l in &self.leader_links {
            match *l {
                LinkSpec::Bare(to) => g.add_leader_link(to, 1.0)?,
                LinkSpec::Weighted(to, w) => g.add_leader_link(to, w)?,
            }
        }
        Ok(g)
    }

    /// Canonical config with explicit weights everywhere.
    pub fn from_graph(g: &LeaderGraph) -> GraphConfig {
        GraphConfig {
            n_followers: g.n_followers(),
            edges: g
                .edges()
                .map(|(f, t, w)| EdgeSpec::Weighted(f, t, w))
                .collect(),
            leader_links: g
                .leader_links()
                .map(|(t, w)| LinkSpec::Weighted(t, w))
                .collect(),
        }
    }
}

pub mod random {
    //! Seeded generation of graph collections for tests and demos.
    //!
    //! The jointly-connected generator first draws a spanning arborescence
    //! rooted at the leader (each follower, visited in a random order, gets
    //! one incoming edge from the leader or an earlier follower) and then
    //! scatters each arborescence edge into a uniformly chosen member graph.
    //! Extra edges are sprinkled on top with a given probability. Joint
    //! connectivity therefore holds by construction, and the counterexample
    //! generator breaks it explicitly by cutting every incoming edge of a
    //! chosen follower set, which pins an exact zero eigenvalue of the
    //! union's `H`.

    use super::*;

    #[derive(Debug, Clone, Copy)]
    pub struct CollectionParams {
        pub n_followers: usize,
        pub n_graphs: usize,
        /// Probability of each extra follower edge, in `[0, 1]`.
        pub extra_edge_prob: f64,
    }

    /// Seeded collection whose union is connected by construction.
    pub fn jointly_connected_collection(
        params: CollectionParams,
        seed: u64,
    ) -> Result<Vec<LeaderGraph>, GraphError> {
        let CollectionParams {
            n_followers: n,
            n_graphs: m,
            extra_edge_prob,
        } = params;
        if m == 0 {
            return Err(GraphError::EmptyCollection);
        }
        assert!((0.0..=1.0).contains(&extra_edge_prob));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut graphs: Vec<LeaderGraph> = (0..m)
            .map(|_| LeaderGraph::new(n))
            .collect::<Result<_, _>>()?;

        // Random visiting order, then one incoming edge per follower from a
        // node already attached (leader or earlier follower).
        let mut order: Vec<usize> = (1..=n).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut attached = vec![0usize];
        for &node in &order {
            let parent = attached[rng.random_range(0..attached.len())];
            let target = rng.random_range(0..m);
            if parent == 0 {
                graphs[target].add_leader_link(node, 1.0)?;
            } else {
                graphs[target].add_edge(parent, node, 1.0)?;
            }
            attached.push(node);
        }

        for g in graphs.iter_mut() {
            for from in 1..=n {
                for to in 1..=n {
                    if from != to && rng.random_bool(extra_edge_prob) {
                        g.add_edge(from, to, 1.0)?;
                    }
                }
            }
        }
        Ok(graphs)
    }

    /// How the counterexample generator breaks joint connectivity.
    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum Defect {
        /// One follower receives no information at all. The union's `H` gets
        /// a zero row.
        StarvedNode,
        /// Two followers only hear each other. The union's `H` becomes block
        /// triangular under a node reordering with a singular leading block.
        StarvedPair,
    }

    /// Seeded collection that is not jointly connected. Returns the graphs
    /// and the followers that are unreachable from the leader in the union.
    pub fn disconnected_collection(
        params: CollectionParams,
        seed: u64,
        defect: Defect,
    ) -> Result<(Vec<LeaderGraph>, Vec<usize>), GraphError> {
        let n = params.n_followers;
        let min_needed = match defect {
            Defect::StarvedNode => 1,
            Defect::StarvedPair => 2,
        };
        if n < min_needed {
            return Err(GraphError::NoFollowers);
        }
        let base = jointly_connected_collection(params, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
        let starved: Vec<usize> = match defect {
            Defect::StarvedNode => vec![rng.random_range(1..=n)],
            Defect::StarvedPair => {
                let a = rng.random_range(1..=n);
                let mut b = rng.random_range(1..=n);
                while b == a {
                    b = rng.random_range(1..=n);
                }
                vec![a, b]
            }
        };
        let mut out = Vec::with_capacity(base.len());
        for g in &base {
            let mut h = LeaderGraph::new(n)?;
            for (from, to, w) in g.edges() {
                if !starved.contains(&to) {
                    h.add_edge(from, to, w)?;
                }
            }
            for (to, w) in g.leader_links() {
                if !starved.contains(&to) {
                    h.add_leader_link(to, w)?;
                }
            }
            out.push(h);
        }
        if defect == Defect::StarvedPair {
            // The pair talks to itself only, in the first graph.
            out[0].add_edge(starved[0], starved[1], 1.0)?;
            out[0].add_edge(starved[1], starved[0], 1.0)?;
        }
        let mut sorted = starved;
        sorted.sort_unstable();
        Ok((out, sorted))
    }
}
