//! Simulated sensor communication network: synchronous neighbour
//! messaging and average consensus.
//!
//! Nodes are indexed `0..n` (sensor index, not [`NodeId`]).
//!
//! [`NodeId`]: crate::statespace::NodeId

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("node {from} cannot address non-neighbour {to}")]
    TopologyViolation { from: usize, to: usize },
    #[error("node index {0} out of range")]
    UnknownNode(usize),
    #[error("self-loop at node {0}")]
    SelfLoop(usize),
    #[error("consensus diverged (max |x| = {0})")]
    Diverged(f64),
}

/// Undirected communication graph without self-loops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommGraph {
    adjacency: Vec<BTreeSet<usize>>,
}

impl CommGraph {
    pub fn empty(n: usize) -> Self {
        CommGraph {
            adjacency: vec![BTreeSet::new(); n],
        }
    }

    /// Builds a graph from undirected edges; each edge is inserted in both
    /// directions.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, NetworkError> {
        let mut g = CommGraph::empty(n);
        for &(a, b) in edges {
            g.add_edge(a, b)?;
        }
        Ok(g)
    }

    pub fn complete(n: usize) -> Self {
        let mut g = CommGraph::empty(n);
        for a in 0..n {
            for b in a + 1..n {
                g.add_edge(a, b).expect("indices in range");
            }
        }
        g
    }

    pub fn add_edge(&mut self, a: usize, b: usize) -> Result<(), NetworkError> {
        let n = self.len();
        if a >= n {
            return Err(NetworkError::UnknownNode(a));
        }
        if b >= n {
            return Err(NetworkError::UnknownNode(b));
        }
        if a == b {
            return Err(NetworkError::SelfLoop(a));
        }
        self.adjacency[a].insert(b);
        self.adjacency[b].insert(a);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency[i].iter().copied()
    }

    pub fn are_neighbors(&self, a: usize, b: usize) -> bool {
        self.adjacency.get(a).is_some_and(|s| s.contains(&b))
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn max_degree(&self) -> usize {
        (0..self.len()).map(|i| self.degree(i)).max().unwrap_or(0)
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(BTreeSet::len).sum::<usize>() / 2
    }

    /// Connected component label (smallest member index) of each node.
    pub fn components(&self) -> Vec<usize> {
        let n = self.len();
        let mut label = vec![usize::MAX; n];
        for start in 0..n {
            if label[start] != usize::MAX {
                continue;
            }
            let mut stack = vec![start];
            label[start] = start;
            while let Some(i) = stack.pop() {
                for j in self.neighbors(i) {
                    if label[j] == usize::MAX {
                        label[j] = start;
                        stack.push(j);
                    }
                }
            }
        }
        label
    }

    pub fn is_connected(&self) -> bool {
        self.components().iter().all(|&c| c == 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WeightRule {
    /// `w_ij = 1 / (1 + max(deg_i, deg_j))`
    #[default]
    Metropolis,
    /// `w_ij = 1 / (1 + max_k deg_k)`
    MaxDegree,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsensusConfig {
    pub iterations: usize,
    #[serde(default)]
    pub rule: WeightRule,
    /// Replace the iterative protocol by the exact per-component average.
    #[serde(default)]
    pub exact: bool,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        ConsensusConfig {
            iterations: 5,
            rule: WeightRule::Metropolis,
            exact: false,
        }
    }
}

impl ConsensusConfig {
    pub fn exact() -> Self {
        ConsensusConfig {
            exact: true,
            ..Default::default()
        }
    }
}

fn edge_weight(graph: &CommGraph, rule: WeightRule, i: usize, j: usize) -> f64 {
    match rule {
        WeightRule::Metropolis => 1.0 / (1.0 + graph.degree(i).max(graph.degree(j)) as f64),
        WeightRule::MaxDegree => 1.0 / (1.0 + graph.max_degree() as f64),
    }
}

/// One synchronous update `x_i <- x_i + sum_{j in N(i)} w_ij (x_j - x_i)`,
/// applied componentwise. Reads only the previous values.
pub fn consensus_round(graph: &CommGraph, values: &[Vec<f64>], rule: WeightRule) -> Vec<Vec<f64>> {
    assert_eq!(graph.len(), values.len(), "one value vector per node");
    values
        .iter()
        .enumerate()
        .map(|(i, xi)| {
            let mut next = xi.clone();
            for j in graph.neighbors(i) {
                let w = edge_weight(graph, rule, i, j);
                for (n, (a, b)) in next.iter_mut().zip(xi.iter().zip(&values[j])) {
                    *n += w * (b - a);
                }
            }
            next
        })
        .collect()
}

/// Runs average consensus on `values` and returns each node's estimate of
/// its component's average.
pub fn average_consensus(
    graph: &CommGraph,
    values: &[Vec<f64>],
    cfg: &ConsensusConfig,
) -> Result<Vec<Vec<f64>>, NetworkError> {
    if cfg.exact {
        return Ok(exact_average(graph, values));
    }
    if !graph.is_connected() {
        log::warn!("communication graph is disconnected; consensus converges per component");
    }
    let bound = values
        .iter()
        .flat_map(|v| v.iter())
        .fold(0.0f64, |m, x| m.max(x.abs()));
    let mut cur = values.to_vec();
    for _ in 0..cfg.iterations {
        cur = consensus_round(graph, &cur, cfg.rule);
    }
    // Convex-combination updates never leave the input hull.
    let after = cur.iter().flat_map(|v| v.iter()).fold(0.0f64, |m, x| m.max(x.abs()));
    if !after.is_finite() || after > bound * (1.0 + 1e-9) + 1e-300 {
        return Err(NetworkError::Diverged(after));
    }
    Ok(cur)
}

/// Exact per-component averages.
pub fn exact_average(graph: &CommGraph, values: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let comp = graph.components();
    let dim = values.first().map_or(0, Vec::len);
    let mut out = vec![vec![0.0; dim]; values.len()];
    for c in comp.iter().copied().collect::<BTreeSet<_>>() {
        let members: Vec<usize> = (0..values.len()).filter(|&i| comp[i] == c).collect();
        let mut avg = vec![0.0; dim];
        for &i in &members {
            for (a, v) in avg.iter_mut().zip(&values[i]) {
                *a += v;
            }
        }
        avg.iter_mut().for_each(|a| *a /= members.len() as f64);
        for &i in &members {
            out[i] = avg.clone();
        }
    }
    out
}

/// Flooding agreement: every node adopts the proposal of the lowest-index
/// node it has heard of. After `rounds >= diameter` every node of a
/// component holds the same value exactly.
pub fn flood_lowest<T: Clone>(graph: &CommGraph, proposals: &[T], rounds: usize) -> Vec<T> {
    let mut origin: Vec<usize> = (0..graph.len()).collect();
    for _ in 0..rounds {
        let prev = origin.clone();
        for (i, o) in origin.iter_mut().enumerate() {
            for j in graph.neighbors(i) {
                *o = (*o).min(prev[j]);
            }
        }
    }
    origin.iter().map(|&o| proposals[o].clone()).collect()
}

/// A payload in transit between two nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope<T> {
    pub from: usize,
    pub to: usize,
    pub payload: T,
}

/// Delivers one round of point-to-point messages. Every envelope must be
/// addressed to a graph neighbour of its sender.
pub fn mailbox_exchange<T>(graph: &CommGraph, outgoing: Vec<Envelope<T>>) -> Result<Vec<Vec<Envelope<T>>>, NetworkError> {
    let mut inboxes: Vec<Vec<Envelope<T>>> = (0..graph.len()).map(|_| Vec::new()).collect();
    for env in outgoing {
        if env.from >= graph.len() {
            return Err(NetworkError::UnknownNode(env.from));
        }
        if env.to >= graph.len() {
            return Err(NetworkError::UnknownNode(env.to));
        }
        if !graph.are_neighbors(env.from, env.to) {
            return Err(NetworkError::TopologyViolation {
                from: env.from,
                to: env.to,
            });
        }
        inboxes[env.to].push(env);
    }
    Ok(inboxes)
}
