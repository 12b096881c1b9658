use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Directed graph over nodes `0..node_count` without self-loops.
///
/// Edges are kept ordered so iteration, serialization and SHD are
/// deterministic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectedGraph {
    node_count: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl DirectedGraph {
    pub fn empty(node_count: usize) -> Self {
        Self {
            node_count,
            edges: BTreeSet::new(),
        }
    }

    pub fn from_edges(
        node_count: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut g = Self::empty(node_count);
        for (i, j) in edges {
            g.add_edge(i, j)?;
        }
        Ok(g)
    }

    pub fn add_edge(&mut self, from: usize, to: usize) -> Result<()> {
        if from >= self.node_count || to >= self.node_count {
            return Err(Error::Argument(format!(
                "edge {from}->{to} out of range for {} nodes",
                self.node_count
            )));
        }
        if from == to {
            return Err(Error::Argument(format!("self-loop on node {from}")));
        }
        self.edges.insert((from, to));
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.edges.contains(&(from, to))
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn parents(&self, node: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|&&(_, j)| j == node)
            .map(|&(i, _)| i)
            .collect()
    }

    /// Kahn's algorithm; `None` when the graph has a directed cycle.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let d = self.node_count;
        let mut indegree = vec![0usize; d];
        let mut children = vec![Vec::new(); d];
        for &(i, j) in &self.edges {
            indegree[j] += 1;
            children[i].push(j);
        }
        let mut ready: Vec<usize> = (0..d).filter(|&v| indegree[v] == 0).rev().collect();
        let mut order = Vec::with_capacity(d);
        while let Some(v) = ready.pop() {
            order.push(v);
            for &c in &children[v] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(c);
                }
            }
        }
        (order.len() == d).then_some(order)
    }

    pub fn is_acyclic(&self) -> bool {
        self.topological_order().is_some()
    }

    /// 0/1 adjacency matrix with `A[i][j] = 1` for each edge `i → j`.
    pub fn adjacency(&self) -> Matrix {
        let mut a = Matrix::zeros(self.node_count, self.node_count);
        for &(i, j) in &self.edges {
            a[(i, j)] = 1.0;
        }
        a
    }
}

/// Erdős–Rényi DAG with exactly `edge_count` edges.
///
/// Draws `edge_count` distinct unordered pairs uniformly and orients each
/// from the earlier to the later node of a uniform random permutation.
pub fn sample_er_dag<R: Rng + ?Sized>(
    d: usize,
    edge_count: usize,
    rng: &mut R,
) -> Result<DirectedGraph> {
    let max_edges = d * d.saturating_sub(1) / 2;
    if edge_count > max_edges {
        return Err(Error::Argument(format!(
            "{edge_count} edges requested but a DAG on {d} nodes has at most {max_edges}"
        )));
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.shuffle(rng);
    let mut position = vec![0usize; d];
    for (pos, &node) in order.iter().enumerate() {
        position[node] = pos;
    }

    let pairs: Vec<(usize, usize)> = (0..d)
        .flat_map(|i| (i + 1..d).map(move |j| (i, j)))
        .collect();
    let mut graph = DirectedGraph::empty(d);
    for idx in index::sample(rng, pairs.len(), edge_count) {
        let (a, b) = pairs[idx];
        if position[a] < position[b] {
            graph.add_edge(a, b)?;
        } else {
            graph.add_edge(b, a)?;
        }
    }
    Ok(graph)
}

/// Edge `i → j` kept iff `|W[i][j]| > tau`; the diagonal is ignored.
pub fn threshold_graph(w: &Matrix, tau: f64) -> DirectedGraph {
    let d = w.rows();
    let mut graph = DirectedGraph::empty(d);
    for i in 0..d {
        for j in 0..d {
            if i != j && w[(i, j)].abs() > tau {
                graph.edges.insert((i, j));
            }
        }
    }
    graph
}
