use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::DirectedGraph;

/// Structural Hamming distance, true positive rate and false discovery rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub shd: usize,
    pub tpr: f64,
    pub fdr: f64,
}

/// Compares an estimate against the true DAG.
///
/// SHD counts, per unordered node pair, one error whenever the estimated
/// edge set on that pair differs from the truth (a reversal is one error).
/// A reversed edge counts as a false discovery. With no true edges the TPR
/// is 1 (nothing to miss).
pub fn evaluate(estimate: &DirectedGraph, truth: &DirectedGraph) -> Result<Metrics> {
    let d = truth.node_count();
    if estimate.node_count() != d {
        return Err(Error::Argument(format!(
            "estimate has {} nodes, truth has {d}",
            estimate.node_count()
        )));
    }
    let mut shd = 0;
    for i in 0..d {
        for j in i + 1..d {
            let est = (estimate.has_edge(i, j), estimate.has_edge(j, i));
            let tru = (truth.has_edge(i, j), truth.has_edge(j, i));
            if est != tru {
                shd += 1;
            }
        }
    }
    let predicted = estimate.edge_count();
    let true_positive = estimate
        .edges()
        .filter(|&(i, j)| truth.has_edge(i, j))
        .count();
    let tpr = if truth.edge_count() == 0 {
        1.0
    } else {
        true_positive as f64 / truth.edge_count() as f64
    };
    let fdr = (predicted - true_positive) as f64 / predicted.max(1) as f64;
    Ok(Metrics { shd, tpr, fdr })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(d: usize, edges: &[(usize, usize)]) -> DirectedGraph {
        DirectedGraph::from_edges(d, edges.iter().copied()).unwrap()
    }

    #[test]
    fn identical_graphs() {
        let t = g(4, &[(0, 1), (1, 2), (0, 3)]);
        assert_eq!(
            evaluate(&t, &t).unwrap(),
            Metrics {
                shd: 0,
                tpr: 1.0,
                fdr: 0.0
            }
        );
    }

    #[test]
    fn single_reversal() {
        let m = evaluate(&g(2, &[(1, 0)]), &g(2, &[(0, 1)])).unwrap();
        assert_eq!(
            m,
            Metrics {
                shd: 1,
                tpr: 0.0,
                fdr: 1.0
            }
        );
    }

    #[test]
    fn missing_edge() {
        let m = evaluate(&g(3, &[(0, 1)]), &g(3, &[(0, 1), (1, 2)])).unwrap();
        assert_eq!(
            m,
            Metrics {
                shd: 1,
                tpr: 0.5,
                fdr: 0.0
            }
        );
    }

    #[test]
    fn extra_and_two_cycle() {
        // 0<->1 where truth has 0->1: one error on that pair; 1->2 extra.
        let m = evaluate(&g(3, &[(0, 1), (1, 0), (1, 2)]), &g(3, &[(0, 1)])).unwrap();
        assert_eq!(m.shd, 2);
        assert_eq!(m.tpr, 1.0);
        assert!((m.fdr - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_prediction_has_zero_fdr() {
        let m = evaluate(&DirectedGraph::empty(3), &g(3, &[(0, 2)])).unwrap();
        assert_eq!(
            m,
            Metrics {
                shd: 1,
                tpr: 0.0,
                fdr: 0.0
            }
        );
    }

    #[test]
    fn node_count_mismatch() {
        assert!(matches!(
            evaluate(&DirectedGraph::empty(2), &DirectedGraph::empty(3)),
            Err(Error::Argument(_))
        ));
    }
}
