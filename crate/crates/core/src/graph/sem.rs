//! Ground-truth structural equation models and data simulation.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::DirectedGraph;
use crate::numerics::Matrix;

/// Hidden units per mechanism in the simulated nonlinear models.
pub const GROUND_TRUTH_HIDDEN: usize = 100;

/// `X = Bᵀ X + N` with independent Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSem {
    pub weights: Matrix,
    pub noise_scale: Vec<f64>,
}

impl LinearSem {
    pub fn graph(&self) -> DirectedGraph {
        crate::graph::threshold_graph(&self.weights, 0.0)
    }
}

/// Edge weights uniform on `[−2, −0.5] ∪ [0.5, 2]`, unit noise scales.
pub fn sample_linear_sem<R: Rng + ?Sized>(graph: &DirectedGraph, rng: &mut R) -> Result<LinearSem> {
    if !graph.is_acyclic() {
        return Err(Error::Model("ground-truth graph must be acyclic".into()));
    }
    let d = graph.node_count();
    let mut weights = Matrix::zeros(d, d);
    for (i, j) in graph.edges() {
        let magnitude = rng.random_range(0.5..=2.0);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        weights[(i, j)] = sign * magnitude;
    }
    Ok(LinearSem {
        weights,
        noise_scale: vec![1.0; d],
    })
}

/// One sigmoid hidden layer per variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpMechanism {
    /// `hidden × d`; columns of non-parents are zero.
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl MlpMechanism {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut out = self.b2;
        for h in 0..self.w1.rows() {
            let z: f64 = self
                .w1
                .row(h)
                .iter()
                .zip(x)
                .map(|(w, v)| w * v)
                .sum::<f64>()
                + self.b1[h];
            out += self.w2[h] * sigmoid(z);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSem {
    pub graph: DirectedGraph,
    pub mechanisms: Vec<MlpMechanism>,
    pub noise_scale: Vec<f64>,
}

impl MlpSem {
    pub fn mechanism(&self, j: usize, x: &[f64]) -> f64 {
        self.mechanisms[j].eval(x)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Random MLP mechanisms: standard-normal first-layer weights on parent
/// columns and standard-normal output weights; biases zero.
pub fn sample_mlp_sem<R: Rng + ?Sized>(
    graph: &DirectedGraph,
    hidden: usize,
    rng: &mut R,
) -> Result<MlpSem> {
    if !graph.is_acyclic() {
        return Err(Error::Model("ground-truth graph must be acyclic".into()));
    }
    let d = graph.node_count();
    let mut mechanisms = Vec::with_capacity(d);
    for j in 0..d {
        let parents = graph.parents(j);
        let mut w1 = Matrix::zeros(hidden, d);
        for h in 0..hidden {
            for &p in &parents {
                w1[(h, p)] = StandardNormal.sample(rng);
            }
        }
        let w2 = (0..hidden).map(|_| StandardNormal.sample(rng)).collect();
        mechanisms.push(MlpMechanism {
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: 0.0,
        });
    }
    Ok(MlpSem {
        graph: graph.clone(),
        mechanisms,
        noise_scale: vec![1.0; d],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Sem {
    Linear(LinearSem),
    Mlp(MlpSem),
}

impl Sem {
    pub fn graph(&self) -> DirectedGraph {
        match self {
            Sem::Linear(s) => s.graph(),
            Sem::Mlp(s) => s.graph.clone(),
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            Sem::Linear(s) => s.weights.rows(),
            Sem::Mlp(s) => s.graph.node_count(),
        }
    }
}

/// Draws `n` i.i.d. samples, visiting variables in topological order.
pub fn simulate<R: Rng + ?Sized>(sem: &Sem, n: usize, rng: &mut R) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::Argument("sample size must be at least 1".into()));
    }
    let graph = sem.graph();
    let order = graph
        .topological_order()
        .ok_or_else(|| Error::Model("cannot simulate from a cyclic model".into()))?;
    let d = sem.node_count();
    let mut data = Matrix::zeros(n, d);
    for r in 0..n {
        for &j in &order {
            let noise: f64 = StandardNormal.sample(rng);
            let value = match sem {
                Sem::Linear(s) => {
                    let row = data.row(r);
                    let signal: f64 = (0..d).map(|i| s.weights[(i, j)] * row[i]).sum();
                    signal + s.noise_scale[j] * noise
                }
                Sem::Mlp(s) => s.mechanism(j, data.row(r)) + s.noise_scale[j] * noise,
            };
            data[(r, j)] = value;
        }
    }
    if !data.is_finite() {
        return Err(Error::Numeric("simulated data is not finite".into()));
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn covariance(x: &Matrix) -> Matrix {
        let n = x.rows() as f64;
        let centered = crate::graph::center(x);
        centered.gram().scale(1.0 / n)
    }

    #[test]
    fn empty_graph_has_zero_weights() {
        let sem = sample_linear_sem(&DirectedGraph::empty(4), &mut rng::seeded(0, 0)).unwrap();
        assert_eq!(sem.weights, Matrix::zeros(4, 4));
        assert_eq!(sem.noise_scale, vec![1.0; 4]);
    }

    #[test]
    fn weight_magnitudes_follow_uniform_mixture() {
        // 45 edges per complete DAG on 10 nodes; draw until 1000 weights.
        let complete =
            DirectedGraph::from_edges(10, (0..10).flat_map(|i| (i + 1..10).map(move |j| (i, j))))
                .unwrap();
        let mut r = rng::seeded(42, 0);
        let mut mags = Vec::new();
        while mags.len() < 1000 {
            let sem = sample_linear_sem(&complete, &mut r).unwrap();
            mags.extend(complete.edges().map(|(i, j)| sem.weights[(i, j)].abs()));
        }
        mags.truncate(1000);
        assert!(mags.iter().all(|&m| (0.5..=2.0).contains(&m)));
        let mean = mags.iter().sum::<f64>() / mags.len() as f64;
        assert!((mean - 1.25).abs() < 0.05, "mean |w| = {mean}");
    }

    #[test]
    fn linear_sem_is_deterministic() {
        let g = DirectedGraph::from_edges(3, [(0, 1), (1, 2)]).unwrap();
        let a = sample_linear_sem(&g, &mut rng::seeded(9, 2)).unwrap();
        let b = sample_linear_sem(&g, &mut rng::seeded(9, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn independent_noise_has_identity_covariance() {
        let sem = Sem::Linear(LinearSem {
            weights: Matrix::zeros(3, 3),
            noise_scale: vec![1.0; 3],
        });
        let x = simulate(&sem, 10_000, &mut rng::seeded(1, 3)).unwrap();
        let err = covariance(&x)
            .sub(&Matrix::identity(3))
            .unwrap()
            .frobenius_norm();
        assert!(err <= 0.1, "frobenius error {err}");
    }

    #[test]
    fn chain_variance_propagates() {
        let mut weights = Matrix::zeros(2, 2);
        weights[(0, 1)] = 1.0;
        let sem = Sem::Linear(LinearSem {
            weights,
            noise_scale: vec![1.0; 2],
        });
        let x = simulate(&sem, 10_000, &mut rng::seeded(2, 3)).unwrap();
        let var = covariance(&x)[(1, 1)];
        assert!((var - 2.0).abs() <= 0.1, "Var(X2) = {var}");
    }

    #[test]
    fn single_sample_and_zero_samples() {
        let sem = Sem::Linear(LinearSem {
            weights: Matrix::zeros(2, 2),
            noise_scale: vec![1.0; 2],
        });
        let x = simulate(&sem, 1, &mut rng::seeded(0, 0)).unwrap();
        assert_eq!(x.shape(), (1, 2));
        assert!(x.is_finite());
        assert!(simulate(&sem, 0, &mut rng::seeded(0, 0)).is_err());
    }

    #[test]
    fn cyclic_support_is_a_model_error() {
        let mut weights = Matrix::zeros(2, 2);
        weights[(0, 1)] = 1.0;
        weights[(1, 0)] = 1.0;
        let sem = Sem::Linear(LinearSem {
            weights,
            noise_scale: vec![1.0; 2],
        });
        assert!(matches!(
            simulate(&sem, 5, &mut rng::seeded(0, 0)),
            Err(Error::Model(_))
        ));
    }

    #[test]
    fn mlp_mechanisms_ignore_non_parents() {
        let g = DirectedGraph::from_edges(4, [(0, 2), (1, 2), (2, 3)]).unwrap();
        let sem = sample_mlp_sem(&g, GROUND_TRUTH_HIDDEN, &mut rng::seeded(4, 0)).unwrap();
        let base = [0.3, -1.2, 0.7, 2.0];
        let y = sem.mechanism(2, &base);
        for perturbed in [[0.3, -1.2, 55.0, -9.0], [0.3, -1.2, -3.0, 1e3]] {
            assert_eq!(sem.mechanism(2, &perturbed), y);
        }
        // Changing a parent does change the output.
        assert_ne!(sem.mechanism(2, &[1.3, -1.2, 0.7, 2.0]), y);
        for j in 0..4 {
            let parents = g.parents(j);
            for i in 0..4 {
                if !parents.contains(&i) {
                    let col_norm: f64 = (0..GROUND_TRUTH_HIDDEN)
                        .map(|h| sem.mechanisms[j].w1[(h, i)].abs())
                        .sum();
                    assert_eq!(col_norm, 0.0);
                }
            }
        }
        let x = simulate(&Sem::Mlp(sem), 50, &mut rng::seeded(4, 1)).unwrap();
        assert!(x.is_finite());
    }
}
