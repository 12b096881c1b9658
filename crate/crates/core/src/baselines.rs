//! Standalone (per-client or pooled) structure learning and the
//! aggregation baselines built on it.

use serde::{Deserialize, Serialize};

use crate::admm_linear::scatter_loss;
use crate::admm_mlp::{self, MlpParams};
use crate::consensus::AdmmConfig;
use crate::error::{Error, Result};
use crate::graph::{center, evaluate, threshold_graph, ClientDataset, DirectedGraph};
use crate::numerics::{acyclicity_with_grad, lbfgs_minimize, lbfgs_minimize_l1, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalEstimate {
    pub client_id: u32,
    pub weighted: Matrix,
    pub graph: DirectedGraph,
    /// `h ≤ h_tolerance` was reached within the round budget.
    pub converged: bool,
}

impl LocalEstimate {
    fn new(client_id: u32, weighted: Matrix, tau: f64, converged: bool) -> Self {
        let graph = threshold_graph(&weighted, tau);
        Self {
            client_id,
            weighted,
            graph,
            converged,
        }
    }
}

/// Penalized objective plus a differentiable acyclicity term, both over the
/// same flat parameter vector.
pub(crate) trait ConstrainedProblem {
    /// Loss plus any penalty not covered by [`Self::separable_l1`];
    /// overwrites `grad`.
    fn base(&mut self, x: &[f64], grad: &mut [f64]) -> f64;

    /// Weight of a plain `λ‖x‖₁` term handled by the orthant-wise solver.
    fn separable_l1(&self) -> Option<f64> {
        None
    }

    /// `h(x)` with gradient written into `grad`; `None` on overflow.
    fn acyclicity(&self, x: &[f64], grad: &mut [f64]) -> Option<f64>;
}

pub(crate) struct AlOutcome {
    pub x: Vec<f64>,
    pub converged: bool,
}

/// Augmented Lagrangian: for each round minimize
/// `base(x) + α h(x) + (ρ/2) h(x)²`, then `α ← α + ρ h`, `ρ ← min(γ1 ρ, ρ_max)`.
pub(crate) fn augmented_lagrangian<P: ConstrainedProblem>(
    problem: &mut P,
    x0: Vec<f64>,
    config: &AdmmConfig,
    solver: &crate::numerics::SolverOptions,
) -> Result<AlOutcome> {
    let mut x = x0;
    let mut alpha = 0.0;
    let mut rho = config.rho1_init;
    let mut h_grad = vec![0.0; x.len()];
    let l1 = problem.separable_l1();
    for _ in 0..config.max_rounds {
        let mut objective = |x: &[f64], grad: &mut [f64]| {
            let mut hg = vec![0.0; x.len()];
            let Some(h) = problem.acyclicity(x, &mut hg) else {
                return f64::INFINITY;
            };
            let base = problem.base(x, grad);
            let coef = alpha + rho * h;
            for (g, hgi) in grad.iter_mut().zip(&hg) {
                *g += coef * hgi;
            }
            let value = base + alpha * h + 0.5 * rho * h * h;
            if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return f64::INFINITY;
            }
            value
        };
        let min = match l1 {
            Some(lambda) => lbfgs_minimize_l1(&mut objective, x, lambda, solver)?,
            None => lbfgs_minimize(&mut objective, x, solver)?,
        };
        x = min.x;
        let h = problem
            .acyclicity(&x, &mut h_grad)
            .ok_or_else(|| Error::NumericRange("acyclicity overflow".into()))?;
        alpha += rho * h;
        rho = (config.gamma1 * rho).min(config.rho_max);
        if h <= config.h_tolerance {
            return Ok(AlOutcome { x, converged: true });
        }
    }
    Ok(AlOutcome {
        x,
        converged: false,
    })
}

struct LinearProblem<'a> {
    scatter: &'a Matrix,
    lambda: f64,
}

impl ConstrainedProblem for LinearProblem<'_> {
    fn base(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.scatter.rows();
        let b = Matrix::from_fn(d, d, |i, j| x[i * d + j]);
        let (loss, loss_grad) = scatter_loss(&b, self.scatter).expect("shapes agree");
        grad.copy_from_slice(loss_grad.as_slice());
        for j in 0..d {
            grad[j * d + j] = 0.0;
        }
        loss
    }

    fn separable_l1(&self) -> Option<f64> {
        Some(self.lambda)
    }

    fn acyclicity(&self, x: &[f64], grad: &mut [f64]) -> Option<f64> {
        let d = self.scatter.rows();
        let b = Matrix::from_fn(d, d, |i, j| x[i * d + j]);
        let (h, hg) = acyclicity_with_grad(&b).ok()?;
        grad.copy_from_slice(hg.as_slice());
        Some(h)
    }
}

/// Linear NOTEARS on a scatter/covariance matrix: minimizes
/// `½ tr((I−B)ᵀ S (I−B)) + λ‖B‖₁` subject to `h(B) = 0`, with the diagonal
/// of `B` held at zero.
pub fn notears_from_scatter(
    client_id: u32,
    scatter: &Matrix,
    config: &AdmmConfig,
) -> Result<LocalEstimate> {
    config.validate()?;
    if !scatter.is_square() {
        return Err(Error::Dimension("scatter matrix must be square".into()));
    }
    let d = scatter.rows();
    let mut problem = LinearProblem {
        scatter,
        lambda: config.lambda,
    };
    let out = augmented_lagrangian(
        &mut problem,
        vec![0.0; d * d],
        config,
        &config.global_solver,
    )?;
    let weighted = Matrix::from_vec(d, d, out.x)?;
    Ok(LocalEstimate::new(
        client_id,
        weighted,
        config.threshold_tau,
        out.converged,
    ))
}

/// Linear NOTEARS on one (centered) dataset.
pub fn notears_local(client_id: u32, data: &Matrix, config: &AdmmConfig) -> Result<LocalEstimate> {
    if data.rows() == 0 {
        return Err(Error::Argument(format!(
            "client {client_id} has no samples"
        )));
    }
    let scatter = data.gram().scale(1.0 / data.rows() as f64);
    notears_from_scatter(client_id, &scatter, config)
}

/// Nonlinear (MLP) NOTEARS on one (centered) dataset; the weighted matrix
/// is the equivalent adjacency.
pub fn notears_mlp_local(
    client_id: u32,
    data: &Matrix,
    config: &AdmmConfig,
    init: &MlpParams,
) -> Result<LocalEstimate> {
    config.validate()?;
    if data.rows() == 0 {
        return Err(Error::Argument(format!(
            "client {client_id} has no samples"
        )));
    }
    let mut problem =
        admm_mlp::StandaloneProblem::new(data, config.lambda, init.dim(), init.hidden());
    let out = augmented_lagrangian(
        &mut problem,
        init.as_slice().to_vec(),
        config,
        &config.local_solver,
    )?;
    let params = MlpParams::from_flat(init.dim(), init.hidden(), out.x)?;
    Ok(LocalEstimate::new(
        client_id,
        admm_mlp::equivalent_adjacency(&params),
        config.threshold_tau,
        out.converged,
    ))
}

/// Which model family the standalone solver fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Linear,
    Mlp { seed: u64 },
}

pub fn fit_local(
    client_id: u32,
    data: &Matrix,
    config: &AdmmConfig,
    family: Family,
) -> Result<LocalEstimate> {
    match family {
        Family::Linear => notears_local(client_id, data, config),
        Family::Mlp { seed } => {
            let init = MlpParams::init(data.cols(), config.hidden_units, seed);
            notears_mlp_local(client_id, data, config, &init)
        }
    }
}

/// Independent standalone fits, one per client, in parallel.
pub fn fit_all_local(
    datasets: &[ClientDataset],
    config: &AdmmConfig,
    family: Family,
) -> Result<Vec<LocalEstimate>> {
    use rayon::prelude::*;
    datasets
        .par_iter()
        .map(|ds| fit_local(ds.client_id, &ds.data, config, family))
        .collect()
}

fn require_estimates(estimates: &[LocalEstimate]) -> Result<usize> {
    let first = estimates
        .first()
        .ok_or_else(|| Error::Argument("no local estimates to aggregate".into()))?;
    let d = first.graph.node_count();
    if estimates.iter().any(|e| e.graph.node_count() != d) {
        return Err(Error::Argument(
            "local estimates disagree on node count".into(),
        ));
    }
    Ok(d)
}

/// Keeps edges found by strictly more than half of the clients. Cycles are
/// left in place.
pub fn aggregate_voting(estimates: &[LocalEstimate]) -> Result<DirectedGraph> {
    let d = require_estimates(estimates)?;
    let k = estimates.len();
    let mut counts = vec![0usize; d * d];
    for e in estimates {
        for (i, j) in e.graph.edges() {
            counts[i * d + j] += 1;
        }
    }
    let edges = (0..d * d)
        .filter(|&idx| 2 * counts[idx] > k)
        .map(|idx| (idx / d, idx % d));
    DirectedGraph::from_edges(d, edges)
}

pub fn average_weights(estimates: &[LocalEstimate]) -> Result<Matrix> {
    let d = require_estimates(estimates)?;
    let mut mean = Matrix::zeros(d, d);
    for e in estimates {
        mean.axpy(1.0, &e.weighted)?;
    }
    Ok(mean.scale(1.0 / estimates.len() as f64))
}

/// Thresholds the mean weighted adjacency at `tau`.
pub fn aggregate_average(estimates: &[LocalEstimate], tau: f64) -> Result<DirectedGraph> {
    Ok(threshold_graph(&average_weights(estimates)?, tau))
}

/// Oracle baseline: the local graph closest to the truth in SHD, ties to
/// the lowest client id.
pub fn select_best(estimates: &[LocalEstimate], truth: &DirectedGraph) -> Result<DirectedGraph> {
    require_estimates(estimates)?;
    let mut best: Option<(usize, u32, &DirectedGraph)> = None;
    for e in estimates {
        let shd = evaluate(&e.graph, truth)?.shd;
        let better = match best {
            None => true,
            Some((s, id, _)) => shd < s || (shd == s && e.client_id < id),
        };
        if better {
            best = Some((shd, e.client_id, &e.graph));
        }
    }
    Ok(best.expect("non-empty").2.clone())
}

/// Pools all rows, re-centers, and fits one model.
pub fn run_alldata(
    datasets: &[ClientDataset],
    config: &AdmmConfig,
    family: Family,
) -> Result<LocalEstimate> {
    let blocks: Vec<&Matrix> = datasets.iter().map(|d| &d.data).collect();
    if blocks.is_empty() {
        return Err(Error::Argument("no datasets to pool".into()));
    }
    let pooled = center(&Matrix::vstack(&blocks)?);
    fit_local(0, &pooled, config, family)
}
