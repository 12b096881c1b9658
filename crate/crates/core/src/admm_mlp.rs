//! Nonlinear family: one one-hidden-layer sigmoid MLP per variable, with
//! consensus over the flattened parameter vector and acyclicity on the
//! equivalent adjacency `A_ij = ‖W1ʲ[:, i]‖₂`.

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::admm_linear::check_datasets;
use crate::baselines::ConstrainedProblem;
use crate::consensus::{
    AdmmConfig, ConsensusClient, ConsensusServer, ConsensusSums, ConvergenceTrace, GlobalModel,
    GlobalStep, GlobalTerms, LocalModel, ModelFamily,
};
use crate::error::{Error, Result};
use crate::graph::{sigmoid, threshold_graph, ClientDataset, DirectedGraph};
use crate::numerics::{lbfgs_minimize, matexp, Matrix, SolverOptions};
use crate::rng::{self, stream};

const INIT_SCALE: f64 = 0.1;

/// Flat parameters of `d` per-variable MLPs with `m` hidden units.
///
/// Block `j` holds `W1ʲ` (m×d, row-major), `b1ʲ` (m), `w2ʲ` (m), `b2ʲ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    d: usize,
    hidden: usize,
    flat: Vec<f64>,
}

pub fn block_len(d: usize, hidden: usize) -> usize {
    hidden * d + 2 * hidden + 1
}

pub fn param_len(d: usize, hidden: usize) -> usize {
    d * block_len(d, hidden)
}

impl MlpParams {
    pub fn zeros(d: usize, hidden: usize) -> Self {
        Self {
            d,
            hidden,
            flat: vec![0.0; param_len(d, hidden)],
        }
    }

    /// First-layer weights uniform in `[−0.1, 0.1]` (self columns zero),
    /// everything else zero.
    pub fn init(d: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = rng::seeded(seed, stream::MODEL_INIT);
        let dist = Uniform::new_inclusive(-INIT_SCALE, INIT_SCALE).expect("valid range");
        let mut p = Self::zeros(d, hidden);
        for j in 0..d {
            let w1 = p.w1_mut(j);
            for h in 0..hidden {
                for i in 0..d {
                    if i != j {
                        w1[h * d + i] = dist.sample(&mut rng);
                    }
                }
            }
        }
        p
    }

    pub fn from_flat(d: usize, hidden: usize, flat: Vec<f64>) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Argument("hidden size must be positive".into()));
        }
        if flat.len() != param_len(d, hidden) {
            return Err(Error::Dimension(format!(
                "expected {} MLP parameters for d={d}, m={hidden}, got {}",
                param_len(d, hidden),
                flat.len()
            )));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("MLP parameters must be finite".into()));
        }
        Ok(Self { d, hidden, flat })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.flat
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.flat
    }

    fn block(&self, j: usize) -> &[f64] {
        let len = block_len(self.d, self.hidden);
        &self.flat[j * len..(j + 1) * len]
    }

    fn block_mut(&mut self, j: usize) -> &mut [f64] {
        let len = block_len(self.d, self.hidden);
        &mut self.flat[j * len..(j + 1) * len]
    }

    pub fn w1(&self, j: usize) -> &[f64] {
        &self.block(j)[..self.hidden * self.d]
    }

    pub fn w1_mut(&mut self, j: usize) -> &mut [f64] {
        let n = self.hidden * self.d;
        &mut self.block_mut(j)[..n]
    }

    pub fn b1(&self, j: usize) -> &[f64] {
        let o = self.hidden * self.d;
        &self.block(j)[o..o + self.hidden]
    }

    pub fn w2(&self, j: usize) -> &[f64] {
        let o = self.hidden * self.d + self.hidden;
        &self.block(j)[o..o + self.hidden]
    }

    pub fn b2(&self, j: usize) -> f64 {
        self.block(j)[block_len(self.d, self.hidden) - 1]
    }

    pub fn set_b2(&mut self, j: usize, value: f64) {
        let last = block_len(self.d, self.hidden) - 1;
        self.block_mut(j)[last] = value;
    }

    pub fn set_w2(&mut self, j: usize, values: &[f64]) {
        let o = self.hidden * self.d + self.hidden;
        let m = self.hidden;
        self.block_mut(j)[o..o + m].copy_from_slice(values);
    }

    /// Multiplies every first-layer weight by `factor`.
    pub fn scale_first_layer(&mut self, factor: f64) {
        for j in 0..self.d {
            self.w1_mut(j).iter_mut().for_each(|w| *w *= factor);
        }
    }
}

/// Flat indices of the self-column weights `W1ʲ[:, j]`.
fn self_column_indices(d: usize, hidden: usize) -> impl Iterator<Item = usize> {
    let len = block_len(d, hidden);
    (0..d).flat_map(move |j| (0..hidden).map(move |h| j * len + h * d + j))
}

fn mask_self_columns(grad: &mut [f64], d: usize, hidden: usize) {
    for idx in self_column_indices(d, hidden) {
        grad[idx] = 0.0;
    }
}

/// `output_j = w2ʲ·σ(W1ʲ x + b1ʲ) + b2ʲ`.
pub fn mlp_forward(params: &MlpParams, x: &[f64]) -> Result<Vec<f64>> {
    let (d, m) = (params.d, params.hidden);
    if x.len() != d {
        return Err(Error::Argument(format!(
            "input has {} entries, model expects {d}",
            x.len()
        )));
    }
    Ok((0..d)
        .map(|j| {
            let (w1, b1, w2) = (params.w1(j), params.b1(j), params.w2(j));
            let mut out = params.b2(j);
            for h in 0..m {
                let z: f64 = b1[h] + (0..d).map(|i| w1[h * d + i] * x[i]).sum::<f64>();
                out += w2[h] * sigmoid(z);
            }
            out
        })
        .collect())
}

/// `A_ij = ‖W1ʲ[:, i]‖₂`, diagonal zero.
pub fn equivalent_adjacency(params: &MlpParams) -> Matrix {
    let d = params.d;
    let m = params.hidden;
    Matrix::from_fn(d, d, |i, j| {
        if i == j {
            return 0.0;
        }
        let w1 = params.w1(j);
        (0..m).map(|h| w1[h * d + i].powi(2)).sum::<f64>().sqrt()
    })
}

fn adjacency_from_flat(flat: &[f64], d: usize, m: usize) -> Matrix {
    let len = block_len(d, m);
    Matrix::from_fn(d, d, |i, j| {
        if i == j {
            return 0.0;
        }
        let w1 = &flat[j * len..j * len + m * d];
        (0..m).map(|h| w1[h * d + i].powi(2)).sum::<f64>().sqrt()
    })
}

/// `(1/(2 total_n)) Σ_rows ‖x − MLP(x)‖²`, gradient written into `grad`.
pub fn data_loss_grad(
    flat: &[f64],
    data: &Matrix,
    total_n: usize,
    m: usize,
    grad: &mut [f64],
) -> f64 {
    let d = data.cols();
    let len = block_len(d, m);
    let scale = 1.0 / total_n.max(1) as f64;
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut loss = 0.0;
    let mut s = vec![0.0; m];
    for row in 0..data.rows() {
        let x = data.row(row);
        for j in 0..d {
            let block = &flat[j * len..(j + 1) * len];
            let (w1, rest) = block.split_at(m * d);
            let (b1, rest) = rest.split_at(m);
            let (w2, b2) = rest.split_at(m);
            let mut out = b2[0];
            for h in 0..m {
                let w1h = &w1[h * d..(h + 1) * d];
                let z = b1[h] + w1h.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
                s[h] = sigmoid(z);
                out += w2[h] * s[h];
            }
            let r = out - x[j];
            loss += r * r;
            let rs = r * scale;
            let g = &mut grad[j * len..(j + 1) * len];
            let (gw1, grest) = g.split_at_mut(m * d);
            let (gb1, grest) = grest.split_at_mut(m);
            let (gw2, gb2) = grest.split_at_mut(m);
            gb2[0] += rs;
            for h in 0..m {
                gw2[h] += rs * s[h];
                let dz = rs * w2[h] * s[h] * (1.0 - s[h]);
                gb1[h] += dz;
                for (gw, xi) in gw1[h * d..(h + 1) * d].iter_mut().zip(x) {
                    *gw += dz * xi;
                }
            }
        }
    }
    mask_self_columns(grad, d, m);
    0.5 * scale * loss
}

/// Adds `λ Σ A_ij` and its subgradient (zero at a zero column).
fn add_group_lasso(flat: &[f64], d: usize, m: usize, lambda: f64, grad: &mut [f64]) -> f64 {
    let len = block_len(d, m);
    let mut total = 0.0;
    for j in 0..d {
        for i in (0..d).filter(|&i| i != j) {
            let norm = (0..m)
                .map(|h| flat[j * len + h * d + i].powi(2))
                .sum::<f64>()
                .sqrt();
            total += norm;
            if norm > 0.0 {
                for h in 0..m {
                    let idx = j * len + h * d + i;
                    grad[idx] += lambda * flat[idx] / norm;
                }
            }
        }
    }
    lambda * total
}

/// `h(A(θ))`; the gradient w.r.t. `θ` is `2 E_ji W1ʲ[h, i]` on first-layer
/// entries with `E = exp(A∘A)`, zero elsewhere.
pub fn acyclicity_params(flat: &[f64], d: usize, m: usize, grad: &mut [f64]) -> Result<f64> {
    let a = adjacency_from_flat(flat, d, m);
    let e = matexp(&a.hadamard(&a)?)?;
    let h = (e.trace() - d as f64).max(0.0);
    let len = block_len(d, m);
    grad.iter_mut().for_each(|g| *g = 0.0);
    for j in 0..d {
        for i in (0..d).filter(|&i| i != j) {
            let coef = 2.0 * e[(j, i)];
            for h_ in 0..m {
                let idx = j * len + h_ * d + i;
                grad[idx] = coef * flat[idx];
            }
        }
    }
    Ok(h)
}

fn proximal_terms(theta: &[f64], global: &[f64], beta: &[f64], rho2: f64, grad: &mut [f64]) -> f64 {
    let mut value = 0.0;
    for idx in 0..theta.len() {
        let diff = theta[idx] - global[idx];
        value += beta[idx] * diff + 0.5 * rho2 * diff * diff;
        grad[idx] += beta[idx] + rho2 * diff;
    }
    value
}

/// Client subobjective `loss(θ) + ⟨β, θ − θ_g⟩ + (ρ2/2)‖θ − θ_g‖²` and its
/// gradient.
pub fn client_subobjective_nonlinear(
    theta: &[f64],
    global: &[f64],
    beta: &[f64],
    rho2: f64,
    data: &Matrix,
    total_n: usize,
    hidden: usize,
    grad: &mut [f64],
) -> f64 {
    let loss = data_loss_grad(theta, data, total_n, hidden, grad);
    let prox = proximal_terms(theta, global, beta, rho2, grad);
    mask_self_columns(grad, data.cols(), hidden);
    loss + prox
}

/// L-BFGS on the client subobjective, warm-started at `local`.
#[allow(clippy::too_many_arguments)]
pub fn client_update_nonlinear(
    local: &MlpParams,
    global: &MlpParams,
    beta: &[f64],
    rho2: f64,
    data: &Matrix,
    total_n: usize,
    opts: &SolverOptions,
) -> Result<MlpParams> {
    if !(rho2 > 0.0) {
        return Err(Error::Config(format!("rho2 must be positive, got {rho2}")));
    }
    let (d, m) = (global.d, global.hidden);
    if local.d != d || local.hidden != m || data.cols() != d || beta.len() != param_len(d, m) {
        return Err(Error::Dimension("client update shapes disagree".into()));
    }
    let mut objective = |theta: &[f64], grad: &mut [f64]| {
        client_subobjective_nonlinear(theta, global.as_slice(), beta, rho2, data, total_n, m, grad)
    };
    let min = lbfgs_minimize(&mut objective, local.as_slice().to_vec(), opts)?;
    MlpParams::from_flat(d, m, min.x)
}

/// Client side of the MLP family; warm-starts from its previous local.
#[derive(Debug, Clone)]
pub struct MlpClient {
    data: Matrix,
    total_n: usize,
    hidden: usize,
    solver: SolverOptions,
    warm: Option<Vec<f64>>,
}

impl MlpClient {
    pub fn new(
        dataset: &ClientDataset,
        total_n: usize,
        hidden: usize,
        solver: SolverOptions,
    ) -> Self {
        Self {
            data: dataset.data.clone(),
            total_n,
            hidden,
            solver,
            warm: None,
        }
    }
}

impl LocalModel for MlpClient {
    fn param_len(&self) -> usize {
        param_len(self.data.cols(), self.hidden)
    }

    fn local_update(&mut self, global: &[f64], beta: &[f64], rho2: f64) -> Result<Vec<f64>> {
        let (d, m) = (self.data.cols(), self.hidden);
        let start = self.warm.clone().unwrap_or_else(|| global.to_vec());
        let local = MlpParams::from_flat(d, m, start)?;
        let global = MlpParams::from_flat(d, m, global.to_vec())?;
        let theta = client_update_nonlinear(
            &local,
            &global,
            beta,
            rho2,
            &self.data,
            self.total_n,
            &self.solver,
        )?
        .into_flat();
        self.warm = Some(theta.clone());
        Ok(theta)
    }
}

pub type MlpClientState = ConsensusClient<MlpClient>;

/// Server side of the MLP family: group lasso on `A` plus the acyclicity
/// terms on `h(A)`.
#[derive(Debug, Clone)]
pub struct MlpServer {
    init: MlpParams,
    lambda: f64,
    solver: SolverOptions,
}

impl MlpServer {
    pub fn new(init: MlpParams, lambda: f64, solver: SolverOptions) -> Self {
        Self {
            init,
            lambda,
            solver,
        }
    }

    fn objective(
        &self,
        w: &[f64],
        grad: &mut [f64],
        terms: GlobalTerms,
        sums: &ConsensusSums,
    ) -> f64 {
        let (d, m) = (self.init.d, self.init.hidden);
        let mut h_grad = vec![0.0; w.len()];
        let Ok(h) = acyclicity_params(w, d, m, &mut h_grad) else {
            grad.iter_mut().for_each(|g| *g = 0.0);
            return f64::INFINITY;
        };
        let consensus = sums.value_and_grad(w, terms.rho2, grad);
        let penalty = add_group_lasso(w, d, m, self.lambda, grad);
        let coef = terms.alpha + terms.rho1 * h;
        for (g, hg) in grad.iter_mut().zip(&h_grad) {
            *g += coef * hg;
        }
        mask_self_columns(grad, d, m);
        penalty + terms.alpha * h + 0.5 * terms.rho1 * h * h + consensus
    }
}

impl GlobalModel for MlpServer {
    fn param_len(&self) -> usize {
        self.init.flat.len()
    }

    fn node_count(&self) -> usize {
        self.init.d
    }

    fn initial_global(&self) -> Vec<f64> {
        self.init.flat.clone()
    }

    fn adjacency(&self, global: &[f64]) -> Result<Matrix> {
        Ok(equivalent_adjacency(&MlpParams::from_flat(
            self.init.d,
            self.init.hidden,
            global.to_vec(),
        )?))
    }

    fn global_update(
        &self,
        warm: &[f64],
        locals: &[Vec<f64>],
        betas: &[Vec<f64>],
        terms: GlobalTerms,
    ) -> Result<GlobalStep> {
        let sums = ConsensusSums::new(locals, betas, self.param_len());
        let mut objective = |w: &[f64], g: &mut [f64]| self.objective(w, g, terms, &sums);
        let min = lbfgs_minimize(&mut objective, warm.to_vec(), &self.solver)?;
        Ok(GlobalStep {
            params: min.x,
            objective: min.value,
        })
    }
}

/// Standalone penalized problem for the augmented-Lagrangian baseline.
pub(crate) struct StandaloneProblem<'a> {
    data: &'a Matrix,
    lambda: f64,
    d: usize,
    hidden: usize,
}

impl<'a> StandaloneProblem<'a> {
    pub(crate) fn new(data: &'a Matrix, lambda: f64, d: usize, hidden: usize) -> Self {
        Self {
            data,
            lambda,
            d,
            hidden,
        }
    }
}

impl ConstrainedProblem for StandaloneProblem<'_> {
    fn base(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
        let loss = data_loss_grad(x, self.data, self.data.rows(), self.hidden, grad);
        let penalty = add_group_lasso(x, self.d, self.hidden, self.lambda, grad);
        mask_self_columns(grad, self.d, self.hidden);
        loss + penalty
    }

    fn acyclicity(&self, x: &[f64], grad: &mut [f64]) -> Option<f64> {
        acyclicity_params(x, self.d, self.hidden, grad).ok()
    }
}

#[derive(Debug, Clone)]
pub struct MlpAdmmResult {
    pub params: MlpParams,
    pub adjacency: Matrix,
    pub graph: DirectedGraph,
    pub trace: ConvergenceTrace,
}

pub fn mlp_clients(datasets: &[ClientDataset], config: &AdmmConfig) -> Vec<MlpClientState> {
    let total_n: usize = datasets.iter().map(ClientDataset::sample_count).sum();
    datasets
        .iter()
        .map(|ds| {
            let model = MlpClient::new(ds, total_n, config.hidden_units, config.local_solver);
            ConsensusClient::new(ds.client_id, model, config)
        })
        .collect()
}

pub fn mlp_server(d: usize, config: &AdmmConfig, init_seed: u64) -> MlpServer {
    MlpServer::new(
        MlpParams::init(d, config.hidden_units, init_seed),
        config.lambda,
        config.global_solver,
    )
}

/// Consensus ADMM with the MLP family; `init_seed` fixes the initial
/// global parameters.
pub fn run_admm_mlp(
    datasets: &[ClientDataset],
    config: &AdmmConfig,
    init_seed: u64,
) -> Result<MlpAdmmResult> {
    config.validate()?;
    let d = check_datasets(datasets)?;
    let mut clients = mlp_clients(datasets, config);
    let server = ConsensusServer::new(
        mlp_server(d, config, init_seed),
        clients.len(),
        config,
        ModelFamily::Mlp,
    )?;
    let outcome = crate::consensus::run_consensus(&mut clients, server)?;
    let graph = threshold_graph(&outcome.adjacency, config.threshold_tau);
    Ok(MlpAdmmResult {
        params: MlpParams::from_flat(d, config.hidden_units, outcome.global)?,
        adjacency: outcome.adjacency,
        graph,
        trace: outcome.trace,
    })
}
