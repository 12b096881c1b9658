//! Linear least-squares family: closed-form proximal client step and the
//! ℓ1 + acyclicity global step.

use crate::consensus::{
    run_consensus, AdmmConfig, ConsensusClient, ConsensusServer, ConsensusSums, ConvergenceTrace,
    GlobalModel, GlobalStep, GlobalTerms, LocalModel, ModelFamily,
};
use crate::error::{Error, Result};
use crate::graph::{threshold_graph, ClientDataset, DirectedGraph};
use crate::numerics::{
    acyclicity_with_grad, lbfgs_minimize, sign, Cholesky, Matrix, SolverOptions,
};

/// Centering check applied to every client dataset before a run.
pub const CENTERING_TOLERANCE: f64 = 1e-8;
const STATIONARITY_TOLERANCE: f64 = 1e-8;

/// `(1/(2·total_n)) Σᵢ ‖xᵢ − Bᵀxᵢ‖²` over the rows of `data`.
pub fn least_squares_loss(b: &Matrix, data: &Matrix, total_n: usize) -> Result<f64> {
    let d = data.cols();
    if b.shape() != (d, d) {
        return Err(Error::Argument(format!(
            "coefficient matrix is {}x{}, data has {d} columns",
            b.rows(),
            b.cols()
        )));
    }
    if total_n < data.rows() || total_n == 0 {
        return Err(Error::Argument(format!(
            "total sample size {total_n} is smaller than the local {}",
            data.rows()
        )));
    }
    // Rows of x·B are (Bᵀxᵢ)ᵀ.
    let residual = data.sub(&data.matmul(b)?)?;
    let sq: f64 = residual.as_slice().iter().map(|v| v * v).sum();
    Ok(sq / (2.0 * total_n as f64))
}

/// `½ tr((I − B)ᵀ S (I − B))` and its gradient `−S (I − B)`.
pub fn scatter_loss(b: &Matrix, scatter: &Matrix) -> Result<(f64, Matrix)> {
    let d = scatter.rows();
    let resid = Matrix::identity(d).sub(b)?;
    let s_resid = scatter.matmul(&resid)?;
    let value = 0.5 * resid.hadamard(&s_resid)?.as_slice().iter().sum::<f64>();
    Ok((value, s_resid.scale(-1.0)))
}

/// Gradient of the client subobjective
/// `½ tr((I−B)ᵀS(I−B)) + ⟨β, B − W⟩ + (ρ2/2)‖B − W‖²`, i.e.
/// `(S + ρ2 I) B − (ρ2 W − β + S)`.
pub fn client_subobjective_grad(
    b: &Matrix,
    scatter: &Matrix,
    w: &Matrix,
    beta: &Matrix,
    rho2: f64,
) -> Result<Matrix> {
    let mut grad = scatter.matmul(b)?;
    grad.axpy(rho2, b)?;
    grad.axpy(-rho2, w)?;
    grad.axpy(1.0, beta)?;
    grad.axpy(-1.0, scatter)?;
    Ok(grad)
}

pub fn client_subobjective(
    b: &Matrix,
    scatter: &Matrix,
    w: &Matrix,
    beta: &Matrix,
    rho2: f64,
) -> Result<f64> {
    let (loss, _) = scatter_loss(b, scatter)?;
    let diff = b.sub(w)?;
    let linear: f64 = beta.hadamard(&diff)?.as_slice().iter().sum();
    Ok(loss + linear + 0.5 * rho2 * diff.frobenius_norm().powi(2))
}

/// Closed-form client step `B = (S + ρ2 I)⁻¹ (ρ2 W − β + S)`.
///
/// Fails if the stationarity residual of the result exceeds
/// `1e-8 · (‖S + ρ2 I‖_F ‖B‖_F + ‖ρ2 W − β + S‖_F)`.
pub fn client_update(scatter: &Matrix, beta: &Matrix, rho2: f64, w: &Matrix) -> Result<Matrix> {
    if !(rho2 > 0.0) {
        return Err(Error::Config(format!("rho2 must be positive, got {rho2}")));
    }
    let d = scatter.rows();
    let mut system = scatter.clone();
    system.axpy(rho2, &Matrix::identity(d))?;
    let mut rhs = w.scale(rho2);
    rhs.axpy(-1.0, beta)?;
    rhs.axpy(1.0, scatter)?;
    let b = Cholesky::factor(&system)?.solve(&rhs)?;
    let grad = client_subobjective_grad(&b, scatter, w, beta, rho2)?;
    let bound = STATIONARITY_TOLERANCE
        * (system.frobenius_norm() * b.frobenius_norm() + rhs.frobenius_norm())
            .max(f64::MIN_POSITIVE);
    if grad.frobenius_norm() > bound {
        return Err(Error::Numeric(format!(
            "client step not stationary: residual {:e} > {bound:e}",
            grad.frobenius_norm()
        )));
    }
    Ok(b)
}

/// Private side of a linear client: only the scatter statistic is kept.
#[derive(Debug, Clone)]
pub struct LinearClient {
    scatter: Matrix,
}

impl LinearClient {
    /// `S_k = x_kᵀ x_k / total_n`.
    pub fn new(dataset: &ClientDataset, total_n: usize) -> Self {
        Self {
            scatter: dataset.scatter(total_n),
        }
    }

    pub fn from_scatter(scatter: Matrix) -> Self {
        Self { scatter }
    }

    pub fn scatter(&self) -> &Matrix {
        &self.scatter
    }
}

impl LocalModel for LinearClient {
    fn param_len(&self) -> usize {
        self.scatter.rows().pow(2)
    }

    fn local_update(&mut self, global: &[f64], beta: &[f64], rho2: f64) -> Result<Vec<f64>> {
        let d = self.scatter.rows();
        let w = Matrix::from_vec(d, d, global.to_vec())?;
        let beta = Matrix::from_vec(d, d, beta.to_vec())?;
        Ok(client_update(&self.scatter, &beta, rho2, &w)?.into_vec())
    }
}

pub type LinearClientState = ConsensusClient<LinearClient>;

/// Server side of the linear family.
#[derive(Debug, Clone)]
pub struct LinearServer {
    d: usize,
    lambda: f64,
    solver: SolverOptions,
}

impl LinearServer {
    pub fn new(d: usize, lambda: f64, solver: SolverOptions) -> Self {
        Self { d, lambda, solver }
    }
}

/// Value and subgradient of the global-step objective at `w`; `+∞` when
/// the acyclicity term overflows.
fn global_objective(
    w: &[f64],
    grad: &mut [f64],
    d: usize,
    lambda: f64,
    terms: GlobalTerms,
    sums: &ConsensusSums,
) -> f64 {
    let wm = Matrix::from_fn(d, d, |i, j| w[i * d + j]);
    let Ok((h, h_grad)) = acyclicity_with_grad(&wm) else {
        grad.iter_mut().for_each(|g| *g = 0.0);
        return f64::INFINITY;
    };
    let consensus = sums.value_and_grad(w, terms.rho2, grad);
    let h_coef = terms.alpha + terms.rho1 * h;
    let mut l1 = 0.0;
    for ((g, &wi), &hg) in grad.iter_mut().zip(w).zip(h_grad.as_slice()) {
        l1 += wi.abs();
        *g += lambda * sign(wi) + h_coef * hg;
    }
    lambda * l1 + terms.alpha * h + 0.5 * terms.rho1 * h * h + consensus
}

impl GlobalModel for LinearServer {
    fn param_len(&self) -> usize {
        self.d * self.d
    }

    fn node_count(&self) -> usize {
        self.d
    }

    fn initial_global(&self) -> Vec<f64> {
        vec![0.0; self.d * self.d]
    }

    fn adjacency(&self, global: &[f64]) -> Result<Matrix> {
        Matrix::from_vec(self.d, self.d, global.to_vec())
    }

    fn global_update(
        &self,
        warm: &[f64],
        locals: &[Vec<f64>],
        betas: &[Vec<f64>],
        terms: GlobalTerms,
    ) -> Result<GlobalStep> {
        let sums = ConsensusSums::new(locals, betas, self.param_len());
        let (d, lambda) = (self.d, self.lambda);
        let mut objective =
            |w: &[f64], g: &mut [f64]| global_objective(w, g, d, lambda, terms, &sums);
        let min = lbfgs_minimize(&mut objective, warm.to_vec(), &self.solver)?;
        Ok(GlobalStep {
            params: min.x,
            objective: min.value,
        })
    }
}

/// Convenience wrapper: the global step as a standalone call on matrices.
pub fn server_w_update(
    warm: &Matrix,
    locals: &[Matrix],
    betas: &[Matrix],
    lambda: f64,
    terms: GlobalTerms,
    solver: &SolverOptions,
) -> Result<Matrix> {
    let d = warm.rows();
    let server = LinearServer::new(d, lambda, *solver);
    let locals: Vec<Vec<f64>> = locals.iter().map(|m| m.as_slice().to_vec()).collect();
    let betas: Vec<Vec<f64>> = betas.iter().map(|m| m.as_slice().to_vec()).collect();
    let step = server.global_update(warm.as_slice(), &locals, &betas, terms)?;
    Matrix::from_vec(d, d, step.params)
}

/// Global-step objective at a matrix point (for certificates and tests).
pub fn server_objective(
    w: &Matrix,
    locals: &[Matrix],
    betas: &[Matrix],
    lambda: f64,
    terms: GlobalTerms,
) -> (f64, Matrix) {
    let d = w.rows();
    let locals: Vec<Vec<f64>> = locals.iter().map(|m| m.as_slice().to_vec()).collect();
    let betas: Vec<Vec<f64>> = betas.iter().map(|m| m.as_slice().to_vec()).collect();
    let sums = ConsensusSums::new(&locals, &betas, d * d);
    let mut grad = vec![0.0; d * d];
    let value = global_objective(w.as_slice(), &mut grad, d, lambda, terms, &sums);
    (value, Matrix::from_fn(d, d, |i, j| grad[i * d + j]))
}

#[derive(Debug, Clone)]
pub struct AdmmResult {
    pub weights: Matrix,
    pub graph: DirectedGraph,
    pub trace: ConvergenceTrace,
}

/// Shared dimension and nonempty clients.
pub(crate) fn check_shapes(datasets: &[ClientDataset]) -> Result<usize> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::Argument("at least one client dataset is required".into()))?;
    let d = first.dim();
    for ds in datasets {
        if ds.dim() != d {
            return Err(Error::Argument(format!(
                "client {} has {} variables, expected {d}",
                ds.client_id,
                ds.dim()
            )));
        }
        if ds.sample_count() == 0 {
            return Err(Error::Argument(format!(
                "client {} has no samples",
                ds.client_id
            )));
        }
    }
    Ok(d)
}

/// [`check_shapes`] plus locally centered columns.
pub(crate) fn check_datasets(datasets: &[ClientDataset]) -> Result<usize> {
    let d = check_shapes(datasets)?;
    for ds in datasets {
        if let Some(m) = ds
            .data
            .column_means()
            .into_iter()
            .find(|m| m.abs() > CENTERING_TOLERANCE)
        {
            return Err(Error::Argument(format!(
                "client {} data is not centered (column mean {m:e})",
                ds.client_id
            )));
        }
    }
    Ok(d)
}

pub fn linear_clients(datasets: &[ClientDataset], config: &AdmmConfig) -> Vec<LinearClientState> {
    let total_n: usize = datasets.iter().map(ClientDataset::sample_count).sum();
    datasets
        .iter()
        .map(|ds| ConsensusClient::new(ds.client_id, LinearClient::new(ds, total_n), config))
        .collect()
}

/// Runs consensus ADMM over centered client datasets.
pub fn run_admm(datasets: &[ClientDataset], config: &AdmmConfig) -> Result<AdmmResult> {
    config.validate()?;
    let d = check_datasets(datasets)?;
    let mut clients = linear_clients(datasets, config);
    let server = ConsensusServer::new(
        LinearServer::new(d, config.lambda, config.global_solver),
        clients.len(),
        config,
        ModelFamily::Linear,
    )?;
    let outcome = run_consensus(&mut clients, server)?;
    let graph = threshold_graph(&outcome.adjacency, config.threshold_tau);
    Ok(AdmmResult {
        weights: outcome.adjacency,
        graph,
        trace: outcome.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{center, partition};
    use crate::rng;
    use rand::Rng;

    fn random_matrix(r: &mut rng::Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| r.random_range(-scale..scale))
    }

    #[test]
    fn loss_of_zero_coefficients() {
        let x = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert_eq!(
            least_squares_loss(&Matrix::zeros(2, 2), &x, 1).unwrap(),
            1.0
        );
    }

    #[test]
    fn loss_of_exact_reproduction() {
        let x = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(least_squares_loss(&b, &x, 1).unwrap(), 0.0);
    }

    #[test]
    fn loss_matches_scatter_form() {
        let mut r = rng::seeded(10, 0);
        for _ in 0..20 {
            let x = random_matrix(&mut r, 7, 4, 2.0);
            let b = random_matrix(&mut r, 4, 4, 1.0);
            let total = 11;
            let direct = least_squares_loss(&b, &x, total).unwrap();
            let s = x.gram().scale(1.0 / total as f64);
            let (trace_form, _) = scatter_loss(&b, &s).unwrap();
            assert!((direct - trace_form).abs() <= 1e-10 * (1.0 + direct.abs()));
        }
    }

    #[test]
    fn loss_rejects_bad_dimensions() {
        let x = Matrix::zeros(3, 2);
        assert!(least_squares_loss(&Matrix::zeros(3, 3), &x, 3).is_err());
        assert!(least_squares_loss(&Matrix::zeros(2, 2), &x, 2).is_err());
    }

    #[test]
    fn client_step_with_zero_scatter_returns_global() {
        let w = Matrix::from_rows(&[vec![0.0, 0.7], vec![-1.0, 0.0]]).unwrap();
        let b = client_update(&Matrix::zeros(2, 2), &Matrix::zeros(2, 2), 0.5, &w).unwrap();
        assert!(b.sub(&w).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn client_step_scalar_case() {
        let b = client_update(
            &Matrix::identity(1),
            &Matrix::zeros(1, 1),
            1.0,
            &Matrix::zeros(1, 1),
        )
        .unwrap();
        assert!((b[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn client_step_rejects_nonpositive_rho() {
        let z = Matrix::zeros(2, 2);
        assert!(matches!(
            client_update(&z, &z, 0.0, &z),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn server_step_without_penalties_returns_local() {
        let mut r = rng::seeded(3, 0);
        let b1 = random_matrix(&mut r, 3, 3, 1.0);
        let terms = GlobalTerms {
            alpha: 0.0,
            rho1: 0.0,
            rho2: 1.0,
        };
        let solver = SolverOptions::default().with_gradient_tolerance(1e-10);
        let w = server_w_update(
            &Matrix::zeros(3, 3),
            &[b1.clone()],
            &[Matrix::zeros(3, 3)],
            0.0,
            terms,
            &solver,
        )
        .unwrap();
        assert!(w.sub(&b1).unwrap().max_abs() < 1e-6);
        // Identical locals across clients reach the same consensus.
        let w = server_w_update(
            &Matrix::zeros(3, 3),
            &[b1.clone(), b1.clone(), b1.clone()],
            &vec![Matrix::zeros(3, 3); 3],
            0.0,
            terms,
            &solver,
        )
        .unwrap();
        assert!(w.sub(&b1).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn server_step_with_dominant_l1_is_zero() {
        let mut r = rng::seeded(4, 0);
        let locals: Vec<Matrix> = (0..3).map(|_| random_matrix(&mut r, 3, 3, 1.0)).collect();
        let betas = vec![Matrix::zeros(3, 3); 3];
        let rho2 = 1.0;
        // λ above Σ_k ρ2 |B_k| entrywise makes 0 the minimizer.
        let lambda = 3.0 * rho2 * 1.0 + 1.0;
        let terms = GlobalTerms {
            alpha: 0.0,
            rho1: 0.0,
            rho2,
        };
        let w = server_w_update(
            &Matrix::zeros(3, 3),
            &locals,
            &betas,
            lambda,
            terms,
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(w.max_abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn server_step_does_not_increase_objective() {
        let mut r = rng::seeded(5, 0);
        let locals: Vec<Matrix> = (0..4).map(|_| random_matrix(&mut r, 5, 5, 1.0)).collect();
        let betas: Vec<Matrix> = (0..4).map(|_| random_matrix(&mut r, 5, 5, 0.1)).collect();
        let warm = random_matrix(&mut r, 5, 5, 0.5);
        let terms = GlobalTerms {
            alpha: 0.3,
            rho1: 2.0,
            rho2: 0.5,
        };
        let w = server_w_update(
            &warm,
            &locals,
            &betas,
            0.01,
            terms,
            &SolverOptions::default(),
        )
        .unwrap();
        let (before, _) = server_objective(&warm, &locals, &betas, 0.01, terms);
        let (after, _) = server_objective(&w, &locals, &betas, 0.01, terms);
        assert!(after <= before);
    }

    #[test]
    fn server_objective_gradient_matches_finite_differences() {
        // λ = 0 keeps the objective smooth.
        let mut r = rng::seeded(6, 0);
        let locals: Vec<Matrix> = (0..2).map(|_| random_matrix(&mut r, 3, 3, 1.0)).collect();
        let betas: Vec<Matrix> = (0..2).map(|_| random_matrix(&mut r, 3, 3, 0.2)).collect();
        let w = random_matrix(&mut r, 3, 3, 0.8);
        let terms = GlobalTerms {
            alpha: 0.7,
            rho1: 1.3,
            rho2: 0.4,
        };
        let (_, grad) = server_objective(&w, &locals, &betas, 0.0, terms);
        let eps = 1e-6;
        for idx in 0..9 {
            let mut plus = w.clone();
            plus.as_mut_slice()[idx] += eps;
            let mut minus = w.clone();
            minus.as_mut_slice()[idx] -= eps;
            let fd = (server_objective(&plus, &locals, &betas, 0.0, terms).0
                - server_objective(&minus, &locals, &betas, 0.0, terms).0)
                / (2.0 * eps);
            let g = grad.as_slice()[idx];
            assert!(
                (fd - g).abs() <= 1e-5 * (1.0 + g.abs()),
                "idx {idx}: {fd} vs {g}"
            );
        }
    }

    #[test]
    fn run_rejects_uncentered_or_empty_input() {
        let x = Matrix::from_fn(10, 3, |i, j| (i + j) as f64);
        let blocks = partition(&x, 2).unwrap();
        assert!(matches!(
            run_admm(&blocks, &AdmmConfig::linear()),
            Err(Error::Argument(m)) if m.contains("centered")
        ));
        assert!(run_admm(&[], &AdmmConfig::linear()).is_err());
    }

    #[test]
    fn all_zero_data_gives_empty_graph() {
        let blocks: Vec<_> = (0..2)
            .map(|k| ClientDataset::new(k, Matrix::zeros(5, 4)))
            .collect();
        let result = run_admm(&blocks, &AdmmConfig::linear()).unwrap();
        assert!(result.weights.max_abs() < 1e-6);
        assert_eq!(result.graph.edge_count(), 0);
    }

    #[test]
    fn centered_blocks_pass_the_check() {
        let x = Matrix::from_fn(12, 3, |i, j| ((i * 5 + j * 3) % 7) as f64);
        let blocks: Vec<_> = partition(&x, 3)
            .unwrap()
            .iter()
            .map(ClientDataset::centered)
            .collect();
        assert_eq!(check_datasets(&blocks).unwrap(), 3);
        let _ = center(&x);
    }
}
